#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ocmr/io.hpp"

using namespace ocmr;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("ocmr_io_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  [[nodiscard]] fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

phantom::TraceSeries sample_traces() {
  phantom::TraceSeries t;
  t.data.resize(3, 16);
  for (int i = 0; i < 3; ++i)
    for (int s = 0; s < 16; ++s) t.data(i, s) = 0.25f * static_cast<float>(i * 16 + s) - 3.0f;
  t.fs_hz = 5e7;
  t.f0_hz = 2e6;
  t.tr_s = 0.02;
  t.t0_s = 1.5;
  return t;
}

phantom::ImageSeries sample_images() {
  phantom::ImageSeries im;
  im.height = 2;
  im.width = 3;
  im.frames.resize(2, 6);
  for (int i = 0; i < 12; ++i) im.frames.data()[i] = static_cast<float>(i) * 0.5f;
  im.timestamps_s = {0.25, 1.75};
  return im;
}

io::ModelFile sample_model() {
  io::ModelFile m;
  lrcn::ArchSpec arch;
  arch.input_d = 16;
  arch.input_n = 4;
  arch.conv_channels = {2, 1};
  arch.kernel_size = 3;
  arch.lstm_units = {3};
  arch.output_dim = 2;
  m.network = lrcn::LrcnModel<float>::initialize(arch, 4);
  m.network.input_scale = 0.125;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(5, 6);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) x(i, j) = g(rng);
  m.pca = pca::fit(x, 2, 3, 2);
  io::round_to_float(m.pca);
  m.meta.seed = 77;
  m.meta.epochs = 3;
  m.meta.lr = 0.001;
  m.meta.batch_size = 20;
  m.meta.final_loss = 0.5;
  m.meta.train_pairs = 5;
  m.meta.first_test_image = 8;
  m.meta.test_images = 4;
  return m;
}

}  // namespace

TEST(Traces, RoundTripAndLayout) {
  TempDir dir;
  const auto t = sample_traces();
  io::write_traces(dir / "t.ocmt", t);
  const auto back = io::read_traces(dir / "t.ocmt");
  EXPECT_EQ(back.data, t.data);
  EXPECT_EQ(back.fs_hz, t.fs_hz);
  EXPECT_EQ(back.f0_hz, t.f0_hz);
  EXPECT_EQ(back.tr_s, t.tr_s);
  EXPECT_EQ(back.t0_s, t.t0_s);

  const auto bytes = slurp(dir / "t.ocmt");
  ASSERT_EQ(bytes.size(), 45u + 3u * 16u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "OCMT");
  EXPECT_EQ(bytes[4], 1);
  const unsigned char n_le[] = {3, 0, 0, 0};
  EXPECT_EQ(std::memcmp(bytes.data() + 5, n_le, 4), 0);
  double fs = 0.0;
  std::memcpy(&fs, bytes.data() + 13, 8);
  EXPECT_EQ(fs, 5e7);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + 45, 4);
  EXPECT_EQ(first, -3.0f);
}

TEST(Traces, CorruptFilesAreRejected) {
  TempDir dir;
  io::write_traces(dir / "t.ocmt", sample_traces());
  const auto bytes = slurp(dir / "t.ocmt");

  auto expect_format = [&](const std::string& content) {
    spit(dir / "bad.ocmt", content);
    try {
      (void)io::read_traces(dir / "bad.ocmt");
      FAIL() << "expected format error";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::format);
    }
  };
  expect_format(bytes.substr(0, bytes.size() - 1));
  expect_format(bytes + "x");
  expect_format("OCMI" + bytes.substr(4));
  auto version = bytes;
  version[4] = 9;
  expect_format(version);
  expect_format(bytes.substr(0, 10));

  try {
    (void)io::read_traces(dir / "missing.ocmt");
    FAIL() << "expected io error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::io);
  }
}

TEST(Images, RoundTripAndLayout) {
  TempDir dir;
  const auto im = sample_images();
  io::write_images(dir / "i.ocmi", im);
  const auto back = io::read_images(dir / "i.ocmi");
  EXPECT_EQ(back.frames, im.frames);
  EXPECT_EQ(back.timestamps_s, im.timestamps_s);
  EXPECT_EQ(back.height, 2);
  EXPECT_EQ(back.width, 3);
  const auto bytes = slurp(dir / "i.ocmi");
  EXPECT_EQ(bytes.size(), 17u + 2u * 8u + 12u * 4u);
  double ts = 0.0;
  std::memcpy(&ts, bytes.data() + 17 + 8, 8);
  EXPECT_EQ(ts, 1.75);
  float px = 0.0f;
  std::memcpy(&px, bytes.data() + 33 + 4 * 7, 4);
  EXPECT_EQ(px, 3.5f);
}

TEST(Model, RoundTripIsExact) {
  TempDir dir;
  const auto m = sample_model();
  io::write_model(dir / "m.ocmm", m);
  const auto back = io::read_model(dir / "m.ocmm");
  EXPECT_EQ(back.network.params, m.network.params);
  EXPECT_EQ(back.network.arch, m.network.arch);
  EXPECT_EQ(back.network.input_scale, 0.125);
  EXPECT_EQ(back.pca.mean, m.pca.mean);
  EXPECT_EQ(back.pca.basis, m.pca.basis);
  EXPECT_EQ(back.pca.variances, m.pca.variances);
  EXPECT_EQ(back.meta.seed, 77u);
  EXPECT_EQ(back.meta.first_test_image, 8);
  EXPECT_EQ(back.meta.crop.out_len, m.meta.crop.out_len);

  io::write_model(dir / "m2.ocmm", back);
  EXPECT_EQ(slurp(dir / "m.ocmm"), slurp(dir / "m2.ocmm"));

  const auto header = io::read_model_header(dir / "m.ocmm");
  EXPECT_NE(header.find("\"param_count\":" + std::to_string(m.network.params.size())), std::string::npos);
  EXPECT_LT(header.find("\"format\""), header.find("\"arch\""));
}

TEST(Model, RejectsMismatchAndCorruption) {
  TempDir dir;
  auto m = sample_model();
  m.network.params.pop_back();
  EXPECT_THROW(io::write_model(dir / "x.ocmm", m), Error);

  io::write_model(dir / "m.ocmm", sample_model());
  const auto bytes = slurp(dir / "m.ocmm");
  spit(dir / "short.ocmm", bytes.substr(0, bytes.size() - 4));
  try {
    (void)io::read_model(dir / "short.ocmm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::format);
  }
  auto garbled = bytes;
  garbled[9] = '#';
  spit(dir / "garbled.ocmm", garbled);
  EXPECT_THROW(io::read_model(dir / "garbled.ocmm"), Error);
}

TEST(Pgm, HeaderAndScaling) {
  TempDir dir;
  Eigen::MatrixXd img(2, 3);
  img << -1.0, 0.0, 1.0, 0.5, -0.5, 1.0;
  const auto range = io::write_pgm(dir / "a.pgm", img);
  EXPECT_EQ(range.min, -1.0);
  EXPECT_EQ(range.max, 1.0);
  const auto bytes = slurp(dir / "a.pgm");
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const std::vector<unsigned char> expected{0, 128, 255, 191, 64, 255};
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + i]), expected[i]);

  io::write_pgm(dir / "c.pgm", Eigen::MatrixXd::Constant(2, 2, 4.0));
  const auto flat = slurp(dir / "c.pgm");
  for (std::size_t i = flat.size() - 4; i < flat.size(); ++i) EXPECT_EQ(flat[i], 0);
}

#include "ocmr/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <vector>

#include <json.hpp>

namespace ocmr::io {
namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
using json = nlohmann::ordered_json;

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return value;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    require(static_cast<bool>(out_), ErrorCode::io, "cannot open " + path.string() + " for writing");
  }

  void magic(const char (&tag)[5]) { out_.write(tag, 4); }
  template <typename T>
  void put(T value) {
    value = to_little(value);
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  template <typename T>
  void array(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()));
    } else {
      for (T v : values) put(v);
    }
  }
  void floats(const double* values, std::size_t count) {
    std::vector<float> tmp(values, values + count);
    array<float>(tmp);
  }
  void finish() {
    out_.flush();
    require(static_cast<bool>(out_), ErrorCode::io, "write to " + path_.string() + " failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    require(static_cast<bool>(in_), ErrorCode::io, "cannot open " + path.string());
    in_.seekg(0, std::ios::end);
    remaining_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0, std::ios::beg);
  }

  void expect_magic(const char (&tag)[5]) {
    char got[4] = {};
    raw(got, 4);
    require(std::memcmp(got, tag, 4) == 0, ErrorCode::format,
            path_.string() + " is not an " + std::string(tag, 4) + " file");
    const auto version = get<std::uint8_t>();
    require(version == kFormatVersion, ErrorCode::format,
            path_.string() + ": unsupported version " + std::to_string(version));
  }
  template <typename T>
  T get() {
    T value;
    raw(reinterpret_cast<char*>(&value), sizeof(T));
    return to_little(value);
  }
  std::string text(std::uint64_t size) {
    need(size);
    std::string s(size, '\0');
    raw(s.data(), size);
    return s;
  }
  template <typename T>
  void array(std::span<T> out) {
    need(out.size_bytes());
    raw(reinterpret_cast<char*>(out.data()), out.size_bytes());
    if constexpr (std::endian::native == std::endian::big)
      for (T& v : out) v = to_little(v);
  }
  std::vector<float> floats(std::uint64_t count) {
    need(count * sizeof(float));
    std::vector<float> v(count);
    array<float>(v);
    return v;
  }
  void need(std::uint64_t bytes) const {
    require(bytes <= remaining_, ErrorCode::format, path_.string() + " is truncated");
  }
  void expect_end() const {
    require(remaining_ == 0, ErrorCode::format, path_.string() + " has trailing bytes");
  }

 private:
  void raw(char* dst, std::uint64_t size) {
    need(size);
    in_.read(dst, static_cast<std::streamsize>(size));
    require(static_cast<bool>(in_), ErrorCode::io, "read from " + path_.string() + " failed");
    remaining_ -= size;
  }

  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t remaining_ = 0;
};

std::uint32_t checked_u32(long long value, const char* what) {
  require(value >= 0 && value <= std::numeric_limits<std::uint32_t>::max(), ErrorCode::invalid_argument,
          std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(value);
}

json arch_to_json(const lrcn::ArchSpec& a) {
  return json{{"conv_channels", a.conv_channels}, {"kernel_size", a.kernel_size},
              {"pool_size", a.pool_size},         {"lstm_units", a.lstm_units},
              {"output_dim", a.output_dim},       {"dropout_rate", a.dropout_rate},
              {"input_d", a.input_d},             {"input_n", a.input_n}};
}

lrcn::ArchSpec arch_from_json(const json& j) {
  lrcn::ArchSpec a;
  a.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  a.kernel_size = j.at("kernel_size").get<int>();
  a.pool_size = j.at("pool_size").get<int>();
  a.lstm_units = j.at("lstm_units").get<std::vector<int>>();
  a.output_dim = j.at("output_dim").get<int>();
  a.dropout_rate = j.at("dropout_rate").get<double>();
  a.input_d = j.at("input_d").get<int>();
  a.input_n = j.at("input_n").get<int>();
  return a;
}

}  // namespace

void write_traces(const std::filesystem::path& path, const phantom::TraceSeries& traces) {
  traces.validate();
  Writer w(path);
  w.magic("OCMT");
  w.put<std::uint8_t>(kFormatVersion);
  w.put(checked_u32(traces.n_traces(), "n_traces"));
  w.put(checked_u32(traces.samples(), "samples_per_trace"));
  w.put(traces.fs_hz);
  w.put(traces.f0_hz);
  w.put(traces.tr_s);
  w.put(traces.t0_s);
  w.array<float>(std::span<const float>(traces.data.data(), static_cast<std::size_t>(traces.data.size())));
  w.finish();
}

phantom::TraceSeries read_traces(const std::filesystem::path& path) {
  Reader r(path);
  r.expect_magic("OCMT");
  const auto n = r.get<std::uint32_t>();
  const auto s = r.get<std::uint32_t>();
  phantom::TraceSeries t;
  t.fs_hz = r.get<double>();
  t.f0_hz = r.get<double>();
  t.tr_s = r.get<double>();
  t.t0_s = r.get<double>();
  r.need(static_cast<std::uint64_t>(n) * s * sizeof(float));
  t.data.resize(n, s);
  r.array<float>(std::span<float>(t.data.data(), static_cast<std::size_t>(t.data.size())));
  r.expect_end();
  t.validate();
  return t;
}

void write_images(const std::filesystem::path& path, const phantom::ImageSeries& images) {
  images.validate();
  Writer w(path);
  w.magic("OCMI");
  w.put<std::uint8_t>(kFormatVersion);
  w.put(checked_u32(images.n_images(), "n_images"));
  w.put(checked_u32(images.height, "height"));
  w.put(checked_u32(images.width, "width"));
  w.array<double>(images.timestamps_s);
  w.array<float>(std::span<const float>(images.frames.data(), static_cast<std::size_t>(images.frames.size())));
  w.finish();
}

phantom::ImageSeries read_images(const std::filesystem::path& path) {
  Reader r(path);
  r.expect_magic("OCMI");
  const auto n = r.get<std::uint32_t>();
  phantom::ImageSeries im;
  im.height = static_cast<int>(r.get<std::uint32_t>());
  im.width = static_cast<int>(r.get<std::uint32_t>());
  r.need(static_cast<std::uint64_t>(n) * sizeof(double));
  im.timestamps_s.resize(n);
  r.array<double>(im.timestamps_s);
  const auto pixels = static_cast<std::uint64_t>(im.height) * static_cast<std::uint64_t>(im.width);
  r.need(n * pixels * sizeof(float));
  im.frames.resize(n, static_cast<Eigen::Index>(pixels));
  r.array<float>(std::span<float>(im.frames.data(), static_cast<std::size_t>(im.frames.size())));
  r.expect_end();
  im.validate();
  return im;
}

void round_to_float(pca::PcaModel& model) {
  model.mean = model.mean.cast<float>().cast<double>();
  model.basis = model.basis.cast<float>().cast<double>();
  model.variances = model.variances.cast<float>().cast<double>();
}

void write_model(const std::filesystem::path& path, const ModelFile& model) {
  model.pca.validate();
  model.network.validate();
  const auto& m = model.meta;
  const auto& pca = model.pca;
  require(pca.components() == model.network.arch.output_dim, ErrorCode::shape_mismatch,
          "PCA components differ from the network output size");
  json header{
      {"format", "ocmr-model"},
      {"arch", arch_to_json(model.network.arch)},
      {"param_count", model.network.params.size()},
      {"input_scale", model.network.input_scale},
      {"pca", {{"height", pca.height}, {"width", pca.width}, {"components", pca.components()},
               {"degenerate", pca.degenerate}}},
      {"acquisition", {{"fs_hz", m.fs_hz}, {"f0_hz", m.f0_hz}, {"tr_s", m.tr_s},
                       {"samples_per_trace", m.samples_per_trace},
                       {"sound_speed_m_s", m.sound_speed_m_s}}},
      {"filter", {{"cutoff_hz", m.filter.cutoff_hz}, {"rolloff_width_hz", m.filter.rolloff_width_hz},
                  {"dc_weight", m.filter.dc_weight}}},
      {"crop", {{"input_len", m.crop.input_len}, {"begin", m.crop.begin}, {"end", m.crop.end},
                {"out_len", m.crop.out_len}}},
      {"seeds", {{"train", m.seed}}},
      {"training", {{"epochs", m.epochs}, {"lr", m.lr}, {"batch_size", m.batch_size},
                    {"train_pairs", m.train_pairs}, {"final_loss", m.final_loss}}},
      {"split", {{"first_test_image", m.first_test_image}, {"test_images", m.test_images}}},
  };
  const std::string text = header.dump();
  Writer w(path);
  w.magic("OCMM");
  w.put<std::uint8_t>(kFormatVersion);
  w.put(checked_u32(static_cast<long long>(text.size()), "header length"));
  w.bytes(text);
  w.floats(pca.mean.data(), static_cast<std::size_t>(pca.mean.size()));
  // basis is k x P, written row by row
  const RowMatrix<double> basis = pca.basis;
  w.floats(basis.data(), static_cast<std::size_t>(basis.size()));
  w.floats(pca.variances.data(), static_cast<std::size_t>(pca.variances.size()));
  w.array<float>(model.network.params);
  w.finish();
}

namespace {

json parse_header(Reader& r, const std::filesystem::path& path) {
  r.expect_magic("OCMM");
  const auto len = r.get<std::uint32_t>();
  const std::string text = r.text(len);
  json header = json::parse(text, nullptr, false);
  require(!header.is_discarded() && header.is_object(), ErrorCode::format,
          path.string() + ": model header is not a JSON object");
  return header;
}

}  // namespace

std::string read_model_header(const std::filesystem::path& path) {
  Reader r(path);
  return parse_header(r, path).dump();
}

ModelFile read_model(const std::filesystem::path& path) {
  Reader r(path);
  const json header = parse_header(r, path);
  ModelFile out;
  try {
    out.network.arch = arch_from_json(header.at("arch"));
    out.network.input_scale = header.at("input_scale").get<double>();
    const auto& p = header.at("pca");
    out.pca.height = p.at("height").get<int>();
    out.pca.width = p.at("width").get<int>();
    out.pca.degenerate = p.at("degenerate").get<bool>();
    const int k = p.at("components").get<int>();
    const auto& a = header.at("acquisition");
    auto& m = out.meta;
    m.fs_hz = a.at("fs_hz").get<double>();
    m.f0_hz = a.at("f0_hz").get<double>();
    m.tr_s = a.at("tr_s").get<double>();
    m.samples_per_trace = a.at("samples_per_trace").get<int>();
    m.sound_speed_m_s = a.at("sound_speed_m_s").get<double>();
    const auto& f = header.at("filter");
    m.filter.cutoff_hz = f.at("cutoff_hz").get<double>();
    m.filter.rolloff_width_hz = f.at("rolloff_width_hz").get<double>();
    m.filter.dc_weight = f.at("dc_weight").get<double>();
    const auto& c = header.at("crop");
    m.crop.input_len = c.at("input_len").get<int>();
    m.crop.begin = c.at("begin").get<int>();
    m.crop.end = c.at("end").get<int>();
    m.crop.out_len = c.at("out_len").get<int>();
    m.seed = header.at("seeds").at("train").get<std::uint64_t>();
    const auto& t = header.at("training");
    m.epochs = t.at("epochs").get<int>();
    m.lr = t.at("lr").get<double>();
    m.batch_size = t.at("batch_size").get<int>();
    m.train_pairs = t.at("train_pairs").get<int>();
    m.final_loss = t.at("final_loss").get<double>();
    m.first_test_image = header.at("split").at("first_test_image").get<int>();
    m.test_images = header.at("split").at("test_images").get<int>();

    require(out.pca.height > 0 && out.pca.width > 0 && k > 0, ErrorCode::format,
            path.string() + ": invalid PCA dimensions");
    out.network.arch.validate();
    const auto pixels = static_cast<std::uint64_t>(out.pca.height) * out.pca.width;
    const auto n_params = header.at("param_count").get<std::uint64_t>();
    require(n_params == lrcn::param_count(out.network.arch), ErrorCode::format,
            path.string() + ": parameter count does not match the architecture");

    const auto mean = r.floats(pixels);
    const auto basis = r.floats(static_cast<std::uint64_t>(k) * pixels);
    const auto variances = r.floats(static_cast<std::uint64_t>(k));
    out.network.params = r.floats(n_params);
    r.expect_end();

    out.pca.mean = Eigen::Map<const Eigen::VectorXf>(mean.data(), static_cast<Eigen::Index>(pixels)).cast<double>();
    out.pca.basis = Eigen::Map<const RowMatrix<float>>(basis.data(), k, static_cast<Eigen::Index>(pixels))
                        .cast<double>();
    out.pca.variances = Eigen::Map<const Eigen::VectorXf>(variances.data(), k).cast<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, path.string() + ": bad model header: " + e.what());
  }
  out.pca.validate();
  out.network.validate();
  return out;
}

PgmRange write_pgm(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& image) {
  require(image.size() > 0, ErrorCode::invalid_argument, "empty image");
  require(image.allFinite(), ErrorCode::non_finite, "image contains non-finite values");
  PgmRange range{image.minCoeff(), image.maxCoeff()};
  const double span = range.max - range.min;
  std::string pixels(static_cast<std::size_t>(image.size()), '\0');
  std::size_t idx = 0;
  for (Eigen::Index r = 0; r < image.rows(); ++r)
    for (Eigen::Index c = 0; c < image.cols(); ++c) {
      const double u = span > 0.0 ? (image(r, c) - range.min) / span : 0.0;
      pixels[idx++] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u)));
    }
  Writer w(path);
  w.bytes("P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n255\n");
  w.bytes(pixels);
  w.finish();
  return range;
}

}  // namespace ocmr::io

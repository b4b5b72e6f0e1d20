#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <Eigen/Core>

#include "ocmr/lrcn.hpp"
#include "ocmr/pca.hpp"
#include "ocmr/phantom.hpp"
#include "ocmr/sigproc.hpp"

// Little-endian binary containers: OCMT (traces), OCMI (images), OCMM (models).
namespace ocmr::io {

inline constexpr std::uint8_t kFormatVersion = 1;

void write_traces(const std::filesystem::path& path, const phantom::TraceSeries& traces);
phantom::TraceSeries read_traces(const std::filesystem::path& path);

void write_images(const std::filesystem::path& path, const phantom::ImageSeries& images);
phantom::ImageSeries read_images(const std::filesystem::path& path);

// Everything inference needs besides the weights: the acquisition the model was
// trained on and the preprocessing applied to it.
struct ModelMetadata {
  double fs_hz = 1e8;
  double f0_hz = 1e6;
  double tr_s = 0.01;
  int samples_per_trace = 20000;
  double sound_speed_m_s = 1540.0;
  sigproc::FermiFilterSpec filter;
  sigproc::CropSpec crop;
  std::uint64_t seed = 0;
  int epochs = 0;
  double lr = 0.0;
  int batch_size = 0;
  double final_loss = 0.0;
  int train_pairs = 0;
  int first_test_image = 0;  // index into the image file the model was trained from
  int test_images = 0;
};

struct ModelFile {
  ModelMetadata meta;
  pca::PcaModel pca;
  lrcn::LrcnModel<float> network;
};

// The PCA payload is stored as f32; round_to_float makes an in-memory model equal
// to what a write/read cycle returns.
void round_to_float(pca::PcaModel& model);

void write_model(const std::filesystem::path& path, const ModelFile& model);
ModelFile read_model(const std::filesystem::path& path);
// The JSON header alone, as text.
std::string read_model_header(const std::filesystem::path& path);

struct PgmRange {
  double min = 0.0;
  double max = 0.0;
};

// 8-bit P5, min-max normalised; a constant image maps to 0.
PgmRange write_pgm(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& image);

}  // namespace ocmr::io

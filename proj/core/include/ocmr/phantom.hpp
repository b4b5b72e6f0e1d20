#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ocmr/common.hpp"

// Deterministic respiratory phantom: a shared breathing displacement drives both
// the synthetic A-mode traces and the MR-like image frames.
namespace ocmr::phantom {

struct BreathingParams {
  double period_s = 4.0;
  double amplitude_mm = 5.0;
  double drift_mm_per_min = 0.0;
  double period_jitter_frac = 0.0;
  double amplitude_jitter_frac = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AcquisitionConfig {
  double tr_s = 0.01;            // one trace per repetition
  double fs_hz = 1e8;
  double f0_hz = 1e6;            // transducer center frequency
  int trace_len = 20000;         // 200 us at 100 MS/s
  int lines_per_image = 60;
  double image_rate_fps = 0.85;
  int image_size = 192;
  double sound_speed_m_s = 1540.0;
  double snr_db = 30.0;          // +inf disables trace noise
  double pulse_sigma_cycles = 1.0;
  double pixel_pitch_mm = 0.5;
  double image_top_mm = 0.0;     // depth imaged by row 0

  void validate() const;
  [[nodiscard]] double max_depth_mm() const;
  [[nodiscard]] double image_period_s() const { return 1.0 / image_rate_fps; }
  [[nodiscard]] double wavelength_mm() const { return sound_speed_m_s / f0_hz * 1e3; }
  // Fractional sample index of the echo from a reflector at depth_mm.
  [[nodiscard]] double echo_delay_samples(double depth_mm) const;
};

struct Scatterer {
  double depth_mm = 0.0;
  double reflectivity = 1.0;
  double motion_gain = 1.0;
};

struct ScattererField {
  std::vector<Scatterer> scatterers;
};

// Tissue-like field: `count` reflectors spread over [min_depth_mm, max_depth_mm],
// motion gain growing with depth (abdominal wall moves less than the liver).
ScattererField make_tissue_field(std::uint64_t seed, int count = 40, double min_depth_mm = 12.0,
                                 double max_depth_mm = 58.0);

struct TraceSeries {
  RowMatrix<float> data;  // n_traces x samples_per_trace
  double fs_hz = 1e8;
  double f0_hz = 1e6;
  double tr_s = 0.01;
  double t0_s = 0.0;

  [[nodiscard]] int n_traces() const { return static_cast<int>(data.rows()); }
  [[nodiscard]] int samples() const { return static_cast<int>(data.cols()); }
  [[nodiscard]] double time_of(int index) const { return t0_s + index * tr_s; }
  [[nodiscard]] std::vector<double> times() const;
  void validate() const;
};

struct ImageSeries {
  RowMatrix<float> frames;  // n_images x (height*width), each frame row-major
  std::vector<double> timestamps_s;
  int height = 0;
  int width = 0;

  [[nodiscard]] int n_images() const { return static_cast<int>(frames.rows()); }
  [[nodiscard]] Eigen::MatrixXd frame(int index) const;  // height x width
  void validate() const;
};

struct PhantomData {
  TraceSeries traces;
  ImageSeries images;
  std::vector<double> trace_displacement_mm;
  std::vector<double> image_displacement_mm;
};

std::vector<double> gen_breathing(const BreathingParams& params, std::span<const double> t_grid);

// One trace. noise_seed selects the noise realisation; ignored when snr_db is +inf.
std::vector<double> render_trace(const ScattererField& field, double displacement_mm,
                                 const AcquisitionConfig& cfg, std::uint64_t noise_seed = 0);

Eigen::MatrixXd render_image(const ScattererField& field, double displacement_mm,
                             const AcquisitionConfig& cfg);

// Number of complete image acquisition windows that fit in duration_s.
int image_count(const AcquisitionConfig& cfg, double duration_s);

PhantomData gen_dataset(const BreathingParams& breathing, const ScattererField& field,
                        const AcquisitionConfig& cfg, double duration_s);

}  // namespace ocmr::phantom

#pragma once

#include <complex>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ocmr/common.hpp"
#include "ocmr/phantom.hpp"

// Phase-based ("Doppler-like") preprocessing of A-mode traces into speed maps,
// and assembly of the d x n speed patches the network consumes.
namespace ocmr::sigproc {

struct FermiFilterSpec {
  double cutoff_hz = 1e7;       // 10 x f0
  double rolloff_width_hz = 5e5;
  double dc_weight = 1.0;

  static FermiFilterSpec for_center_frequency(double f0_hz);
  // Weight applied to the DFT bin at frequency f (Hz, may be negative).
  [[nodiscard]] double weight(double f_hz, double fs_hz) const;
  void validate() const;
};

struct AnalyticTrace {
  std::vector<std::complex<double>> values;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] double magnitude(std::size_t s) const { return std::abs(values[s]); }
  // Degrees in [-180, 180).
  [[nodiscard]] double phase_deg(std::size_t s) const;
};

// Window [begin, end) of the full-rate trace, resampled to out_len bins.
struct CropSpec {
  int input_len = 20000;
  int begin = 1000;
  int end = 8000;
  int out_len = 560;

  void validate() const;
  [[nodiscard]] double bin_width() const { return static_cast<double>(end - begin) / out_len; }
};

struct SpeedPatch {
  Eigen::MatrixXd values;  // d x n, column j is the speed profile of trace end_trace_index-n+1+j
  int end_trace_index = 0;
};

// Reusable DFT workspace for one trace length. Not safe to share between threads.
class AnalyticTransformer {
 public:
  AnalyticTransformer(int length, double fs_hz, FermiFilterSpec filter);
  ~AnalyticTransformer();
  AnalyticTransformer(const AnalyticTransformer&) = delete;
  AnalyticTransformer& operator=(const AnalyticTransformer&) = delete;

  // Input shorter than the padded length is zero-extended.
  void transform(std::span<const double> trace, std::span<std::complex<double>> out);
  [[nodiscard]] int padded_length() const { return padded_; }

 private:
  struct Plans;
  int length_;
  int padded_;
  double fs_hz_;
  FermiFilterSpec filter_;
  std::vector<double> weights_;  // per non-negative bin
  std::unique_ptr<Plans> plans_;
};

double wrap_degrees(double degrees);

AnalyticTrace analytic_transform(std::span<const double> trace, double fs_hz,
                                 const FermiFilterSpec& filter);

// v = alpha * wrap(theta_now - theta_prev) / 2, alpha = 0.5 * wavelength / 360.
// Result is in mm per trace interval; positive for motion towards the transducer.
std::vector<double> phase_speed(std::span<const double> theta_now_deg,
                                std::span<const double> theta_prev_deg, double wavelength_mm);

std::vector<double> crop_downscale(std::span<const double> v_fullres, const CropSpec& crop = {});

// d x T speed map (column 0 is zero). wavelength_mm defaults to c / f0 at 1540 m/s.
Eigen::MatrixXd compute_speed_stream(const phantom::TraceSeries& traces,
                                     const FermiFilterSpec& filter, const CropSpec& crop = {},
                                     double sound_speed_m_s = 1540.0);

SpeedPatch assemble_patch(const Eigen::MatrixXd& stream, int t, int n = 300);

struct PatchRef {
  int end_trace_index = 0;
  int image_index = 0;
};

struct Alignment {
  std::vector<PatchRef> pairs;
  int dropped = 0;
};

// Pairs every image with the patch ending at the latest trace at or before its timestamp.
Alignment align_pairs(const Eigen::MatrixXd& stream, const phantom::ImageSeries& images,
                      std::span<const double> trace_times, int n = 300);

}  // namespace ocmr::sigproc

#include "ocmr/sigproc.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include <fftw3.h>

namespace ocmr::sigproc {
namespace {

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

// The FFTW planner is not re-entrant.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

std::vector<double> downscale_window(std::span<const double> window, const CropSpec& crop) {
  const double width = crop.bin_width();
  std::vector<double> out(static_cast<std::size_t>(crop.out_len));
  for (int b = 0; b < crop.out_len; ++b) {
    const double lo = b * width;
    const double hi = (b + 1) * width;
    const auto first = static_cast<std::size_t>(std::floor(lo));
    const auto last = std::min(window.size(), static_cast<std::size_t>(std::ceil(hi)));
    double acc = 0.0;
    for (std::size_t i = first; i < last; ++i) {
      const double overlap =
          std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
      acc += overlap * window[i];
    }
    out[static_cast<std::size_t>(b)] = acc / width;
  }
  return out;
}

}  // namespace

FermiFilterSpec FermiFilterSpec::for_center_frequency(double f0_hz) {
  FermiFilterSpec spec;
  spec.cutoff_hz = 10.0 * f0_hz;
  spec.rolloff_width_hz = 0.05 * spec.cutoff_hz;
  spec.dc_weight = 1.0;
  return spec;
}

double FermiFilterSpec::weight(double f_hz, double fs_hz) const {
  if (f_hz < 0.0) return 0.0;
  if (f_hz == 0.0) return dc_weight;
  if (cutoff_hz >= 0.5 * fs_hz) return 1.0;
  return 1.0 / (1.0 + std::exp((f_hz - cutoff_hz) / rolloff_width_hz));
}

void FermiFilterSpec::validate() const {
  require(std::isfinite(cutoff_hz) && cutoff_hz > 0.0, ErrorCode::invalid_argument,
          "Fermi cutoff must be positive");
  require(std::isfinite(rolloff_width_hz) && rolloff_width_hz > 0.0, ErrorCode::invalid_argument,
          "Fermi roll-off width must be positive");
  require(std::isfinite(dc_weight), ErrorCode::invalid_argument, "DC weight must be finite");
}

double AnalyticTrace::phase_deg(std::size_t s) const {
  const double deg = std::arg(values[s]) * kRadToDeg;
  return deg >= 180.0 ? deg - 360.0 : deg;
}

void CropSpec::validate() const {
  require(begin >= 0 && end > begin && end <= input_len && out_len >= 1,
          ErrorCode::invalid_argument, "invalid crop window");
}

struct AnalyticTransformer::Plans {
  double* real_in = nullptr;
  fftw_complex* half = nullptr;
  fftw_complex* full = nullptr;
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

AnalyticTransformer::AnalyticTransformer(int length, double fs_hz, FermiFilterSpec filter)
    : length_(length), padded_(length + (length % 2)), fs_hz_(fs_hz), filter_(filter) {
  require(length >= 16, ErrorCode::invalid_argument, "trace length must be >= 16");
  require(fs_hz > 0.0, ErrorCode::invalid_argument, "sampling rate must be positive");
  filter_.validate();

  const int positive_bins = padded_ / 2;  // bins 0 .. N/2-1; the Nyquist bin is dropped
  weights_.resize(static_cast<std::size_t>(positive_bins));
  for (int k = 0; k < positive_bins; ++k)
    weights_[static_cast<std::size_t>(k)] = filter_.weight(k * fs_hz_ / padded_, fs_hz_);

  plans_ = std::make_unique<Plans>();
  std::lock_guard lock(planner_mutex());
  plans_->real_in = fftw_alloc_real(static_cast<std::size_t>(padded_));
  plans_->half = fftw_alloc_complex(static_cast<std::size_t>(padded_ / 2 + 1));
  plans_->full = fftw_alloc_complex(static_cast<std::size_t>(padded_));
  plans_->forward = fftw_plan_dft_r2c_1d(padded_, plans_->real_in, plans_->half, FFTW_ESTIMATE);
  plans_->inverse =
      fftw_plan_dft_1d(padded_, plans_->full, plans_->full, FFTW_BACKWARD, FFTW_ESTIMATE);
}

AnalyticTransformer::~AnalyticTransformer() {
  if (!plans_) return;
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plans_->forward);
  fftw_destroy_plan(plans_->inverse);
  fftw_free(plans_->real_in);
  fftw_free(plans_->half);
  fftw_free(plans_->full);
}

void AnalyticTransformer::transform(std::span<const double> trace,
                                    std::span<std::complex<double>> out) {
  require(trace.size() <= static_cast<std::size_t>(padded_), ErrorCode::shape_mismatch,
          "trace longer than transformer length");
  require(out.size() <= static_cast<std::size_t>(padded_), ErrorCode::shape_mismatch,
          "output longer than transformer length");
  for (double v : trace)
    require(std::isfinite(v), ErrorCode::non_finite, "trace contains non-finite samples");

  std::copy(trace.begin(), trace.end(), plans_->real_in);
  std::fill(plans_->real_in + trace.size(), plans_->real_in + padded_, 0.0);
  fftw_execute(plans_->forward);

  const int positive_bins = padded_ / 2;
  for (int k = 0; k < positive_bins; ++k) {
    const double w = weights_[static_cast<std::size_t>(k)];
    plans_->full[k][0] = plans_->half[k][0] * w;
    plans_->full[k][1] = plans_->half[k][1] * w;
  }
  for (int k = positive_bins; k < padded_; ++k) plans_->full[k][0] = plans_->full[k][1] = 0.0;
  fftw_execute(plans_->inverse);

  const double scale = 1.0 / padded_;
  for (std::size_t s = 0; s < out.size(); ++s)
    out[s] = {plans_->full[s][0] * scale, plans_->full[s][1] * scale};
}

double wrap_degrees(double degrees) {
  double r = std::fmod(degrees + 180.0, 360.0);
  if (r < 0.0) r += 360.0;
  if (r >= 360.0) r -= 360.0;
  return r - 180.0;
}

AnalyticTrace analytic_transform(std::span<const double> trace, double fs_hz,
                                 const FermiFilterSpec& filter) {
  AnalyticTransformer transformer(static_cast<int>(trace.size()), fs_hz, filter);
  AnalyticTrace out;
  out.values.resize(trace.size());
  transformer.transform(trace, out.values);
  return out;
}

std::vector<double> phase_speed(std::span<const double> theta_now_deg,
                                std::span<const double> theta_prev_deg, double wavelength_mm) {
  require(theta_now_deg.size() == theta_prev_deg.size(), ErrorCode::shape_mismatch,
          "phase vectors differ in length");
  const double alpha = 0.5 * wavelength_mm / 360.0;
  std::vector<double> v(theta_now_deg.size());
  for (std::size_t s = 0; s < v.size(); ++s)
    v[s] = alpha * wrap_degrees(theta_now_deg[s] - theta_prev_deg[s]) / 2.0;
  return v;
}

std::vector<double> crop_downscale(std::span<const double> v_fullres, const CropSpec& crop) {
  crop.validate();
  require(v_fullres.size() == static_cast<std::size_t>(crop.input_len), ErrorCode::shape_mismatch,
          "expected " + std::to_string(crop.input_len) + " samples, got " +
              std::to_string(v_fullres.size()));
  return downscale_window(
      v_fullres.subspan(static_cast<std::size_t>(crop.begin),
                        static_cast<std::size_t>(crop.end - crop.begin)),
      crop);
}

Eigen::MatrixXd compute_speed_stream(const phantom::TraceSeries& traces,
                                     const FermiFilterSpec& filter, const CropSpec& crop,
                                     double sound_speed_m_s) {
  crop.validate();
  const int n_traces = traces.n_traces();
  require(n_traces >= 2, ErrorCode::invalid_argument, "speed stream needs at least two traces");
  require(traces.samples() == crop.input_len, ErrorCode::shape_mismatch,
          "trace length does not match the crop specification");
  const double wavelength_mm = sound_speed_m_s / traces.f0_hz * 1e3;

  AnalyticTransformer transformer(traces.samples(), traces.fs_hz, filter);
  const auto window = static_cast<std::size_t>(crop.end - crop.begin);
  std::vector<double> trace(static_cast<std::size_t>(traces.samples()));
  std::vector<std::complex<double>> analytic(static_cast<std::size_t>(crop.end));
  std::vector<double> theta_prev(window);
  std::vector<double> theta_now(window);

  Eigen::MatrixXd stream = Eigen::MatrixXd::Zero(crop.out_len, n_traces);
  for (int i = 0; i < n_traces; ++i) {
    for (int s = 0; s < traces.samples(); ++s)
      trace[static_cast<std::size_t>(s)] = traces.data(i, s);
    transformer.transform(trace, analytic);
    for (std::size_t s = 0; s < window; ++s) {
      const double deg = std::arg(analytic[static_cast<std::size_t>(crop.begin) + s]) * kRadToDeg;
      theta_now[s] = deg >= 180.0 ? deg - 360.0 : deg;
    }
    if (i > 0) {
      const auto speed = downscale_window(phase_speed(theta_now, theta_prev, wavelength_mm), crop);
      stream.col(i) = Eigen::Map<const Eigen::VectorXd>(speed.data(), crop.out_len);
    }
    std::swap(theta_now, theta_prev);
  }
  return stream;
}

SpeedPatch assemble_patch(const Eigen::MatrixXd& stream, int t, int n) {
  require(n >= 1, ErrorCode::invalid_argument, "patch length must be >= 1");
  require(t >= n - 1, ErrorCode::insufficient_history,
          "patch ending at " + std::to_string(t) + " needs " + std::to_string(n) + " columns");
  require(t < stream.cols(), ErrorCode::invalid_argument, "patch end beyond the stream");
  return SpeedPatch{stream.middleCols(t - n + 1, n), t};
}

Alignment align_pairs(const Eigen::MatrixXd& stream, const phantom::ImageSeries& images,
                      std::span<const double> trace_times, int n) {
  require(static_cast<std::size_t>(stream.cols()) == trace_times.size(), ErrorCode::shape_mismatch,
          "stream columns and trace times differ");
  constexpr double kTimeSlack = 1e-9;
  Alignment out;
  for (int j = 0; j < images.n_images(); ++j) {
    const double ts = images.timestamps_s[static_cast<std::size_t>(j)];
    const auto it = std::upper_bound(trace_times.begin(), trace_times.end(), ts + kTimeSlack);
    const auto last = static_cast<int>(it - trace_times.begin()) - 1;
    if (last < n - 1) {
      ++out.dropped;
      continue;
    }
    out.pairs.push_back({last, j});
  }
  return out;
}

}  // namespace ocmr::sigproc

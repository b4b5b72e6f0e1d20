#include "ocmr/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

namespace ocmr::phantom {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Knot value in [-1, 1) for knot k of stream `channel`; a pure function of (seed, channel, k).
double knot_value(std::uint64_t seed, std::uint64_t channel, std::int64_t k) {
  const auto bits = mix_seed(seed, channel, static_cast<std::uint64_t>(k));
  return 2.0 * (static_cast<double>(bits >> 11) * 0x1.0p-53) - 1.0;
}

double smoothstep(double tau) { return tau * tau * (3.0 - 2.0 * tau); }

// Integral of smoothstep from 0 to tau.
double smoothstep_integral(double tau) {
  const double t3 = tau * tau * tau;
  return t3 - 0.5 * t3 * tau;
}

// C1 jitter signal: knots every `period` seconds, smoothstep-blended between knot values.
class KnotSignal {
 public:
  KnotSignal(std::uint64_t seed, std::uint64_t channel, double period)
      : seed_(seed), channel_(channel), period_(period) {}

  [[nodiscard]] double value(double t) const {
    const auto k = static_cast<std::int64_t>(std::floor(t / period_));
    const double tau = t / period_ - static_cast<double>(k);
    const double a = knot(k);
    const double b = knot(k + 1);
    return a + (b - a) * smoothstep(tau);
  }

  // Integral of value() over [0, t].
  [[nodiscard]] double integral(double t) const {
    const auto k = static_cast<std::int64_t>(std::floor(t / period_));
    const double tau = t / period_ - static_cast<double>(k);
    const double a = knot(k);
    const double b = knot(k + 1);
    const double partial = period_ * (a * tau + (b - a) * smoothstep_integral(tau));
    return cumulative(k) + partial;
  }

 private:
  [[nodiscard]] double knot(std::int64_t k) const { return knot_value(seed_, channel_, k); }

  // Integral over [0, k*period].
  [[nodiscard]] double cumulative(std::int64_t k) const {
    double sum = 0.0;
    if (k >= 0) {
      for (std::int64_t j = 0; j < k; ++j) sum += 0.5 * period_ * (knot(j) + knot(j + 1));
    } else {
      for (std::int64_t j = k; j < 0; ++j) sum -= 0.5 * period_ * (knot(j) + knot(j + 1));
    }
    return sum;
  }

  std::uint64_t seed_;
  std::uint64_t channel_;
  double period_;
};

void check_field(const ScattererField& field, const AcquisitionConfig& cfg) {
  const double max_depth = cfg.max_depth_mm();
  for (const auto& s : field.scatterers) {
    require(std::isfinite(s.depth_mm) && std::isfinite(s.reflectivity) &&
                std::isfinite(s.motion_gain),
            ErrorCode::non_finite, "scatterer with non-finite parameters");
    require(s.depth_mm >= 0.0 && s.depth_mm <= max_depth, ErrorCode::invalid_argument,
            "scatterer depth " + std::to_string(s.depth_mm) + " mm outside [0, " +
                std::to_string(max_depth) + "] mm");
  }
}

void render_trace_into(const ScattererField& field, double displacement_mm,
                       const AcquisitionConfig& cfg, std::uint64_t noise_seed,
                       std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const double sigma_s = cfg.pulse_sigma_cycles / cfg.f0_hz;
  const double dt = 1.0 / cfg.fs_hz;
  const double half_width = std::ceil(6.0 * sigma_s * cfg.fs_hz);
  const double max_depth = cfg.max_depth_mm();
  const auto n = static_cast<std::int64_t>(out.size());
  const std::complex<double> carrier_step = std::polar(1.0, kTwoPi * cfg.f0_hz * dt);
  const double gauss_q = std::exp(-dt * dt / (sigma_s * sigma_s));

  for (const auto& s : field.scatterers) {
    const double depth = s.depth_mm + s.motion_gain * displacement_mm;
    require(depth >= 0.0 && depth <= max_depth, ErrorCode::invalid_argument,
            "displaced scatterer leaves the imaging range");
    const double delay = cfg.echo_delay_samples(depth);
    const auto first = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(delay - half_width)));
    const auto last = std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(std::floor(delay + half_width)));
    if (first > last) continue;

    // Gaussian envelope and carrier advanced by recurrences from the first sample.
    const double tau0 = (static_cast<double>(first) - delay) * dt;
    double envelope = std::exp(-tau0 * tau0 / (2.0 * sigma_s * sigma_s));
    double ratio = std::exp(-(2.0 * tau0 * dt + dt * dt) / (2.0 * sigma_s * sigma_s));
    std::complex<double> phasor = std::polar(1.0, kTwoPi * cfg.f0_hz * tau0);
    for (std::int64_t i = first; i <= last; ++i) {
      out[static_cast<std::size_t>(i)] += s.reflectivity * envelope * phasor.real();
      envelope *= ratio;
      ratio *= gauss_q;
      phasor *= carrier_step;
    }
  }

  if (!std::isfinite(cfg.snr_db)) return;
  double power = 0.0;
  for (double v : out) power += v * v;
  const double rms = std::sqrt(power / static_cast<double>(out.size()));
  if (rms == 0.0) return;
  const double noise_sigma = rms * std::pow(10.0, -cfg.snr_db / 20.0);
  std::mt19937_64 engine(noise_seed);
  std::normal_distribution<double> noise(0.0, noise_sigma);
  for (double& v : out) v += noise(engine);
}

}  // namespace

void BreathingParams::validate() const {
  require(std::isfinite(period_s) && period_s > 0.0, ErrorCode::invalid_argument,
          "breathing period must be > 0");
  require(std::isfinite(amplitude_mm) && amplitude_mm >= 0.0, ErrorCode::invalid_argument,
          "breathing amplitude must be >= 0");
  require(std::isfinite(drift_mm_per_min), ErrorCode::invalid_argument, "drift must be finite");
  require(period_jitter_frac >= 0.0 && period_jitter_frac < 1.0, ErrorCode::invalid_argument,
          "period jitter must lie in [0, 1)");
  require(amplitude_jitter_frac >= 0.0 && amplitude_jitter_frac < 1.0,
          ErrorCode::invalid_argument, "amplitude jitter must lie in [0, 1)");
}

void AcquisitionConfig::validate() const {
  require(tr_s > 0.0 && fs_hz > 0.0 && f0_hz > 0.0 && sound_speed_m_s > 0.0,
          ErrorCode::invalid_argument, "acquisition rates must be positive");
  require(trace_len >= 16, ErrorCode::invalid_argument, "trace_len must be >= 16");
  require(lines_per_image >= 1 && image_size >= 1, ErrorCode::invalid_argument,
          "lines_per_image and image_size must be >= 1");
  require(image_rate_fps > 0.0, ErrorCode::invalid_argument, "image rate must be positive");
  require(image_period_s() >= lines_per_image * tr_s - 1e-12, ErrorCode::invalid_argument,
          "image period shorter than its k-space acquisition window");
  require(pulse_sigma_cycles > 0.0 && pixel_pitch_mm > 0.0, ErrorCode::invalid_argument,
          "pulse width and pixel pitch must be positive");
  require(!std::isnan(snr_db), ErrorCode::invalid_argument, "snr_db is NaN");
}

double AcquisitionConfig::max_depth_mm() const {
  return sound_speed_m_s * trace_len / (2.0 * fs_hz) * 1e3;
}

double AcquisitionConfig::echo_delay_samples(double depth_mm) const {
  return 2.0 * depth_mm * 1e-3 / sound_speed_m_s * fs_hz;
}

ScattererField make_tissue_field(std::uint64_t seed, int count, double min_depth_mm,
                                 double max_depth_mm) {
  require(count >= 0 && max_depth_mm > min_depth_mm, ErrorCode::invalid_argument,
          "invalid tissue field extent");
  std::mt19937_64 engine(mix_seed(seed, 0x7155));
  ScattererField field;
  field.scatterers.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Scatterer s;
    s.depth_mm = min_depth_mm + (max_depth_mm - min_depth_mm) * uniform01(engine);
    s.reflectivity = 0.3 + 0.7 * uniform01(engine);
    const double depth_frac = (s.depth_mm - min_depth_mm) / (max_depth_mm - min_depth_mm);
    s.motion_gain = std::clamp(0.2 + 0.9 * depth_frac + 0.1 * (uniform01(engine) - 0.5), 0.0, 1.0);
    field.scatterers.push_back(s);
  }
  std::sort(field.scatterers.begin(), field.scatterers.end(),
            [](const Scatterer& a, const Scatterer& b) { return a.depth_mm < b.depth_mm; });
  return field;
}

std::vector<double> TraceSeries::times() const {
  std::vector<double> t(static_cast<std::size_t>(n_traces()));
  for (int i = 0; i < n_traces(); ++i) t[static_cast<std::size_t>(i)] = time_of(i);
  return t;
}

void TraceSeries::validate() const {
  require(n_traces() >= 1, ErrorCode::invalid_argument, "trace series is empty");
  require(data.allFinite(), ErrorCode::non_finite, "trace series contains non-finite samples");
  require(fs_hz > 0.0 && f0_hz > 0.0 && tr_s > 0.0, ErrorCode::invalid_argument,
          "trace series has invalid sampling metadata");
}

Eigen::MatrixXd ImageSeries::frame(int index) const {
  require(index >= 0 && index < n_images(), ErrorCode::invalid_argument, "frame index out of range");
  Eigen::MatrixXd out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) out(r, c) = frames(index, r * width + c);
  return out;
}

void ImageSeries::validate() const {
  require(height >= 1 && width >= 1 && frames.cols() == static_cast<Eigen::Index>(height) * width,
          ErrorCode::shape_mismatch, "image series frame size does not match height x width");
  require(timestamps_s.size() == static_cast<std::size_t>(n_images()), ErrorCode::shape_mismatch,
          "image series timestamp count differs from frame count");
  for (std::size_t i = 1; i < timestamps_s.size(); ++i)
    require(timestamps_s[i] > timestamps_s[i - 1], ErrorCode::invalid_argument,
            "image timestamps must be strictly increasing");
  require(frames.allFinite(), ErrorCode::non_finite, "image series contains non-finite pixels");
}

std::vector<double> gen_breathing(const BreathingParams& params, std::span<const double> t_grid) {
  params.validate();
  require(!t_grid.empty(), ErrorCode::invalid_argument, "empty time grid");
  for (std::size_t i = 1; i < t_grid.size(); ++i)
    require(t_grid[i] > t_grid[i - 1], ErrorCode::invalid_argument, "time grid must be increasing");

  const KnotSignal freq_jitter(params.seed, 1, params.period_s);
  const KnotSignal amp_jitter(params.seed, 2, params.period_s);
  std::vector<double> out(t_grid.size());
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    const double t = t_grid[i];
    double cycles = t / params.period_s;
    if (params.period_jitter_frac > 0.0)
      cycles += params.period_jitter_frac * freq_jitter.integral(t) / params.period_s;
    double amplitude = params.amplitude_mm;
    if (params.amplitude_jitter_frac > 0.0)
      amplitude *= 1.0 + params.amplitude_jitter_frac * amp_jitter.value(t);
    out[i] = amplitude * std::sin(kTwoPi * cycles) + params.drift_mm_per_min * t / 60.0;
  }
  return out;
}

std::vector<double> render_trace(const ScattererField& field, double displacement_mm,
                                 const AcquisitionConfig& cfg, std::uint64_t noise_seed) {
  cfg.validate();
  require(std::isfinite(displacement_mm), ErrorCode::non_finite, "displacement must be finite");
  check_field(field, cfg);
  std::vector<double> out(static_cast<std::size_t>(cfg.trace_len));
  render_trace_into(field, displacement_mm, cfg, noise_seed, out);
  return out;
}

Eigen::MatrixXd render_image(const ScattererField& field, double displacement_mm,
                             const AcquisitionConfig& cfg) {
  cfg.validate();
  require(std::isfinite(displacement_mm), ErrorCode::non_finite, "displacement must be finite");
  const int size = cfg.image_size;
  const double sigma_row = 2.5;
  const double sigma_col = 0.1 * size;
  Eigen::MatrixXd image = Eigen::MatrixXd::Zero(size, size);
  Eigen::VectorXd rows(size);
  Eigen::RowVectorXd cols(size);
  for (std::size_t j = 0; j < field.scatterers.size(); ++j) {
    const auto& s = field.scatterers[j];
    const double row_center =
        (s.depth_mm + s.motion_gain * displacement_mm - cfg.image_top_mm) / cfg.pixel_pitch_mm;
    const double golden = 0.5 + 0.6180339887498949 * static_cast<double>(j);
    const double col_center = size * (golden - std::floor(golden));
    for (int r = 0; r < size; ++r) {
      const double z = (r - row_center) / sigma_row;
      rows(r) = std::exp(-0.5 * z * z);
    }
    for (int c = 0; c < size; ++c) {
      const double z = (c - col_center) / sigma_col;
      cols(c) = std::exp(-0.5 * z * z);
    }
    image.noalias() += std::abs(s.reflectivity) * rows * cols;
  }
  return image;
}

int image_count(const AcquisitionConfig& cfg, double duration_s) {
  const auto n_traces = std::lround(duration_s / cfg.tr_s);
  int count = 0;
  for (;; ++count) {
    const auto start = std::lround(count * cfg.image_period_s() / cfg.tr_s);
    if (start + cfg.lines_per_image > n_traces) break;
  }
  return count;
}

PhantomData gen_dataset(const BreathingParams& breathing, const ScattererField& field,
                        const AcquisitionConfig& cfg, double duration_s) {
  breathing.validate();
  cfg.validate();
  check_field(field, cfg);
  require(std::isfinite(duration_s) && duration_s >= cfg.image_period_s(),
          ErrorCode::invalid_argument, "duration shorter than one image period");

  const auto n_traces = static_cast<int>(std::lround(duration_s / cfg.tr_s));
  const int n_images = image_count(cfg, duration_s);

  PhantomData out;
  auto& traces = out.traces;
  traces.fs_hz = cfg.fs_hz;
  traces.f0_hz = cfg.f0_hz;
  traces.tr_s = cfg.tr_s;
  traces.t0_s = 0.0;
  traces.data.resize(n_traces, cfg.trace_len);

  out.trace_displacement_mm = gen_breathing(breathing, traces.times());
  std::vector<double> buffer(static_cast<std::size_t>(cfg.trace_len));
  for (int i = 0; i < n_traces; ++i) {
    render_trace_into(field, out.trace_displacement_mm[static_cast<std::size_t>(i)], cfg,
                      mix_seed(breathing.seed, 2, static_cast<std::uint64_t>(i)), buffer);
    for (int s = 0; s < cfg.trace_len; ++s)
      traces.data(i, s) = static_cast<float>(buffer[static_cast<std::size_t>(s)]);
  }

  auto& images = out.images;
  images.height = cfg.image_size;
  images.width = cfg.image_size;
  images.frames.resize(n_images, static_cast<Eigen::Index>(cfg.image_size) * cfg.image_size);
  images.timestamps_s.resize(static_cast<std::size_t>(n_images));
  for (int j = 0; j < n_images; ++j) {
    const auto start = std::lround(j * cfg.image_period_s() / cfg.tr_s);
    images.timestamps_s[static_cast<std::size_t>(j)] =
        traces.t0_s + (static_cast<double>(start) + 0.5 * (cfg.lines_per_image - 1)) * cfg.tr_s;
  }
  out.image_displacement_mm = gen_breathing(breathing, images.timestamps_s);
  for (int j = 0; j < n_images; ++j) {
    const Eigen::MatrixXd frame =
        render_image(field, out.image_displacement_mm[static_cast<std::size_t>(j)], cfg);
    for (int r = 0; r < cfg.image_size; ++r)
      for (int c = 0; c < cfg.image_size; ++c)
        images.frames(j, r * cfg.image_size + c) = static_cast<float>(frame(r, c));
  }
  return out;
}

}  // namespace ocmr::phantom

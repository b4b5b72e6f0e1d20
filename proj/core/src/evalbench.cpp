#include "ocmr/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace ocmr::evalbench {

std::vector<double> sse_per_image(const phantom::ImageSeries& pred, const phantom::ImageSeries& truth) {
  require(pred.n_images() == truth.n_images() && pred.height == truth.height &&
              pred.width == truth.width && pred.frames.cols() == truth.frames.cols(),
          ErrorCode::shape_mismatch, "prediction and truth series differ in shape");
  std::vector<double> out(static_cast<std::size_t>(pred.n_images()));
  for (int j = 0; j < pred.n_images(); ++j)
    out[static_cast<std::size_t>(j)] =
        (pred.frames.row(j).cast<double>() - truth.frames.row(j).cast<double>()).squaredNorm();
  return out;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  const auto n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

Eigen::MatrixXd mmode_extract(const phantom::ImageSeries& images, int column) {
  require(column >= 0 && column < images.width, ErrorCode::invalid_argument,
          "column " + std::to_string(column) + " outside [0, " + std::to_string(images.width) + ")");
  Eigen::MatrixXd strip(images.n_images(), images.height);
  for (int j = 0; j < images.n_images(); ++j)
    for (int r = 0; r < images.height; ++r)
      strip(j, r) = images.frames(j, static_cast<Eigen::Index>(r) * images.width + column);
  return strip;
}

AccuracyEntry accuracy(std::string method, const phantom::ImageSeries& pred,
                       const phantom::ImageSeries& truth_pca, const phantom::ImageSeries& truth_raw) {
  AccuracyEntry e;
  e.method = std::move(method);
  e.sse = sse_per_image(pred, truth_pca);
  e.sse_summary = summarize(e.sse);
  e.raw_sse = sse_per_image(pred, truth_raw);
  e.raw_summary = summarize(e.raw_sse);
  return e;
}

void BenchConfig::validate() const {
  require(!n_values.empty(), ErrorCode::invalid_argument, "no dataset sizes to sweep");
  for (int n : n_values) require(n >= 1, ErrorCode::invalid_argument, "dataset sizes must be >= 1");
  require(queries >= 30, ErrorCode::invalid_argument, "at least 30 queries per size required");
  require(repetitions >= 3, ErrorCode::invalid_argument, "at least 3 repetitions required");
  require(warmup_queries >= 0, ErrorCode::invalid_argument, "warm-up count must be >= 0");
}

namespace {

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double median(std::vector<double> v) { return percentile(std::move(v), 0.5); }

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

std::vector<MethodTiming> bench_latency(std::span<const LatencySubject> subjects, const BenchConfig& config) {
  require(!subjects.empty(), ErrorCode::invalid_argument, "no predictors to benchmark");
  config.validate();
  using Clock = std::chrono::steady_clock;
  std::vector<MethodTiming> out;
  for (const auto& subject : subjects) {
    require(subject.prepare && subject.query, ErrorCode::invalid_argument,
            "predictor '" + subject.name + "' is incomplete");
    MethodTiming timing{subject.name, {}};
    // Repetitions run round-robin over N so that slow drift (warm-up, frequency
    // scaling) is spread across all sizes instead of biasing whichever runs first.
    const std::size_t sizes = config.n_values.size();
    std::vector<std::vector<double>> means(sizes), p50s(sizes), p95s(sizes);
    for (int rep = 0; rep < config.repetitions; ++rep) {
      for (std::size_t k = 0; k < sizes; ++k) {
        subject.prepare(config.n_values[k]);
        for (int q = 0; q < config.warmup_queries; ++q) subject.query(q % config.queries);
        std::vector<double> times(static_cast<std::size_t>(config.queries));
        for (int q = 0; q < config.queries; ++q) {
          const auto t0 = Clock::now();
          subject.query(q);
          times[static_cast<std::size_t>(q)] = std::chrono::duration<double>(Clock::now() - t0).count();
        }
        means[k].push_back(std::accumulate(times.begin(), times.end(), 0.0) / config.queries);
        p50s[k].push_back(percentile(times, 0.5));
        p95s[k].push_back(percentile(times, 0.95));
      }
    }
    for (std::size_t k = 0; k < sizes; ++k) timing.per_n.push_back({median(means[k]), median(p50s[k]), median(p95s[k])});
    out.push_back(std::move(timing));
  }
  return out;
}

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_argument,
          "linear fit needs at least two paired values");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0, ErrorCode::invalid_argument, "linear fit needs distinct x values");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_argument,
          "rank correlation needs at least two paired values");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  return pearson(rx, ry);
}

double relative_spread(std::span<const double> values) {
  require(!values.empty(), ErrorCode::invalid_argument, "empty value set");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  require(mean != 0.0, ErrorCode::numerical, "spread of values with zero mean");
  return (*hi - *lo) / mean;
}

ScalingSummary scaling(const MethodTiming& timing, std::span<const int> n_values) {
  require(timing.per_n.size() == n_values.size(), ErrorCode::shape_mismatch,
          "timing and size sweep lengths differ");
  std::vector<double> x(n_values.begin(), n_values.end());
  std::vector<double> y;
  for (const auto& t : timing.per_n) y.push_back(t.mean_s);
  ScalingSummary s;
  s.method = timing.name;
  s.spread = relative_spread(y);
  if (x.size() >= 2) {
    s.fit = linear_fit(x, y);
    s.spearman = spearman(x, y);
  }
  return s;
}

std::string to_json(const MetricsReport& report, int indent) {
  using json = nlohmann::ordered_json;
  json root = json::object();
  json acc = json::object();
  for (const auto& e : report.accuracy) {
    acc[e.method] = json{
        {"mean_sse", e.sse_summary.mean},
        {"std_sse", e.sse_summary.std},
        {"per_image_sse", e.sse},
        {"raw_mean_sse", e.raw_summary.mean},
        {"raw_std_sse", e.raw_summary.std},
        {"raw_per_image_sse", e.raw_sse},
    };
  }
  root["accuracy"] = acc;
  if (report.timing) {
    const auto& t = *report.timing;
    json methods = json::object();
    for (const auto& m : t.methods) {
      json per_n = json::array();
      for (std::size_t i = 0; i < m.per_n.size(); ++i)
        per_n.push_back({{"n", t.config.n_values[i]},
                         {"mean_s", m.per_n[i].mean_s},
                         {"p50_s", m.per_n[i].p50_s},
                         {"p95_s", m.per_n[i].p95_s}});
      methods[m.name] = per_n;
    }
    json fits = json::object();
    for (const auto& s : t.scaling)
      fits[s.method] = {{"slope", s.fit.slope}, {"intercept", s.fit.intercept}, {"r2", s.fit.r2},
                        {"spearman", s.spearman}, {"spread", s.spread}};
    root["timing"] = json{{"n_values", t.config.n_values},
                          {"queries", t.config.queries},
                          {"repetitions", t.config.repetitions},
                          {"per_n", methods},
                          {"scaling", fits}};
  }
  return root.dump(indent) + "\n";
}

}  // namespace ocmr::evalbench

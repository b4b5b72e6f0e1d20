#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ocmr/common.hpp"
#include "ocmr/phantom.hpp"

namespace ocmr::evalbench {

// SSE_j = sum over pixels of (pred_j - truth_j)^2.
std::vector<double> sse_per_image(const phantom::ImageSeries& pred, const phantom::ImageSeries& truth);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for fewer than two values
};
Summary summarize(std::span<const double> values);

// time x height strip of one image column.
Eigen::MatrixXd mmode_extract(const phantom::ImageSeries& images, int column);

struct AccuracyEntry {
  std::string method;
  std::vector<double> sse;      // against the PCA-space ground truth
  Summary sse_summary;
  std::vector<double> raw_sse;  // against the raw ground-truth frames
  Summary raw_summary;
};

AccuracyEntry accuracy(std::string method, const phantom::ImageSeries& pred,
                       const phantom::ImageSeries& truth_pca, const phantom::ImageSeries& truth_raw);

// --- latency ---

struct TimingStats {
  double mean_s = 0.0;
  double p50_s = 0.0;
  double p95_s = 0.0;
};

// prepare(N) builds the predictor for N training samples (untimed); query(q) runs
// one full reconstruction for query q and is the timed region.
struct LatencySubject {
  std::string name;
  std::function<void(int n_train)> prepare;
  std::function<void(int query)> query;
};

struct BenchConfig {
  std::vector<int> n_values{100, 200, 400, 800};
  int queries = 30;
  int repetitions = 3;
  int warmup_queries = 2;

  void validate() const;
};

struct MethodTiming {
  std::string name;
  std::vector<TimingStats> per_n;  // aligned with BenchConfig::n_values
};

// Runs on the calling thread. Each statistic is the median over repetitions.
std::vector<MethodTiming> bench_latency(std::span<const LatencySubject> subjects, const BenchConfig& config);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
LinearFit linear_fit(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);
// (max - min) / mean
double relative_spread(std::span<const double> values);

struct ScalingSummary {
  std::string method;
  LinearFit fit;  // mean per-query time against N
  double spearman = 0.0;
  double spread = 0.0;
};
ScalingSummary scaling(const MethodTiming& timing, std::span<const int> n_values);

struct TimingSection {
  BenchConfig config;
  std::vector<MethodTiming> methods;
  std::vector<ScalingSummary> scaling;
};

struct MetricsReport {
  std::vector<AccuracyEntry> accuracy;
  std::optional<TimingSection> timing;  // serialised under "timing"; not reproducible bitwise
};

// Stable key order; per-image vectors included.
std::string to_json(const MetricsReport& report, int indent = 2);

}  // namespace ocmr::evalbench

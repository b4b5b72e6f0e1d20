#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ocmr::cli {

struct PhantomOptions {
  std::uint64_t seed = 0;
  double duration_s = 180.0;
  double f0_hz = 1e6;
  double breathing_period_s = 4.0;
  double amplitude_mm = 5.0;
  double drift_mm_per_min = 0.0;
  double period_jitter = 0.1;
  double amplitude_jitter = 0.1;
  double snr_db = 30.0;
  int scatterers = 40;
  std::string out_dir;
};

struct TrainOptions {
  std::string traces;
  std::string images;
  int epochs = 1000;
  double lr = 0.001;
  int batch_size = 20;
  std::uint64_t seed = 0;
  int kernel_size = 9;
  int train_pairs = 100;
  int test_pairs = 50;
  int threads = 0;
  double wall_budget_s = 0.0;
  bool normalize_targets = false;
  std::string out_model;
  std::string metrics;  // default: <out_model>.metrics.json
};

struct InferOptions {
  std::string model;
  std::string traces;
  int every = 1;
  std::string align_images;  // query at these image timestamps instead of every `every` traces
  std::string out;
  std::string coeffs_csv;
};

struct EvalOptions {
  std::vector<std::string> preds;  // name=path
  std::string truth;
  std::string model;
  std::optional<int> first_image;
  std::optional<int> count;
  double max_gap_s = 0.05;
  std::optional<int> mmode_column;
  std::string export_dir;
  std::string out;
};

struct KdeOptions {
  std::string traces;
  std::string images;
  std::string query_traces;  // default: --traces
  int train_pairs = 100;
  std::optional<double> bandwidth;
  std::uint64_t seed = 0;
  int every = 1;
  std::string align_images;
  std::string out;
  std::string coeffs_csv;
};

struct BenchOptions {
  std::string traces;
  std::string images;
  std::string model;  // optional; a freshly initialised default network otherwise
  std::vector<int> n_values{100, 200, 400, 800};
  int queries = 30;
  int repetitions = 3;
  std::uint64_t seed = 0;
  std::string out;
};

void run_phantom(const PhantomOptions& o);
void run_train(const TrainOptions& o);
void run_infer(const InferOptions& o);
void run_eval(const EvalOptions& o);
void run_kde(const KdeOptions& o);
void run_bench(const BenchOptions& o);

}  // namespace ocmr::cli

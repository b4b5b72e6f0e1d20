#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ocmr/common.hpp"
#include "ocmr/lrcn.hpp"

namespace ocmr::train {

enum class TargetNormalization { off, per_component };

struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 1000;
  int batch_size = 20;
  std::uint64_t seed = 0;
  TargetNormalization target_normalization = TargetNormalization::off;
  // Scale raw speed patches by 1/RMS of the training stream (stored in the model).
  bool standardize_input = true;
  int num_threads = 0;         // 0: hardware concurrency; results do not depend on it
  double wall_budget_s = 0.0;  // stop after the epoch that exceeds this; 0 = unlimited

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-sample loss of each epoch
  double final_loss = 0.0;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  TrainConfig config;
  int epochs_completed = 0;
  bool budget_exhausted = false;
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(TrainReport report);
  [[nodiscard]] const TrainReport& report() const noexcept { return report_; }

 private:
  TrainReport report_;
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;
};

// Mean over components of squared differences; grad = 2 (pred - truth) / k.
LossResult mse_loss(std::span<const double> y_pred, std::span<const double> y_true);

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;
};

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const TrainConfig& config);

// Patches are slices of a speed stream; the stream must outlive the dataset.
class PairDataset {
 public:
  PairDataset(const Eigen::MatrixXd& stream, std::vector<int> end_indices, Eigen::MatrixXd targets,
              int n);

  [[nodiscard]] int size() const { return static_cast<int>(end_indices_.size()); }
  [[nodiscard]] int patch_length() const { return n_; }
  [[nodiscard]] const Eigen::MatrixXd& targets() const { return targets_; }
  [[nodiscard]] const std::vector<int>& end_indices() const { return end_indices_; }
  [[nodiscard]] const Eigen::MatrixXd& stream() const { return *stream_; }
  [[nodiscard]] Eigen::Ref<const Eigen::MatrixXd> patch(int i) const;
  // RMS of all stream values covered by at least one patch.
  [[nodiscard]] double input_rms() const;

 private:
  const Eigen::MatrixXd* stream_;
  std::vector<int> end_indices_;
  Eigen::MatrixXd targets_;
  int n_;
};

struct TrainResult {
  lrcn::LrcnModel<float> model;
  TrainReport report;
};

using EpochCallback = std::function<void(int epoch, double loss)>;

TrainResult train(const PairDataset& dataset, const lrcn::ArchSpec& arch, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct GradCheckOptions {
  int samples = 200;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double init_scale = 1.0;   // multiplies the Glorot initialisation
  double input_scale = 1.0;  // standard deviation of the random input patch
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // both gradients below 1e-10
};

// Central finite differences against backward() in double precision, inference mode.
GradCheckResult grad_check(const lrcn::ArchSpec& arch, const GradCheckOptions& options);

}  // namespace ocmr::train

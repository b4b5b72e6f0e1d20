#include "ocmr/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

namespace ocmr::train {
namespace {

using Clock = std::chrono::steady_clock;

// Fisher-Yates with explicit bit consumption so the permutation does not depend
// on the standard library's distribution implementation.
void shuffle(std::vector<int>& order, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(engine) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
}

struct SampleResult {
  double loss = 0.0;
  std::vector<float> grad;
};

// Runs fn(slot) for slot in [0, count) on up to `threads` workers.
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> workers;
  const int used = std::min(threads, count);
  workers.reserve(static_cast<std::size_t>(used));
  for (int w = 0; w < used; ++w) {
    workers.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

std::string describe_divergence(const TrainReport& report) {
  return "training loss became non-finite at epoch " + std::to_string(report.epochs_completed + 1);
}

}  // namespace

void TrainConfig::validate() const {
  require(std::isfinite(lr) && lr > 0.0, ErrorCode::invalid_argument, "learning rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::invalid_argument,
          "Adam betas must lie in [0, 1)");
  require(epsilon > 0.0, ErrorCode::invalid_argument, "Adam epsilon must be > 0");
  require(epochs >= 1, ErrorCode::invalid_argument, "epochs must be >= 1");
  require(batch_size >= 1, ErrorCode::invalid_argument, "batch size must be >= 1");
  require(num_threads >= 0 && wall_budget_s >= 0.0, ErrorCode::invalid_argument,
          "thread count and wall budget must be non-negative");
}

TrainingDiverged::TrainingDiverged(TrainReport report)
    : Error(ErrorCode::diverged, describe_divergence(report)), report_(std::move(report)) {}

LossResult mse_loss(std::span<const double> y_pred, std::span<const double> y_true) {
  require(y_pred.size() == y_true.size(), ErrorCode::shape_mismatch,
          "prediction and target lengths differ");
  require(!y_pred.empty(), ErrorCode::invalid_argument, "empty prediction");
  const auto k = static_cast<double>(y_pred.size());
  LossResult out;
  out.grad.resize(y_pred.size());
  for (std::size_t i = 0; i < y_pred.size(); ++i) {
    const double diff = y_pred[i] - y_true[i];
    out.loss += diff * diff;
    out.grad[i] = 2.0 * diff / k;
  }
  out.loss /= k;
  return out;
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const TrainConfig& config) {
  require(params.size() == grads.size(), ErrorCode::shape_mismatch,
          "parameter and gradient sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i)
    require(std::isfinite(grads[i]), ErrorCode::non_finite,
            "non-finite gradient at parameter " + std::to_string(i));
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    const double v = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    params[i] = static_cast<T>(params[i] - config.lr * (m / c1) / (std::sqrt(v / c2) + config.epsilon));
  }
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&,
                               const TrainConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&,
                                const TrainConfig&);

PairDataset::PairDataset(const Eigen::MatrixXd& stream, std::vector<int> end_indices,
                         Eigen::MatrixXd targets, int n)
    : stream_(&stream), end_indices_(std::move(end_indices)), targets_(std::move(targets)), n_(n) {
  require(n >= 1, ErrorCode::invalid_argument, "patch length must be >= 1");
  require(targets_.rows() == static_cast<Eigen::Index>(end_indices_.size()),
          ErrorCode::shape_mismatch, "one target row per patch required");
  for (int e : end_indices_) {
    require(e >= n - 1, ErrorCode::insufficient_history, "patch lacks history");
    require(e < stream.cols(), ErrorCode::invalid_argument, "patch end beyond the stream");
  }
}

Eigen::Ref<const Eigen::MatrixXd> PairDataset::patch(int i) const {
  const int end = end_indices_.at(static_cast<std::size_t>(i));
  return stream_->middleCols(end - n_ + 1, n_);
}

double PairDataset::input_rms() const {
  std::vector<char> used(static_cast<std::size_t>(stream_->cols()), 0);
  for (int e : end_indices_)
    for (int c = e - n_ + 1; c <= e; ++c) used[static_cast<std::size_t>(c)] = 1;
  double sum = 0.0;
  double count = 0.0;
  for (Eigen::Index c = 0; c < stream_->cols(); ++c) {
    if (!used[static_cast<std::size_t>(c)]) continue;
    sum += stream_->col(c).squaredNorm();
    count += static_cast<double>(stream_->rows());
  }
  return count > 0.0 ? std::sqrt(sum / count) : 0.0;
}

TrainResult train(const PairDataset& dataset, const lrcn::ArchSpec& arch, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  arch.validate();
  const int n_samples = dataset.size();
  require(n_samples >= 1, ErrorCode::invalid_argument, "training needs at least one pair");
  require(dataset.targets().cols() == arch.output_dim, ErrorCode::shape_mismatch,
          "target dimension differs from the network output");
  require(dataset.patch_length() == arch.input_n && dataset.stream().rows() == arch.input_d,
          ErrorCode::shape_mismatch, "dataset patches do not match the architecture");

  const auto start = Clock::now();
  const int k = arch.output_dim;
  auto model = lrcn::LrcnModel<float>::initialize(arch, mix_seed(config.seed, 1));
  if (config.standardize_input) {
    const double rms = dataset.input_rms();
    model.input_scale = rms > 0.0 ? 1.0 / rms : 1.0;
  }

  Eigen::VectorXd target_mean = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd target_std = Eigen::VectorXd::Ones(k);
  if (config.target_normalization == TargetNormalization::per_component) {
    target_mean = dataset.targets().colwise().mean().transpose();
    for (int j = 0; j < k; ++j) {
      const double var = (dataset.targets().col(j).array() - target_mean(j)).square().mean();
      target_std(j) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
  }
  const Eigen::MatrixXd targets =
      (dataset.targets().rowwise() - target_mean.transpose()).array().rowwise() /
      target_std.transpose().array();

  const int threads = config.num_threads > 0
                          ? config.num_threads
                          : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));

  TrainReport report;
  report.seed = config.seed;
  report.config = config;

  AdamState<float> adam;
  std::vector<int> order(static_cast<std::size_t>(n_samples));
  std::vector<SampleResult> slots(static_cast<std::size_t>(std::min(config.batch_size, n_samples)));
  std::vector<double> grad_sum(model.params.size());
  std::vector<float> grad(model.params.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, mix_seed(config.seed, 2, static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    for (int first = 0; first < n_samples; first += config.batch_size) {
      const int batch = std::min(config.batch_size, n_samples - first);
      parallel_for(batch, threads, [&](int b) {
        const int idx = order[static_cast<std::size_t>(first + b)];
        const auto dropout_seed = mix_seed(
            config.seed, 3, static_cast<std::uint64_t>(epoch) * n_samples + static_cast<std::uint64_t>(idx));
        const auto fwd = lrcn::forward<float>(model, dataset.patch(idx), lrcn::Mode::train, dropout_seed);
        const Eigen::VectorXd pred = fwd.y.cast<double>();
        const Eigen::VectorXd truth = targets.row(idx).transpose();
        const auto loss = mse_loss(std::span<const double>(pred.data(), k),
                                   std::span<const double>(truth.data(), k));
        std::vector<float> dy(loss.grad.begin(), loss.grad.end());
        auto& slot = slots[static_cast<std::size_t>(b)];
        slot.loss = loss.loss;
        slot.grad.assign(model.params.size(), 0.0f);
        lrcn::backward_accumulate<float>(model, fwd.tape, dy, slot.grad);
      });
      // Fixed-order reduction keeps the update independent of thread scheduling.
      std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
      for (int b = 0; b < batch; ++b) {
        const auto& slot = slots[static_cast<std::size_t>(b)];
        epoch_loss += slot.loss;
        for (std::size_t i = 0; i < grad_sum.size(); ++i) grad_sum[i] += slot.grad[i];
      }
      for (std::size_t i = 0; i < grad.size(); ++i)
        grad[i] = static_cast<float>(grad_sum[i] / batch);
      if (!std::isfinite(epoch_loss)) break;
      adam_step<float>(model.params, grad, adam, config);
    }
    epoch_loss /= n_samples;
    report.wall_time_s = std::chrono::duration<double>(Clock::now() - start).count();
    if (!std::isfinite(epoch_loss)) {
      report.final_loss = epoch_loss;
      throw TrainingDiverged(report);
    }
    report.epoch_loss.push_back(epoch_loss);
    report.final_loss = epoch_loss;
    report.epochs_completed = epoch + 1;
    if (on_epoch) on_epoch(epoch, epoch_loss);
    if (config.wall_budget_s > 0.0 && report.wall_time_s > config.wall_budget_s &&
        epoch + 1 < config.epochs) {
      report.budget_exhausted = true;
      break;
    }
  }

  // Fold target standardisation into the readout so the model emits raw coefficients.
  if (config.target_normalization == TargetNormalization::per_component) {
    const auto layout = lrcn::ParamLayout::build(arch);
    const auto& d = layout.dense;
    for (int o = 0; o < d.out_dim; ++o) {
      for (int i = 0; i < d.in_dim; ++i) {
        auto& w = model.params[d.weights + static_cast<std::size_t>(o) * d.in_dim + i];
        w = static_cast<float>(w * target_std(o));
      }
      auto& b = model.params[d.bias + static_cast<std::size_t>(o)];
      b = static_cast<float>(b * target_std(o) + target_mean(o));
    }
  }
  report.wall_time_s = std::chrono::duration<double>(Clock::now() - start).count();
  return {std::move(model), std::move(report)};
}

GradCheckResult grad_check(const lrcn::ArchSpec& arch, const GradCheckOptions& options) {
  require(options.samples >= 0 && options.step > 0.0, ErrorCode::invalid_argument,
          "invalid gradient-check options");
  auto model = lrcn::LrcnModel<double>::initialize(arch, mix_seed(options.seed, 11));
  for (double& p : model.params) p *= options.init_scale;

  std::mt19937_64 engine(mix_seed(options.seed, 12));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd patch(arch.input_d, arch.input_n);
  for (Eigen::Index i = 0; i < patch.size(); ++i) patch.data()[i] = options.input_scale * normal(engine);
  Eigen::VectorXd target(arch.output_dim);
  for (Eigen::Index i = 0; i < target.size(); ++i) target(i) = normal(engine);

  auto loss_of = [&](const lrcn::LrcnModel<double>& m) {
    const auto y = lrcn::forward<double>(m, patch, lrcn::Mode::infer).y;
    return mse_loss(std::span<const double>(y.data(), static_cast<std::size_t>(y.size())),
                    std::span<const double>(target.data(), static_cast<std::size_t>(target.size())));
  };

  GradCheckResult result;
  if (options.samples == 0 || model.params.empty()) return result;

  const auto fwd = lrcn::forward<double>(model, patch, lrcn::Mode::infer);
  const auto base = loss_of(model);
  const auto analytic = lrcn::backward<double>(model, fwd.tape, base.grad);

  std::vector<int> indices(model.params.size());
  std::iota(indices.begin(), indices.end(), 0);
  shuffle(indices, mix_seed(options.seed, 13));
  const auto count = std::min<std::size_t>(indices.size(), static_cast<std::size_t>(options.samples));

  for (std::size_t s = 0; s < count; ++s) {
    const auto i = static_cast<std::size_t>(indices[s]);
    const double original = model.params[i];
    model.params[i] = original + options.step;
    const double plus = loss_of(model).loss;
    model.params[i] = original - options.step;
    const double minus = loss_of(model).loss;
    model.params[i] = original;
    const double numeric = (plus - minus) / (2.0 * options.step);
    const double a = analytic[i];
    if (std::abs(a) < 1e-10 && std::abs(numeric) < 1e-10) {
      ++result.skipped;
      continue;
    }
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-10});
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
  }
  return result;
}

}  // namespace ocmr::train

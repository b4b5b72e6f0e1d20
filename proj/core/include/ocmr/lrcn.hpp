#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ocmr/common.hpp"

// Long-term recurrent convolutional network: 1-d convolutions along depth applied
// to every column of a speed patch, average pooling between convolutions, stacked
// LSTMs over the columns (time), and a linear readout of the last time step.
//
// Activation tensors are RowMatrix<T> of shape channels x (rows * n) where the
// flat column index of (depth row s, time column t) is s * n + t.
namespace ocmr::lrcn {

struct ArchSpec {
  std::vector<int> conv_channels{64, 32, 16, 1};
  int kernel_size = 9;
  int pool_size = 2;
  std::vector<int> lstm_units{10, 10};
  int output_dim = 10;
  double dropout_rate = 0.2;
  int input_d = 560;
  int input_n = 300;

  void validate() const;
  // Rows left after pooling; the per-step input size of the first LSTM.
  [[nodiscard]] int feature_dim() const;
  [[nodiscard]] int dense_input_dim() const;
  bool operator==(const ArchSpec&) const = default;
};

struct ConvSlot {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int rows = 0;  // input rows (depth) seen by this layer
  std::size_t weights = 0;  // [out][in][kernel]
  std::size_t bias = 0;
};

// Gate g in {input, forget, cell, output} occupies
// [offset + g*gate_size(), offset + (g+1)*gate_size()) as input weights [unit][in],
// recurrent weights [unit][unit], then bias [unit].
struct LstmSlot {
  int in_dim = 0;
  int units = 0;
  std::size_t offset = 0;
  [[nodiscard]] std::size_t gate_size() const {
    return static_cast<std::size_t>(units) * (in_dim + units) + units;
  }
};

struct DenseSlot {
  int in_dim = 0;
  int out_dim = 0;
  std::size_t weights = 0;  // [out][in]
  std::size_t bias = 0;
};

struct ParamLayout {
  std::vector<ConvSlot> conv;
  std::vector<LstmSlot> lstm;
  DenseSlot dense;
  std::size_t total = 0;

  static ParamLayout build(const ArchSpec& arch);
};

std::size_t param_count(const ArchSpec& arch);

template <typename T>
struct LrcnModel {
  ArchSpec arch;
  std::vector<T> params;
  double input_scale = 1.0;  // applied to the raw speed patch before the first convolution

  // Glorot-uniform weights, zero biases, forget-gate bias +1.
  static LrcnModel initialize(const ArchSpec& arch, std::uint64_t seed);
  static LrcnModel zeros(const ArchSpec& arch);

  template <typename U>
  [[nodiscard]] LrcnModel<U> cast() const {
    LrcnModel<U> out;
    out.arch = arch;
    out.input_scale = input_scale;
    out.params.assign(params.begin(), params.end());
    return out;
  }

  [[nodiscard]] std::uint64_t fingerprint() const;
  void validate() const;
};

enum class Mode { train, infer };

template <typename T>
struct ConvRecord {
  RowMatrix<T> input;   // in_channels x (rows * n)
  RowMatrix<T> act;     // tanh output, out_channels x (rows * n)
  RowMatrix<T> mask;    // dropout multipliers (0 or 1/(1-p)); empty when inactive
};

template <typename T>
struct LstmRecord {
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> input;  // in_dim x n
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> gates;  // 4*units x n, post-nonlinearity (i, f, g, o)
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> cell;   // units x n
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> hidden; // units x n
};

template <typename T>
struct ForwardTape {
  std::uint64_t model_fingerprint = 0;
  int n = 0;
  std::vector<ConvRecord<T>> conv;
  std::vector<LstmRecord<T>> lstm;
  Vector<T> dense_input;
};

template <typename T>
struct ForwardResult {
  Vector<T> y;
  ForwardTape<T> tape;
};

// Layer primitives, exposed for testing and for the streaming predictor.
template <typename T>
RowMatrix<T> conv1d_pre(std::span<const T> weights, std::span<const T> bias,
                        const RowMatrix<T>& input, int rows, int n, int out_channels, int kernel);
template <typename T>
RowMatrix<T> conv1d_forward(std::span<const T> weights, std::span<const T> bias,
                            const RowMatrix<T>& input, int rows, int n, int out_channels,
                            int kernel);
template <typename T>
RowMatrix<T> avg_pool(const RowMatrix<T>& input, int rows, int n, int pool);

// sequence: in_dim x n (one column per step); zero initial state.
template <typename T>
LstmRecord<T> lstm_forward(std::span<const T> layer_params, int in_dim, int units,
                           const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& sequence);

// patch: input_d x input_n speed values.
template <typename T>
ForwardResult<T> forward(const LrcnModel<T>& model, const Eigen::Ref<const Eigen::MatrixXd>& patch,
                         Mode mode, std::uint64_t dropout_seed = 0);

// Adds dL/dparams to grad (same layout as model.params).
template <typename T>
void backward_accumulate(const LrcnModel<T>& model, const ForwardTape<T>& tape,
                         std::span<const T> dl_dy, std::span<T> grad);

template <typename T>
std::vector<T> backward(const LrcnModel<T>& model, const ForwardTape<T>& tape,
                        std::span<const T> dl_dy);

// Inference split into per-column convolution features and the recurrent head.
// Convolutions act along depth only, so a column's features do not depend on its
// neighbours in time and can be cached across overlapping patches.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> conv_features(
    const LrcnModel<T>& model, const Eigen::Ref<const Eigen::MatrixXd>& columns);
template <typename T>
Vector<T> recurrent_head(const LrcnModel<T>& model,
                         const Eigen::Ref<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>& features);

// Stateful inference: LSTM state is carried from column to column instead of being
// reset for every patch.
template <typename T>
class StreamingPredictor {
 public:
  explicit StreamingPredictor(const LrcnModel<T>& model);
  Vector<T> push(const Eigen::Ref<const Eigen::VectorXd>& column);
  void reset();

 private:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  const LrcnModel<T>* model_;  // must outlive the predictor
  ParamLayout layout_;
  std::vector<Mat> input_weights_;
  std::vector<Mat> recurrent_weights_;
  std::vector<Vector<T>> biases_;
  std::vector<Vector<T>> h_;
  std::vector<Vector<T>> c_;
};

}  // namespace ocmr::lrcn

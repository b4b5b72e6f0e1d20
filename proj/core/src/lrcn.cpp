#include "ocmr/lrcn.hpp"

#include <cmath>
#include <random>

namespace ocmr::lrcn {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

std::uint64_t fnv1a(std::uint64_t hash, const void* data, std::size_t size) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

// Output rows [s0, s1) that read input row s + delta under 'same' zero padding.
struct TapRange {
  int s0;
  int s1;
  int delta;
};

TapRange tap_range(int tap, int kernel, int rows) {
  const int delta = tap - kernel / 2;
  return {std::max(0, -delta), std::min(rows, rows - delta), delta};
}

// Rows of each im2col chunk: about kChunkCols columns per GEMM.
constexpr Eigen::Index kChunkCols = 2048;
constexpr int kThinLayer = 64;  // in_channels * kernel at or below this use im2col for dW

int chunk_rows(int n) { return std::max(1, static_cast<int>(kChunkCols / std::max(1, n))); }

// col row i*kernel + tap holds input channel i shifted by tap - kernel/2 rows,
// zero where the shift leaves [0, rows). Output rows [r0, r1).
template <typename T>
void im2col(const RowMatrix<T>& input, int rows, int n, int kernel, int r0, int r1,
            RowMatrix<T>& col) {
  const auto in_channels = input.rows();
  const Eigen::Index width = static_cast<Eigen::Index>(r1 - r0) * n;
  col.resize(in_channels * kernel, width);
  for (Eigen::Index i = 0; i < in_channels; ++i)
    for (int tap = 0; tap < kernel; ++tap) {
      auto dst = col.row(i * kernel + tap);
      const int delta = tap - kernel / 2;
      for (int s = r0; s < r1; ++s) {
        auto seg = dst.segment(static_cast<Eigen::Index>(s - r0) * n, n);
        const int src = s + delta;
        if (src < 0 || src >= rows)
          seg.setZero();
        else
          seg = input.row(i).segment(static_cast<Eigen::Index>(src) * n, n);
      }
    }
}

// Adds the im2col-shaped gradient back onto the input rows it was read from.
template <typename T>
void col2im_add(const RowMatrix<T>& dcol, int rows, int n, int kernel, int r0, int r1,
                RowMatrix<T>& d_input) {
  for (Eigen::Index i = 0; i < d_input.rows(); ++i)
    for (int tap = 0; tap < kernel; ++tap) {
      const auto src = dcol.row(i * kernel + tap);
      const int delta = tap - kernel / 2;
      for (int s = r0; s < r1; ++s) {
        const int dst = s + delta;
        if (dst < 0 || dst >= rows) continue;
        d_input.row(i).segment(static_cast<Eigen::Index>(dst) * n, n) +=
            src.segment(static_cast<Eigen::Index>(s - r0) * n, n);
      }
    }
}

template <typename T>
struct LstmMats {
  Mat<T> wx;  // 4u x in
  Mat<T> wh;  // 4u x u
  Vector<T> b;
};

template <typename T>
LstmMats<T> gather_lstm(std::span<const T> p, int in_dim, int units) {
  const std::size_t gate = static_cast<std::size_t>(units) * (in_dim + units) + units;
  LstmMats<T> m{Mat<T>(4 * units, in_dim), Mat<T>(4 * units, units), Vector<T>(4 * units)};
  for (int g = 0; g < 4; ++g) {
    const std::size_t base = g * gate;
    const std::size_t rec = base + static_cast<std::size_t>(units) * in_dim;
    const std::size_t bias = rec + static_cast<std::size_t>(units) * units;
    for (int j = 0; j < units; ++j) {
      for (int i = 0; i < in_dim; ++i) m.wx(g * units + j, i) = p[base + j * in_dim + i];
      for (int k = 0; k < units; ++k) m.wh(g * units + j, k) = p[rec + j * units + k];
      m.b(g * units + j) = p[bias + j];
    }
  }
  return m;
}

template <typename T>
void scatter_lstm_grad(const Mat<T>& dwx, const Mat<T>& dwh, const Vector<T>& db, std::span<T> g,
                       int in_dim, int units) {
  const std::size_t gate = static_cast<std::size_t>(units) * (in_dim + units) + units;
  for (int q = 0; q < 4; ++q) {
    const std::size_t base = q * gate;
    const std::size_t rec = base + static_cast<std::size_t>(units) * in_dim;
    const std::size_t bias = rec + static_cast<std::size_t>(units) * units;
    for (int j = 0; j < units; ++j) {
      for (int i = 0; i < in_dim; ++i) g[base + j * in_dim + i] += dwx(q * units + j, i);
      for (int k = 0; k < units; ++k) g[rec + j * units + k] += dwh(q * units + j, k);
      g[bias + j] += db(q * units + j);
    }
  }
}

template <typename T>
LstmRecord<T> lstm_run(const LstmMats<T>& m, int units, const Mat<T>& sequence) {
  const auto n = sequence.cols();
  LstmRecord<T> rec;
  rec.input = sequence;
  rec.gates.resize(4 * units, n);
  rec.cell.resize(units, n);
  rec.hidden.resize(units, n);
  const Mat<T> pre = (m.wx * sequence).colwise() + m.b;
  Vector<T> h = Vector<T>::Zero(units);
  Vector<T> c = Vector<T>::Zero(units);
  Vector<T> a(4 * units);
  for (Eigen::Index t = 0; t < n; ++t) {
    a.noalias() = pre.col(t) + m.wh * h;
    for (int j = 0; j < units; ++j) {
      const T ig = sigmoid(a(j));
      const T fg = sigmoid(a(units + j));
      const T gg = std::tanh(a(2 * units + j));
      const T og = sigmoid(a(3 * units + j));
      c(j) = fg * c(j) + ig * gg;
      h(j) = og * std::tanh(c(j));
      rec.gates(j, t) = ig;
      rec.gates(units + j, t) = fg;
      rec.gates(2 * units + j, t) = gg;
      rec.gates(3 * units + j, t) = og;
    }
    rec.cell.col(t) = c;
    rec.hidden.col(t) = h;
  }
  return rec;
}

// Inverted dropout multipliers from a counter-based hash (splitmix64 of the
// element-pair index), two Bernoulli draws per 64-bit value. Counter-based so
// the loop vectorises; the mask is a pure function of (seed, position).
template <typename T>
RowMatrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::uint64_t seed) {
  RowMatrix<T> mask(rows, cols);
  const T keep_scale = T(1.0 / (1.0 - rate));
  const auto threshold = static_cast<std::uint64_t>(std::ceil(rate * 0x1.0p32));
  T* out = mask.data();
  const Eigen::Index size = mask.size();
  const Eigen::Index pairs = size / 2;
  for (Eigen::Index p = 0; p < pairs; ++p) {
    std::uint64_t z = seed + static_cast<std::uint64_t>(p + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    out[2 * p] = (z & 0xffffffffULL) >= threshold ? keep_scale : T(0);
    out[2 * p + 1] = (z >> 32) >= threshold ? keep_scale : T(0);
  }
  if (size % 2 != 0) {
    const std::uint64_t z = mix_seed(seed, static_cast<std::uint64_t>(pairs));
    out[size - 1] = (z & 0xffffffffULL) >= threshold ? keep_scale : T(0);
  }
  return mask;
}

template <typename T>
void conv1d_backward(std::span<const T> weights, const RowMatrix<T>& input, const RowMatrix<T>& dz,
                     int rows, int n, int out_channels, int kernel, std::span<T> grad_w,
                     std::span<T> grad_b, RowMatrix<T>* d_input) {
  const auto in_channels = static_cast<int>(input.rows());
  if (d_input) d_input->setZero(in_channels, static_cast<Eigen::Index>(rows) * n);
  if (in_channels * kernel <= kThinLayer) {
    // Thin layers: one pass over dz through im2col chunks beats kernel passes.
    Eigen::Map<RowMatrix<T>> gw(grad_w.data(), out_channels, static_cast<Eigen::Index>(in_channels) * kernel);
    RowMatrix<T> col;
    const int step = chunk_rows(n);
    for (int r0 = 0; r0 < rows; r0 += step) {
      const int r1 = std::min(rows, r0 + step);
      im2col(input, rows, n, kernel, r0, r1, col);
      gw.noalias() += dz.middleCols(static_cast<Eigen::Index>(r0) * n, col.cols()) * col.transpose();
    }
  }
  RowMatrix<T> dw(out_channels, in_channels);
  for (int tap = 0; in_channels * kernel > kThinLayer && tap < kernel; ++tap) {
    const auto r = tap_range(tap, kernel, rows);
    if (r.s1 <= r.s0) continue;
    const Eigen::Index len = static_cast<Eigen::Index>(r.s1 - r.s0) * n;
    const Eigen::Index out0 = static_cast<Eigen::Index>(r.s0) * n;
    const Eigen::Index in0 = static_cast<Eigen::Index>(r.s0 + r.delta) * n;
    dw.noalias() = dz.middleCols(out0, len) * input.middleCols(in0, len).transpose();
    for (int o = 0; o < out_channels; ++o)
      for (int i = 0; i < in_channels; ++i)
        grad_w[(static_cast<std::size_t>(o) * in_channels + i) * kernel + tap] += dw(o, i);
  }
  if (d_input) {
    // Input gradient by chunks: dcol = W^T dz, then scattered back to the rows it came from.
    const Eigen::Map<const RowMatrix<T>> w(weights.data(), out_channels,
                                           static_cast<Eigen::Index>(in_channels) * kernel);
    RowMatrix<T> dcol;
    const int step = chunk_rows(n);
    for (int r0 = 0; r0 < rows; r0 += step) {
      const int r1 = std::min(rows, r0 + step);
      dcol.noalias() = w.transpose() * dz.middleCols(static_cast<Eigen::Index>(r0) * n,
                                                     static_cast<Eigen::Index>(r1 - r0) * n);
      col2im_add(dcol, rows, n, kernel, r0, r1, *d_input);
    }
  }
  const Vector<T> db = dz.rowwise().sum();
  for (int o = 0; o < out_channels; ++o) grad_b[static_cast<std::size_t>(o)] += db(o);
}

template <typename T>
std::span<const T> slice(const std::vector<T>& v, std::size_t offset, std::size_t count) {
  return std::span<const T>(v).subspan(offset, count);
}

std::size_t conv_weight_count(const ConvSlot& slot) {
  return static_cast<std::size_t>(slot.out_channels) * slot.in_channels * slot.kernel;
}

// Convolution stack on cur (1 x input_d*n); returns the F x n feature sequence.
template <typename T>
Mat<T> run_conv_stack(const LrcnModel<T>& model, const ParamLayout& layout, RowMatrix<T> cur, int n,
                      Mode mode, std::uint64_t dropout_seed, ForwardTape<T>* tape) {
  const auto& arch = model.arch;
  const bool drop = mode == Mode::train && arch.dropout_rate > 0.0;
  const auto n_conv = layout.conv.size();
  for (std::size_t l = 0; l < n_conv; ++l) {
    const auto& slot = layout.conv[l];
    RowMatrix<T> act = conv1d_forward<T>(slice(model.params, slot.weights, conv_weight_count(slot)),
                                         slice(model.params, slot.bias, slot.out_channels), cur,
                                         slot.rows, n, slot.out_channels, slot.kernel);
    RowMatrix<T> mask;
    if (drop)
      mask = dropout_mask<T>(act.rows(), act.cols(), arch.dropout_rate, mix_seed(dropout_seed, l));
    RowMatrix<T> next;
    if (l + 1 < n_conv) {
      next = drop ? avg_pool<T>(act.cwiseProduct(mask), slot.rows, n, arch.pool_size)
                  : avg_pool<T>(act, slot.rows, n, arch.pool_size);
    } else {
      next = drop ? RowMatrix<T>(act.cwiseProduct(mask)) : act;
    }
    if (tape) tape->conv.push_back({std::move(cur), std::move(act), std::move(mask)});
    cur = std::move(next);
  }
  return Eigen::Map<const RowMatrix<T>>(cur.data(), arch.feature_dim(), n);
}

template <typename T>
Vector<T> run_head(const LrcnModel<T>& model, const ParamLayout& layout, Mat<T> seq,
                   ForwardTape<T>* tape) {
  for (const auto& slot : layout.lstm) {
    const auto mats = gather_lstm<T>(slice(model.params, slot.offset, 4 * slot.gate_size()),
                                     slot.in_dim, slot.units);
    LstmRecord<T> rec = lstm_run(mats, slot.units, seq);
    seq = rec.hidden;
    if (tape) tape->lstm.push_back(std::move(rec));
  }
  const Vector<T> x = seq.col(seq.cols() - 1);
  const auto& d = layout.dense;
  const Eigen::Map<const RowMatrix<T>> w(model.params.data() + d.weights, d.out_dim, d.in_dim);
  const Eigen::Map<const Vector<T>> b(model.params.data() + d.bias, d.out_dim);
  if (tape) tape->dense_input = x;
  return w * x + b;
}

template <typename T>
RowMatrix<T> to_input_row(const Eigen::Ref<const Eigen::MatrixXd>& patch, double scale) {
  const auto d = patch.rows();
  const auto n = patch.cols();
  RowMatrix<T> row(1, d * n);
  for (Eigen::Index s = 0; s < d; ++s)
    for (Eigen::Index t = 0; t < n; ++t) row(0, s * n + t) = static_cast<T>(scale * patch(s, t));
  return row;
}

}  // namespace

void ArchSpec::validate() const {
  require(!conv_channels.empty(), ErrorCode::invalid_argument, "at least one convolution required");
  for (int c : conv_channels)
    require(c >= 1, ErrorCode::invalid_argument, "convolution channels must be >= 1");
  require(conv_channels.back() == 1, ErrorCode::invalid_argument,
          "the last convolution must have one output channel");
  require(kernel_size >= 1 && kernel_size % 2 == 1, ErrorCode::invalid_argument,
          "kernel size must be odd for 'same' padding");
  require(pool_size >= 1, ErrorCode::invalid_argument, "pool size must be >= 1");
  for (int u : lstm_units) require(u >= 1, ErrorCode::invalid_argument, "LSTM units must be >= 1");
  require(output_dim >= 1, ErrorCode::invalid_argument, "output_dim must be >= 1");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorCode::invalid_argument,
          "dropout rate must lie in [0, 1)");
  require(input_d >= 1 && input_n >= 1, ErrorCode::invalid_argument, "input shape must be positive");
  int rows = input_d;
  for (std::size_t l = 0; l + 1 < conv_channels.size(); ++l) {
    require(rows % pool_size == 0, ErrorCode::invalid_argument,
            "input_d " + std::to_string(input_d) + " not divisible by the pooling chain");
    rows /= pool_size;
  }
}

int ArchSpec::feature_dim() const {
  int rows = input_d;
  for (std::size_t l = 0; l + 1 < conv_channels.size(); ++l) rows /= pool_size;
  return rows;
}

int ArchSpec::dense_input_dim() const {
  return lstm_units.empty() ? feature_dim() : lstm_units.back();
}

ParamLayout ParamLayout::build(const ArchSpec& arch) {
  arch.validate();
  ParamLayout layout;
  std::size_t offset = 0;
  int in = 1;
  int rows = arch.input_d;
  for (std::size_t l = 0; l < arch.conv_channels.size(); ++l) {
    ConvSlot slot;
    slot.in_channels = in;
    slot.out_channels = arch.conv_channels[l];
    slot.kernel = arch.kernel_size;
    slot.rows = rows;
    slot.weights = offset;
    offset += conv_weight_count(slot);
    slot.bias = offset;
    offset += static_cast<std::size_t>(slot.out_channels);
    layout.conv.push_back(slot);
    in = slot.out_channels;
    if (l + 1 < arch.conv_channels.size()) rows /= arch.pool_size;
  }
  int feat = arch.feature_dim();
  for (int units : arch.lstm_units) {
    LstmSlot slot{feat, units, offset};
    offset += 4 * slot.gate_size();
    layout.lstm.push_back(slot);
    feat = units;
  }
  layout.dense.in_dim = arch.dense_input_dim();
  layout.dense.out_dim = arch.output_dim;
  layout.dense.weights = offset;
  offset += static_cast<std::size_t>(layout.dense.in_dim) * layout.dense.out_dim;
  layout.dense.bias = offset;
  offset += static_cast<std::size_t>(layout.dense.out_dim);
  layout.total = offset;
  return layout;
}

std::size_t param_count(const ArchSpec& arch) {
  arch.validate();
  std::size_t count = 0;
  std::size_t in = 1;
  for (int out : arch.conv_channels) {
    const auto o = static_cast<std::size_t>(out);
    count += o * in * static_cast<std::size_t>(arch.kernel_size) + o;
    in = o;
  }
  auto feat = static_cast<std::size_t>(arch.feature_dim());
  for (int units : arch.lstm_units) {
    const auto u = static_cast<std::size_t>(units);
    count += 4 * (u * (feat + u) + u);
    feat = u;
  }
  const auto out = static_cast<std::size_t>(arch.output_dim);
  count += out * feat + out;
  return count;
}

template <typename T>
LrcnModel<T> LrcnModel<T>::zeros(const ArchSpec& arch) {
  LrcnModel model;
  model.arch = arch;
  model.params.assign(param_count(arch), T(0));
  return model;
}

template <typename T>
LrcnModel<T> LrcnModel<T>::initialize(const ArchSpec& arch, std::uint64_t seed) {
  LrcnModel model = zeros(arch);
  const auto layout = ParamLayout::build(arch);
  std::mt19937_64 engine(mix_seed(seed, 0x1a7c));
  auto fill = [&](std::size_t offset, std::size_t count, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < count; ++i)
      model.params[offset + i] = static_cast<T>(limit * (2.0 * uniform01(engine) - 1.0));
  };
  for (const auto& c : layout.conv)
    fill(c.weights, conv_weight_count(c), c.in_channels * c.kernel, c.out_channels * c.kernel);
  for (const auto& s : layout.lstm) {
    for (int g = 0; g < 4; ++g) {
      const std::size_t base = s.offset + g * s.gate_size();
      const std::size_t in_w = static_cast<std::size_t>(s.units) * s.in_dim;
      const std::size_t rec_w = static_cast<std::size_t>(s.units) * s.units;
      fill(base, in_w, s.in_dim, s.units);
      fill(base + in_w, rec_w, s.units, s.units);
      if (g == 1)
        for (int j = 0; j < s.units; ++j) model.params[base + in_w + rec_w + j] = T(1);
    }
  }
  fill(layout.dense.weights, static_cast<std::size_t>(layout.dense.in_dim) * layout.dense.out_dim,
       layout.dense.in_dim, layout.dense.out_dim);
  return model;
}

template <typename T>
std::uint64_t LrcnModel<T>::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a(h, params.data(), params.size() * sizeof(T));
  h = fnv1a(h, &input_scale, sizeof input_scale);
  const int dims[] = {arch.kernel_size, arch.pool_size, arch.output_dim, arch.input_d, arch.input_n};
  h = fnv1a(h, dims, sizeof dims);
  h = fnv1a(h, arch.conv_channels.data(), arch.conv_channels.size() * sizeof(int));
  h = fnv1a(h, arch.lstm_units.data(), arch.lstm_units.size() * sizeof(int));
  return h;
}

template <typename T>
void LrcnModel<T>::validate() const {
  require(params.size() == param_count(arch), ErrorCode::shape_mismatch,
          "parameter vector does not match the architecture");
  require(std::isfinite(input_scale), ErrorCode::non_finite, "input scale is not finite");
}

template <typename T>
RowMatrix<T> conv1d_pre(std::span<const T> weights, std::span<const T> bias,
                        const RowMatrix<T>& input, int rows, int n, int out_channels, int kernel) {
  const auto in_channels = static_cast<int>(input.rows());
  require(input.cols() == static_cast<Eigen::Index>(rows) * n, ErrorCode::shape_mismatch,
          "convolution input has the wrong number of columns");
  require(weights.size() == static_cast<std::size_t>(out_channels) * in_channels * kernel &&
              bias.size() == static_cast<std::size_t>(out_channels),
          ErrorCode::shape_mismatch, "convolution parameters do not match the input channels");
  const Eigen::Map<const RowMatrix<T>> w(weights.data(), out_channels,
                                         static_cast<Eigen::Index>(in_channels) * kernel);
  const Eigen::Map<const Vector<T>> b(bias.data(), out_channels);
  RowMatrix<T> out(out_channels, input.cols());
  RowMatrix<T> col;
  const int step = chunk_rows(n);
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    im2col(input, rows, n, kernel, r0, r1, col);
    auto chunk = out.middleCols(static_cast<Eigen::Index>(r0) * n, col.cols());
    chunk.noalias() = w * col;
    chunk.colwise() += b;
  }
  return out;
}

template <typename T>
RowMatrix<T> conv1d_forward(std::span<const T> weights, std::span<const T> bias,
                            const RowMatrix<T>& input, int rows, int n, int out_channels,
                            int kernel) {
  RowMatrix<T> out = conv1d_pre(weights, bias, input, rows, n, out_channels, kernel);
  out.array() = out.array().tanh();
  return out;
}

template <typename T>
RowMatrix<T> avg_pool(const RowMatrix<T>& input, int rows, int n, int pool) {
  require(pool >= 1 && rows % pool == 0, ErrorCode::invalid_argument,
          "pooling needs rows divisible by the pool size");
  require(input.cols() == static_cast<Eigen::Index>(rows) * n, ErrorCode::shape_mismatch,
          "pooling input has the wrong number of columns");
  const int out_rows = rows / pool;
  RowMatrix<T> out = RowMatrix<T>::Zero(input.rows(), static_cast<Eigen::Index>(out_rows) * n);
  const T inv = T(1) / T(pool);
  for (int s = 0; s < out_rows; ++s) {
    auto block = out.middleCols(static_cast<Eigen::Index>(s) * n, n);
    for (int j = 0; j < pool; ++j)
      block += input.middleCols(static_cast<Eigen::Index>(s * pool + j) * n, n);
    block *= inv;
  }
  return out;
}

template <typename T>
LstmRecord<T> lstm_forward(std::span<const T> layer_params, int in_dim, int units,
                           const Mat<T>& sequence) {
  require(sequence.rows() == in_dim, ErrorCode::shape_mismatch, "LSTM input dimension mismatch");
  require(layer_params.size() == 4 * (static_cast<std::size_t>(units) * (in_dim + units) + units),
          ErrorCode::shape_mismatch, "LSTM parameter block has the wrong size");
  require(sequence.allFinite(), ErrorCode::non_finite, "LSTM input is not finite");
  for (T v : layer_params)
    require(std::isfinite(v), ErrorCode::non_finite, "LSTM parameter is not finite");
  return lstm_run(gather_lstm(layer_params, in_dim, units), units, sequence);
}

template <typename T>
ForwardResult<T> forward(const LrcnModel<T>& model, const Eigen::Ref<const Eigen::MatrixXd>& patch,
                         Mode mode, std::uint64_t dropout_seed) {
  model.validate();
  const auto& arch = model.arch;
  require(patch.rows() == arch.input_d && patch.cols() == arch.input_n, ErrorCode::shape_mismatch,
          "patch is " + std::to_string(patch.rows()) + "x" + std::to_string(patch.cols()) +
              ", architecture expects " + std::to_string(arch.input_d) + "x" +
              std::to_string(arch.input_n));
  require(patch.allFinite(), ErrorCode::non_finite, "patch contains non-finite values");
  const auto layout = ParamLayout::build(arch);
  ForwardResult<T> result;
  result.tape.model_fingerprint = model.fingerprint();
  result.tape.n = arch.input_n;
  Mat<T> features = run_conv_stack<T>(model, layout, to_input_row<T>(patch, model.input_scale),
                                      arch.input_n, mode, dropout_seed, &result.tape);
  result.y = run_head<T>(model, layout, std::move(features), &result.tape);
  return result;
}

template <typename T>
void backward_accumulate(const LrcnModel<T>& model, const ForwardTape<T>& tape,
                         std::span<const T> dl_dy, std::span<T> grad) {
  const auto& arch = model.arch;
  const auto layout = ParamLayout::build(arch);
  require(tape.model_fingerprint == model.fingerprint() &&
              tape.conv.size() == layout.conv.size() && tape.lstm.size() == layout.lstm.size(),
          ErrorCode::stale_tape, "tape was not produced by this model");
  require(dl_dy.size() == static_cast<std::size_t>(arch.output_dim), ErrorCode::shape_mismatch,
          "dL/dy has the wrong length");
  require(grad.size() == model.params.size(), ErrorCode::shape_mismatch,
          "gradient buffer has the wrong length");
  const int n = tape.n;

  const auto& dense = layout.dense;
  const Eigen::Map<const Vector<T>> dy(dl_dy.data(), dense.out_dim);
  const Eigen::Map<const RowMatrix<T>> w_dense(model.params.data() + dense.weights, dense.out_dim,
                                               dense.in_dim);
  Eigen::Map<RowMatrix<T>> gw_dense(grad.data() + dense.weights, dense.out_dim, dense.in_dim);
  Eigen::Map<Vector<T>> gb_dense(grad.data() + dense.bias, dense.out_dim);
  gw_dense.noalias() += dy * tape.dense_input.transpose();
  gb_dense += dy;

  // Only the last step feeds the readout.
  Mat<T> d_seq = Mat<T>::Zero(dense.in_dim, n);
  d_seq.col(n - 1) = w_dense.transpose() * dy;

  for (std::size_t li = layout.lstm.size(); li-- > 0;) {
    const auto& slot = layout.lstm[li];
    const auto& rec = tape.lstm[li];
    const int u = slot.units;
    const auto mats = gather_lstm<T>(slice(model.params, slot.offset, 4 * slot.gate_size()),
                                     slot.in_dim, u);
    Mat<T> d_pre(4 * u, n);
    Vector<T> dh_next = Vector<T>::Zero(u);
    Vector<T> dc_next = Vector<T>::Zero(u);
    for (int t = n - 1; t >= 0; --t) {
      for (int j = 0; j < u; ++j) {
        const T ig = rec.gates(j, t);
        const T fg = rec.gates(u + j, t);
        const T gg = rec.gates(2 * u + j, t);
        const T og = rec.gates(3 * u + j, t);
        const T c_prev = t > 0 ? rec.cell(j, t - 1) : T(0);
        const T tc = std::tanh(rec.cell(j, t));
        const T dh = d_seq(j, t) + dh_next(j);
        const T dc = dc_next(j) + dh * og * (T(1) - tc * tc);
        d_pre(j, t) = dc * gg * ig * (T(1) - ig);
        d_pre(u + j, t) = dc * c_prev * fg * (T(1) - fg);
        d_pre(2 * u + j, t) = dc * ig * (T(1) - gg * gg);
        d_pre(3 * u + j, t) = dh * tc * og * (T(1) - og);
        dc_next(j) = dc * fg;
      }
      dh_next.noalias() = mats.wh.transpose() * d_pre.col(t);
    }
    const Mat<T> dwx = d_pre * rec.input.transpose();
    Mat<T> dwh = Mat<T>::Zero(4 * u, u);
    if (n > 1) dwh.noalias() = d_pre.rightCols(n - 1) * rec.hidden.leftCols(n - 1).transpose();
    const Vector<T> db = d_pre.rowwise().sum();
    scatter_lstm_grad<T>(dwx, dwh, db, grad.subspan(slot.offset, 4 * slot.gate_size()),
                         slot.in_dim, u);
    d_seq = mats.wx.transpose() * d_pre;
  }

  const int f = arch.feature_dim();
  RowMatrix<T> d_cur(1, static_cast<Eigen::Index>(f) * n);
  for (int s = 0; s < f; ++s)
    for (int t = 0; t < n; ++t) d_cur(0, static_cast<Eigen::Index>(s) * n + t) = d_seq(s, t);

  for (std::size_t l = layout.conv.size(); l-- > 0;) {
    const auto& slot = layout.conv[l];
    const auto& rec = tape.conv[l];
    RowMatrix<T> dz;
    if (l + 1 < layout.conv.size()) {
      // Average pooling spreads each output gradient evenly over its window.
      dz.resize(slot.out_channels, static_cast<Eigen::Index>(slot.rows) * n);
      const T inv = T(1) / T(arch.pool_size);
      const int out_rows = slot.rows / arch.pool_size;
      for (int s = 0; s < out_rows; ++s)
        for (int j = 0; j < arch.pool_size; ++j)
          dz.middleCols(static_cast<Eigen::Index>(s * arch.pool_size + j) * n, n) =
              d_cur.middleCols(static_cast<Eigen::Index>(s) * n, n) * inv;
    } else {
      dz = std::move(d_cur);
    }
    if (rec.mask.size() > 0) dz.array() *= rec.mask.array();
    dz.array() *= T(1) - rec.act.array().square();

    const std::size_t wcount = conv_weight_count(slot);
    RowMatrix<T> d_input;
    conv1d_backward<T>(slice(model.params, slot.weights, wcount), rec.input, dz, slot.rows, n,
                       slot.out_channels, slot.kernel, grad.subspan(slot.weights, wcount),
                       grad.subspan(slot.bias, static_cast<std::size_t>(slot.out_channels)),
                       l > 0 ? &d_input : nullptr);
    d_cur = std::move(d_input);
  }
}

template <typename T>
std::vector<T> backward(const LrcnModel<T>& model, const ForwardTape<T>& tape,
                        std::span<const T> dl_dy) {
  std::vector<T> grad(model.params.size(), T(0));
  backward_accumulate<T>(model, tape, dl_dy, grad);
  return grad;
}

template <typename T>
Mat<T> conv_features(const LrcnModel<T>& model, const Eigen::Ref<const Eigen::MatrixXd>& columns) {
  model.validate();
  require(columns.rows() == model.arch.input_d, ErrorCode::shape_mismatch,
          "columns have the wrong depth");
  require(columns.allFinite(), ErrorCode::non_finite, "columns contain non-finite values");
  const auto layout = ParamLayout::build(model.arch);
  const auto m = static_cast<int>(columns.cols());
  return run_conv_stack<T>(model, layout, to_input_row<T>(columns, model.input_scale), m,
                           Mode::infer, 0, nullptr);
}

template <typename T>
Vector<T> recurrent_head(const LrcnModel<T>& model, const Eigen::Ref<const Mat<T>>& features) {
  model.validate();
  require(features.rows() == model.arch.feature_dim() && features.cols() >= 1,
          ErrorCode::shape_mismatch, "feature block has the wrong shape");
  const auto layout = ParamLayout::build(model.arch);
  return run_head<T>(model, layout, Mat<T>(features), nullptr);
}

template <typename T>
StreamingPredictor<T>::StreamingPredictor(const LrcnModel<T>& model)
    : model_(&model), layout_(ParamLayout::build(model.arch)) {
  model.validate();
  for (const auto& slot : layout_.lstm) {
    auto mats = gather_lstm<T>(slice(model.params, slot.offset, 4 * slot.gate_size()), slot.in_dim,
                               slot.units);
    input_weights_.push_back(std::move(mats.wx));
    recurrent_weights_.push_back(std::move(mats.wh));
    biases_.push_back(std::move(mats.b));
  }
  reset();
}

template <typename T>
void StreamingPredictor<T>::reset() {
  h_.clear();
  c_.clear();
  for (const auto& slot : layout_.lstm) {
    h_.push_back(Vector<T>::Zero(slot.units));
    c_.push_back(Vector<T>::Zero(slot.units));
  }
}

template <typename T>
Vector<T> StreamingPredictor<T>::push(const Eigen::Ref<const Eigen::VectorXd>& column) {
  require(column.size() == model_->arch.input_d, ErrorCode::shape_mismatch,
          "column has the wrong depth");
  Vector<T> x = conv_features<T>(*model_, column).col(0);
  for (std::size_t l = 0; l < layout_.lstm.size(); ++l) {
    const int u = layout_.lstm[l].units;
    const Vector<T> a = input_weights_[l] * x + recurrent_weights_[l] * h_[l] + biases_[l];
    for (int j = 0; j < u; ++j) {
      const T ig = sigmoid(a(j));
      const T fg = sigmoid(a(u + j));
      const T gg = std::tanh(a(2 * u + j));
      const T og = sigmoid(a(3 * u + j));
      c_[l](j) = fg * c_[l](j) + ig * gg;
      h_[l](j) = og * std::tanh(c_[l](j));
    }
    x = h_[l];
  }
  const auto& d = layout_.dense;
  const Eigen::Map<const RowMatrix<T>> w(model_->params.data() + d.weights, d.out_dim, d.in_dim);
  const Eigen::Map<const Vector<T>> b(model_->params.data() + d.bias, d.out_dim);
  return w * x + b;
}

#define OCMR_LRCN_INSTANTIATE(T)                                                                   \
  template struct LrcnModel<T>;                                                                    \
  template RowMatrix<T> conv1d_pre<T>(std::span<const T>, std::span<const T>, const RowMatrix<T>&, \
                                      int, int, int, int);                                         \
  template RowMatrix<T> conv1d_forward<T>(std::span<const T>, std::span<const T>,                  \
                                          const RowMatrix<T>&, int, int, int, int);                \
  template RowMatrix<T> avg_pool<T>(const RowMatrix<T>&, int, int, int);                           \
  template LstmRecord<T> lstm_forward<T>(std::span<const T>, int, int, const Mat<T>&);             \
  template ForwardResult<T> forward<T>(const LrcnModel<T>&,                                        \
                                       const Eigen::Ref<const Eigen::MatrixXd>&, Mode,             \
                                       std::uint64_t);                                             \
  template void backward_accumulate<T>(const LrcnModel<T>&, const ForwardTape<T>&,                 \
                                       std::span<const T>, std::span<T>);                          \
  template std::vector<T> backward<T>(const LrcnModel<T>&, const ForwardTape<T>&,                  \
                                      std::span<const T>);                                         \
  template Mat<T> conv_features<T>(const LrcnModel<T>&, const Eigen::Ref<const Eigen::MatrixXd>&); \
  template Vector<T> recurrent_head<T>(const LrcnModel<T>&, const Eigen::Ref<const Mat<T>>&);      \
  template class StreamingPredictor<T>;

OCMR_LRCN_INSTANTIATE(float)
OCMR_LRCN_INSTANTIATE(double)

#undef OCMR_LRCN_INSTANTIATE

}  // namespace ocmr::lrcn

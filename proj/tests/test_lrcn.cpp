#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "ocmr/lrcn.hpp"

using namespace ocmr;
using namespace ocmr::lrcn;

namespace {

std::vector<double> randn(std::size_t count, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(count);
  for (auto& x : v) x = g(rng);
  return v;
}

ArchSpec small_arch() {
  ArchSpec a;
  a.input_d = 16;
  a.input_n = 6;
  a.conv_channels = {3, 2, 1};
  a.kernel_size = 3;
  a.lstm_units = {4, 3};
  a.output_dim = 2;
  a.dropout_rate = 0.2;
  return a;
}

Eigen::MatrixXd random_patch(int d, int n, std::uint64_t seed) {
  const auto v = randn(static_cast<std::size_t>(d) * n, seed);
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), d, n);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Conv, MatchesBruteForce) {
  const int in_ch = 3, rows = 8, n = 5, out_ch = 2, k = 3;
  const auto w = randn(static_cast<std::size_t>(out_ch) * in_ch * k, 1);
  const auto b = randn(out_ch, 2);
  const auto xv = randn(static_cast<std::size_t>(in_ch) * rows * n, 3);
  RowMatrix<double> x = Eigen::Map<const RowMatrix<double>>(xv.data(), in_ch, rows * n);
  const auto out = conv1d_pre<double>(w, b, x, rows, n, out_ch, k);
  for (int o = 0; o < out_ch; ++o)
    for (int s = 0; s < rows; ++s)
      for (int t = 0; t < n; ++t) {
        double acc = b[o];
        for (int i = 0; i < in_ch; ++i)
          for (int tap = 0; tap < k; ++tap) {
            const int src = s + tap - k / 2;
            if (src < 0 || src >= rows) continue;
            acc += w[(o * in_ch + i) * k + tap] * x(i, src * n + t);
          }
        EXPECT_NEAR(out(o, s * n + t), acc, 1e-12);
      }
  const auto act = conv1d_forward<double>(w, b, x, rows, n, out_ch, k);
  EXPECT_LT((act.array() - out.array().tanh()).abs().maxCoeff(), 1e-15);
}

TEST(Conv, IdentityAndConstantInterior) {
  const int rows = 10, n = 3;
  RowMatrix<double> x(1, rows * n);
  for (int i = 0; i < rows * n; ++i) x(0, i) = 0.1 * i - 1.0;
  const std::vector<double> ident{0.0, 1.0, 0.0};
  const std::vector<double> zero_b{0.0};
  EXPECT_EQ(conv1d_pre<double>(ident, zero_b, x, rows, n, 1, 3), x);

  RowMatrix<double> c = RowMatrix<double>::Constant(1, rows * n, 0.5);
  const std::vector<double> w{0.2, 0.3, 0.4};
  const std::vector<double> b{0.1};
  const auto out = conv1d_pre<double>(w, b, c, rows, n, 1, 3);
  for (int s = 1; s + 1 < rows; ++s) EXPECT_NEAR(out(0, s * n), 0.9 * 0.5 + 0.1, 1e-15);
  EXPECT_NEAR(out(0, 0), 0.7 * 0.5 + 0.1, 1e-15);
}

TEST(Pool, AveragesPairs) {
  RowMatrix<double> x(1, 4);
  x << 1, 3, 5, 7;
  const auto out = avg_pool<double>(x, 4, 1, 2);
  ASSERT_EQ(out.cols(), 2);
  EXPECT_EQ(out(0, 0), 2.0);
  EXPECT_EQ(out(0, 1), 6.0);
  RowMatrix<double> odd(1, 3);
  odd << 1, 2, 3;
  EXPECT_THROW(avg_pool<double>(odd, 3, 1, 2), Error);

  const auto v = randn(2 * 12 * 5, 4);
  RowMatrix<double> m = Eigen::Map<const RowMatrix<double>>(v.data(), 2, 60);
  EXPECT_NEAR(avg_pool<double>(m, 12, 5, 3).mean(), m.mean(), 1e-14);
}

TEST(Lstm, MatchesScalarReference) {
  const int in_dim = 3, units = 2, n = 4;
  const std::size_t gate = static_cast<std::size_t>(units) * (in_dim + units) + units;
  const auto p = randn(4 * gate, 5, 0.5);
  Eigen::MatrixXd seq(in_dim, n);
  const auto sv = randn(in_dim * n, 6);
  for (int i = 0; i < in_dim; ++i)
    for (int t = 0; t < n; ++t) seq(i, t) = sv[static_cast<std::size_t>(i * n + t)];
  const auto rec = lstm_forward<double>(p, in_dim, units, seq);

  std::vector<double> h(units, 0.0), c(units, 0.0);
  for (int t = 0; t < n; ++t) {
    double pre[4][2];
    for (int g = 0; g < 4; ++g)
      for (int j = 0; j < units; ++j) {
        const std::size_t base = g * gate;
        double a = p[base + gate - units + j];
        for (int i = 0; i < in_dim; ++i) a += p[base + j * in_dim + i] * seq(i, t);
        for (int k = 0; k < units; ++k) a += p[base + units * in_dim + j * units + k] * h[k];
        pre[g][j] = a;
      }
    for (int j = 0; j < units; ++j) {
      c[j] = sig(pre[1][j]) * c[j] + sig(pre[0][j]) * std::tanh(pre[2][j]);
      h[j] = sig(pre[3][j]) * std::tanh(c[j]);
      EXPECT_NEAR(rec.hidden(j, t), h[j], 1e-12);
      EXPECT_NEAR(rec.cell(j, t), c[j], 1e-12);
    }
  }
}

TEST(Lstm, ZeroParamsGiveZeroState) {
  const std::vector<double> p(4 * (2 * (3 + 2) + 2), 0.0);
  const auto rec = lstm_forward<double>(p, 3, 2, Eigen::MatrixXd::Ones(3, 5));
  EXPECT_EQ(rec.hidden.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lstm, SaturatedGates) {
  // Input gate open, forget closed, candidate +1, output open: h = tanh(1) at every step.
  const int units = 1, in_dim = 1;
  std::vector<double> p(4 * 3, 0.0);
  p[2] = 50.0;   // input gate bias
  p[5] = -50.0;  // forget gate bias
  p[8] = 50.0;   // candidate bias
  p[11] = 50.0;  // output gate bias
  const auto rec = lstm_forward<double>(p, in_dim, units, Eigen::MatrixXd::Zero(1, 3));
  for (int t = 0; t < 3; ++t) EXPECT_NEAR(rec.hidden(0, t), std::tanh(1.0), 1e-12);
}

TEST(Model, ParamCounts) {
  EXPECT_EQ(param_count(ArchSpec{}), 28063u);
  ArchSpec minimal;
  minimal.input_d = 1;
  minimal.input_n = 1;
  minimal.conv_channels = {1};
  minimal.kernel_size = 1;
  minimal.lstm_units = {};
  minimal.output_dim = 1;
  EXPECT_EQ(param_count(minimal), 4u);
  for (const auto& arch : {ArchSpec{}, small_arch(), minimal}) {
    EXPECT_EQ(ParamLayout::build(arch).total, param_count(arch));
    EXPECT_EQ(LrcnModel<float>::initialize(arch, 1).params.size(), param_count(arch));
  }
}

TEST(Model, ArchValidation) {
  ArchSpec a = small_arch();
  a.kernel_size = 4;
  EXPECT_THROW(a.validate(), Error);
  a = small_arch();
  a.input_d = 15;
  EXPECT_THROW(a.validate(), Error);
  a = small_arch();
  a.conv_channels = {3, 2};
  EXPECT_THROW(a.validate(), Error);
}

TEST(Forward, ZeroParamsGiveZeroOutput) {
  const auto model = LrcnModel<double>::zeros(small_arch());
  const auto r = forward(model, random_patch(16, 6, 1), Mode::infer);
  EXPECT_EQ(r.y.size(), 2);
  EXPECT_EQ(r.y.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, DefaultShapeAndDeterminism) {
  const auto model = LrcnModel<float>::initialize(ArchSpec{}, 3);
  const Eigen::MatrixXd patch = random_patch(560, 300, 2);
  const auto a = forward(model, patch, Mode::infer);
  const auto b = forward(model, patch, Mode::infer);
  ASSERT_EQ(a.y.size(), 10);
  EXPECT_EQ(a.y, b.y);
  EXPECT_THROW(forward(model, random_patch(560, 299, 2), Mode::infer), Error);
  Eigen::MatrixXd bad = patch;
  bad(3, 4) = std::nan("");
  EXPECT_THROW(forward(model, bad, Mode::infer), Error);
}

TEST(Forward, ColumnOrderMatters) {
  const auto model = LrcnModel<double>::initialize(small_arch(), 4);
  const Eigen::MatrixXd patch = random_patch(16, 6, 3);
  Eigen::MatrixXd swapped = patch;
  swapped.col(0).swap(swapped.col(5));
  EXPECT_GT((forward(model, patch, Mode::infer).y - forward(model, swapped, Mode::infer).y).norm(), 1e-9);
}

TEST(Forward, DropoutSeeded) {
  const auto model = LrcnModel<double>::initialize(small_arch(), 5);
  const Eigen::MatrixXd patch = random_patch(16, 6, 4);
  const auto a = forward(model, patch, Mode::train, 11);
  const auto b = forward(model, patch, Mode::train, 11);
  const auto c = forward(model, patch, Mode::train, 12);
  EXPECT_EQ(a.y, b.y);
  EXPECT_NE(a.y, c.y);
  for (const auto& rec : a.tape.conv) {
    ASSERT_EQ(rec.mask.size(), rec.act.size());
    for (Eigen::Index i = 0; i < rec.mask.size(); ++i) {
      const double m = rec.mask.data()[i];
      EXPECT_TRUE(m == 0.0 || std::abs(m - 1.0 / 0.8) < 1e-12);
    }
  }
  EXPECT_EQ(forward(model, patch, Mode::infer).tape.conv[0].mask.size(), 0);
}

TEST(Forward, DropoutRateIsRespected) {
  ArchSpec arch = small_arch();
  arch.input_d = 512;
  arch.input_n = 40;
  arch.dropout_rate = 0.3;
  const auto model = LrcnModel<float>::initialize(arch, 6);
  const auto r = forward(model, random_patch(512, 40, 5), Mode::train, 7);
  const auto& mask = r.tape.conv[0].mask;
  double zeros = 0.0;
  for (Eigen::Index i = 0; i < mask.size(); ++i) zeros += mask.data()[i] == 0.0f ? 1.0 : 0.0;
  EXPECT_NEAR(zeros / static_cast<double>(mask.size()), 0.3, 0.01);
}

TEST(Backward, ZeroUpstreamGivesZeroGradient) {
  const auto model = LrcnModel<double>::initialize(small_arch(), 8);
  const auto r = forward(model, random_patch(16, 6, 6), Mode::train, 1);
  const std::vector<double> dy(2, 0.0);
  for (double g : backward<double>(model, r.tape, dy)) EXPECT_EQ(g, 0.0);
}

TEST(Backward, StaleTapeIsRejected) {
  auto model = LrcnModel<double>::initialize(small_arch(), 9);
  const auto r = forward(model, random_patch(16, 6, 7), Mode::infer);
  model.params[0] += 1.0;
  const std::vector<double> dy(2, 1.0);
  try {
    (void)backward<double>(model, r.tape, dy);
    FAIL() << "expected stale tape";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::stale_tape);
  }
}

TEST(Backward, DenseGradientIsInputTimesUpstream) {
  const auto model = LrcnModel<double>::initialize(small_arch(), 10);
  const auto r = forward(model, random_patch(16, 6, 8), Mode::infer);
  const std::vector<double> dy{0.5, -2.0};
  const auto g = backward<double>(model, r.tape, dy);
  const auto& d = ParamLayout::build(model.arch).dense;
  for (int o = 0; o < d.out_dim; ++o) {
    EXPECT_NEAR(g[d.bias + o], dy[static_cast<std::size_t>(o)], 1e-15);
    for (int i = 0; i < d.in_dim; ++i)
      EXPECT_NEAR(g[d.weights + o * d.in_dim + i], dy[static_cast<std::size_t>(o)] * r.tape.dense_input(i), 1e-15);
  }
}

TEST(Split, FeaturesAndHeadMatchForward) {
  const auto model = LrcnModel<float>::initialize(small_arch(), 12);
  const Eigen::MatrixXd patch = random_patch(16, 6, 9);
  const auto feats = conv_features<float>(model, patch);
  ASSERT_EQ(feats.rows(), small_arch().feature_dim());
  const auto y = recurrent_head<float>(model, feats);
  EXPECT_LT((y - forward(model, patch, Mode::infer).y).cwiseAbs().maxCoeff(), 1e-6f);
  // Features of a column do not depend on its neighbours.
  const auto single = conv_features<float>(model, patch.col(3));
  EXPECT_LT((single.col(0) - feats.col(3)).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Streaming, MatchesForwardFromReset) {
  const auto model = LrcnModel<double>::initialize(small_arch(), 13);
  const Eigen::MatrixXd patch = random_patch(16, 6, 10);
  StreamingPredictor<double> s(model);
  Vector<double> y;
  for (int t = 0; t < 6; ++t) y = s.push(patch.col(t));
  EXPECT_LT((y - forward(model, patch, Mode::infer).y).cwiseAbs().maxCoeff(), 1e-12);
  s.reset();
  for (int t = 0; t < 6; ++t) y = s.push(patch.col(t));
  EXPECT_LT((y - forward(model, patch, Mode::infer).y).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, FingerprintTracksParams) {
  auto a = LrcnModel<float>::initialize(small_arch(), 1);
  const auto b = LrcnModel<float>::initialize(small_arch(), 1);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  a.input_scale = 2.0;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  EXPECT_NE(LrcnModel<float>::initialize(small_arch(), 2).params, b.params);
}

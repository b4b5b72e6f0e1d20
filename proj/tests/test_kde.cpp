#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "ocmr/kde.hpp"

using namespace ocmr;
using namespace ocmr::kde;

namespace {

// Values on a 1/64 grid are exact in float, so the float-stored model sees the same data.
RowMatrix<float> grid_patches(int n, int dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> q(-128, 128);
  RowMatrix<float> p(n, dims);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dims; ++j) p(i, j) = static_cast<float>(q(rng) / 64.0);
  return p;
}

Eigen::MatrixXd random_targets(int n, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::MatrixXd t(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) t(i, j) = g(rng);
  return t;
}

Eigen::VectorXd naive(const RowMatrix<float>& p, const Eigen::MatrixXd& t, double h,
                      const Eigen::VectorXd& x) {
  Eigen::VectorXd num = Eigen::VectorXd::Zero(t.cols());
  double den = 0.0;
  for (int i = 0; i < p.rows(); ++i) {
    double d2 = 0.0;
    for (int j = 0; j < p.cols(); ++j) {
      const double diff = x(j) - static_cast<double>(p(i, j));
      d2 += diff * diff;
    }
    const double w = std::exp(-d2 / (2.0 * h * h));
    num += w * t.row(i).transpose();
    den += w;
  }
  return num / den;
}

}  // namespace

TEST(Kde, MatchesNaiveDoubleLoop) {
  const auto p = grid_patches(50, 12, 1);
  const auto t = random_targets(50, 3, 2);
  const auto model = fit(p, t, FitOptions{2.0});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int q = 0; q < 10; ++q) {
    Eigen::VectorXd x(12);
    for (int j = 0; j < 12; ++j) x(j) = g(rng);
    EXPECT_LT((predict(model, x) - naive(p, t, 2.0, x)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Kde, TinyBandwidthInterpolates) {
  const auto p = grid_patches(20, 6, 4);
  const auto t = random_targets(20, 2, 5);
  const auto model = fit(p, t, FitOptions{1e-3});
  for (int i = 0; i < 20; ++i) {
    const Eigen::VectorXd x = p.row(i).cast<double>().transpose();
    EXPECT_LT((predict(model, x) - t.row(i).transpose()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Kde, HugeBandwidthGivesMean) {
  const auto p = grid_patches(30, 4, 6);
  const auto t = random_targets(30, 3, 7);
  const auto model = fit(p, t, FitOptions{1e6});
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(4, 0.3);
  EXPECT_LT((predict(model, x) - t.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Kde, SymmetricPairGivesMidpoint) {
  RowMatrix<float> p(2, 2);
  p << -1.0f, 0.0f, 1.0f, 0.0f;
  Eigen::MatrixXd t(2, 1);
  t << 2.0, 4.0;
  const auto model = fit(p, t, FitOptions{0.7});
  EXPECT_NEAR(predict(model, Eigen::Vector2d(0.0, 5.0))(0), 3.0, 1e-12);
}

TEST(Kde, PredictionInConvexHull) {
  const auto p = grid_patches(40, 5, 8);
  const auto t = random_targets(40, 2, 9);
  const auto model = fit(p, t, FitOptions{0.5});
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int q = 0; q < 20; ++q) {
    Eigen::VectorXd x(5);
    for (int j = 0; j < 5; ++j) x(j) = g(rng);
    const auto y = predict(model, x);
    ASSERT_TRUE(y.allFinite());
    for (int k = 0; k < 2; ++k) {
      EXPECT_GE(y(k), t.col(k).minCoeff() - 1e-12);
      EXPECT_LE(y(k), t.col(k).maxCoeff() + 1e-12);
    }
  }
}

TEST(Kde, SingleSample) {
  const auto p = grid_patches(1, 3, 11);
  const auto t = random_targets(1, 2, 12);
  const auto model = fit(p, t, FitOptions{0.01});
  EXPECT_LT((predict(model, Eigen::VectorXd::Constant(3, 100.0)) - t.row(0).transpose()).cwiseAbs().maxCoeff(),
            1e-15);
}

TEST(Bandwidth, MedianOfAllPairs) {
  RowMatrix<float> p(4, 1);
  p << 0.0f, 1.0f, 3.0f, 7.0f;
  // Pairwise distances 1, 3, 7, 2, 6, 4 -> median (3 + 4) / 2.
  EXPECT_DOUBLE_EQ(median_pairwise_distance(p, 0), 3.5);
  EXPECT_DOUBLE_EQ(fit(p, Eigen::MatrixXd::Zero(4, 1)).bandwidth, 3.5);
}

TEST(Bandwidth, IdenticalPatchesFallBackToOne) {
  const RowMatrix<float> p = RowMatrix<float>::Constant(5, 3, 0.25f);
  EXPECT_EQ(median_pairwise_distance(p, 0), 1.0);
}

TEST(Bandwidth, SubsampledIsSeeded) {
  const auto p = grid_patches(200, 8, 13);
  const double a = median_pairwise_distance(p, 1, 500);
  EXPECT_EQ(a, median_pairwise_distance(p, 1, 500));
  const double all = median_pairwise_distance(p, 1, 1000000);
  EXPECT_NEAR(a, all, 0.1 * all);
}

TEST(Kde, Errors) {
  EXPECT_THROW(fit(RowMatrix<float>(0, 3), Eigen::MatrixXd(0, 2)), Error);
  EXPECT_THROW(fit(grid_patches(3, 2, 1), Eigen::MatrixXd::Zero(4, 1)), Error);
  EXPECT_THROW(fit(grid_patches(3, 2, 1), Eigen::MatrixXd::Zero(3, 1), FitOptions{-1.0}), Error);
  const auto model = fit(grid_patches(3, 2, 1), Eigen::MatrixXd::Zero(3, 1), FitOptions{1.0});
  EXPECT_THROW(predict(model, Eigen::VectorXd::Zero(3)), Error);
}

TEST(Kde, FlattenPatchesColumnByColumn) {
  Eigen::MatrixXd stream(3, 6);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 6; ++c) stream(r, c) = 10 * c + r;
  const auto flat = flatten_patches(stream, {2, 5}, 3);
  ASSERT_EQ(flat.rows(), 2);
  ASSERT_EQ(flat.cols(), 9);
  EXPECT_EQ(flat(0, 0), 0.0f);
  EXPECT_EQ(flat(0, 1), 1.0f);
  EXPECT_EQ(flat(0, 3), 10.0f);
  EXPECT_EQ(flat(1, 0), 30.0f);
  const auto model = fit(flat, Eigen::MatrixXd::Identity(2, 2), FitOptions{1e-3});
  EXPECT_NEAR(predict_patch(model, stream.middleCols(3, 3))(1), 1.0, 1e-12);
}

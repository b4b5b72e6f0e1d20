#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "ocmr/pca.hpp"

using namespace ocmr;

namespace {

Eigen::MatrixXd random_samples(int n, int p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) x(i, j) = g(rng) * (1.0 + 0.3 * j);
  return x;
}

// Cyclic Jacobi eigen-decomposition of a symmetric matrix; columns of v are eigenvectors.
void jacobi(Eigen::MatrixXd a, Eigen::VectorXd& values, Eigen::MatrixXd& v) {
  const int n = static_cast<int>(a.rows());
  v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  values = a.diagonal();
}

}  // namespace

TEST(Pca, MatchesJacobiOnCovariance) {
  const int n = 12;
  const int h = 8;
  const int w = 8;
  const Eigen::MatrixXd x = random_samples(n, h * w, 3);
  const int k = 5;
  const auto model = pca::fit(x, h, w, k);

  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / (n - 1);
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  jacobi(cov, values, vectors);
  std::vector<int> order(values.size());
  for (int i = 0; i < values.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return values(a) > values(b); });

  EXPECT_LT((model.mean - mean.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  for (int i = 0; i < k; ++i) {
    EXPECT_NEAR(model.variances(i), values(order[i]), 1e-8 * values(order[0]));
    const Eigen::VectorXd ref = vectors.col(order[i]);
    const double sign = ref.dot(model.basis.row(i).transpose()) >= 0 ? 1.0 : -1.0;
    EXPECT_LT((model.basis.row(i).transpose() - sign * ref).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Pca, ExactForLowRankData) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  const int p = 100;
  Eigen::MatrixXd dirs(3, p);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < p; ++j) dirs(i, j) = g(rng);
  Eigen::RowVectorXd offset(p);
  for (int j = 0; j < p; ++j) offset(j) = g(rng);
  Eigen::MatrixXd x(30, p);
  for (int r = 0; r < 30; ++r) {
    Eigen::RowVectorXd row = offset;
    for (int i = 0; i < 3; ++i) row += g(rng) * dirs.row(i);
    x.row(r) = row;
  }
  const auto model = pca::fit(x, 10, 10, 3);
  EXPECT_FALSE(model.degenerate);
  for (int r = 0; r < 30; ++r) {
    const Eigen::VectorXd img = x.row(r).transpose();
    EXPECT_LT((pca::reconstruct(model, pca::project(model, img)) - img).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Pca, IdenticalImagesAreDegenerate) {
  Eigen::MatrixXd x(6, 16);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 16; ++c) x(r, c) = 0.5 + c;
  const auto model = pca::fit(x, 4, 4, 3);
  EXPECT_TRUE(model.degenerate);
  EXPECT_EQ(model.variances, Eigen::VectorXd::Zero(3));
  EXPECT_LT((model.mean - x.row(0).transpose()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((model.basis * model.basis.transpose() - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(Pca, ProjectionProperties) {
  const Eigen::MatrixXd x = random_samples(20, 36, 5);
  const auto model = pca::fit(x, 6, 6, 4);
  EXPECT_LT(pca::project(model, model.mean).cwiseAbs().maxCoeff(), 1e-13);

  const Eigen::VectorXd probe = model.mean + 2.0 * model.basis.row(1).transpose();
  const Eigen::VectorXd y = pca::project(model, probe);
  EXPECT_NEAR(y(1), 2.0, 1e-12);
  EXPECT_NEAR(y(0), 0.0, 1e-12);

  EXPECT_LT((model.basis * model.basis.transpose() - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(),
            1e-12);
  for (int i = 1; i < 4; ++i) EXPECT_LE(model.variances(i), model.variances(i - 1));

  const Eigen::VectorXd img = x.row(3).transpose();
  const Eigen::VectorXd rec = pca::reconstruct(model, pca::project(model, img));
  EXPECT_LT((pca::project(model, rec) - pca::project(model, img)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((model.basis * (img - rec)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pca, SignConventionLargestEntryPositive) {
  const auto model = pca::fit(random_samples(15, 25, 9), 5, 5, 5);
  for (int i = 0; i < 5; ++i) {
    Eigen::Index arg = 0;
    model.basis.row(i).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(model.basis(i, arg), 0.0);
  }
}

TEST(Pca, MoreComponentsExplainMore) {
  const Eigen::MatrixXd x = random_samples(25, 49, 2);
  double previous = 1e300;
  for (int k = 1; k <= 10; ++k) {
    const auto model = pca::fit(x, 7, 7, k);
    double err = 0.0;
    for (int r = 0; r < x.rows(); ++r) {
      const Eigen::VectorXd img = x.row(r).transpose();
      err += (pca::reconstruct(model, pca::project(model, img)) - img).squaredNorm();
    }
    EXPECT_LE(err, previous * (1.0 + 1e-12));
    previous = err;
  }
}

TEST(Pca, RejectsBadRequests) {
  const Eigen::MatrixXd x = random_samples(5, 16, 1);
  EXPECT_THROW(pca::fit(x, 4, 4, 6), Error);
  EXPECT_THROW(pca::fit(x, 4, 5, 2), Error);
  const auto model = pca::fit(x, 4, 4, 2);
  EXPECT_THROW(pca::project(model, Eigen::VectorXd::Zero(15)), Error);
  EXPECT_THROW(pca::reconstruct(model, Eigen::VectorXd::Zero(3)), Error);
}

TEST(Pca, ImageSeriesRoundTrip) {
  phantom::ImageSeries images;
  images.height = 3;
  images.width = 4;
  images.frames = random_samples(8, 12, 6).cast<float>();
  for (int i = 0; i < 8; ++i) images.timestamps_s.push_back(i);
  const auto model = pca::fit(images, 7);
  const Eigen::MatrixXd y = pca::project_all(model, images);
  const auto rebuilt = pca::reconstruct_all(model, y, images.timestamps_s);
  // 8 centred frames span at most 7 directions, so 7 components are lossless.
  EXPECT_LT((rebuilt.frames - images.frames).cwiseAbs().maxCoeff(), 1e-5f);
  EXPECT_EQ(pca::flatten(images.frame(2)), images.frames.row(2).cast<double>().transpose());
}

#include "ocmr/kde.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ocmr::kde {

void KdeModel::validate() const {
  require(patches.rows() >= 1, ErrorCode::invalid_argument, "KDE needs at least one sample");
  require(targets.rows() == patches.rows(), ErrorCode::shape_mismatch,
          "one target row per stored patch required");
  require(std::isfinite(bandwidth) && bandwidth > 0.0, ErrorCode::invalid_argument,
          "bandwidth must be finite and > 0");
}

namespace {

double row_distance(const RowMatrix<float>& patches, Eigen::Index a, Eigen::Index b) {
  return (patches.row(a).cast<double>() - patches.row(b).cast<double>()).norm();
}

}  // namespace

double median_pairwise_distance(const RowMatrix<float>& patches, std::uint64_t seed, int max_pairs) {
  const Eigen::Index n = patches.rows();
  require(max_pairs >= 1, ErrorCode::invalid_argument, "max_pairs must be >= 1");
  if (n < 2) return 1.0;
  std::vector<double> dist;
  const auto all_pairs = static_cast<long long>(n) * (n - 1) / 2;
  if (all_pairs <= max_pairs) {
    dist.reserve(static_cast<std::size_t>(all_pairs));
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = a + 1; b < n; ++b) dist.push_back(row_distance(patches, a, b));
  } else {
    std::mt19937_64 engine(mix_seed(seed, 0x6b6465));
    dist.reserve(static_cast<std::size_t>(max_pairs));
    while (static_cast<int>(dist.size()) < max_pairs) {
      const auto a = static_cast<Eigen::Index>(uniform01(engine) * static_cast<double>(n));
      const auto b = static_cast<Eigen::Index>(uniform01(engine) * static_cast<double>(n));
      if (a == b) continue;
      dist.push_back(row_distance(patches, a, b));
    }
  }
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double median = *mid;
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), mid);
    median = 0.5 * (median + lower);
  }
  return median > 0.0 && std::isfinite(median) ? median : 1.0;
}

KdeModel fit(RowMatrix<float> patches, Eigen::MatrixXd targets, const FitOptions& options) {
  require(patches.rows() >= 1, ErrorCode::invalid_argument, "KDE needs at least one sample");
  require(targets.rows() == patches.rows(), ErrorCode::shape_mismatch,
          "one target row per stored patch required");
  require(patches.allFinite() && targets.allFinite(), ErrorCode::non_finite,
          "KDE data contain non-finite values");
  KdeModel model;
  model.bandwidth = options.bandwidth ? *options.bandwidth
                                      : median_pairwise_distance(patches, options.seed, options.max_pairs);
  model.patches = std::move(patches);
  model.targets = std::move(targets);
  model.validate();
  return model;
}

RowMatrix<float> flatten_patches(const Eigen::MatrixXd& stream, const std::vector<int>& end_indices,
                                 int n) {
  require(n >= 1, ErrorCode::invalid_argument, "patch length must be >= 1");
  const Eigen::Index d = stream.rows();
  RowMatrix<float> out(static_cast<Eigen::Index>(end_indices.size()), d * n);
  for (std::size_t i = 0; i < end_indices.size(); ++i) {
    const int end = end_indices[i];
    require(end >= n - 1 && end < stream.cols(), ErrorCode::insufficient_history,
            "patch ending at trace " + std::to_string(end) + " is out of range");
    // Column-major block is contiguous, so this matches Map over a d x n patch.
    const auto block = stream.middleCols(end - n + 1, n);
    out.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(block.data(), d * n).cast<float>();
  }
  return out;
}

Eigen::VectorXd predict(const KdeModel& model, const Eigen::Ref<const Eigen::VectorXd>& x) {
  require(x.size() == model.features(), ErrorCode::shape_mismatch,
          "query has " + std::to_string(x.size()) + " features, model expects " +
              std::to_string(model.features()));
  const Eigen::Index n = model.patches.rows();
  Eigen::VectorXd exponent(n);
  const double scale = -0.5 / (model.bandwidth * model.bandwidth);
  for (Eigen::Index i = 0; i < n; ++i)
    exponent(i) = scale * (model.patches.row(i).cast<double>().transpose() - x).squaredNorm();
  const double shift = exponent.maxCoeff();
  const Eigen::VectorXd w = (exponent.array() - shift).exp().matrix();
  return (model.targets.transpose() * w) / w.sum();
}

Eigen::VectorXd predict_patch(const KdeModel& model, const Eigen::Ref<const Eigen::MatrixXd>& patch) {
  const Eigen::MatrixXd dense = patch;
  return predict(model, Eigen::Map<const Eigen::VectorXd>(dense.data(), dense.size()));
}

}  // namespace ocmr::kde

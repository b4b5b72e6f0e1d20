#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "ocmr/common.hpp"

// Nadaraya-Watson regression with a Gaussian kernel over flattened speed patches.
namespace ocmr::kde {

struct KdeModel {
  RowMatrix<float> patches;  // N x (d*n), one flattened patch per row
  Eigen::MatrixXd targets;   // N x k
  double bandwidth = 1.0;

  [[nodiscard]] int size() const { return static_cast<int>(patches.rows()); }
  [[nodiscard]] int features() const { return static_cast<int>(patches.cols()); }
  [[nodiscard]] int outputs() const { return static_cast<int>(targets.cols()); }
  void validate() const;
};

struct FitOptions {
  std::optional<double> bandwidth;  // median pairwise distance when absent
  std::uint64_t seed = 0;
  int max_pairs = 2000;
};

// Median Euclidean distance over all pairs, or over max_pairs seeded random pairs
// when there are more. Falls back to 1 when the median is zero.
double median_pairwise_distance(const RowMatrix<float>& patches, std::uint64_t seed,
                                int max_pairs = 2000);

KdeModel fit(RowMatrix<float> patches, Eigen::MatrixXd targets, const FitOptions& options = {});

// Patches taken from a speed stream (d x T) ending at the given trace indices.
RowMatrix<float> flatten_patches(const Eigen::MatrixXd& stream, const std::vector<int>& end_indices,
                                 int n);

// x: flattened patch with the same layout as a stored row.
Eigen::VectorXd predict(const KdeModel& model, const Eigen::Ref<const Eigen::VectorXd>& x);
// Convenience for a d x n patch, flattened column by column.
Eigen::VectorXd predict_patch(const KdeModel& model, const Eigen::Ref<const Eigen::MatrixXd>& patch);

}  // namespace ocmr::kde

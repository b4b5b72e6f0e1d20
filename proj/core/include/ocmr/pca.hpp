#pragma once

#include <Eigen/Core>

#include "ocmr/common.hpp"
#include "ocmr/phantom.hpp"

namespace ocmr::pca {

// Image-space PCA. Frames are flattened row-major (pixel index r * width + c).
struct PcaModel {
  int height = 0;
  int width = 0;
  Eigen::VectorXd mean;       // height*width
  Eigen::MatrixXd basis;      // k x (height*width), orthonormal rows
  Eigen::VectorXd variances;  // k, non-increasing
  bool degenerate = false;    // some components are an arbitrary orthonormal completion

  [[nodiscard]] int components() const { return static_cast<int>(basis.rows()); }
  [[nodiscard]] int pixels() const { return height * width; }
  void validate() const;
};

// samples: n x (height*width).
PcaModel fit(const Eigen::MatrixXd& samples, int height, int width, int k);
PcaModel fit(const phantom::ImageSeries& images, int k);

Eigen::VectorXd project(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& image);
Eigen::VectorXd reconstruct(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& y);

// Row j holds the coefficients of frame j.
Eigen::MatrixXd project_all(const PcaModel& model, const phantom::ImageSeries& images);
phantom::ImageSeries reconstruct_all(const PcaModel& model, const Eigen::MatrixXd& coefficients,
                                     std::vector<double> timestamps_s);

Eigen::VectorXd flatten(const Eigen::MatrixXd& image);

}  // namespace ocmr::pca

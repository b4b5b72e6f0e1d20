#include "ocmr/pca.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

namespace ocmr::pca {
namespace {

// Orthogonalise v against the first `count` rows of basis (two passes of modified Gram-Schmidt).
double orthogonalize(Eigen::VectorXd& v, const Eigen::MatrixXd& basis, int count) {
  for (int pass = 0; pass < 2; ++pass)
    for (int i = 0; i < count; ++i) v -= basis.row(i).dot(v) * basis.row(i).transpose();
  return v.norm();
}

void apply_sign_convention(Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> component) {
  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < component.size(); ++i) {
    const double a = std::abs(component(i));
    if (a > best) {
      best = a;
      arg = i;
    }
  }
  if (component(arg) < 0.0) component = -component;
}

}  // namespace

void PcaModel::validate() const {
  require(height >= 1 && width >= 1, ErrorCode::invalid_argument, "PCA model has no pixels");
  require(mean.size() == pixels() && basis.cols() == pixels(), ErrorCode::shape_mismatch,
          "PCA mean/basis do not match the image size");
  require(variances.size() == basis.rows(), ErrorCode::shape_mismatch,
          "PCA variances do not match the component count");
}

PcaModel fit(const Eigen::MatrixXd& samples, int height, int width, int k) {
  const auto n = static_cast<int>(samples.rows());
  require(k >= 1, ErrorCode::invalid_argument, "k must be >= 1");
  require(n >= k, ErrorCode::invalid_argument,
          "k=" + std::to_string(k) + " exceeds the number of images (" + std::to_string(n) + ")");
  require(height >= 1 && width >= 1 && samples.cols() == static_cast<Eigen::Index>(height) * width,
          ErrorCode::shape_mismatch, "sample width does not match height x width");
  require(samples.allFinite(), ErrorCode::non_finite, "PCA input contains non-finite values");

  PcaModel model;
  model.height = height;
  model.width = width;
  model.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - model.mean.transpose();

  // n x n Gram matrix; its eigenvectors map to pixel-space components via X^T q / sqrt(lambda).
  Eigen::MatrixXd gram = centered * centered.transpose();
  gram = 0.5 * (gram + gram.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  require(solver.info() == Eigen::Success, ErrorCode::numerical, "Gram eigen-solver failed");

  const double gram_norm = gram.norm();
  const Eigen::VectorXd& ascending = solver.eigenvalues();
  const double lambda_max = std::max(ascending(n - 1), 0.0);
  const double zero_tol = 1e-12 * std::max(lambda_max, gram_norm);

  model.basis.resize(k, samples.cols());
  model.variances.resize(k);
  int filled = 0;
  for (int i = 0; i < k; ++i) {
    const int idx = n - 1 - i;
    const double lambda = ascending(idx);
    const Eigen::VectorXd q = solver.eigenvectors().col(idx);
    const double residual = (gram * q - lambda * q).norm();
    require(residual <= 1e-10 * std::max(gram_norm, 1e-300) || gram_norm == 0.0,
            ErrorCode::numerical, "Gram eigenpair residual above tolerance");
    if (lambda <= zero_tol || lambda_max == 0.0) break;
    Eigen::VectorXd u = centered.transpose() * q / std::sqrt(lambda);
    const double norm = orthogonalize(u, model.basis, filled);
    if (norm < 0.5) break;
    model.basis.row(filled) = (u / norm).transpose();
    model.variances(filled) = n > 1 ? lambda / (n - 1) : 0.0;
    ++filled;
  }

  // Zero-variance directions: complete with orthogonalised unit vectors.
  model.degenerate = filled < k;
  for (Eigen::Index e = 0; filled < k && e < samples.cols(); ++e) {
    Eigen::VectorXd u = Eigen::VectorXd::Unit(samples.cols(), e);
    const double norm = orthogonalize(u, model.basis, filled);
    if (norm < 0.5) continue;
    model.basis.row(filled) = (u / norm).transpose();
    model.variances(filled) = 0.0;
    ++filled;
  }
  require(filled == k, ErrorCode::numerical, "could not complete an orthonormal basis");

  for (int i = 0; i < k; ++i) apply_sign_convention(model.basis.row(i));
  return model;
}

PcaModel fit(const phantom::ImageSeries& images, int k) {
  images.validate();
  return fit(images.frames.cast<double>(), images.height, images.width, k);
}

Eigen::VectorXd project(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& image) {
  require(image.size() == model.pixels(), ErrorCode::shape_mismatch,
          "image size does not match the PCA model");
  return model.basis * (image - model.mean);
}

Eigen::VectorXd reconstruct(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& y) {
  require(y.size() == model.components(), ErrorCode::shape_mismatch,
          "coefficient count does not match the PCA model");
  return model.mean + model.basis.transpose() * y;
}

Eigen::MatrixXd project_all(const PcaModel& model, const phantom::ImageSeries& images) {
  require(images.height == model.height && images.width == model.width, ErrorCode::shape_mismatch,
          "image series size does not match the PCA model");
  const Eigen::MatrixXd centered =
      images.frames.cast<double>().rowwise() - model.mean.transpose();
  return centered * model.basis.transpose();
}

phantom::ImageSeries reconstruct_all(const PcaModel& model, const Eigen::MatrixXd& coefficients,
                                     std::vector<double> timestamps_s) {
  require(coefficients.cols() == model.components(), ErrorCode::shape_mismatch,
          "coefficient count does not match the PCA model");
  require(static_cast<Eigen::Index>(timestamps_s.size()) == coefficients.rows(),
          ErrorCode::shape_mismatch, "one timestamp per coefficient row required");
  phantom::ImageSeries out;
  out.height = model.height;
  out.width = model.width;
  out.timestamps_s = std::move(timestamps_s);
  const Eigen::MatrixXd pixels =
      (coefficients * model.basis).rowwise() + model.mean.transpose();
  out.frames = pixels.cast<float>();
  return out;
}

Eigen::VectorXd flatten(const Eigen::MatrixXd& image) {
  Eigen::VectorXd out(image.size());
  for (Eigen::Index r = 0; r < image.rows(); ++r)
    for (Eigen::Index c = 0; c < image.cols(); ++c) out(r * image.cols() + c) = image(r, c);
  return out;
}

}  // namespace ocmr::pca

#pragma once

#include <vector>

#include <Eigen/Core>

#include "ocmr/io.hpp"
#include "ocmr/pca.hpp"
#include "ocmr/phantom.hpp"
#include "ocmr/sigproc.hpp"

namespace ocmr::cli {

struct SplitOptions {
  int train_pairs = 100;
  int test_pairs = 50;
  int components = 10;
  int patch_n = 300;
  double sound_speed_m_s = 1540.0;
};

// Preprocessed traces paired with images: the first train_pairs aligned pairs
// train, the next test_pairs (or fewer, if the recording ends) test.
struct Split {
  sigproc::FermiFilterSpec filter;
  sigproc::CropSpec crop;
  Eigen::MatrixXd stream;  // d x T speed map
  std::vector<sigproc::PatchRef> train;
  std::vector<sigproc::PatchRef> test;
  pca::PcaModel pca;                // fitted on the training images, rounded to f32
  Eigen::MatrixXd train_targets;    // train.size() x k
};

sigproc::CropSpec crop_for(const phantom::TraceSeries& traces);
Eigen::MatrixXd speed_stream(const phantom::TraceSeries& traces, double sound_speed_m_s,
                             sigproc::FermiFilterSpec* filter_out = nullptr);

Split prepare_split(const phantom::TraceSeries& traces, const phantom::ImageSeries& images,
                    const SplitOptions& options);

phantom::ImageSeries select_images(const phantom::ImageSeries& images, const std::vector<int>& indices);
std::vector<int> end_indices(const std::vector<sigproc::PatchRef>& pairs);
std::vector<int> image_indices(const std::vector<sigproc::PatchRef>& pairs);

// Traces whose patch is complete, every `every`-th one starting at patch_n - 1.
std::vector<int> query_indices(int n_traces, int patch_n, int every);

// Latest trace at or before each image timestamp, for images with a full patch of history.
std::vector<int> aligned_queries(const phantom::TraceSeries& traces, const phantom::ImageSeries& images,
                                 int patch_n);

// Refuses traces recorded with a different acquisition than the model's.
void check_metadata(const io::ModelMetadata& meta, const phantom::TraceSeries& traces);

}  // namespace ocmr::cli

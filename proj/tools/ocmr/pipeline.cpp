#include "pipeline.hpp"

#include <cmath>

namespace ocmr::cli {

sigproc::CropSpec crop_for(const phantom::TraceSeries& traces) {
  sigproc::CropSpec crop;
  crop.input_len = traces.samples();
  crop.validate();
  return crop;
}

Eigen::MatrixXd speed_stream(const phantom::TraceSeries& traces, double sound_speed_m_s,
                             sigproc::FermiFilterSpec* filter_out) {
  const auto filter = sigproc::FermiFilterSpec::for_center_frequency(traces.f0_hz);
  if (filter_out) *filter_out = filter;
  return sigproc::compute_speed_stream(traces, filter, crop_for(traces), sound_speed_m_s);
}

Split prepare_split(const phantom::TraceSeries& traces, const phantom::ImageSeries& images,
                    const SplitOptions& options) {
  require(options.train_pairs >= 1 && options.test_pairs >= 0, ErrorCode::invalid_argument,
          "need at least one training pair");
  images.validate();
  require(!images.timestamps_s.empty() && images.timestamps_s.front() >= traces.time_of(0) &&
              images.timestamps_s.back() <= traces.time_of(traces.n_traces() - 1) + traces.tr_s,
          ErrorCode::shape_mismatch, "image timestamps fall outside the trace recording");

  Split split;
  split.crop = crop_for(traces);
  split.stream = speed_stream(traces, options.sound_speed_m_s, &split.filter);
  const auto times = traces.times();
  const auto aligned = sigproc::align_pairs(split.stream, images, times, options.patch_n);
  const auto available = static_cast<int>(aligned.pairs.size());
  require(available >= options.train_pairs, ErrorCode::insufficient_history,
          std::to_string(available) + " image/patch pairs available, " +
              std::to_string(options.train_pairs) + " needed for training");
  const int n_test = std::min(options.test_pairs, available - options.train_pairs);
  split.train.assign(aligned.pairs.begin(), aligned.pairs.begin() + options.train_pairs);
  split.test.assign(aligned.pairs.begin() + options.train_pairs,
                    aligned.pairs.begin() + options.train_pairs + n_test);

  const auto train_images = select_images(images, image_indices(split.train));
  split.pca = pca::fit(train_images, options.components);
  io::round_to_float(split.pca);
  split.train_targets = pca::project_all(split.pca, train_images);
  return split;
}

phantom::ImageSeries select_images(const phantom::ImageSeries& images, const std::vector<int>& indices) {
  phantom::ImageSeries out;
  out.height = images.height;
  out.width = images.width;
  out.frames.resize(static_cast<Eigen::Index>(indices.size()), images.frames.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.frames.row(static_cast<Eigen::Index>(i)) = images.frames.row(indices[i]);
    out.timestamps_s.push_back(images.timestamps_s.at(static_cast<std::size_t>(indices[i])));
  }
  return out;
}

std::vector<int> end_indices(const std::vector<sigproc::PatchRef>& pairs) {
  std::vector<int> out;
  for (const auto& p : pairs) out.push_back(p.end_trace_index);
  return out;
}

std::vector<int> image_indices(const std::vector<sigproc::PatchRef>& pairs) {
  std::vector<int> out;
  for (const auto& p : pairs) out.push_back(p.image_index);
  return out;
}

std::vector<int> query_indices(int n_traces, int patch_n, int every) {
  require(every >= 1, ErrorCode::invalid_argument, "--every must be >= 1");
  std::vector<int> out;
  for (int t = patch_n - 1; t < n_traces; t += every) out.push_back(t);
  require(!out.empty(), ErrorCode::insufficient_history,
          "recording has " + std::to_string(n_traces) + " traces, fewer than one patch of " +
              std::to_string(patch_n));
  return out;
}

std::vector<int> aligned_queries(const phantom::TraceSeries& traces, const phantom::ImageSeries& images,
                                 int patch_n) {
  images.validate();
  const Eigen::MatrixXd columns(0, traces.n_traces());
  const auto times = traces.times();
  auto ends = end_indices(sigproc::align_pairs(columns, images, times, patch_n).pairs);
  require(!ends.empty(), ErrorCode::insufficient_history, "no image has a full patch of trace history");
  return ends;
}

void check_metadata(const io::ModelMetadata& meta, const phantom::TraceSeries& traces) {
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b)); };
  require(close(meta.fs_hz, traces.fs_hz), ErrorCode::metadata_mismatch,
          "traces sampled at " + std::to_string(traces.fs_hz) + " Hz, model expects " +
              std::to_string(meta.fs_hz) + " Hz");
  require(close(meta.f0_hz, traces.f0_hz), ErrorCode::metadata_mismatch,
          "traces have center frequency " + std::to_string(traces.f0_hz) + " Hz, model expects " +
              std::to_string(meta.f0_hz) + " Hz");
  require(close(meta.tr_s, traces.tr_s), ErrorCode::metadata_mismatch,
          "traces have repetition time " + std::to_string(traces.tr_s) + " s, model expects " +
              std::to_string(meta.tr_s) + " s");
  require(meta.samples_per_trace == traces.samples(), ErrorCode::metadata_mismatch,
          "traces have " + std::to_string(traces.samples()) + " samples, model expects " +
              std::to_string(meta.samples_per_trace));
}

}  // namespace ocmr::cli

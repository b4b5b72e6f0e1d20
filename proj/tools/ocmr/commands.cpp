#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "manifest.hpp"
#include "ocmr/evalbench.hpp"
#include "ocmr/io.hpp"
#include "ocmr/kde.hpp"
#include "ocmr/lrcn.hpp"
#include "ocmr/pca.hpp"
#include "ocmr/phantom.hpp"
#include "ocmr/train.hpp"
#include "pipeline.hpp"

namespace fs = std::filesystem;

namespace ocmr::cli {
namespace {

fs::path sibling(const std::string& path, const std::string& suffix) { return fs::path(path + suffix); }

void ensure_parent(const fs::path& path) {
  const auto parent = path.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  require(!ec, ErrorCode::io, "cannot create directory " + parent.string() + ": " + ec.message());
}

void write_coeffs_csv(const fs::path& path, const std::vector<int>& trace_indices,
                      const std::vector<double>& times, const Eigen::MatrixXd& coeffs) {
  ensure_parent(path);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, ErrorCode::io, "cannot open " + path.string() + " for writing");
  std::fprintf(f, "trace_index,time_s");
  for (Eigen::Index j = 0; j < coeffs.cols(); ++j) std::fprintf(f, ",c%ld", static_cast<long>(j));
  std::fprintf(f, "\n");
  for (Eigen::Index i = 0; i < coeffs.rows(); ++i) {
    std::fprintf(f, "%d,%.17g", trace_indices[static_cast<std::size_t>(i)], times[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < coeffs.cols(); ++j) std::fprintf(f, ",%.17g", coeffs(i, j));
    std::fprintf(f, "\n");
  }
  const bool ok = std::fclose(f) == 0;
  require(ok, ErrorCode::io, "write to " + path.string() + " failed");
}

// Per-column convolution features in chunks, so a long recording never holds
// the full first-layer activation tensor.
Eigen::MatrixXf stream_features(const lrcn::LrcnModel<float>& model, const Eigen::MatrixXd& stream) {
  constexpr Eigen::Index kChunk = 512;
  Eigen::MatrixXf out(model.arch.feature_dim(), stream.cols());
  for (Eigen::Index c = 0; c < stream.cols(); c += kChunk) {
    const Eigen::Index m = std::min(kChunk, stream.cols() - c);
    out.middleCols(c, m) = lrcn::conv_features<float>(model, stream.middleCols(c, m));
  }
  return out;
}

Json training_curve(const train::TrainReport& r) {
  return Json{{"epochs_completed", r.epochs_completed},
              {"budget_exhausted", r.budget_exhausted},
              {"final_loss", r.final_loss},
              {"loss", r.epoch_loss}};
}

}  // namespace

void run_phantom(const PhantomOptions& o) {
  require(!o.out_dir.empty(), ErrorCode::invalid_argument, "--out-dir is required");
  require(o.scatterers >= 1, ErrorCode::invalid_argument, "--scatterers must be >= 1");
  phantom::BreathingParams breathing;
  breathing.period_s = o.breathing_period_s;
  breathing.amplitude_mm = o.amplitude_mm;
  breathing.drift_mm_per_min = o.drift_mm_per_min;
  breathing.period_jitter_frac = o.period_jitter;
  breathing.amplitude_jitter_frac = o.amplitude_jitter;
  breathing.seed = o.seed;
  breathing.validate();
  phantom::AcquisitionConfig cfg;
  cfg.f0_hz = o.f0_hz;
  cfg.snr_db = o.snr_db;
  cfg.validate();
  require(o.duration_s >= cfg.image_period_s(), ErrorCode::invalid_argument,
          "--duration-s " + std::to_string(o.duration_s) + " is shorter than one image period (" +
              std::to_string(cfg.image_period_s()) + " s)");

  const auto field = phantom::make_tissue_field(mix_seed(o.seed, 7), o.scatterers);
  const auto data = phantom::gen_dataset(breathing, field, cfg, o.duration_s);

  const fs::path dir(o.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
  const auto traces_path = dir / "traces.ocmt";
  const auto images_path = dir / "images.ocmi";
  io::write_traces(traces_path, data.traces);
  io::write_images(images_path, data.images);

  Manifest m("phantom");
  m.seed(o.seed);
  m.config() = Json{{"duration_s", o.duration_s},
                    {"f0_hz", o.f0_hz},
                    {"breathing_period_s", o.breathing_period_s},
                    {"amplitude_mm", o.amplitude_mm},
                    {"drift_mm_per_min", o.drift_mm_per_min},
                    {"period_jitter", o.period_jitter},
                    {"amplitude_jitter", o.amplitude_jitter},
                    {"snr_db", o.snr_db},
                    {"scatterers", o.scatterers}};
  m.output("traces", traces_path);
  m.output("images", images_path);
  m.extra("counts") = Json{{"traces", data.traces.n_traces()}, {"images", data.images.n_images()}};
  m.write(dir / "manifest.json");
  std::cout << "wrote " << data.traces.n_traces() << " traces and " << data.images.n_images()
            << " images to " << dir.string() << '\n';
}

void run_train(const TrainOptions& o) {
  require(!o.out_model.empty(), ErrorCode::invalid_argument, "--out-model is required");
  const auto traces = io::read_traces(o.traces);
  const auto images = io::read_images(o.images);

  lrcn::ArchSpec arch;
  arch.kernel_size = o.kernel_size;
  arch.input_d = sigproc::CropSpec{}.out_len;
  arch.validate();

  SplitOptions so;
  so.train_pairs = o.train_pairs;
  so.test_pairs = o.test_pairs;
  so.components = arch.output_dim;
  so.patch_n = arch.input_n;
  const auto split = prepare_split(traces, images, so);

  train::TrainConfig tc;
  tc.lr = o.lr;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.seed = o.seed;
  tc.num_threads = o.threads;
  tc.wall_budget_s = o.wall_budget_s;
  tc.target_normalization =
      o.normalize_targets ? train::TargetNormalization::per_component : train::TargetNormalization::off;

  const train::PairDataset dataset(split.stream, end_indices(split.train), split.train_targets, arch.input_n);
  const auto result = train::train(dataset, arch, tc, [&](int epoch, double loss) {
    if ((epoch + 1) % 50 == 0 || epoch == 0) std::cerr << "epoch " << epoch + 1 << " loss " << loss << '\n';
  });

  io::ModelFile model;
  model.pca = split.pca;
  model.network = result.model;
  auto& meta = model.meta;
  meta.fs_hz = traces.fs_hz;
  meta.f0_hz = traces.f0_hz;
  meta.tr_s = traces.tr_s;
  meta.samples_per_trace = traces.samples();
  meta.sound_speed_m_s = so.sound_speed_m_s;
  meta.filter = split.filter;
  meta.crop = split.crop;
  meta.seed = o.seed;
  meta.epochs = result.report.epochs_completed;
  meta.lr = o.lr;
  meta.batch_size = o.batch_size;
  meta.final_loss = result.report.final_loss;
  meta.train_pairs = static_cast<int>(split.train.size());
  meta.first_test_image = split.test.empty() ? images.n_images() : split.test.front().image_index;
  meta.test_images = static_cast<int>(split.test.size());

  const fs::path model_path(o.out_model);
  ensure_parent(model_path);
  io::write_model(model_path, model);

  const fs::path metrics_path = o.metrics.empty() ? sibling(o.out_model, ".metrics.json") : fs::path(o.metrics);
  ensure_parent(metrics_path);
  Json metrics{{"param_count", model.network.params.size()},
               {"train_pairs", meta.train_pairs},
               {"test_pairs", meta.test_images},
               {"training", training_curve(result.report)},
               {"timing", {{"wall_time_s", result.report.wall_time_s}}}};
  write_json(metrics_path, metrics);

  Manifest m("train");
  m.seed(o.seed);
  m.config() = Json{{"epochs", o.epochs},     {"lr", o.lr},
                    {"batch_size", o.batch_size}, {"kernel_size", o.kernel_size},
                    {"train_pairs", o.train_pairs}, {"test_pairs", o.test_pairs},
                    {"normalize_targets", o.normalize_targets}, {"wall_budget_s", o.wall_budget_s}};
  m.input("traces", o.traces);
  m.input("images", o.images);
  m.output("model", model_path);
  m.output("metrics", metrics_path);
  m.write(sibling(o.out_model, ".manifest.json"));
  std::cout << "trained " << result.report.epochs_completed << " epochs, final loss "
            << result.report.final_loss << ", " << model.network.params.size() << " parameters\n";
}

void run_infer(const InferOptions& o) {
  require(!o.out.empty(), ErrorCode::invalid_argument, "--out is required");
  const auto model = io::read_model(o.model);
  const auto traces = io::read_traces(o.traces);
  check_metadata(model.meta, traces);
  require(model.meta.crop.out_len == model.network.arch.input_d, ErrorCode::format,
          "model crop and network input size disagree");

  const auto stream = sigproc::compute_speed_stream(traces, model.meta.filter, model.meta.crop,
                                                    model.meta.sound_speed_m_s);
  const int n = model.network.arch.input_n;
  const auto queries = o.align_images.empty()
                           ? query_indices(traces.n_traces(), n, o.every)
                           : aligned_queries(traces, io::read_images(o.align_images), n);
  const Eigen::MatrixXf features = stream_features(model.network, stream);

  Eigen::MatrixXd coeffs(static_cast<Eigen::Index>(queries.size()), model.network.arch.output_dim);
  std::vector<double> times;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const int t = queries[i];
    coeffs.row(static_cast<Eigen::Index>(i)) =
        lrcn::recurrent_head<float>(model.network, features.middleCols(t - n + 1, n)).cast<double>().transpose();
    times.push_back(traces.time_of(t));
  }
  const auto frames = pca::reconstruct_all(model.pca, coeffs, times);
  const fs::path out(o.out);
  ensure_parent(out);
  io::write_images(out, frames);
  if (!o.coeffs_csv.empty()) write_coeffs_csv(o.coeffs_csv, queries, times, coeffs);

  Manifest m("infer");
  m.config() = Json{{"every", o.every}};
  if (!o.align_images.empty()) m.input("align_images", o.align_images);
  m.input("model", o.model);
  m.input("traces", o.traces);
  m.output("images", out);
  if (!o.coeffs_csv.empty()) m.output("coefficients", o.coeffs_csv);
  m.write(sibling(o.out, ".manifest.json"));
  std::cout << "wrote " << frames.n_images() << " frames to " << out.string() << '\n';
}

namespace {

// For each truth frame, the latest prediction at or before its timestamp.
phantom::ImageSeries match_predictions(const phantom::ImageSeries& pred, const phantom::ImageSeries& truth,
                                       double max_gap_s, const std::string& name) {
  require(pred.height == truth.height && pred.width == truth.width, ErrorCode::shape_mismatch,
          "prediction '" + name + "' frame size differs from the truth");
  std::vector<int> picks;
  for (double ts : truth.timestamps_s) {
    const auto it = std::upper_bound(pred.timestamps_s.begin(), pred.timestamps_s.end(), ts + 1e-9);
    require(it != pred.timestamps_s.begin(), ErrorCode::shape_mismatch,
            "prediction '" + name + "' has no frame at or before t=" + std::to_string(ts));
    const auto idx = static_cast<int>(it - pred.timestamps_s.begin()) - 1;
    require(ts - pred.timestamps_s[static_cast<std::size_t>(idx)] <= max_gap_s, ErrorCode::shape_mismatch,
            "prediction '" + name + "' has no frame within " + std::to_string(max_gap_s) + " s of t=" +
                std::to_string(ts));
    picks.push_back(idx);
  }
  auto out = select_images(pred, picks);
  out.timestamps_s = truth.timestamps_s;
  return out;
}

}  // namespace

void run_eval(const EvalOptions& o) {
  require(!o.out.empty(), ErrorCode::invalid_argument, "--out is required");
  require(!o.preds.empty(), ErrorCode::invalid_argument, "at least one --pred is required");
  const auto all_truth = io::read_images(o.truth);
  std::optional<io::ModelFile> model;
  if (!o.model.empty()) model = io::read_model(o.model);

  int first = o.first_image.value_or(model ? model->meta.first_test_image : 0);
  int count = o.count.value_or(model ? model->meta.test_images : all_truth.n_images() - first);
  require(first >= 0 && count >= 1 && first + count <= all_truth.n_images(), ErrorCode::invalid_argument,
          "image range [" + std::to_string(first) + ", " + std::to_string(first + count) +
              ") outside the truth file of " + std::to_string(all_truth.n_images()) + " images");
  std::vector<int> range(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) range[static_cast<std::size_t>(i)] = first + i;
  const auto truth = select_images(all_truth, range);

  phantom::ImageSeries truth_pca = truth;
  if (model) {
    require(model->pca.height == truth.height && model->pca.width == truth.width, ErrorCode::shape_mismatch,
            "model PCA frame size differs from the truth images");
    truth_pca = pca::reconstruct_all(model->pca, pca::project_all(model->pca, truth), truth.timestamps_s);
  }

  evalbench::MetricsReport report;
  std::map<std::string, phantom::ImageSeries> matched;
  for (const auto& spec : o.preds) {
    const auto eq = spec.find('=');
    const std::string name = eq == std::string::npos ? "pred" : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    require(!matched.count(name), ErrorCode::invalid_argument, "duplicate prediction name '" + name + "'");
    auto aligned = match_predictions(io::read_images(path), truth, o.max_gap_s, name);
    report.accuracy.push_back(evalbench::accuracy(name, aligned, truth_pca, truth));
    matched.emplace(name, std::move(aligned));
  }
  if (model) {
    // Mean predictor: the training mean image, i.e. zero PCA coefficients.
    const Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(count, model->pca.components());
    const auto baseline = pca::reconstruct_all(model->pca, zeros, truth.timestamps_s);
    report.accuracy.push_back(evalbench::accuracy("mean_predictor", baseline, truth_pca, truth));
  }

  const fs::path out(o.out);
  ensure_parent(out);
  {
    std::ofstream f(out, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::io, "cannot open " + out.string() + " for writing");
    f << evalbench::to_json(report);
    require(static_cast<bool>(f), ErrorCode::io, "write to " + out.string() + " failed");
  }

  Manifest m("eval");
  m.config() = Json{{"first_image", first}, {"count", count}, {"max_gap_s", o.max_gap_s}};
  m.input("truth", o.truth);
  if (model) m.input("model", o.model);
  for (const auto& spec : o.preds) m.input("pred:" + spec.substr(0, spec.find('=')), spec.substr(spec.find('=') + 1));
  m.output("metrics", out);

  if (!o.export_dir.empty()) {
    const fs::path dir(o.export_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorCode::io, "cannot create " + dir.string());
    const int column = o.mmode_column.value_or(truth.width / 2);
    Json ranges = Json::object();
    auto save = [&](const std::string& file, const Eigen::MatrixXd& img) {
      const auto r = io::write_pgm(dir / file, img);
      ranges[file] = Json{{"min", r.min}, {"max", r.max}};
    };
    const Eigen::MatrixXd truth_strip = evalbench::mmode_extract(truth_pca, column).transpose();
    save("mmode_truth.pgm", truth_strip);
    for (const auto& [name, pred] : matched) {
      const Eigen::MatrixXd strip = evalbench::mmode_extract(pred, column).transpose();
      save("mmode_" + name + ".pgm", strip);
      save("mmode_diff_" + name + ".pgm", strip - truth_strip);
      for (int j = 0; j < pred.n_images(); ++j)
        save("diff_" + name + "_" + std::to_string(first + j) + ".pgm", pred.frame(j) - truth_pca.frame(j));
    }
    m.config()["mmode_column"] = column;
    m.output("export_dir", dir);
    m.extra("pgm_ranges") = ranges;
  }
  m.write(sibling(o.out, ".manifest.json"));
  for (const auto& e : report.accuracy)
    std::cout << e.method << ": SSE " << e.sse_summary.mean << " +- " << e.sse_summary.std << '\n';
}

void run_kde(const KdeOptions& o) {
  require(!o.out.empty(), ErrorCode::invalid_argument, "--out is required");
  const auto traces = io::read_traces(o.traces);
  const auto images = io::read_images(o.images);
  SplitOptions so;
  so.train_pairs = o.train_pairs;
  so.test_pairs = 0;
  const auto split = prepare_split(traces, images, so);

  kde::FitOptions fo;
  fo.bandwidth = o.bandwidth;
  fo.seed = o.seed;
  const auto model =
      kde::fit(kde::flatten_patches(split.stream, end_indices(split.train), so.patch_n), split.train_targets, fo);

  const bool same = o.query_traces.empty() || o.query_traces == o.traces;
  const phantom::TraceSeries query_traces = same ? traces : io::read_traces(o.query_traces);
  Eigen::MatrixXd query_stream;
  if (!same) {
    require(query_traces.samples() == traces.samples() && query_traces.fs_hz == traces.fs_hz &&
                query_traces.f0_hz == traces.f0_hz,
            ErrorCode::metadata_mismatch, "query traces were recorded with a different acquisition");
    query_stream = speed_stream(query_traces, so.sound_speed_m_s);
  }
  const Eigen::MatrixXd& stream = same ? split.stream : query_stream;
  const auto queries = o.align_images.empty()
                           ? query_indices(query_traces.n_traces(), so.patch_n, o.every)
                           : aligned_queries(query_traces, io::read_images(o.align_images), so.patch_n);

  Eigen::MatrixXd coeffs(static_cast<Eigen::Index>(queries.size()), split.pca.components());
  std::vector<double> times;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const int t = queries[i];
    coeffs.row(static_cast<Eigen::Index>(i)) =
        kde::predict_patch(model, stream.middleCols(t - so.patch_n + 1, so.patch_n)).transpose();
    times.push_back(query_traces.time_of(t));
  }
  const auto frames = pca::reconstruct_all(split.pca, coeffs, times);
  const fs::path out(o.out);
  ensure_parent(out);
  io::write_images(out, frames);
  if (!o.coeffs_csv.empty()) write_coeffs_csv(o.coeffs_csv, queries, times, coeffs);

  Manifest m("kde");
  m.seed(o.seed);
  m.config() = Json{{"train_pairs", o.train_pairs}, {"every", o.every}, {"bandwidth", model.bandwidth},
                    {"bandwidth_from_heuristic", !o.bandwidth.has_value()}};
  m.input("traces", o.traces);
  m.input("images", o.images);
  if (!same) m.input("query_traces", o.query_traces);
  if (!o.align_images.empty()) m.input("align_images", o.align_images);
  m.output("images", out);
  if (!o.coeffs_csv.empty()) m.output("coefficients", o.coeffs_csv);
  m.write(sibling(o.out, ".manifest.json"));
  std::cout << "bandwidth " << model.bandwidth << ", wrote " << frames.n_images() << " frames to "
            << out.string() << '\n';
}

void run_bench(const BenchOptions& o) {
  require(!o.out.empty(), ErrorCode::invalid_argument, "--out is required");
  require(!o.n_values.empty(), ErrorCode::invalid_argument, "--n-values is empty");
  const auto traces = io::read_traces(o.traces);
  const auto images = io::read_images(o.images);

  io::ModelFile model;
  if (!o.model.empty()) {
    model = io::read_model(o.model);
    check_metadata(model.meta, traces);
  } else {
    lrcn::ArchSpec arch;
    model.network = lrcn::LrcnModel<float>::initialize(arch, mix_seed(o.seed, 1));
    model.pca = pca::fit(images, arch.output_dim);
  }
  const auto& arch = model.network.arch;
  const int n = arch.input_n;
  const auto stream = speed_stream(traces, 1540.0);
  require(stream.rows() == arch.input_d, ErrorCode::shape_mismatch, "speed map depth differs from the network input");

  // Training patches end at consecutive traces from n-1; queries follow them.
  const int max_n = *std::max_element(o.n_values.begin(), o.n_values.end());
  const int first_query = n - 1 + max_n;
  require(first_query + o.queries <= stream.cols(), ErrorCode::insufficient_history,
          "recording too short for " + std::to_string(max_n) + " training patches and " +
              std::to_string(o.queries) + " queries");
  const Eigen::MatrixXd image_coeffs = pca::project_all(model.pca, images);
  std::vector<int> all_ends;
  Eigen::MatrixXd all_targets(max_n, image_coeffs.cols());
  for (int i = 0; i < max_n; ++i) {
    all_ends.push_back(n - 1 + i);
    all_targets.row(i) = image_coeffs.row(i % image_coeffs.rows());
  }
  const auto all_patches = kde::flatten_patches(stream, all_ends, n);

  std::vector<Eigen::MatrixXd> query_patches;
  for (int q = 0; q < o.queries; ++q) query_patches.push_back(stream.middleCols(first_query + q - n + 1, n));

  kde::KdeModel kde_model;
  double kde_bandwidth = 1.0;
  volatile double sink = 0.0;
  std::vector<evalbench::LatencySubject> subjects;
  subjects.push_back({"lrcn", [](int) {},
                      [&](int q) {
                        const auto y = lrcn::forward<float>(model.network, query_patches[static_cast<std::size_t>(q)],
                                                            lrcn::Mode::infer).y;
                        const auto img = pca::reconstruct(model.pca, y.cast<double>());
                        sink = sink + img(0);
                      }});
  subjects.push_back({"kde",
                      [&](int n_train) {
                        kde::FitOptions fo;
                        fo.seed = o.seed;
                        kde_model = kde::fit(all_patches.topRows(n_train), all_targets.topRows(n_train), fo);
                        kde_bandwidth = kde_model.bandwidth;
                      },
                      [&](int q) {
                        const auto y = kde::predict_patch(kde_model, query_patches[static_cast<std::size_t>(q)]);
                        const auto img = pca::reconstruct(model.pca, y);
                        sink = sink + img(0);
                      }});

  evalbench::BenchConfig bc;
  bc.n_values = o.n_values;
  bc.queries = o.queries;
  bc.repetitions = o.repetitions;
  evalbench::TimingSection timing;
  timing.config = bc;
  timing.methods = evalbench::bench_latency(subjects, bc);
  for (const auto& mt : timing.methods) timing.scaling.push_back(evalbench::scaling(mt, bc.n_values));

  evalbench::MetricsReport report;
  report.timing = timing;
  const fs::path out(o.out);
  ensure_parent(out);
  {
    std::ofstream f(out, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::io, "cannot open " + out.string() + " for writing");
    f << evalbench::to_json(report);
    require(static_cast<bool>(f), ErrorCode::io, "write to " + out.string() + " failed");
  }

  Manifest m("bench");
  m.seed(o.seed);
  m.config() = Json{{"n_values", o.n_values}, {"queries", o.queries}, {"repetitions", o.repetitions},
                    {"last_kde_bandwidth", kde_bandwidth}};
  m.input("traces", o.traces);
  m.input("images", o.images);
  if (!o.model.empty()) m.input("model", o.model);
  m.output("metrics", out);
  m.write(sibling(o.out, ".manifest.json"));
  for (const auto& s : timing.scaling)
    std::cout << s.method << ": slope " << s.fit.slope << " s/sample, r2 " << s.fit.r2 << ", spread "
              << s.spread << '\n';
}

}  // namespace ocmr::cli

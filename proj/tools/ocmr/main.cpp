#include <algorithm>
#include <exception>
#include <iostream>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "commands.hpp"
#include "ocmr/common.hpp"

#ifndef OCMR_VERSION
#define OCMR_VERSION "unknown"
#endif

namespace {

// Errors must stay on one line so scripts can parse them.
int fail(const std::string& what, int status) {
  std::string line = what;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error: " << line << '\n';
  return status;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activations are tens of MB; keeping them on the heap instead of fresh mmaps
  // avoids a page-fault storm on every forward pass.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  using namespace ocmr::cli;
  CLI::App app{"ocmr: synthetic MR-like images from A-mode ultrasound traces"};
  app.set_version_flag("--version", OCMR_VERSION);
  app.require_subcommand(1);

  PhantomOptions ph;
  auto* phantom = app.add_subcommand("phantom", "generate a synthetic trace/image recording");
  phantom->add_option("--seed", ph.seed, "random seed")->capture_default_str();
  phantom->add_option("--duration-s", ph.duration_s, "recording length")->capture_default_str();
  phantom->add_option("--f0-hz", ph.f0_hz, "transducer center frequency")->capture_default_str();
  phantom->add_option("--breathing-period-s", ph.breathing_period_s)->capture_default_str();
  phantom->add_option("--amplitude-mm", ph.amplitude_mm)->capture_default_str();
  phantom->add_option("--drift-mm-per-min", ph.drift_mm_per_min)->capture_default_str();
  phantom->add_option("--period-jitter", ph.period_jitter)->capture_default_str();
  phantom->add_option("--amplitude-jitter", ph.amplitude_jitter)->capture_default_str();
  phantom->add_option("--snr-db", ph.snr_db)->capture_default_str();
  phantom->add_option("--scatterers", ph.scatterers)->capture_default_str();
  phantom->add_option("--out-dir", ph.out_dir)->required();

  TrainOptions tr;
  auto* train = app.add_subcommand("train", "fit PCA and the network on the training split");
  train->add_option("--traces", tr.traces)->required()->check(CLI::ExistingFile);
  train->add_option("--images", tr.images)->required()->check(CLI::ExistingFile);
  train->add_option("--epochs", tr.epochs)->capture_default_str();
  train->add_option("--lr", tr.lr)->capture_default_str();
  train->add_option("--batch-size", tr.batch_size)->capture_default_str();
  train->add_option("--seed", tr.seed)->capture_default_str();
  train->add_option("--kernel-size", tr.kernel_size)->capture_default_str();
  train->add_option("--train-pairs", tr.train_pairs)->capture_default_str();
  train->add_option("--test-pairs", tr.test_pairs)->capture_default_str();
  train->add_option("--threads", tr.threads, "worker threads, 0 = all cores")->capture_default_str();
  train->add_option("--wall-budget-s", tr.wall_budget_s, "stop early after this many seconds, 0 = never")
      ->capture_default_str();
  train->add_flag("--normalize-targets", tr.normalize_targets, "standardise PCA coefficients per component");
  train->add_option("--out-model", tr.out_model)->required();
  train->add_option("--metrics", tr.metrics, "default: <out-model>.metrics.json");

  InferOptions in;
  auto* infer = app.add_subcommand("infer", "reconstruct one frame per selected trace");
  infer->add_option("--model", in.model)->required()->check(CLI::ExistingFile);
  infer->add_option("--traces", in.traces)->required()->check(CLI::ExistingFile);
  infer->add_option("--every", in.every)->capture_default_str();
  infer->add_option("--align-images", in.align_images, "one frame per image timestamp of this file")
      ->check(CLI::ExistingFile)
      ->excludes("--every");
  infer->add_option("--out", in.out)->required();
  infer->add_option("--coeffs-csv", in.coeffs_csv, "also write PCA coefficients per frame");

  EvalOptions ev;
  auto* eval = app.add_subcommand("eval", "per-image SSE against ground truth");
  eval->add_option("--pred", ev.preds, "[name=]path of predicted frames; repeatable")->required();
  eval->add_option("--truth", ev.truth)->required()->check(CLI::ExistingFile);
  eval->add_option("--model", ev.model, "compare in the model's PCA space")->check(CLI::ExistingFile);
  eval->add_option("--first-image", ev.first_image, "default: the model's first test image, else 0");
  eval->add_option("--count", ev.count, "default: the model's test split, else all");
  eval->add_option("--max-gap-s", ev.max_gap_s)->capture_default_str();
  eval->add_option("--mmode-column", ev.mmode_column, "default: centre column");
  eval->add_option("--export-dir", ev.export_dir, "write M-mode strips and difference images as PGM");
  eval->add_option("--out", ev.out)->required();

  KdeOptions kd;
  auto* kde = app.add_subcommand("kde", "kernel regression baseline");
  kde->add_option("--traces", kd.traces)->required()->check(CLI::ExistingFile);
  kde->add_option("--images", kd.images)->required()->check(CLI::ExistingFile);
  kde->add_option("--query-traces", kd.query_traces, "default: --traces")->check(CLI::ExistingFile);
  kde->add_option("--train-pairs", kd.train_pairs)->capture_default_str();
  kde->add_option("--bandwidth", kd.bandwidth, "default: median pairwise distance");
  kde->add_option("--seed", kd.seed)->capture_default_str();
  kde->add_option("--every", kd.every)->capture_default_str();
  kde->add_option("--align-images", kd.align_images, "one frame per image timestamp of this file")
      ->check(CLI::ExistingFile)
      ->excludes("--every");
  kde->add_option("--out", kd.out)->required();
  kde->add_option("--coeffs-csv", kd.coeffs_csv);

  BenchOptions be;
  auto* bench = app.add_subcommand("bench", "per-query latency of both predictors against training size");
  bench->add_option("--traces", be.traces)->required()->check(CLI::ExistingFile);
  bench->add_option("--images", be.images)->required()->check(CLI::ExistingFile);
  bench->add_option("--model", be.model)->check(CLI::ExistingFile);
  bench->add_option("--n-values", be.n_values)->delimiter(',')->capture_default_str();
  bench->add_option("--queries", be.queries)->capture_default_str();
  bench->add_option("--repetitions", be.repetitions)->capture_default_str();
  bench->add_option("--seed", be.seed)->capture_default_str();
  bench->add_option("--out", be.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(std::string("usage: ") + e.what(), 2);
  }

  try {
    if (*phantom) run_phantom(ph);
    else if (*train) run_train(tr);
    else if (*infer) run_infer(in);
    else if (*eval) run_eval(ev);
    else if (*kde) run_kde(kd);
    else if (*bench) run_bench(be);
  } catch (const ocmr::Error& e) {
    return fail(e.what(), 1);
  } catch (const std::exception& e) {
    return fail(std::string("internal: ") + e.what(), 1);
  }
  return 0;
}

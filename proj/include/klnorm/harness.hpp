#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "klnorm/checkpoint.hpp"
#include "klnorm/config.hpp"
#include "klnorm/dataset.hpp"
#include "klnorm/loss.hpp"
#include "klnorm/model.hpp"
#include "klnorm/optim.hpp"

namespace klnorm {

struct EpochMetrics {
  int epoch = 0;
  double beta_t = 0.0;
  LossBreakdown train;
  LossBreakdown dev;
  double dev_accuracy = 0.0;
};

struct RunResult {
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<EpochMetrics> epochs;
  double test_accuracy = 0.0;
  double test_macro_f1 = 0.0;
  double wallclock_sec = 0.0;  // excluded from reproducibility comparisons
  bool diverged = false;
};

struct EvalMetrics {
  double ce = 0.0;
  double kl = 0.0;  // head KL; 0 for non-klnorm models
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// Inference-mode evaluation over one split; mutates nothing.
EvalMetrics evaluate(Model& model, const Dataset& ds,
                     std::span<const std::size_t> idx);

// Loads the file triplet or generates the synthetic set named by the config.
Dataset materialize_dataset(const TrainConfig& cfg);

struct RunOutput {
  RunResult result;
  Model model;
};

// One seeded training run: per-seed stratified subsample (when configured),
// seeded shuffled minibatches, beta annealing, per-epoch dev evaluation,
// final test metrics. Divergence flags the result instead of throwing.
RunOutput run_experiment(const TrainConfig& cfg, const Dataset& ds,
                         std::uint64_t seed);

struct MetricStats {
  double mean = 0.0;
  double stddev = 0.0;  // population (divisor n)
  std::size_t n = 0;
  std::string formatted;  // "mean (std)", 3 decimals
};

// Mean and population std per metric across seed runs. Requires >= 2 runs
// with identical config digests; the reduction is order-independent.
std::map<std::string, MetricStats> aggregate_seeds(
    std::span<const RunResult> results);

struct ExperimentOutput {
  std::vector<RunResult> runs;
  std::map<std::string, MetricStats> summary;
  std::filesystem::path run_dir;  // <out>/<digest>
};

// Runs every seed in the config (parallel up to KLNORM_THREADS), then
// aggregates. When write_files is set, persists per-seed metrics
// (<seed>.jsonl), checkpoints (<seed>.kln) and summary.csv under
// <out>/<digest>/.
ExperimentOutput train_all(const TrainConfig& cfg, bool write_files = true);

struct SweepPoint {
  double beta0 = 0.0;
  double train_ce_mean = 0.0, train_ce_std = 0.0;
  double dev_ce_mean = 0.0, dev_ce_std = 0.0;
  double gap_mean = 0.0;  // dev_ce - train_ce, averaged over seeds
  double train_total_mean = 0.0, dev_total_mean = 0.0;
};

struct SweepResult {
  std::vector<double> grid;
  std::vector<SweepPoint> points;
};

// Final-epoch train/validation losses per beta0 on a strictly increasing
// grid, seed-averaged. The overfitting comparison uses the cross-entropy
// component so points stay comparable across beta.
SweepResult sweep_beta(const TrainConfig& cfg, std::span<const double> grid);

void write_sweep_csv(const SweepResult& sweep,
                     const std::filesystem::path& path);

// Frozen-encoder probe: encodes the train split with the trained
// encoder+norm (inference mode), fits a fresh linear classifier on those
// representations against the train labels, and reports its accuracy at
// predicting the spurious coordinate's class on the test split. Lower means
// less of the spurious channel survived in the representation.
double bias_probe(Model& model, const Dataset& biased_ds, std::uint64_t seed);

}  // namespace klnorm

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "klnorm/harness.hpp"
#include "klnorm/rng.hpp"

namespace fs = std::filesystem;
using namespace klnorm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string seeds;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config, "Experiment config file");
  if (config_required) c->required();
  cmd->add_option("--set", opts.sets,
                  "Override a config key (key=value, repeatable)");
  cmd->add_option("--out", opts.out, "Output directory (overrides 'out')");
  cmd->add_option("--seeds", opts.seeds,
                  "Comma-separated seed list (overrides 'seeds')");
  cmd->add_flag("--quiet", opts.quiet, "Suppress progress output");
}

TrainConfig load_config(const CommonOpts& opts) {
  std::vector<std::string> overrides = opts.sets;
  if (!opts.out.empty()) overrides.push_back("out=" + opts.out);
  if (!opts.seeds.empty()) overrides.push_back("seeds=" + opts.seeds);
  return parse_config(opts.config, overrides);
}

int cmd_train(const CommonOpts& opts) {
  TrainConfig cfg = load_config(opts);
  ExperimentOutput res = train_all(cfg);
  bool any_diverged = false;
  for (const auto& run : res.runs) any_diverged |= run.diverged;
  if (!opts.quiet) {
    std::cout << "digest " << cfg.digest() << "  (" << res.runs.size()
              << " seeds)\n";
    for (const auto& [metric, stats] : res.summary) {
      std::cout << "  " << metric << ": " << stats.formatted << "\n";
    }
    std::cout << "results in " << res.run_dir.string() << "\n";
  }
  if (any_diverged) {
    std::cerr << "error: at least one seed diverged (non-finite loss)\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint,
             const std::string& split) {
  TrainConfig cfg = load_config(opts);
  Dataset ds = materialize_dataset(cfg);
  if (cfg.subsample_n > 0) ds = subsample(ds, cfg.subsample_n, cfg.seeds[0]);
  Model model = load_checkpoint(checkpoint);
  const std::vector<std::size_t>* idx = &ds.test_idx;
  if (split == "train") idx = &ds.train_idx;
  else if (split == "dev") idx = &ds.dev_idx;
  else if (split != "test") {
    throw std::invalid_argument("eval: unknown split '" + split + "'");
  }
  EvalMetrics m = evaluate(model, ds, *idx);
  nlohmann::ordered_json j{{"split", split},
                           {"ce", m.ce},
                           {"kl", m.kl},
                           {"accuracy", m.accuracy},
                           {"macro_f1", m.macro_f1}};
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

// Central finite differences of f over one parameter tensor.
std::vector<double> finite_diff(const std::function<double()>& f,
                                Tensor& param, double h) {
  std::vector<double> fd(param.numel());
  auto data = param.data_mut();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double fp = f();
    data[i] = orig - h;
    const double fm = f();
    data[i] = orig;
    fd[i] = (fp - fm) / (2.0 * h);
  }
  return fd;
}

double gradcheck_model(std::uint64_t seed) {
  ModelSpec spec;
  spec.d_in = 6;
  spec.k = 4;
  spec.norm_kind = NormKind::klnorm;
  spec.n_classes = 3;
  Model model = build_model(spec, seed);
  SplitMix64 rng(seed ^ 0xabcdef);
  std::vector<double> xd(5 * 6);
  for (auto& v : xd) v = rng.normal();
  Tensor x = Tensor::matrix(5, 6, xd);
  std::vector<int> labels{0, 2, 1, 1, 0};
  const double beta_t = 0.3;

  auto forward = [&]() {
    Model scratch = model;
    std::get<KlNormState>(scratch.norm).stats = make_moving_stats(spec.k);
    ForwardOut out = classify_forward(scratch, x, Mode::train);
    Tensor ce = cross_entropy(out.logits, labels);
    return add(ce, mul(out.kl.value, Tensor::scalar(beta_t)));
  };

  std::vector<Tensor> params = trainable_parameters(model);
  {
    Tape tape;
    Tensor loss = forward();
    tape.backward(loss);
  }
  double worst = 0.0;
  auto eval = [&]() { return forward().item(); };
  for (auto& p : params) {
    const auto fd = finite_diff(eval, p, 1e-5);
    const auto ad = p.grad();
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double denom = std::max(1.0, std::abs(fd[i]));
      worst = std::max(worst, std::abs(ad[i] - fd[i]) / denom);
    }
    p.zero_grad();
  }
  return worst;
}

int cmd_gradcheck(bool quiet) {
  double worst = 0.0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    worst = std::max(worst, gradcheck_model(seed));
  }
  if (!quiet) {
    std::printf("gradcheck: max relative error %.3e (threshold 1e-4)\n", worst);
  }
  return worst < 1e-4 ? kExitOk : kExitNumerical;
}

int cmd_klcheck(bool quiet) {
  SplitMix64 rng(20240613);
  double worst_sigma = 0.0;
  for (std::size_t k : {1u, 4u, 16u}) {
    for (int trial = 0; trial < 8; ++trial) {
      std::vector<double> mu0(k), var0(k);
      for (std::size_t j = 0; j < k; ++j) {
        mu0[j] = rng.uniform(-2.0, 2.0);
        var0[j] = rng.uniform(0.2, 4.0);
      }
      const double closed =
          kl_diag_gauss(Tensor::row(mu0), Tensor::row(var0), Tensor::zeros({k}),
                        Tensor::full({k}, 1.0))
              .item();
      // Monte-Carlo estimate of E_q[log q - log p].
      const std::size_t n_samples = 100000;
      double sum = 0.0, sum_sq = 0.0;
      for (std::size_t s = 0; s < n_samples; ++s) {
        double diff = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const double z = mu0[j] + std::sqrt(var0[j]) * rng.normal();
          diff += -0.5 * ((z - mu0[j]) * (z - mu0[j]) / var0[j] +
                          std::log(var0[j])) +
                  0.5 * (z * z);
        }
        sum += diff;
        sum_sq += diff * diff;
      }
      const double mean = sum / n_samples;
      const double var = std::max(0.0, sum_sq / n_samples - mean * mean);
      const double se = std::sqrt(var / n_samples);
      if (se > 0.0) {
        worst_sigma = std::max(worst_sigma, std::abs(closed - mean) / se);
      }
    }
  }
  if (!quiet) {
    std::printf("klcheck: worst |closed-form - MC| = %.2f standard errors "
                "(threshold 3)\n",
                worst_sigma);
  }
  return worst_sigma < 3.0 ? kExitOk : kExitNumerical;
}

int cmd_sweep(const CommonOpts& opts, const std::string& grid_arg) {
  TrainConfig cfg = load_config(opts);
  std::vector<double> grid;
  std::stringstream ss(grid_arg);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) grid.push_back(std::stod(tok));
  }
  SweepResult sweep = sweep_beta(cfg, grid);
  const fs::path dir = fs::path(cfg.out_dir) / cfg.digest();
  fs::create_directories(dir);
  const fs::path csv = dir / "sweep.csv";
  write_sweep_csv(sweep, csv);
  if (!opts.quiet) {
    std::printf("%10s %14s %14s %10s\n", "beta0", "train_ce", "val_ce", "gap");
    for (const auto& p : sweep.points) {
      std::printf("%10.4g %14.6f %14.6f %10.6f\n", p.beta0, p.train_ce_mean,
                  p.dev_ce_mean, p.gap_mean);
    }
    std::cout << "sweep written to " << csv.string() << "\n";
  }
  return kExitOk;
}

int cmd_bias_probe(const CommonOpts& opts, const std::string& checkpoint) {
  TrainConfig cfg = load_config(opts);
  Dataset ds = materialize_dataset(cfg);
  if (!checkpoint.empty()) {
    Model model = load_checkpoint(checkpoint);
    const double acc = bias_probe(model, ds, cfg.seeds[0]);
    std::printf("probe_accuracy %.4f\n", acc);
    return kExitOk;
  }
  // Full protocol: train the configured model and its beta0=0 ablation on
  // the biased data, probe both, report seed means.
  double sum_model = 0.0, sum_ablation = 0.0;
  for (std::uint64_t seed : cfg.seeds) {
    RunOutput trained = run_experiment(cfg, ds, seed);
    TrainConfig ablation_cfg = cfg;
    ablation_cfg.beta0 = 0.0;
    RunOutput ablation = run_experiment(ablation_cfg, ds, seed);
    const double pm = bias_probe(trained.model, ds, seed);
    const double pa = bias_probe(ablation.model, ds, seed);
    sum_model += pm;
    sum_ablation += pa;
    if (!opts.quiet) {
      std::printf("seed %llu: probe %.4f  (beta0=0 ablation %.4f)\n",
                  static_cast<unsigned long long>(seed), pm, pa);
    }
  }
  const double n = static_cast<double>(cfg.seeds.size());
  std::printf("mean probe_accuracy %.4f  beta0=0 %.4f  (lower = better "
              "debiasing)\n",
              sum_model / n, sum_ablation / n);
  return kExitOk;
}

int cmd_make_data(const std::string& kind, std::size_t n, std::size_t d,
                  std::size_t classes, std::uint64_t seed,
                  double bias_strength, double sep, double label_noise,
                  const std::string& out_base, bool quiet) {
  SyntheticSpec spec;
  spec.kind = synthetic_kind_from_name(kind);
  spec.n = n;
  spec.d_in = d;
  spec.n_classes = classes;
  spec.seed = seed;
  spec.bias_strength = bias_strength;
  spec.sep = sep;
  spec.label_noise = label_noise;
  Dataset ds = make_synthetic(spec);
  const fs::path base(out_base);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  save_dataset_splits(ds, base);
  if (!quiet) {
    std::cout << "wrote " << base.string() << ".{train,dev,test}  (" << ds.size()
              << " examples, d=" << ds.width << ", classes=" << ds.n_classes
              << ")\n";
  }
  return kExitOk;
}

int cmd_params(const CommonOpts& opts, std::size_t d_in_flag,
               std::size_t classes_flag) {
  TrainConfig cfg = load_config(opts);
  ModelSpec spec;
  spec.k = cfg.k;
  spec.norm_kind = cfg.norm;
  spec.groups = cfg.groups;
  spec.hidden = cfg.hidden;
  if (d_in_flag > 0) {
    spec.d_in = d_in_flag;
    spec.n_classes = classes_flag > 0 ? classes_flag : 2;
  } else {
    Dataset ds = materialize_dataset(cfg);
    spec.d_in = ds.width;
    spec.n_classes = ds.n_classes;
  }
  Model model = build_model(spec, 0);
  ParamCount pc = count_parameters(model);
  nlohmann::ordered_json j{{"norm", norm_kind_name(spec.norm_kind)},
                           {"d_in", spec.d_in},
                           {"k", spec.k},
                           {"n_classes", spec.n_classes},
                           {"total", pc.total},
                           {"norm_overhead", pc.norm_overhead},
                           {"overhead_pct", pc.overhead_pct}};
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "klnorm: KL-regularized normalization layers, baselines, and a seeded "
      "low-resource experiment harness",
      "klnorm"};
  app.require_subcommand(1);

  CommonOpts train_opts;
  auto* train = app.add_subcommand("train",
                                   "Train over the config's seed list and "
                                   "aggregate mean (std) metrics");
  add_common(train, train_opts);

  CommonOpts eval_opts;
  std::string eval_checkpoint, eval_split = "test";
  auto* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file (.kln)")
      ->required();
  eval_cmd->add_option("--split", eval_split, "Split: train, dev, or test");

  bool gc_quiet = false;
  auto* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "Finite-difference suite over the full model loss");
  gradcheck_cmd->add_flag("--quiet", gc_quiet, "Suppress progress output");

  bool kl_quiet = false;
  auto* klcheck_cmd = app.add_subcommand(
      "klcheck", "Closed-form KL versus Monte-Carlo oracle");
  klcheck_cmd->add_flag("--quiet", kl_quiet, "Suppress progress output");

  CommonOpts sweep_opts;
  std::string sweep_grid;
  auto* sweep_cmd = app.add_subcommand(
      "sweep-beta", "Final train/val losses over a beta0 grid (CSV output)");
  add_common(sweep_cmd, sweep_opts);
  sweep_cmd->add_option("--grid", sweep_grid, "Comma-separated beta0 grid")
      ->required();

  CommonOpts probe_opts;
  std::string probe_checkpoint;
  auto* probe_cmd = app.add_subcommand(
      "bias-probe",
      "Frozen-encoder probe on a biased dataset (trains model and beta0=0 "
      "ablation unless --checkpoint is given)");
  add_common(probe_cmd, probe_opts);
  probe_cmd->add_option("--checkpoint", probe_checkpoint,
                        "Probe an existing checkpoint instead");

  std::string md_kind = "gauss_mix", md_out;
  std::size_t md_n = 1000, md_d = 16, md_classes = 2;
  std::uint64_t md_seed = 0;
  double md_bias = 1.0, md_sep = 3.0, md_noise = 0.0;
  bool md_quiet = false;
  auto* make_data_cmd = app.add_subcommand(
      "make-data", "Generate a synthetic dataset triplet (.train/.dev/.test)");
  make_data_cmd->add_option("--kind", md_kind, "gauss_mix or biased");
  make_data_cmd->add_option("--n", md_n, "Train examples (dev n/4, test n/2)");
  make_data_cmd->add_option("--d", md_d, "Feature dimensionality");
  make_data_cmd->add_option("--classes", md_classes, "Number of classes");
  make_data_cmd->add_option("--seed", md_seed, "Generator seed");
  make_data_cmd->add_option("--bias-strength", md_bias,
                            "Scale of the spurious coordinate (biased kind)");
  make_data_cmd->add_option("--sep", md_sep, "Class-mean separation");
  make_data_cmd->add_option("--label-noise", md_noise,
                            "Fraction of train labels re-drawn");
  make_data_cmd->add_option("--out-base", md_out, "Output path base")
      ->required();
  make_data_cmd->add_flag("--quiet", md_quiet, "Suppress progress output");

  CommonOpts params_opts;
  std::size_t params_d_in = 0, params_classes = 0;
  auto* params_cmd = app.add_subcommand(
      "params", "Parameter-count report for the configured model");
  add_common(params_cmd, params_opts);
  params_cmd->add_option("--d-in", params_d_in,
                         "Input width (skips loading the dataset)");
  params_cmd->add_option("--classes", params_classes,
                         "Class count used with --d-in");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_opts);
    if (eval_cmd->parsed()) {
      return cmd_eval(eval_opts, eval_checkpoint, eval_split);
    }
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gc_quiet);
    if (klcheck_cmd->parsed()) return cmd_klcheck(kl_quiet);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_opts, sweep_grid);
    if (probe_cmd->parsed()) return cmd_bias_probe(probe_opts, probe_checkpoint);
    if (make_data_cmd->parsed()) {
      return cmd_make_data(md_kind, md_n, md_d, md_classes, md_seed, md_bias,
                           md_sep, md_noise, md_out, md_quiet);
    }
    if (params_cmd->parsed()) {
      return cmd_params(params_opts, params_d_in, params_classes);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

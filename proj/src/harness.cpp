#include "klnorm/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace klnorm {

namespace {

void apply_norm_config(Model& model, const TrainConfig& cfg) {
  if (auto* bn = std::get_if<BatchNormState>(&model.norm)) {
    bn->stats.alpha = cfg.alpha;
    bn->stats.eps = cfg.eps;
  } else if (auto* ln = std::get_if<LayerNormState>(&model.norm)) {
    ln->eps = cfg.eps;
  } else if (auto* gn = std::get_if<GroupNormState>(&model.norm)) {
    gn->eps = cfg.eps;
  } else if (auto* kn = std::get_if<KlNormState>(&model.norm)) {
    kn->stats.alpha = cfg.alpha;
    kn->stats.eps = cfg.eps;
  }
}

double accuracy_of(const Tensor& logits, std::span<const int> labels) {
  const std::size_t m = logits.shape()[0], c = logits.shape()[1];
  std::size_t hits = 0;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (best == static_cast<std::size_t>(labels[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(m);
}

double macro_f1_of(const Tensor& logits, std::span<const int> labels,
                   std::size_t n_classes) {
  const std::size_t m = logits.shape()[0], c = logits.shape()[1];
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t pred = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, pred)) pred = j;
    }
    const auto truth = static_cast<std::size_t>(labels[i]);
    if (pred == truth) {
      ++tp[truth];
    } else {
      ++fp[pred];
      ++fn[truth];
    }
  }
  double f1_sum = 0.0;
  for (std::size_t cl = 0; cl < n_classes; ++cl) {
    const double denom =
        static_cast<double>(2 * tp[cl] + fp[cl] + fn[cl]);
    f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(tp[cl]) / denom : 0.0;
  }
  return f1_sum / static_cast<double>(n_classes);
}

// KL of the head outputs against N(0,I) for an already-computed bottleneck.
double head_kl(Model& model, const Tensor& bottleneck) {
  auto* kn = std::get_if<KlNormState>(&model.norm);
  if (!kn) return 0.0;
  HeadOutputs h = klnorm_heads(bottleneck, *kn);
  const std::size_t k = model.spec.k;
  KlTerm term = kl_diag_rows(h.mu_v, exp(h.logvar_v), Tensor::zeros({k}),
                             Tensor::full({k}, 1.0));
  return term.value.item();
}

std::size_t thread_budget(std::size_t n_jobs) {
  std::size_t cap = std::thread::hardware_concurrency();
  if (cap == 0) cap = 1;
  if (const char* env = std::getenv("KLNORM_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end && *end == '\0' && v > 0) cap = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(cap, n_jobs));
}

std::string format_csv_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

EvalMetrics evaluate(Model& model, const Dataset& ds,
                     std::span<const std::size_t> idx) {
  if (idx.empty()) {
    throw std::invalid_argument("evaluate: empty split");
  }
  Tensor x = ds.batch_features(idx);
  const std::vector<int> labels = ds.batch_labels(idx);
  ForwardOut out = classify_forward(model, x, Mode::infer);
  EvalMetrics m;
  m.ce = cross_entropy(out.logits, labels).item();
  m.kl = head_kl(model, out.bottleneck);
  m.accuracy = accuracy_of(out.logits, labels);
  m.macro_f1 = macro_f1_of(out.logits, labels, ds.n_classes);
  return m;
}

Dataset materialize_dataset(const TrainConfig& cfg) {
  if (cfg.synthetic) return make_synthetic(cfg.synth);
  return load_dataset_splits(cfg.dataset);
}

RunOutput run_experiment(const TrainConfig& cfg, const Dataset& ds,
                         std::uint64_t seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  Dataset run_ds = cfg.subsample_n > 0 ? subsample(ds, cfg.subsample_n, seed)
                                       : ds;
  // Dev falls back to test, then train, for datasets without those splits.
  std::span<const std::size_t> dev_idx =
      !run_ds.dev_idx.empty()
          ? std::span<const std::size_t>(run_ds.dev_idx)
          : (!run_ds.test_idx.empty()
                 ? std::span<const std::size_t>(run_ds.test_idx)
                 : std::span<const std::size_t>(run_ds.train_idx));
  std::span<const std::size_t> test_idx =
      !run_ds.test_idx.empty() ? std::span<const std::size_t>(run_ds.test_idx)
                               : dev_idx;

  ModelSpec spec;
  spec.d_in = run_ds.width;
  spec.k = cfg.k;
  spec.hidden = cfg.hidden;
  spec.norm_kind = cfg.norm;
  spec.groups = cfg.groups;
  spec.n_classes = run_ds.n_classes;
  Model model = build_model(spec, seed);
  apply_norm_config(model, cfg);

  std::vector<Tensor> params = trainable_parameters(model);
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  adam_cfg.weight_decay = cfg.weight_decay;
  AdamState opt = make_adam(params, adam_cfg);

  SplitMix64 shuffle_rng = make_stream(seed, rng_stream::kShuffle);
  SplitMix64 dropout_rng = make_stream(seed, rng_stream::kDropout);
  const BetaSchedule schedule{cfg.beta0, 1.0};
  const bool is_klnorm = cfg.norm == NormKind::klnorm;

  RunOutput out;
  out.result.seed = seed;
  out.result.config_digest = cfg.digest();

  std::vector<std::size_t> order(run_ds.train_idx);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double beta_t = beta_at(schedule, static_cast<int>(epoch));
    shuffle_rng.shuffle(order);
    double ce_acc = 0.0, kl_acc = 0.0;
    std::size_t seen = 0;
    bool diverged = false;
    for (std::size_t start = 0; start < order.size() && !diverged;
         start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      const std::span<const std::size_t> batch_idx(order.data() + start,
                                                   stop - start);
      Tensor x = run_ds.batch_features(batch_idx);
      const std::vector<int> labels = run_ds.batch_labels(batch_idx);
      try {
        Tape tape;
        ForwardOut fwd = classify_forward(model, x, Mode::train, cfg.dropout,
                                          &dropout_rng);
        Tensor ce = cross_entropy(fwd.logits, labels);
        Tensor loss = ce;
        double kl_val = 0.0;
        if (is_klnorm) {
          kl_val = fwd.kl.value.item();
          if (!cfg.detach_kl) {
            loss = add(ce, mul(fwd.kl.value, Tensor::scalar(beta_t)));
          }
        }
        const LossBreakdown step_loss = total_loss(ce.item(), kl_val, beta_t);
        tape.backward(loss);
        adam_step(opt, params);
        zero_grad(params);
        ce_acc += step_loss.ce * static_cast<double>(batch_idx.size());
        kl_acc += step_loss.kl * static_cast<double>(batch_idx.size());
        seen += batch_idx.size();
      } catch (const NumericalError&) {
        diverged = true;
      }
    }
    if (diverged) {
      out.result.diverged = true;
      break;
    }
    EpochMetrics em;
    em.epoch = static_cast<int>(epoch);
    em.beta_t = beta_t;
    em.train = total_loss(ce_acc / static_cast<double>(seen),
                          kl_acc / static_cast<double>(seen), beta_t);
    const EvalMetrics dev = evaluate(model, run_ds, dev_idx);
    em.dev = total_loss(dev.ce, dev.kl, beta_t);
    em.dev_accuracy = dev.accuracy;
    out.result.epochs.push_back(em);
  }

  if (!out.result.diverged) {
    const EvalMetrics test = evaluate(model, run_ds, test_idx);
    out.result.test_accuracy = test.accuracy;
    out.result.test_macro_f1 = test.macro_f1;
  }
  out.result.wallclock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  out.model = std::move(model);
  return out;
}

std::map<std::string, MetricStats> aggregate_seeds(
    std::span<const RunResult> results) {
  if (results.size() < 2) {
    throw std::invalid_argument("aggregate_seeds: need at least 2 runs");
  }
  for (const auto& r : results) {
    if (r.config_digest != results[0].config_digest) {
      throw std::invalid_argument(
          "aggregate_seeds: mixed config digests (" + r.config_digest +
          " vs " + results[0].config_digest + ")");
    }
  }
  auto collect = [&](auto getter) {
    std::vector<double> vals;
    vals.reserve(results.size());
    for (const auto& r : results) vals.push_back(getter(r));
    // Sorting first makes the reduction independent of run ordering.
    std::sort(vals.begin(), vals.end());
    return vals;
  };
  auto stats_of = [](const std::vector<double>& vals) {
    MetricStats s;
    s.n = vals.size();
    double sum = 0.0;
    for (double v : vals) sum += v;
    s.mean = sum / static_cast<double>(vals.size());
    double sq = 0.0;
    for (double v : vals) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(vals.size()));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f (%.3f)", s.mean, s.stddev);
    s.formatted = buf;
    return s;
  };

  std::map<std::string, MetricStats> out;
  out["test_accuracy"] =
      stats_of(collect([](const RunResult& r) { return r.test_accuracy; }));
  out["test_macro_f1"] =
      stats_of(collect([](const RunResult& r) { return r.test_macro_f1; }));
  const bool has_epochs =
      std::all_of(results.begin(), results.end(),
                  [](const RunResult& r) { return !r.epochs.empty(); });
  if (has_epochs) {
    out["final_train_ce"] = stats_of(collect(
        [](const RunResult& r) { return r.epochs.back().train.ce; }));
    out["final_train_kl"] = stats_of(collect(
        [](const RunResult& r) { return r.epochs.back().train.kl; }));
    out["final_train_total"] = stats_of(collect(
        [](const RunResult& r) { return r.epochs.back().train.total; }));
    out["final_dev_ce"] = stats_of(
        collect([](const RunResult& r) { return r.epochs.back().dev.ce; }));
    out["final_dev_total"] = stats_of(
        collect([](const RunResult& r) { return r.epochs.back().dev.total; }));
    out["final_dev_accuracy"] = stats_of(collect(
        [](const RunResult& r) { return r.epochs.back().dev_accuracy; }));
  }
  return out;
}

namespace {

nlohmann::ordered_json epoch_json(const EpochMetrics& em) {
  return nlohmann::ordered_json{
      {"epoch", em.epoch},
      {"beta_t", em.beta_t},
      {"train",
       {{"ce", em.train.ce}, {"kl", em.train.kl}, {"total", em.train.total}}},
      {"dev",
       {{"ce", em.dev.ce},
        {"kl", em.dev.kl},
        {"total", em.dev.total},
        {"accuracy", em.dev_accuracy}}},
  };
}

void write_run_files(const std::filesystem::path& run_dir,
                     const RunResult& result, const Model& model) {
  std::ofstream jsonl(run_dir / (std::to_string(result.seed) + ".jsonl"));
  for (const auto& em : result.epochs) {
    jsonl << epoch_json(em).dump() << "\n";
  }
  nlohmann::ordered_json fin{
      {"seed", result.seed},
      {"config_digest", result.config_digest},
      {"test_accuracy", result.test_accuracy},
      {"test_macro_f1", result.test_macro_f1},
      {"diverged", result.diverged},
      {"wallclock_sec", result.wallclock_sec},
  };
  jsonl << fin.dump() << "\n";
  save_checkpoint(model, run_dir / (std::to_string(result.seed) + ".kln"));
}

}  // namespace

ExperimentOutput train_all(const TrainConfig& cfg, bool write_files) {
  cfg.validate();
  const Dataset ds = materialize_dataset(cfg);
  ExperimentOutput out;
  out.run_dir = std::filesystem::path(cfg.out_dir) / cfg.digest();

  std::vector<RunOutput> runs(cfg.seeds.size());
  const std::size_t budget = thread_budget(cfg.seeds.size());
  for (std::size_t start = 0; start < cfg.seeds.size(); start += budget) {
    const std::size_t stop = std::min(cfg.seeds.size(), start + budget);
    std::vector<std::future<RunOutput>> futures;
    for (std::size_t i = start; i < stop; ++i) {
      futures.push_back(std::async(std::launch::async, [&cfg, &ds, i]() {
        return run_experiment(cfg, ds, cfg.seeds[i]);
      }));
    }
    for (std::size_t i = start; i < stop; ++i) {
      runs[i] = futures[i - start].get();
    }
  }

  for (auto& r : runs) out.runs.push_back(r.result);
  if (out.runs.size() >= 2) {
    out.summary = aggregate_seeds(out.runs);
  }

  if (write_files) {
    std::filesystem::create_directories(out.run_dir);
    for (std::size_t i = 0; i < runs.size(); ++i) {
      write_run_files(out.run_dir, runs[i].result, runs[i].model);
    }
    std::ofstream csv(out.run_dir / "summary.csv");
    csv << "config_digest,metric,mean,std,n_seeds\n";
    for (const auto& [metric, stats] : out.summary) {
      csv << cfg.digest() << ',' << metric << ','
          << format_csv_double(stats.mean) << ','
          << format_csv_double(stats.stddev) << ',' << stats.n << "\n";
    }
  }
  return out;
}

SweepResult sweep_beta(const TrainConfig& cfg, std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("sweep_beta: empty grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) {
      throw std::invalid_argument("sweep_beta: grid must be strictly increasing");
    }
  }
  SweepResult sweep;
  sweep.grid.assign(grid.begin(), grid.end());
  for (double beta0 : grid) {
    TrainConfig point_cfg = cfg;
    point_cfg.beta0 = beta0;
    ExperimentOutput res = train_all(point_cfg, /*write_files=*/false);
    SweepPoint p;
    p.beta0 = beta0;
    std::vector<double> train_ce, dev_ce, gaps, train_total, dev_total;
    for (const auto& run : res.runs) {
      if (run.epochs.empty()) continue;
      const auto& last = run.epochs.back();
      train_ce.push_back(last.train.ce);
      dev_ce.push_back(last.dev.ce);
      gaps.push_back(last.dev.ce - last.train.ce);
      train_total.push_back(last.train.total);
      dev_total.push_back(last.dev.total);
    }
    if (train_ce.empty()) {
      throw NumericalError("sweep_beta: all runs diverged at beta0=" +
                           std::to_string(beta0));
    }
    auto mean_of = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    auto std_of = [&](std::vector<double> v) {
      const double mu = mean_of(v);
      double sq = 0.0;
      for (double x : v) sq += (x - mu) * (x - mu);
      return std::sqrt(sq / static_cast<double>(v.size()));
    };
    p.train_ce_mean = mean_of(train_ce);
    p.train_ce_std = std_of(train_ce);
    p.dev_ce_mean = mean_of(dev_ce);
    p.dev_ce_std = std_of(dev_ce);
    p.gap_mean = mean_of(gaps);
    p.train_total_mean = mean_of(train_total);
    p.dev_total_mean = mean_of(dev_total);
    sweep.points.push_back(p);
  }
  return sweep;
}

void write_sweep_csv(const SweepResult& sweep,
                     const std::filesystem::path& path) {
  std::ofstream csv(path);
  if (!csv) {
    throw std::invalid_argument("write_sweep_csv: cannot open " + path.string());
  }
  csv << "beta0,train_ce_mean,train_ce_std,val_ce_mean,val_ce_std,"
         "gap_mean,train_total_mean,val_total_mean\n";
  for (const auto& p : sweep.points) {
    csv << format_csv_double(p.beta0) << ','
        << format_csv_double(p.train_ce_mean) << ','
        << format_csv_double(p.train_ce_std) << ','
        << format_csv_double(p.dev_ce_mean) << ','
        << format_csv_double(p.dev_ce_std) << ','
        << format_csv_double(p.gap_mean) << ','
        << format_csv_double(p.train_total_mean) << ','
        << format_csv_double(p.dev_total_mean) << "\n";
  }
}

double bias_probe(Model& model, const Dataset& biased_ds, std::uint64_t seed) {
  if (biased_ds.spurious.empty()) {
    throw std::invalid_argument(
        "bias_probe: dataset has no spurious tags (use the 'biased' kind)");
  }
  if (model.spec.d_in != biased_ds.width) {
    throw std::invalid_argument(
        "bias_probe: checkpoint d_in=" + std::to_string(model.spec.d_in) +
        " does not match dataset width " + std::to_string(biased_ds.width));
  }
  if (biased_ds.train_idx.empty() || biased_ds.test_idx.empty()) {
    throw std::invalid_argument("bias_probe: dataset needs train and test splits");
  }

  // Frozen representations (inference mode, nothing taped or mutated).
  Tensor train_x = biased_ds.batch_features(biased_ds.train_idx);
  Tensor test_x = biased_ds.batch_features(biased_ds.test_idx);
  Tensor train_rep =
      classify_forward(model, train_x, Mode::infer).representation.detach();
  Tensor test_rep =
      classify_forward(model, test_x, Mode::infer).representation.detach();
  const std::vector<int> train_y =
      biased_ds.batch_labels(biased_ds.train_idx);
  const std::vector<int> test_spurious =
      biased_ds.batch_spurious(biased_ds.test_idx);

  // Fresh linear probe, full-batch Adam.
  const std::size_t k = model.spec.k;
  const std::size_t c = biased_ds.n_classes;
  SplitMix64 rng = make_stream(seed, rng_stream::kProbe);
  const double bound = 1.0 / std::sqrt(static_cast<double>(k));
  std::vector<double> w(k * c);
  for (double& v : w) v = rng.uniform(-bound, bound);
  Linear probe;
  probe.weight = Tensor::matrix(k, c, std::move(w)).set_requires_grad();
  probe.bias = Tensor::zeros({c}).set_requires_grad();
  std::vector<Tensor> params{probe.weight, probe.bias};
  AdamConfig pc;
  pc.lr = 1e-2;
  AdamState opt = make_adam(params, pc);
  for (int step = 0; step < 800; ++step) {
    Tape tape;
    Tensor loss = cross_entropy(linear_forward(probe, train_rep), train_y);
    tape.backward(loss);
    adam_step(opt, params);
    zero_grad(params);
  }

  Tensor logits = linear_forward(probe, test_rep);
  return accuracy_of(logits, test_spurious);
}

}  // namespace klnorm

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "klnorm/harness.hpp"

namespace py = pybind11;
using namespace klnorm;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] =
        static_cast<std::size_t>(a.shape(i));
  }
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

using DoubleArray =
    py::array_t<double, py::array::c_style | py::array::forcecast>;

double py_kl_diag_gauss(const DoubleArray& mu0, const DoubleArray& var0,
                        const DoubleArray& mu1, const DoubleArray& var1) {
  return kl_diag_gauss(tensor_from_array(mu0), tensor_from_array(var0),
                       tensor_from_array(mu1), tensor_from_array(var1))
      .item();
}

SyntheticSpec spec_from_kwargs(const std::string& kind, std::size_t n,
                               std::size_t d, std::size_t classes,
                               std::uint64_t seed, double bias_strength,
                               double sep, double label_noise) {
  SyntheticSpec spec;
  spec.kind = synthetic_kind_from_name(kind);
  spec.n = n;
  spec.d_in = d;
  spec.n_classes = classes;
  spec.seed = seed;
  spec.bias_strength = bias_strength;
  spec.sep = sep;
  spec.label_noise = label_noise;
  return spec;
}

py::dict dataset_to_dict(const Dataset& ds) {
  py::dict out;
  const std::size_t n = ds.size();
  py::array_t<double> features({n, ds.width});
  std::copy(ds.features.begin(), ds.features.end(), features.mutable_data());
  py::array_t<int> labels(static_cast<py::ssize_t>(n));
  std::copy(ds.labels.begin(), ds.labels.end(), labels.mutable_data());
  out["features"] = features;
  out["labels"] = labels;
  out["train_idx"] = ds.train_idx;
  out["dev_idx"] = ds.dev_idx;
  out["test_idx"] = ds.test_idx;
  out["n_classes"] = ds.n_classes;
  if (!ds.spurious.empty()) out["spurious"] = ds.spurious;
  return out;
}

py::dict result_to_dict(const RunResult& r) {
  py::dict out;
  out["seed"] = r.seed;
  out["config_digest"] = r.config_digest;
  out["test_accuracy"] = r.test_accuracy;
  out["test_macro_f1"] = r.test_macro_f1;
  out["diverged"] = r.diverged;
  py::list epochs;
  for (const auto& em : r.epochs) {
    py::dict e;
    e["epoch"] = em.epoch;
    e["beta_t"] = em.beta_t;
    e["train_ce"] = em.train.ce;
    e["train_kl"] = em.train.kl;
    e["train_total"] = em.train.total;
    e["dev_ce"] = em.dev.ce;
    e["dev_total"] = em.dev.total;
    e["dev_accuracy"] = em.dev_accuracy;
    epochs.append(e);
  }
  out["epochs"] = epochs;
  return out;
}

// Thin model wrapper holding the C++ model plus enough to run forwards.
class PyModel {
 public:
  PyModel(std::size_t d_in, std::size_t k, const std::string& norm,
          std::size_t classes, std::uint64_t seed, std::size_t groups,
          std::vector<std::size_t> hidden) {
    ModelSpec spec;
    spec.d_in = d_in;
    spec.k = k;
    spec.norm_kind = norm_kind_from_name(norm);
    spec.n_classes = classes;
    spec.groups = groups;
    spec.hidden = std::move(hidden);
    model_ = build_model(spec, seed);
  }

  explicit PyModel(Model model) : model_(std::move(model)) {}

  py::tuple forward(const DoubleArray& x, bool train) {
    ForwardOut out = classify_forward(model_, tensor_from_array(x),
                                      train ? Mode::train : Mode::infer);
    return py::make_tuple(array_from_tensor(out.logits),
                          out.kl.value.item());
  }

  py::tuple count_params() const {
    ParamCount pc = count_parameters(model_);
    return py::make_tuple(pc.total, pc.norm_overhead, pc.overhead_pct);
  }

  void pin_klnorm_heads() {
    auto* kn = std::get_if<KlNormState>(&model_.norm);
    if (!kn) throw std::invalid_argument("model is not klnorm");
    for (auto* t : {&kn->mean_weight, &kn->mean_bias, &kn->logvar_weight,
                    &kn->logvar_bias}) {
      for (auto& v : t->data_mut()) v = 0.0;
    }
  }

  void save(const std::string& path) const { save_checkpoint(model_, path); }

  Model& model() { return model_; }

 private:
  Model model_;
};

}  // namespace

PYBIND11_MODULE(_klnorm, m) {
  m.doc() = "KL-regularized normalization: core operations and the "
            "experiment harness";

  py::register_exception<NumericalError>(m, "NumericalError");

  m.def("kl_diag_gauss", &py_kl_diag_gauss, py::arg("mu0"), py::arg("var0"),
        py::arg("mu1"), py::arg("var1"),
        "Closed-form KL between diagonal Gaussians given as 1-d arrays");

  m.def(
      "beta_at",
      [](double beta0, int epoch) {
        return beta_at(BetaSchedule{beta0, 1.0}, epoch);
      },
      py::arg("beta0"), py::arg("epoch"),
      "Linear KL-weight annealing: min(1, epoch * beta0)");

  m.def(
      "cross_entropy",
      [](const DoubleArray& logits, const std::vector<int>& labels) {
        return cross_entropy(tensor_from_array(logits), labels).item();
      },
      py::arg("logits"), py::arg("labels"));

  m.def(
      "make_synthetic",
      [](const std::string& kind, std::size_t n, std::size_t d,
         std::size_t classes, std::uint64_t seed, double bias_strength,
         double sep, double label_noise) {
        return dataset_to_dict(make_synthetic(spec_from_kwargs(
            kind, n, d, classes, seed, bias_strength, sep, label_noise)));
      },
      py::arg("kind") = "gauss_mix", py::arg("n") = 1000, py::arg("d") = 16,
      py::arg("classes") = 2, py::arg("seed") = 0,
      py::arg("bias_strength") = 1.0, py::arg("sep") = 3.0,
      py::arg("label_noise") = 0.0);

  m.def(
      "run_config",
      [](const std::string& config_text, std::uint64_t seed) {
        TrainConfig cfg = parse_config_text(config_text, {});
        Dataset ds = materialize_dataset(cfg);
        return result_to_dict(run_experiment(cfg, ds, seed).result);
      },
      py::arg("config_text"), py::arg("seed"),
      "Run one seeded experiment from config text and return its metrics");

  m.def(
      "train_all",
      [](const std::string& config_text, bool write_files) {
        TrainConfig cfg = parse_config_text(config_text, {});
        ExperimentOutput res = train_all(cfg, write_files);
        py::dict out;
        py::list runs;
        for (const auto& r : res.runs) runs.append(result_to_dict(r));
        out["runs"] = runs;
        py::dict summary;
        for (const auto& [metric, stats] : res.summary) {
          py::dict s;
          s["mean"] = stats.mean;
          s["std"] = stats.stddev;
          s["formatted"] = stats.formatted;
          summary[py::str(metric)] = s;
        }
        out["summary"] = summary;
        out["run_dir"] = res.run_dir.string();
        return out;
      },
      py::arg("config_text"), py::arg("write_files") = false);

  py::class_<PyModel>(m, "Model")
      .def(py::init<std::size_t, std::size_t, const std::string&, std::size_t,
                    std::uint64_t, std::size_t, std::vector<std::size_t>>(),
           py::arg("d_in"), py::arg("k"), py::arg("norm") = "none",
           py::arg("classes") = 2, py::arg("seed") = 0, py::arg("groups") = 1,
           py::arg("hidden") = std::vector<std::size_t>{})
      .def("forward", &PyModel::forward, py::arg("x"),
           py::arg("train") = false,
           "Returns (logits, kl); train mode updates moving statistics")
      .def("count_params", &PyModel::count_params)
      .def("pin_klnorm_heads", &PyModel::pin_klnorm_heads)
      .def("save", &PyModel::save, py::arg("path"));

  m.def(
      "load_model",
      [](const std::string& path) { return PyModel(load_checkpoint(path)); },
      py::arg("path"));
}

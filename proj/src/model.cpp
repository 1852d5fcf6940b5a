#include "klnorm/model.hpp"

#include <cmath>
#include <string>

namespace klnorm {

const char* norm_kind_name(NormKind kind) {
  switch (kind) {
    case NormKind::none: return "none";
    case NormKind::batch: return "batch";
    case NormKind::layer: return "layer";
    case NormKind::group: return "group";
    case NormKind::klnorm: return "klnorm";
  }
  return "?";
}

NormKind norm_kind_from_name(const std::string& name) {
  if (name == "none") return NormKind::none;
  if (name == "batch") return NormKind::batch;
  if (name == "layer") return NormKind::layer;
  if (name == "group") return NormKind::group;
  if (name == "klnorm") return NormKind::klnorm;
  throw std::invalid_argument("unknown norm kind '" + name + "'");
}

std::vector<std::size_t> ModelSpec::default_hidden(std::size_t d_in,
                                                   std::size_t k) {
  return {d_in, (3 * d_in + k) / 4, (d_in + k) / 2};
}

std::vector<std::size_t> ModelSpec::encoder_widths() const {
  std::vector<std::size_t> widths;
  widths.push_back(d_in);
  const std::vector<std::size_t>& h =
      hidden.empty() ? default_hidden(d_in, k) : hidden;
  widths.insert(widths.end(), h.begin(), h.end());
  widths.push_back(k);
  return widths;
}

void ModelSpec::validate() const {
  if (d_in == 0) throw std::invalid_argument("model: d_in must be >= 1");
  if (k == 0) throw std::invalid_argument("model: K must be >= 1");
  if (n_classes < 2) {
    throw std::invalid_argument("model: n_classes must be >= 2");
  }
  for (std::size_t h : hidden.empty() ? default_hidden(d_in, k) : hidden) {
    if (h == 0) throw std::invalid_argument("model: hidden width 0");
  }
  if (norm_kind == NormKind::group && (groups == 0 || k % groups != 0)) {
    throw std::invalid_argument("model: groups must divide K");
  }
}

Tensor linear_forward(const Linear& l, const Tensor& x) {
  return add(matmul(x, l.weight), l.bias);
}

namespace {

Linear init_linear(std::size_t fan_in, std::size_t fan_out, SplitMix64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  Linear l;
  l.weight = Tensor::matrix(fan_in, fan_out, std::move(w)).set_requires_grad();
  l.bias = Tensor::zeros({fan_out}).set_requires_grad();
  return l;
}

}  // namespace

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  SplitMix64 rng = make_stream(seed, rng_stream::kInit);
  // The norm draws from a forked stream reserved up front, so encoder and
  // classifier weights are identical across norm kinds for a given seed.
  const std::uint64_t norm_seed = rng.next_u64();
  Model model;
  model.spec = spec;
  const auto widths = spec.encoder_widths();
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    model.encoder.push_back(init_linear(widths[i], widths[i + 1], rng));
  }
  switch (spec.norm_kind) {
    case NormKind::none:
      model.norm = NoNorm{};
      break;
    case NormKind::batch:
      model.norm = make_batchnorm(spec.k);
      break;
    case NormKind::layer:
      model.norm = make_layernorm(spec.k);
      break;
    case NormKind::group:
      model.norm = make_groupnorm(spec.k, spec.groups);
      break;
    case NormKind::klnorm:
      model.norm = make_klnorm(spec.k, norm_seed);
      break;
  }
  model.classifier = init_linear(spec.k, spec.n_classes, rng);
  return model;
}

ForwardOut classify_forward(Model& model, const Tensor& x, Mode mode,
                            double dropout_p, SplitMix64* dropout_rng) {
  if (x.rank() != 2 || x.shape()[1] != model.spec.d_in) {
    throw std::invalid_argument(
        "classify_forward: input shape " + shape_str(x.shape()) +
        " does not match d_in=" + std::to_string(model.spec.d_in));
  }
  ForwardOut out;
  Tensor h = x;
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    h = linear_forward(model.encoder[i], h);
    if (i + 1 < model.encoder.size()) h = relu(h);
  }
  out.bottleneck = h;

  const std::size_t m = x.shape()[0];
  Tensor z;
  out.kl.value = Tensor::scalar(0.0);
  out.kl.per_example = Tensor::zeros({m});
  if (std::holds_alternative<NoNorm>(model.norm)) {
    z = h;
  } else if (auto* bn = std::get_if<BatchNormState>(&model.norm)) {
    if (mode == Mode::train) {
      BatchNormOut bo = batchnorm_forward_train(h, *bn);
      update_moving_stats(bn->stats, bo.mu.detach(), bo.var.detach());
      z = bo.z;
    } else {
      z = batchnorm_forward_infer(h, *bn);
    }
  } else if (auto* ln = std::get_if<LayerNormState>(&model.norm)) {
    z = layernorm_forward(h, ln->gamma, ln->beta_affine, ln->eps);
  } else if (auto* gn = std::get_if<GroupNormState>(&model.norm)) {
    z = groupnorm_forward(h, gn->groups, gn->gamma, gn->beta_affine, gn->eps);
  } else {
    auto& kn = std::get<KlNormState>(model.norm);
    if (mode == Mode::train) {
      KlNormOut ko = klnorm_forward_train(h, kn);
      z = ko.z;
      out.kl = ko.kl;
    } else {
      z = klnorm_forward_infer(h, kn);
    }
  }

  if (mode == Mode::train && dropout_p > 0.0) {
    if (!(dropout_p < 1.0)) {
      throw std::invalid_argument("classify_forward: dropout must be < 1");
    }
    if (!dropout_rng) {
      throw std::invalid_argument("classify_forward: dropout needs an rng");
    }
    std::vector<double> mask(z.numel());
    const double keep = 1.0 - dropout_p;
    for (double& v : mask) {
      v = dropout_rng->next_double() < dropout_p ? 0.0 : 1.0 / keep;
    }
    z = mul(z, Tensor::from_data(z.shape(), std::move(mask)));
  }

  out.representation = z;
  out.logits = linear_forward(model.classifier, z);
  check_finite(out.logits, "classify_forward logits");
  return out;
}

namespace {

std::size_t linear_params(const Linear& l) {
  return l.weight.numel() + l.bias.numel();
}

}  // namespace

ParamCount count_parameters(const Model& model) {
  ParamCount pc;
  for (const auto& l : model.encoder) pc.total += linear_params(l);
  pc.total += linear_params(model.classifier);
  if (const auto* bn = std::get_if<BatchNormState>(&model.norm)) {
    pc.norm_overhead = bn->gamma.numel() + bn->beta_affine.numel();
  } else if (const auto* ln = std::get_if<LayerNormState>(&model.norm)) {
    pc.norm_overhead = ln->gamma.numel() + ln->beta_affine.numel();
  } else if (const auto* gn = std::get_if<GroupNormState>(&model.norm)) {
    pc.norm_overhead = gn->gamma.numel() + gn->beta_affine.numel();
  } else if (const auto* kn = std::get_if<KlNormState>(&model.norm)) {
    pc.norm_overhead = kn->mean_weight.numel() + kn->mean_bias.numel() +
                       kn->logvar_weight.numel() + kn->logvar_bias.numel();
  }
  pc.total += pc.norm_overhead;
  pc.overhead_pct =
      100.0 * static_cast<double>(pc.norm_overhead) / static_cast<double>(pc.total);
  return pc;
}

std::vector<Tensor> trainable_parameters(Model& model) {
  std::vector<Tensor> params;
  for (auto& l : model.encoder) {
    params.push_back(l.weight);
    params.push_back(l.bias);
  }
  if (auto* bn = std::get_if<BatchNormState>(&model.norm)) {
    params.push_back(bn->gamma);
    params.push_back(bn->beta_affine);
  } else if (auto* ln = std::get_if<LayerNormState>(&model.norm)) {
    params.push_back(ln->gamma);
    params.push_back(ln->beta_affine);
  } else if (auto* gn = std::get_if<GroupNormState>(&model.norm)) {
    params.push_back(gn->gamma);
    params.push_back(gn->beta_affine);
  } else if (auto* kn = std::get_if<KlNormState>(&model.norm)) {
    params.push_back(kn->mean_weight);
    params.push_back(kn->mean_bias);
    params.push_back(kn->logvar_weight);
    params.push_back(kn->logvar_bias);
  }
  params.push_back(model.classifier.weight);
  params.push_back(model.classifier.bias);
  return params;
}

}  // namespace klnorm

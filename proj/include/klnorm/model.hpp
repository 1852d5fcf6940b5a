#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "klnorm/norm.hpp"
#include "klnorm/rng.hpp"
#include "klnorm/tensor.hpp"

namespace klnorm {

enum class NormKind { none, batch, layer, group, klnorm };

const char* norm_kind_name(NormKind kind);
NormKind norm_kind_from_name(const std::string& name);

struct ModelSpec {
  std::size_t d_in = 0;
  std::size_t k = 0;  // bottleneck width
  // Encoder hidden widths; empty means the default ladder
  // [d_in, (3*d_in + K)/4, (d_in + K)/2] (floored).
  std::vector<std::size_t> hidden;
  NormKind norm_kind = NormKind::none;
  std::size_t groups = 1;  // group-norm only
  std::size_t n_classes = 2;

  static std::vector<std::size_t> default_hidden(std::size_t d_in,
                                                 std::size_t k);
  // d_in, hidden..., k
  std::vector<std::size_t> encoder_widths() const;
  void validate() const;
};

struct Linear {
  Tensor weight;  // {in, out}
  Tensor bias;    // {out}
};

Tensor linear_forward(const Linear& l, const Tensor& x);

struct NoNorm {};
using NormLayer =
    std::variant<NoNorm, BatchNormState, LayerNormState, GroupNormState,
                 KlNormState>;

struct Model {
  ModelSpec spec;
  std::vector<Linear> encoder;  // linear+ReLU stack ending at width k
  NormLayer norm;
  Linear classifier;  // k -> n_classes
};

// Weights uniform in +-sqrt(1/fan_in), biases zero; deterministic in seed.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

enum class Mode { train, infer };

struct ForwardOut {
  Tensor logits;  // {m, n_classes}
  KlTerm kl;      // zero unless norm_kind == klnorm and mode == train
  Tensor bottleneck;      // encoder output (pre-norm)
  Tensor representation;  // what the classifier consumes (post-norm)
};

// Full forward pass. Train mode updates moving statistics where the layer
// tracks them; infer mode mutates nothing. dropout_p > 0 applies inverted
// dropout to the post-norm representation in train mode (regularization
// baseline; off by default), drawing its mask from `dropout_rng`.
ForwardOut classify_forward(Model& model, const Tensor& x, Mode mode,
                            double dropout_p = 0.0,
                            SplitMix64* dropout_rng = nullptr);

struct ParamCount {
  std::size_t total = 0;
  std::size_t norm_overhead = 0;
  double overhead_pct = 0.0;  // 100 * norm_overhead / total
};

// Exact counts from the parameter shapes. For klnorm the overhead is
// 2*(K*K + K); for batch/layer/group it is the two affine d-vectors.
ParamCount count_parameters(const Model& model);

std::vector<Tensor> trainable_parameters(Model& model);

}  // namespace klnorm

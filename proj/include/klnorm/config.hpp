#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "klnorm/dataset.hpp"
#include "klnorm/model.hpp"

namespace klnorm {

// Fully resolved experiment configuration. Every field except out_dir enters
// the config digest, which names the run directory and guards aggregation
// against mixing incompatible runs.
struct TrainConfig {
  // data
  std::string dataset;  // split-file base; empty when synthetic
  bool synthetic = false;
  SyntheticSpec synth;
  std::size_t subsample_n = 0;  // 0 = use the full train split

  // model
  NormKind norm = NormKind::none;
  std::size_t k = 16;
  std::size_t groups = 2;
  std::vector<std::size_t> hidden;  // empty = default ladder

  // training
  std::size_t batch = 8;
  std::size_t epochs = 50;
  double lr = 1e-3;
  double beta0 = 0.1;
  bool detach_kl = false;
  double dropout = 0.0;
  double weight_decay = 0.0;
  double alpha = 0.1;  // moving-average rate
  double eps = 1e-5;   // normalization epsilon

  std::vector<std::uint64_t> seeds = {13, 42, 71, 100, 2024};
  std::string out_dir = "runs";

  void validate() const;
  // FNV-1a 64 over the canonical sorted key=value rendering (out excluded).
  std::string digest() const;
  std::string canonical_text() const;
};

// Parses `key = value` lines ('#' starts a comment), then applies
// `key=value` overrides in order. Unknown keys, bad types, and missing
// required keys (model.norm; dataset unless data.kind is synthetic) are
// errors naming the key.
TrainConfig parse_config(const std::filesystem::path& path,
                         std::span<const std::string> overrides);
TrainConfig parse_config_text(const std::string& text,
                              std::span<const std::string> overrides);

std::uint64_t fnv1a64(std::string_view text);

}  // namespace klnorm

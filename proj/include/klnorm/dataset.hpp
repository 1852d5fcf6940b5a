#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "klnorm/tensor.hpp"

namespace klnorm {

// Flat feature/label table with train/dev/test membership kept as index
// lists. Labels are contiguous from 0.
struct Dataset {
  std::string name;
  std::size_t width = 0;      // feature dimensionality
  std::size_t n_classes = 0;
  std::vector<double> features;  // row-major, size() == n * width
  std::vector<int> labels;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> dev_idx;
  std::vector<std::size_t> test_idx;
  // Ground-truth class behind the spurious coordinate, per example. Only
  // populated by make_synthetic(biased); drives the bias probe.
  std::vector<int> spurious;

  std::size_t size() const { return labels.size(); }
  void validate() const;

  Tensor batch_features(std::span<const std::size_t> idx) const;
  std::vector<int> batch_labels(std::span<const std::size_t> idx) const;
  std::vector<int> batch_spurious(std::span<const std::size_t> idx) const;
};

// Text format, one file per split:
//   #klnorm-ds v1 d=<d_in> classes=<C>
//   label,f1,f2,...,fd
// Floats are written in shortest round-trip decimal form, so
// save(load(f)) == f byte-for-byte on canonical files.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

// Split triplet <base>.train / <base>.dev / <base>.test combined into one
// dataset. dev/test files are optional.
Dataset load_dataset_splits(const std::filesystem::path& base);
void save_dataset_splits(const Dataset& ds, const std::filesystem::path& base);

enum class SyntheticKind { gauss_mix, biased };

SyntheticKind synthetic_kind_from_name(const std::string& name);
const char* synthetic_kind_name(SyntheticKind kind);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::gauss_mix;
  std::size_t n = 1000;  // train examples; dev gets n/4, test n/2 (min 1)
  std::size_t d_in = 16;
  std::size_t n_classes = 2;
  std::uint64_t seed = 0;
  double bias_strength = 1.0;  // biased: scale of the spurious coordinate
  double sep = 3.0;            // distance between adjacent class means
  double label_noise = 0.0;    // fraction of train labels re-drawn at random
};

// Deterministic given the spec. gauss_mix: isotropic unit-variance Gaussian
// blobs with means sep apart along random directions. biased: gauss_mix on
// d_in dims plus one appended spurious coordinate equal to the label (times
// bias_strength) on train/dev and shuffled across examples on test, so the
// spurious/label correlation is exactly 1 in train and ~0 in test.
Dataset make_synthetic(const SyntheticSpec& spec);

// Class-stratified train subsample of exactly n examples (per-class counts
// within 1 of exact proportionality); dev/test untouched. Deterministic per
// seed; the selected indices are kept sorted.
Dataset subsample(const Dataset& ds, std::size_t n, std::uint64_t seed);

}  // namespace klnorm

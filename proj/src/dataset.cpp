#include "klnorm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "klnorm/rng.hpp"

namespace klnorm {

void Dataset::validate() const {
  if (width == 0) throw std::invalid_argument("dataset: zero feature width");
  if (features.size() != labels.size() * width) {
    throw std::invalid_argument("dataset: feature/label size mismatch");
  }
  if (n_classes < 2) {
    throw std::invalid_argument("dataset: need at least 2 classes");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(y) +
                                  " outside [0," + std::to_string(n_classes) +
                                  ")");
    }
  }
  std::vector<bool> seen(size(), false);
  for (const auto* split : {&train_idx, &dev_idx, &test_idx}) {
    for (std::size_t i : *split) {
      if (i >= size()) throw std::invalid_argument("dataset: split index out of range");
      if (seen[i]) throw std::invalid_argument("dataset: split indices overlap");
      seen[i] = true;
    }
  }
  if (!spurious.empty() && spurious.size() != size()) {
    throw std::invalid_argument("dataset: spurious tag size mismatch");
  }
}

Tensor Dataset::batch_features(std::span<const std::size_t> idx) const {
  std::vector<double> out(idx.size() * width);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const double* src = features.data() + idx[r] * width;
    std::copy(src, src + width, out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return Tensor::matrix(idx.size(), width, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> idx) const {
  std::vector<int> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) out[r] = labels[idx[r]];
  return out;
}

std::vector<int> Dataset::batch_spurious(
    std::span<const std::size_t> idx) const {
  if (spurious.empty()) {
    throw std::invalid_argument("dataset: no spurious tags (not a 'biased' set)");
  }
  std::vector<int> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) out[r] = spurious[idx[r]];
  return out;
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

[[noreturn]] void parse_error(const std::filesystem::path& path,
                              std::size_t line_no, const std::string& msg) {
  throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) +
                              ": " + msg);
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::invalid_argument("load_dataset: cannot open " + path.string());
  }
  std::string line;
  if (!std::getline(in, line)) parse_error(path, 1, "empty file");
  std::size_t d = 0, classes = 0;
  {
    std::istringstream hs(line);
    std::string magic, version, dfield, cfield;
    hs >> magic >> version >> dfield >> cfield;
    if (magic != "#klnorm-ds" || version != "v1" ||
        dfield.rfind("d=", 0) != 0 || cfield.rfind("classes=", 0) != 0) {
      parse_error(path, 1,
                  "bad header, expected '#klnorm-ds v1 d=<d> classes=<C>'");
    }
    d = std::stoul(dfield.substr(2));
    classes = std::stoul(cfield.substr(8));
  }
  if (d == 0) parse_error(path, 1, "d must be >= 1");
  if (classes < 2) parse_error(path, 1, "classes must be >= 2");

  Dataset ds;
  ds.name = path.stem().string();
  ds.width = d;
  ds.n_classes = classes;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    int label = 0;
    auto lr = std::from_chars(p, end, label);
    if (lr.ec != std::errc{}) parse_error(path, line_no, "bad label");
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      parse_error(path, line_no, "label " + std::to_string(label) +
                                     " outside [0," + std::to_string(classes) + ")");
    }
    p = lr.ptr;
    std::size_t count = 0;
    while (p != end) {
      if (*p != ',') parse_error(path, line_no, "expected ','");
      ++p;
      double v = 0.0;
      auto fr = std::from_chars(p, end, v);
      if (fr.ec != std::errc{}) parse_error(path, line_no, "bad float");
      if (!std::isfinite(v)) parse_error(path, line_no, "non-finite feature");
      ds.features.push_back(v);
      p = fr.ptr;
      ++count;
    }
    if (count != d) {
      parse_error(path, line_no, "row has " + std::to_string(count) +
                                     " features, header says " + std::to_string(d));
    }
    ds.labels.push_back(label);
  }
  ds.train_idx.resize(ds.size());
  std::iota(ds.train_idx.begin(), ds.train_idx.end(), 0);
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::invalid_argument("save_dataset: cannot open " + path.string());
  }
  out << "#klnorm-ds v1 d=" << ds.width << " classes=" << ds.n_classes << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (std::size_t j = 0; j < ds.width; ++j) {
      out << ',' << format_double(ds.features[i * ds.width + j]);
    }
    out << '\n';
  }
}

namespace {

// Appends rows of `part` to `ds` and records their indices in `idx`.
void append_split(Dataset& ds, const Dataset& part,
                  std::vector<std::size_t>& idx) {
  if (part.width != ds.width || part.n_classes != ds.n_classes) {
    throw std::invalid_argument(
        "load_dataset_splits: split files disagree on d/classes");
  }
  for (std::size_t i = 0; i < part.size(); ++i) {
    idx.push_back(ds.labels.size());
    ds.labels.push_back(part.labels[i]);
  }
  ds.features.insert(ds.features.end(), part.features.begin(),
                     part.features.end());
}

Dataset slice(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out;
  out.name = ds.name;
  out.width = ds.width;
  out.n_classes = ds.n_classes;
  for (std::size_t i : idx) {
    out.labels.push_back(ds.labels[i]);
    const double* src = ds.features.data() + i * ds.width;
    out.features.insert(out.features.end(), src, src + ds.width);
  }
  return out;
}

}  // namespace

Dataset load_dataset_splits(const std::filesystem::path& base) {
  const auto train_path = std::filesystem::path(base.string() + ".train");
  Dataset train = load_dataset(train_path);
  Dataset ds;
  ds.name = base.stem().string();
  ds.width = train.width;
  ds.n_classes = train.n_classes;
  append_split(ds, train, ds.train_idx);
  for (auto [suffix, idx] :
       {std::pair{".dev", &ds.dev_idx}, std::pair{".test", &ds.test_idx}}) {
    const auto p = std::filesystem::path(base.string() + suffix);
    if (std::filesystem::exists(p)) append_split(ds, load_dataset(p), *idx);
  }
  ds.validate();
  return ds;
}

void save_dataset_splits(const Dataset& ds, const std::filesystem::path& base) {
  save_dataset(slice(ds, ds.train_idx), base.string() + ".train");
  if (!ds.dev_idx.empty()) {
    save_dataset(slice(ds, ds.dev_idx), base.string() + ".dev");
  }
  if (!ds.test_idx.empty()) {
    save_dataset(slice(ds, ds.test_idx), base.string() + ".test");
  }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

SyntheticKind synthetic_kind_from_name(const std::string& name) {
  if (name == "gauss_mix") return SyntheticKind::gauss_mix;
  if (name == "biased") return SyntheticKind::biased;
  throw std::invalid_argument("unknown synthetic kind '" + name + "'");
}

const char* synthetic_kind_name(SyntheticKind kind) {
  return kind == SyntheticKind::gauss_mix ? "gauss_mix" : "biased";
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.n < spec.n_classes) {
    throw std::invalid_argument("make_synthetic: n < n_classes");
  }
  if (spec.d_in == 0) throw std::invalid_argument("make_synthetic: d_in == 0");
  if (spec.n_classes < 2) {
    throw std::invalid_argument("make_synthetic: need >= 2 classes");
  }
  if (spec.kind == SyntheticKind::biased && !(spec.bias_strength > 0.0)) {
    throw std::invalid_argument(
        "make_synthetic: biased kind needs bias_strength > 0");
  }
  if (spec.label_noise < 0.0 || spec.label_noise >= 1.0) {
    throw std::invalid_argument("make_synthetic: label_noise outside [0,1)");
  }

  SplitMix64 rng = make_stream(spec.seed, rng_stream::kData);
  const std::size_t n_train = spec.n;
  const std::size_t n_dev = std::max<std::size_t>(1, spec.n / 4);
  const std::size_t n_test = std::max<std::size_t>(1, spec.n / 2);
  const std::size_t n_total = n_train + n_dev + n_test;
  const bool biased = spec.kind == SyntheticKind::biased;
  const std::size_t width = spec.d_in + (biased ? 1 : 0);

  // Class means: unit directions scaled so adjacent means sit sep apart.
  std::vector<double> means(spec.n_classes * spec.d_in);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    double norm_sq = 0.0;
    for (std::size_t j = 0; j < spec.d_in; ++j) {
      means[c * spec.d_in + j] = rng.normal();
      norm_sq += means[c * spec.d_in + j] * means[c * spec.d_in + j];
    }
    const double scale = (spec.sep * 0.5) / std::sqrt(norm_sq);
    for (std::size_t j = 0; j < spec.d_in; ++j) means[c * spec.d_in + j] *= scale;
  }

  Dataset ds;
  ds.name = std::string(synthetic_kind_name(spec.kind)) + "-" +
            std::to_string(spec.seed);
  ds.width = width;
  ds.n_classes = spec.n_classes;
  ds.features.resize(n_total * width);
  ds.labels.resize(n_total);
  for (std::size_t i = 0; i < n_total; ++i) {
    const int y = static_cast<int>(i % spec.n_classes);  // balanced classes
    ds.labels[i] = y;
    double* row = ds.features.data() + i * width;
    for (std::size_t j = 0; j < spec.d_in; ++j) {
      row[j] = means[static_cast<std::size_t>(y) * spec.d_in + j] + rng.normal();
    }
  }
  ds.train_idx.resize(n_train);
  std::iota(ds.train_idx.begin(), ds.train_idx.end(), 0);
  ds.dev_idx.resize(n_dev);
  std::iota(ds.dev_idx.begin(), ds.dev_idx.end(), n_train);
  ds.test_idx.resize(n_test);
  std::iota(ds.test_idx.begin(), ds.test_idx.end(), n_train + n_dev);

  if (spec.label_noise > 0.0) {
    for (std::size_t i : ds.train_idx) {
      if (rng.next_double() < spec.label_noise) {
        ds.labels[i] = static_cast<int>(rng.next_below(spec.n_classes));
      }
    }
  }

  if (biased) {
    ds.spurious.resize(n_total);
    // Train/dev carry the true class in the spurious coordinate; the test
    // assignment is a seeded permutation of the test labels.
    for (std::size_t i : ds.train_idx) ds.spurious[i] = ds.labels[i];
    for (std::size_t i : ds.dev_idx) ds.spurious[i] = ds.labels[i];
    std::vector<int> shuffled;
    shuffled.reserve(n_test);
    for (std::size_t i : ds.test_idx) shuffled.push_back(ds.labels[i]);
    rng.shuffle(shuffled);
    for (std::size_t r = 0; r < n_test; ++r) {
      ds.spurious[ds.test_idx[r]] = shuffled[r];
    }
    for (std::size_t i = 0; i < n_total; ++i) {
      ds.features[i * width + spec.d_in] =
          spec.bias_strength * static_cast<double>(ds.spurious[i]);
    }
  }

  ds.validate();
  return ds;
}

Dataset subsample(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.train_idx.size()) {
    throw std::invalid_argument("subsample: n=" + std::to_string(n) +
                                " exceeds train size " +
                                std::to_string(ds.train_idx.size()));
  }
  // Per-class quotas proportional to class frequency, largest remainders
  // rounding so the total is exactly n.
  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i : ds.train_idx) {
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  }
  const double total = static_cast<double>(ds.train_idx.size());
  std::vector<std::size_t> quota(ds.n_classes, 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < ds.n_classes; ++c) {
    const double exact =
        static_cast<double>(n) * static_cast<double>(by_class[c].size()) / total;
    quota[c] = static_cast<std::size_t>(exact);
    assigned += quota[c];
    remainders.emplace_back(exact - static_cast<double>(quota[c]), c);
  }
  std::sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) {
    quota[remainders[r % remainders.size()].second] += 1;
  }

  SplitMix64 rng = make_stream(seed, rng_stream::kSubsample);
  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t c = 0; c < ds.n_classes; ++c) {
    if (quota[c] > by_class[c].size()) {
      throw std::invalid_argument("subsample: class " + std::to_string(c) +
                                  " has too few examples for its quota");
    }
    rng.shuffle(by_class[c]);
    picked.insert(picked.end(), by_class[c].begin(),
                  by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(picked.begin(), picked.end());

  Dataset out = ds;
  out.train_idx = std::move(picked);
  out.validate();
  return out;
}

}  // namespace klnorm

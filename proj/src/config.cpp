#include "klnorm/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace klnorm {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "dataset",          "data.kind",        "data.n",
      "data.d",           "data.classes",     "data.seed",
      "data.bias_strength", "data.sep",       "data.label_noise",
      "model.norm",       "model.k",          "model.groups",
      "model.hidden",     "train.batch",      "train.epochs",
      "train.lr",         "train.beta0",      "train.detach_kl",
      "train.dropout",    "train.weight_decay", "train.subsample",
      "norm.alpha",       "norm.eps",         "seeds",
      "out",
  };
  return keys;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

struct KvMap {
  std::map<std::string, std::string> entries;

  void set(const std::string& key, const std::string& value,
           const std::string& where) {
    if (!known_keys().contains(key)) {
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
    entries[key] = value;
  }

  bool has(const std::string& key) const { return entries.contains(key); }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    auto it = entries.find(key);
    return it == entries.end() ? dflt : it->second;
  }

  double get_double(const std::string& key, double dflt) const {
    auto it = entries.find(key);
    if (it == entries.end()) return dflt;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: key '" + key +
                                  "' expects a number, got '" + it->second + "'");
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const {
    auto it = entries.find(key);
    if (it == entries.end()) return dflt;
    std::uint64_t v = 0;
    const auto& s = it->second;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
      throw std::invalid_argument("config: key '" + key +
                                  "' expects a non-negative integer, got '" +
                                  s + "'");
    }
    return v;
  }

  bool get_bool(const std::string& key, bool dflt) const {
    auto it = entries.find(key);
    if (it == entries.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::invalid_argument("config: key '" + key +
                                "' expects true/false, got '" + it->second + "'");
  }
};

std::vector<std::uint64_t> parse_u64_list(const std::string& s,
                                          const std::string& key) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    std::uint64_t v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
      throw std::invalid_argument("config: key '" + key +
                                  "' has a bad entry '" + tok + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string format_double_cfg(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void TrainConfig::validate() const {
  if (!synthetic && dataset.empty()) {
    throw std::invalid_argument(
        "config: 'dataset' is required unless data.kind is synthetic");
  }
  if (k == 0) throw std::invalid_argument("config: model.k must be >= 1");
  if (norm == NormKind::group && (groups == 0)) {
    throw std::invalid_argument("config: model.groups must be >= 1");
  }
  if (batch == 0) throw std::invalid_argument("config: train.batch must be >= 1");
  if (epochs == 0) throw std::invalid_argument("config: train.epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("config: train.lr must be > 0");
  if (beta0 < 0.0) throw std::invalid_argument("config: train.beta0 must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("config: train.dropout outside [0,1)");
  }
  if (weight_decay < 0.0) {
    throw std::invalid_argument("config: train.weight_decay must be >= 0");
  }
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("config: norm.alpha outside (0,1]");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("config: norm.eps must be > 0");
  if (seeds.empty()) throw std::invalid_argument("config: seeds is empty");
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream os;
  os << "data.bias_strength=" << format_double_cfg(synth.bias_strength) << "\n";
  os << "data.classes=" << synth.n_classes << "\n";
  os << "data.d=" << synth.d_in << "\n";
  os << "data.kind="
     << (synthetic ? synthetic_kind_name(synth.kind) : "file") << "\n";
  os << "data.label_noise=" << format_double_cfg(synth.label_noise) << "\n";
  os << "data.n=" << synth.n << "\n";
  os << "data.seed=" << synth.seed << "\n";
  os << "data.sep=" << format_double_cfg(synth.sep) << "\n";
  os << "dataset=" << dataset << "\n";
  os << "model.groups=" << groups << "\n";
  std::ostringstream hs;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (i) hs << ",";
    hs << hidden[i];
  }
  os << "model.hidden=" << hs.str() << "\n";
  os << "model.k=" << k << "\n";
  os << "model.norm=" << norm_kind_name(norm) << "\n";
  os << "norm.alpha=" << format_double_cfg(alpha) << "\n";
  os << "norm.eps=" << format_double_cfg(eps) << "\n";
  std::ostringstream seeds_os;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) seeds_os << ",";
    seeds_os << seeds[i];
  }
  os << "seeds=" << seeds_os.str() << "\n";
  os << "train.batch=" << batch << "\n";
  os << "train.beta0=" << format_double_cfg(beta0) << "\n";
  os << "train.detach_kl=" << (detach_kl ? "true" : "false") << "\n";
  os << "train.dropout=" << format_double_cfg(dropout) << "\n";
  os << "train.epochs=" << epochs << "\n";
  os << "train.lr=" << format_double_cfg(lr) << "\n";
  os << "train.subsample=" << subsample_n << "\n";
  os << "train.weight_decay=" << format_double_cfg(weight_decay) << "\n";
  return os.str();
}

std::string TrainConfig::digest() const {
  const std::uint64_t h = fnv1a64(canonical_text());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

TrainConfig parse_config_text(const std::string& text,
                              std::span<const std::string> overrides) {
  KvMap kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected 'key = value'");
    }
    kv.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)),
           "config line " + std::to_string(line_no));
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("override '" + ov + "': expected key=value");
    }
    kv.set(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), "override");
  }

  TrainConfig cfg;
  const std::string kind = kv.get_string("data.kind", "file");
  if (kind != "file") cfg.synthetic = true;
  cfg.dataset = kv.get_string("dataset", "");
  if (cfg.synthetic) {
    cfg.synth.kind = synthetic_kind_from_name(kind);
    cfg.synth.n = kv.get_u64("data.n", cfg.synth.n);
    cfg.synth.d_in = kv.get_u64("data.d", cfg.synth.d_in);
    cfg.synth.n_classes = kv.get_u64("data.classes", cfg.synth.n_classes);
    cfg.synth.seed = kv.get_u64("data.seed", cfg.synth.seed);
    cfg.synth.bias_strength =
        kv.get_double("data.bias_strength", cfg.synth.bias_strength);
    cfg.synth.sep = kv.get_double("data.sep", cfg.synth.sep);
    cfg.synth.label_noise =
        kv.get_double("data.label_noise", cfg.synth.label_noise);
  }
  if (!kv.has("model.norm")) {
    throw std::invalid_argument("config: missing required key 'model.norm'");
  }
  cfg.norm = norm_kind_from_name(kv.get_string("model.norm", ""));
  cfg.k = kv.get_u64("model.k", cfg.k);
  cfg.groups = kv.get_u64("model.groups", cfg.groups);
  for (std::uint64_t h : parse_u64_list(kv.get_string("model.hidden", ""),
                                        "model.hidden")) {
    cfg.hidden.push_back(static_cast<std::size_t>(h));
  }
  cfg.batch = kv.get_u64("train.batch", cfg.batch);
  cfg.epochs = kv.get_u64("train.epochs", cfg.epochs);
  cfg.lr = kv.get_double("train.lr", cfg.lr);
  cfg.beta0 = kv.get_double("train.beta0", cfg.beta0);
  cfg.detach_kl = kv.get_bool("train.detach_kl", cfg.detach_kl);
  cfg.dropout = kv.get_double("train.dropout", cfg.dropout);
  cfg.weight_decay = kv.get_double("train.weight_decay", cfg.weight_decay);
  cfg.subsample_n = kv.get_u64("train.subsample", cfg.subsample_n);
  cfg.alpha = kv.get_double("norm.alpha", cfg.alpha);
  cfg.eps = kv.get_double("norm.eps", cfg.eps);
  if (kv.has("seeds")) {
    cfg.seeds = parse_u64_list(kv.get_string("seeds", ""), "seeds");
  }
  cfg.out_dir = kv.get_string("out", cfg.out_dir);
  cfg.validate();
  return cfg;
}

TrainConfig parse_config(const std::filesystem::path& path,
                         std::span<const std::string> overrides) {
  std::ifstream in(path);
  if (!in) {
    throw std::invalid_argument("config: cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

}  // namespace klnorm

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace adaprune {

inline constexpr const char* kToolVersion = "adaprune 0.1.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Backbone and trimmer shape hyperparameters.
struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_prime = 0;  // trimmer reduced width; 0 selects max(4, ceil(d_model / 12))
  std::size_t d_ff = 128;
  std::size_t layers_uni = 2;
  std::size_t layers_cross = 2;
  std::size_t n_visual = 37;  // including CLS
  std::size_t n_text = 12;    // including CLS
  std::size_t vocab = 32;
  std::size_t patch_dim = 8;
  std::size_t num_classes = 2;

  // Trimmer placement, per site kind.
  bool token_prune_visual = true;
  bool token_prune_text = false;
  bool token_prune_cross_visual = true;
  bool token_prune_cross_text = true;
  bool head_prune_uni = false;
  bool head_prune_cross = true;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t trimmer_width() const {
    if (d_prime != 0) return d_prime;
    return std::max<std::size_t>(4, (d_model + 11) / 12);
  }

  void validate() const {
    if (d_model == 0 || heads == 0) throw ConfigError("d_model and heads must be positive");
    if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (n_visual < 2 || n_text < 2)
      throw ConfigError("n_visual and n_text must be at least 2 (CLS plus one content token)");
    if (d_ff == 0 || vocab < 2 || patch_dim == 0 || num_classes < 2)
      throw ConfigError("d_ff, vocab, patch_dim and num_classes must be positive (classes >= 2)");
    if (layers_cross == 0 && layers_uni == 0) throw ConfigError("model has no layers");
  }
};

struct TrainConfig {
  double gamma_T = 0.5;
  double gamma_H = 0.5;
  double lambda_sd = 1.0;
  double lambda_cost = 20.0;
  double curriculum_fraction = 0.6;
  std::size_t pretrain_steps = 0;  // task-only steps with trimmers inactive, before the adaptive phase
  std::size_t steps = 2000;        // adaptive phase
  std::size_t batch_size = 8;
  double learning_rate = 2e-3;
  double warmup_fraction = 0.1;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  double tau = 1.0;
  double tau_final = 1.0;  // linear anneal target over training; equal to tau disables
  bool straight_through = false;
  std::uint64_t seed = 1;
  std::size_t eval_every = 0;  // 0 = evaluate only after the last step
  std::size_t eval_size = 200;

  void validate() const {
    auto in01 = [](double v) { return v > 0.0 && v <= 1.0; };
    if (!in01(gamma_T) || !in01(gamma_H)) throw ConfigError("gamma targets must lie in (0, 1]");
    if (!in01(curriculum_fraction)) throw ConfigError("curriculum_fraction must lie in (0, 1]");
    if (lambda_sd < 0 || lambda_cost < 0) throw ConfigError("loss weights must be non-negative");
    if (steps == 0 || batch_size == 0) throw ConfigError("steps and batch_size must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (warmup_fraction < 0 || warmup_fraction >= 1) throw ConfigError("warmup_fraction must lie in [0, 1)");
    if (!(tau > 0) || !(tau_final > 0)) throw ConfigError("tau must be positive");
    if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
  }
};

struct DataConfig {
  std::uint64_t seed = 7;
  std::size_t train_size = 20000;
  std::size_t val_size = 500;
  std::size_t test_size = 1000;
  std::size_t grid = 6;
  std::size_t min_objects = 1;
  std::size_t max_objects = 8;
  double noise = 0.05;
  std::string query_kinds = "at_least_color";  // comma-separated subset of query_kind_names()
  std::size_t query_colors = 1;  // queries name colors 0 .. query_colors-1
  std::size_t query_shapes = 3;  // queries name shapes 0 .. query_shapes-1
  std::size_t max_query_count = 3;  // largest N in "at least N <color> objects"

  void validate() const {
    if (train_size + val_size + test_size == 0) throw ConfigError("dataset size must be at least 1");
    if (grid < 1) throw ConfigError("grid must be positive");
    if (min_objects < 1 || min_objects > max_objects || max_objects > grid * grid)
      throw ConfigError("object count range must satisfy 1 <= min <= max <= grid^2");
    if (noise < 0) throw ConfigError("noise must be non-negative");
    if (query_colors < 1 || query_colors > 4) throw ConfigError("query_colors must lie in [1, 4]");
    if (query_shapes < 1 || query_shapes > 3) throw ConfigError("query_shapes must lie in [1, 3]");
    if (max_query_count < 1 || max_query_count > 5) throw ConfigError("max_query_count must lie in [1, 5]");
    parsed_query_kinds();
  }

  static const std::vector<std::string>& query_kind_names() {
    static const std::vector<std::string> names = {"exists_color_shape", "exists_color", "exists_shape",
                                                   "more_color",         "at_least_shape", "at_least_color"};
    return names;
  }

  /// Indices into query_kind_names(), in the order listed.
  std::vector<std::size_t> parsed_query_kinds() const {
    std::vector<std::size_t> out;
    std::stringstream ss(query_kinds);
    std::string item;
    const auto& names = query_kind_names();
    while (std::getline(ss, item, ',')) {
      const auto it = std::find(names.begin(), names.end(), item);
      if (it == names.end()) throw ConfigError("unknown query kind '" + item + "'");
      const auto k = static_cast<std::size_t>(it - names.begin());
      if (std::find(out.begin(), out.end(), k) != out.end()) throw ConfigError("duplicate query kind '" + item + "'");
      out.push_back(k);
    }
    if (out.empty()) throw ConfigError("query_kinds must name at least one kind");
    return out;
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";

  void validate() const;
  std::string to_text() const;
  std::string model_text() const;
  std::uint64_t hash() const;
};

namespace detail {

/// Shortest text that parses back to exactly v.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const auto* b = s.data();
  const auto* e = s.data() + s.size();
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
      throw ConfigError("key '" + key + "': invalid number '" + s + "'");
  } else {
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) throw ConfigError("key '" + key + "': invalid integer '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("key '" + key + "': invalid boolean '" + s + "'");
}

struct Field {
  std::string key;
  bool model;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define ADAPRUNE_FIELD(KEY, SECTION, MEMBER, IS_MODEL)                                         \
  Field {                                                                                      \
    KEY, IS_MODEL, [](const RunConfig& c) { return to_text_value(c.SECTION.MEMBER); },          \
        [](RunConfig& c, const std::string& s) { from_text_value(KEY, s, c.SECTION.MEMBER); } \
  }

template <typename T>
  requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
std::string to_text_value(T v) {
  return std::to_string(v);
}
inline std::string to_text_value(double v) { return fmt_double(v); }
inline std::string to_text_value(bool v) { return v ? "true" : "false"; }
inline std::string to_text_value(const std::string& v) { return v; }

template <typename T>
  requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
void from_text_value(const std::string& k, const std::string& s, T& v) {
  v = parse_number<T>(k, s);
}
inline void from_text_value(const std::string& k, const std::string& s, double& v) {
  v = parse_number<double>(k, s);
}
inline void from_text_value(const std::string& k, const std::string& s, bool& v) { v = parse_bool(k, s); }
inline void from_text_value(const std::string&, const std::string& s, std::string& v) { v = s; }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      ADAPRUNE_FIELD("d_model", model, d_model, true),
      ADAPRUNE_FIELD("heads", model, heads, true),
      ADAPRUNE_FIELD("d_prime", model, d_prime, true),
      ADAPRUNE_FIELD("d_ff", model, d_ff, true),
      ADAPRUNE_FIELD("layers_uni", model, layers_uni, true),
      ADAPRUNE_FIELD("layers_cross", model, layers_cross, true),
      ADAPRUNE_FIELD("n_visual", model, n_visual, true),
      ADAPRUNE_FIELD("n_text", model, n_text, true),
      ADAPRUNE_FIELD("vocab", model, vocab, true),
      ADAPRUNE_FIELD("patch_dim", model, patch_dim, true),
      ADAPRUNE_FIELD("num_classes", model, num_classes, true),
      ADAPRUNE_FIELD("token_prune_visual", model, token_prune_visual, true),
      ADAPRUNE_FIELD("token_prune_text", model, token_prune_text, true),
      ADAPRUNE_FIELD("token_prune_cross_visual", model, token_prune_cross_visual, true),
      ADAPRUNE_FIELD("token_prune_cross_text", model, token_prune_cross_text, true),
      ADAPRUNE_FIELD("head_prune_uni", model, head_prune_uni, true),
      ADAPRUNE_FIELD("head_prune_cross", model, head_prune_cross, true),
      ADAPRUNE_FIELD("gamma_T", train, gamma_T, false),
      ADAPRUNE_FIELD("gamma_H", train, gamma_H, false),
      ADAPRUNE_FIELD("lambda_sd", train, lambda_sd, false),
      ADAPRUNE_FIELD("lambda_cost", train, lambda_cost, false),
      ADAPRUNE_FIELD("curriculum_fraction", train, curriculum_fraction, false),
      ADAPRUNE_FIELD("pretrain_steps", train, pretrain_steps, false),
      ADAPRUNE_FIELD("steps", train, steps, false),
      ADAPRUNE_FIELD("batch_size", train, batch_size, false),
      ADAPRUNE_FIELD("learning_rate", train, learning_rate, false),
      ADAPRUNE_FIELD("warmup_fraction", train, warmup_fraction, false),
      ADAPRUNE_FIELD("grad_clip", train, grad_clip, false),
      ADAPRUNE_FIELD("tau", train, tau, false),
      ADAPRUNE_FIELD("tau_final", train, tau_final, false),
      ADAPRUNE_FIELD("straight_through", train, straight_through, false),
      ADAPRUNE_FIELD("seed", train, seed, false),
      ADAPRUNE_FIELD("eval_every", train, eval_every, false),
      ADAPRUNE_FIELD("eval_size", train, eval_size, false),
      ADAPRUNE_FIELD("data_seed", data, seed, false),
      ADAPRUNE_FIELD("train_size", data, train_size, false),
      ADAPRUNE_FIELD("val_size", data, val_size, false),
      ADAPRUNE_FIELD("test_size", data, test_size, false),
      ADAPRUNE_FIELD("grid", data, grid, false),
      ADAPRUNE_FIELD("min_objects", data, min_objects, false),
      ADAPRUNE_FIELD("max_objects", data, max_objects, false),
      ADAPRUNE_FIELD("noise", data, noise, false),
      ADAPRUNE_FIELD("query_kinds", data, query_kinds, false),
      ADAPRUNE_FIELD("query_colors", data, query_colors, false),
      ADAPRUNE_FIELD("query_shapes", data, query_shapes, false),
      ADAPRUNE_FIELD("max_query_count", data, max_query_count, false),
      Field{"output_dir", false, [](const RunConfig& c) { return c.output_dir; },
            [](RunConfig& c, const std::string& s) { c.output_dir = s; }},
  };
  return table;
}

#undef ADAPRUNE_FIELD

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (data.grid * data.grid + 1 != model.n_visual)
    throw ConfigError("n_visual must equal grid^2 + 1 (grid=" + std::to_string(data.grid) +
                      ", n_visual=" + std::to_string(model.n_visual) + ")");
}

/// Canonical "key = value" text, one line per key in fixed order.
inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

inline std::string RunConfig::model_text() const {
  std::string out;
  for (const auto& f : detail::fields())
    if (f.model) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

inline std::uint64_t RunConfig::hash() const { return fnv1a64(to_text()); }

/// Parses "key = value" lines over the defaults. Blank lines and lines
/// starting with '#' are ignored. Unknown or repeated keys are errors.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, const detail::Field*> by_key;
  for (const auto& f : detail::fields()) by_key[f.key] = &f;
  std::map<std::string, bool> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = detail::trim(t.substr(0, eq));
    const auto val = detail::trim(t.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (seen[key]) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = true;
    it->second->set(cfg, val);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Lines of the form "key: a -> b" for every model key that differs.
inline std::vector<std::string> model_config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> diff;
  for (const auto& f : detail::fields()) {
    if (!f.model) continue;
    const auto va = f.get(a), vb = f.get(b);
    if (va != vb) diff.push_back(f.key + ": " + va + " -> " + vb);
  }
  return diff;
}

/// Header line carried by every emitted text file.
inline std::string file_header(const RunConfig& cfg, const std::string& kind) {
  return "# " + std::string(kToolVersion) + " " + kind + " config_hash=" + hex64(cfg.hash()) + "\n";
}

}  // namespace adaprune

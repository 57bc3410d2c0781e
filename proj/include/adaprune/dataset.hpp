#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/backbone.hpp"
#include "adaprune/config.hpp"
#include "adaprune/rng.hpp"

namespace adaprune {

// Synthetic grounded-query task.
//
// A G x G grid holds colored shapes. Each cell becomes one visual patch:
//   [occupied, color one-hot (4), shape one-hot (3), 0...] + N(0, noise^2)
// Dimensions past the first 8 carry noise only. The text is a yes/no query
// over a small template vocabulary; the label is its truth value on the grid.
// DataConfig selects the query kinds and how many colors and shapes queries
// may name.

inline constexpr std::size_t kNumColors = 4;
inline constexpr std::size_t kNumShapes = 3;
inline constexpr std::size_t kFeatureDims = 1 + kNumColors + kNumShapes;

namespace vocab {
inline constexpr std::size_t cls = 0, pad = 1, is = 2, there = 3, a = 4, object = 5, are = 6, more = 7,
                             than = 8, objects = 9, question = 10, color0 = 11, shape0 = 15, at = 18,
                             least = 19, two = 20, three = 21, one = 22, four = 23, five = 24;
inline constexpr std::size_t size = 25;

inline std::size_t color(std::size_t c) { return color0 + c; }
inline std::size_t shape(std::size_t s) { return shape0 + s; }
inline std::size_t number(std::size_t n) {
  static const std::array<std::size_t, 5> ids = {one, two, three, four, five};
  return ids.at(n - 1);
}

inline const std::array<const char*, size>& words() {
  static const std::array<const char*, size> w = {"[CLS]", "[PAD]",   "is",    "there",  "a",      "object",
                                                   "are",   "more",    "than",  "objects", "?",     "red",
                                                   "green", "blue",    "yellow", "circle", "square", "triangle",
                                                   "at",    "least",   "two",   "three",  "one",
                                                   "four",  "five"};
  return w;
}
}  // namespace vocab

struct GridObject {
  std::size_t cell = 0, color = 0, shape = 0;
};

// Order matches DataConfig::query_kind_names().
enum class QueryKind { exists_color_shape, exists_color, exists_shape, more_color, at_least_shape, at_least_color };
inline constexpr std::size_t kNumQueryKinds = 6;

struct Query {
  QueryKind kind = QueryKind::exists_color;
  std::size_t color = 0, color2 = 0, shape = 0, count = 0;
};

struct SyntheticInstance {
  std::size_t index = 0;
  std::vector<GridObject> objects;
  Query query;
  ModelInput input;
  std::size_t label = 0;
  std::size_t difficulty = 0;  // object count
};

inline std::vector<std::size_t> query_tokens(const Query& q) {
  using namespace vocab;
  switch (q.kind) {
    case QueryKind::exists_color_shape:
      return {cls, is, there, a, color(q.color), shape(q.shape), question};
    case QueryKind::exists_color:
      return {cls, is, there, a, color(q.color), object, question};
    case QueryKind::exists_shape:
      return {cls, is, there, a, shape(q.shape), question};
    case QueryKind::more_color:
      return {cls, are, there, more, color(q.color), objects, than, color(q.color2), objects, question};
    case QueryKind::at_least_shape:
      return {cls, are, there, at, least, number(q.count), shape(q.shape), objects, question};
    case QueryKind::at_least_color:
      return {cls, are, there, at, least, number(q.count), color(q.color), objects, question};
  }
  throw std::logic_error("query_tokens: unknown query kind");
}

inline std::size_t evaluate_query(const Query& q, const std::vector<GridObject>& objects) {
  std::size_t n = 0, n2 = 0;
  for (const auto& o : objects) {
    switch (q.kind) {
      case QueryKind::exists_color_shape: n += o.color == q.color && o.shape == q.shape; break;
      case QueryKind::exists_color: n += o.color == q.color; break;
      case QueryKind::exists_shape: n += o.shape == q.shape; break;
      case QueryKind::more_color:
        n += o.color == q.color;
        n2 += o.color == q.color2;
        break;
      case QueryKind::at_least_shape: n += o.shape == q.shape; break;
      case QueryKind::at_least_color: n += o.color == q.color; break;
    }
  }
  switch (q.kind) {
    case QueryKind::more_color: return n > n2 ? 1 : 0;
    case QueryKind::at_least_shape:
    case QueryKind::at_least_color: return n >= q.count ? 1 : 0;
    default: return n > 0 ? 1 : 0;
  }
}

/// Generator with per-index determinism: instance i depends only on
/// (data seed, i).
class SyntheticTask {
 public:
  SyntheticTask(const DataConfig& data, const ModelConfig& model) : d_(data), m_(model) {
    d_.validate();
    m_.validate();
    kinds_ = d_.parsed_query_kinds();
    if (d_.grid * d_.grid + 1 != m_.n_visual)
      throw ConfigError("synthetic task: n_visual must equal grid^2 + 1");
    if (m_.patch_dim < kFeatureDims)
      throw ConfigError("synthetic task: patch_dim must be at least " + std::to_string(kFeatureDims));
    if (m_.vocab < vocab::size) throw ConfigError("synthetic task: vocab must be at least " + std::to_string(vocab::size));
    if (m_.n_text < 10) throw ConfigError("synthetic task: n_text must be at least 10");
    if (m_.num_classes != 2) throw ConfigError("synthetic task: num_classes must be 2");
  }

  SyntheticInstance make(std::size_t index) const {
    RngStream rng(derive_seed(d_.seed, index));
    const std::size_t cells = d_.grid * d_.grid;
    SyntheticInstance inst;
    inst.index = index;
    inst.difficulty = d_.min_objects + static_cast<std::size_t>(rng.below(d_.max_objects - d_.min_objects + 1));
    const std::size_t want = index % 2;
    // The query is drawn first, then grids are redrawn until the answer
    // matches the alternating target label, so the text alone carries no
    // label information. A query whose target is unreachable within the
    // attempt budget is replaced.
    for (int q_attempt = 0; q_attempt < 64; ++q_attempt) {
      inst.query = sample_query(rng, inst.difficulty);
      bool hit = false;
      for (int attempt = 0; attempt < 256 && !hit; ++attempt) {
        inst.objects.clear();
        const auto perm = rng.permutation(cells);
        for (std::size_t k = 0; k < inst.difficulty; ++k)
          inst.objects.push_back({perm[k], static_cast<std::size_t>(rng.below(kNumColors)),
                                  static_cast<std::size_t>(rng.below(kNumShapes))});
        inst.label = evaluate_query(inst.query, inst.objects);
        hit = inst.label == want;
      }
      if (hit) break;
    }
    inst.input.tokens = query_tokens(inst.query);
    inst.input.tokens.resize(m_.n_text, vocab::pad);
    inst.input.patches.assign(cells * m_.patch_dim, 0.0);
    for (const auto& o : inst.objects) {
      double* p = &inst.input.patches[o.cell * m_.patch_dim];
      p[0] = 1.0;
      p[1 + o.color] = 1.0;
      p[1 + kNumColors + o.shape] = 1.0;
    }
    for (auto& v : inst.input.patches) v += d_.noise * rng.normal();
    return inst;
  }

  const DataConfig& data() const { return d_; }
  const ModelConfig& model() const { return m_; }

  std::size_t split_begin(const std::string& split) const {
    if (split == "train") return 0;
    if (split == "val") return d_.train_size;
    if (split == "test") return d_.train_size + d_.val_size;
    throw std::invalid_argument("unknown split '" + split + "' (expected train, val or test)");
  }
  std::size_t split_size(const std::string& split) const {
    if (split == "train") return d_.train_size;
    if (split == "val") return d_.val_size;
    if (split == "test") return d_.test_size;
    throw std::invalid_argument("unknown split '" + split + "' (expected train, val or test)");
  }

  std::vector<SyntheticInstance> split(const std::string& name, std::size_t limit = 0) const {
    const auto b = split_begin(name);
    auto n = split_size(name);
    if (limit && limit < n) n = limit;
    std::vector<SyntheticInstance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make(b + i));
    return out;
  }

 private:
  // Counting queries ask for at most as many objects as the instance holds.
  Query sample_query(RngStream& rng, std::size_t objects) const {
    Query q;
    for (int tries = 0;; ++tries) {
      q.kind = static_cast<QueryKind>(kinds_[rng.below(kinds_.size())]);
      if (q.kind != QueryKind::at_least_shape || objects >= 2 || tries >= 64) break;
    }
    q.color = static_cast<std::size_t>(rng.below(d_.query_colors));
    q.color2 = (q.color + 1 + static_cast<std::size_t>(rng.below(kNumColors - 1))) % kNumColors;
    q.shape = static_cast<std::size_t>(rng.below(d_.query_shapes));
    if (q.kind == QueryKind::at_least_color)
      q.count = 1 + static_cast<std::size_t>(rng.below(std::min(d_.max_query_count, objects)));
    else
      q.count = 2 + (objects >= 3 ? static_cast<std::size_t>(rng.below(2)) : 0);
    return q;
  }

  DataConfig d_;
  ModelConfig m_;
  std::vector<std::size_t> kinds_;
};

/// One line per instance:
///   index \t label \t difficulty \t tokens(comma) \t patches(comma, %.17g)
inline std::string serialize_instances(const std::vector<SyntheticInstance>& v) {
  std::string out;
  char buf[32];
  for (const auto& inst : v) {
    out += std::to_string(inst.index) + '\t' + std::to_string(inst.label) + '\t' + std::to_string(inst.difficulty) + '\t';
    for (std::size_t i = 0; i < inst.input.tokens.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(inst.input.tokens[i]);
    }
    out += '\t';
    for (std::size_t i = 0; i < inst.input.patches.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", inst.input.patches[i]);
      if (i) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline std::string query_text(const std::vector<std::size_t>& tokens) {
  std::string s;
  for (auto t : tokens) {
    if (t == vocab::cls || t == vocab::pad) continue;
    if (!s.empty()) s += ' ';
    s += t < vocab::size ? vocab::words()[t] : "?";
  }
  return s;
}

}  // namespace adaprune

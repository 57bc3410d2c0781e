#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/config.hpp"
#include "adaprune/rng.hpp"
#include "adaprune/tensor.hpp"

namespace adaprune {

/// Ordered collection of named parameter leaves.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t)});
    return entries_.back().second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParameterStore&>(*this).get(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Deep copy. Leaves of the copy require gradients only if asked.
  ParameterStore clone(bool requires_grad) const {
    ParameterStore out;
    for (const auto& [name, t] : entries_)
      out.add(name, Tensor::from(t.shape(), t.values(), requires_grad));
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  bool bitwise_equal(const ParameterStore& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& [na, a] = entries_[i];
      const auto& [nb, b] = o.entries_[i];
      if (na != nb || a.shape() != b.shape()) return false;
      if (std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) != 0) return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Trimmer parameters live under ".tok_trim." or "_head_trim." prefixes.
inline bool is_trimmer_param(const std::string& name) {
  return name.find("tok_trim.") != std::string::npos || name.find("head_trim.") != std::string::npos;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Little-endian layout:
//   char[8]  magic "ADPRCKPT"
//   u32      format version (1)
//   u64      config text length, then the canonical RunConfig text
//   u64      array count
//   per array:
//     u32 name length, name bytes
//     u32 rank, u64 dims[rank]
//     f64 values[prod(dims)]   (IEEE-754 binary64)

inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'P', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CheckpointError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const RunConfig& cfg, const ParameterStore& params) {
  std::string out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const auto text = cfg.to_text();
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  detail::put_le<std::uint64_t>(out, params.entries().size());
  for (const auto& [name, t] : params.entries()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

struct Checkpoint {
  RunConfig config;
  ParameterStore params;
};

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  std::size_t pos = 8;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto text_len = detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + text_len > bytes.size()) throw CheckpointError("checkpoint truncated");
  Checkpoint ck;
  ck.config = parse_config(bytes.substr(pos, text_len));
  pos += text_len;
  const auto count = detail::get_le<std::uint64_t>(bytes, pos);
  for (std::uint64_t a = 0; a < count; ++a) {
    const auto name_len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw CheckpointError("checkpoint truncated");
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(bytes, pos);
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
    ck.params.add(name, Tensor::from(std::move(shape), std::move(values)));
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParameterStore& params) {
  write_file(path, serialize_checkpoint(cfg, params));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace adaprune

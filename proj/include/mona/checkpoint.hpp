#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/nets.hpp"

namespace mona {

// Binary layout (little-endian): magic "MONACKPT", u32 version, string stage,
// u64 config hash, u64 step, u32 entry count, then per entry: string name,
// u32 rank, u32 dims[rank], f64 values. Strings are u32 length + bytes.

struct Checkpoint {
  std::string stage;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<std::string> names;  // insertion order
  std::map<std::string, Tensor<double>> tensors;

  void add(const std::string& name, Tensor<double> t) {
    if (tensors.count(name)) throw std::invalid_argument("checkpoint: duplicate entry " + name);
    names.push_back(name);
    tensors.emplace(name, std::move(t));
  }
};

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_str(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline std::string get_str(std::istream& in) {
  const auto n = get_u32(in);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'N', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_str(out, ck.stage);
  detail::put_u64(out, ck.config_hash);
  detail::put_u64(out, ck.step);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.names.size()));
  for (const auto& name : ck.names) {
    const auto& t = ck.tensors.at(name);
    detail::put_str(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("error writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = detail::get_u32(in);
  if (version != kCheckpointVersion) throw std::runtime_error(path.string() + ": unsupported checkpoint version");
  Checkpoint ck;
  ck.stage = detail::get_str(in);
  ck.config_hash = detail::get_u64(in);
  ck.step = detail::get_u64(in);
  const auto n = detail::get_u32(in);
  for (std::uint32_t e = 0; e < n; ++e) {
    const auto name = detail::get_str(in);
    const auto rank = detail::get_u32(in);
    if (rank > 8) throw std::runtime_error(path.string() + ": corrupt rank for " + name);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::get_u32(in));
    Tensor<double> t(shape);
    for (auto& v : t.values()) v = std::bit_cast<double>(detail::get_u64(in));
    ck.add(name, std::move(t));
  }
  return ck;
}

/// Stores student and teacher parameters under "student." / "teacher." prefixes.
template <class T>
Checkpoint make_checkpoint(const StudentTeacherPair<T>& pair, const std::string& stage, std::uint64_t hash,
                           std::uint64_t step) {
  Checkpoint ck;
  ck.stage = stage;
  ck.config_hash = hash;
  ck.step = step;
  for (std::size_t i = 0; i < pair.student.size(); ++i)
    ck.add("student." + pair.student.names()[i], pair.student.vars()[i].value().template cast<double>());
  for (std::size_t i = 0; i < pair.teacher.size(); ++i)
    ck.add("teacher." + pair.teacher.names()[i], pair.teacher.vars()[i].value().template cast<double>());
  return ck;
}

/// Fills a parameter set laid out like `layout` from the entries under `prefix`.
template <class T>
ParamSet<T> params_from_checkpoint(const Checkpoint& ck, const std::string& prefix, const ParamSet<T>& layout,
                                   bool requires_grad) {
  ParamSet<T> out;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto key = prefix + layout.names()[i];
    auto it = ck.tensors.find(key);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint: missing entry " + key);
    if (it->second.shape() != layout.vars()[i].shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + key + ": " +
                               Tensor<double>::shape_string(it->second.shape()) + " vs " +
                               Tensor<T>::shape_string(layout.vars()[i].shape()));
    }
    out.add(layout.names()[i], it->second.template cast<T>(), requires_grad);
  }
  return out;
}

}  // namespace mona

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pfed/tensor.hpp"

namespace pfed {

// Self-describing binary container of named, shape-tagged f64 tensors.
// Layout (little-endian):
//   8-byte magic "PFTENSR1", u32 version, u32 tensor count, then per tensor:
//   u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data.
namespace container {

constexpr char kMagic[8] = {'P', 'F', 'T', 'E', 'N', 'S', 'R', '1'};
constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("tensor container: truncated read from " + path);
  return v;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("tensor container: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->ndim()));
    for (std::size_t d : t->shape()) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("tensor container: write failed for " + path.string());
}

inline std::map<std::string, Tensor> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor container: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("tensor container: bad magic in " + path.string());
  const auto version = detail::get<std::uint32_t>(is, path.string());
  if (version != kVersion)
    throw std::runtime_error("tensor container: unsupported version " + std::to_string(version) + " in " + path.string());
  const auto count = detail::get<std::uint32_t>(is, path.string());
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get<std::uint32_t>(is, path.string());
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::get<std::uint32_t>(is, path.string());
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(is, path.string());
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("tensor container: truncated tensor '" + name + "' in " + path.string());
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace container

namespace detail {

inline const Tensor& named(const std::map<std::string, Tensor>& m, const std::string& name,
                           const std::filesystem::path& path) {
  auto it = m.find(name);
  if (it == m.end()) throw std::runtime_error("tensor container: missing tensor '" + name + "' in " + path.string());
  return it->second;
}

}  // namespace detail

// Generic helper for any struct exposing for_each_tensor.
template <class State>
void save_state(const std::filesystem::path& path, const State& s) {
  std::vector<std::pair<std::string, const Tensor*>> list;
  s.for_each_tensor([&](const std::string& name, const Tensor& t) { list.emplace_back(name, &t); });
  container::save(path, list);
}

template <class State>
void load_state(const std::filesystem::path& path, State& s) {
  auto m = container::load(path);
  s.for_each_tensor([&](const std::string& name, Tensor& t) {
    const Tensor& src = detail::named(m, name, path);
    if (!src.same_shape(t) && t.numel() > 0)
      throw std::runtime_error("tensor container: '" + name + "' shape " + shape_str(src.shape()) + " expected " +
                               shape_str(t.shape()) + " in " + path.string());
    t = src;
  });
}

}  // namespace pfed

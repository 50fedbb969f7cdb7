#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "fewlabel/tensor.hpp"

namespace fewlabel {

// Flat name -> tensor map, serialized as a small self-describing binary
// container (names sorted, doubles on disk). float tensors round-trip
// exactly through the double encoding.
using TensorMap = std::map<std::string, Tensor<double>>;

namespace detail {
constexpr char kTensorMapMagic[8] = {'F', 'L', 'T', 'C', '0', '0', '0', '1'};

template <typename U>
void write_pod(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::ifstream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  return v;
}
}  // namespace detail

inline void save_tensor_map(const std::string& path, const TensorMap& map) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(detail::kTensorMapMagic, 8);
    detail::write_pod<std::uint64_t>(out, map.size());
    for (const auto& [name, tensor] : map) {
      detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.shape.size()));
      for (int d : tensor.shape) detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      out.write(reinterpret_cast<const char*>(tensor.data.data()),
                static_cast<std::streamsize>(tensor.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline TensorMap load_tensor_map(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kTensorMapMagic, 8) != 0) {
    throw std::runtime_error(path + ": not a tensor container");
  }
  const std::uint64_t count = detail::read_pod<std::uint64_t>(in);
  TensorMap map;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_pod<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = detail::read_pod<std::uint32_t>(in);
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    }
    Tensor<double> t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated tensor container");
    map.emplace(std::move(name), std::move(t));
  }
  return map;
}

template <typename T>
void put_tensor(TensorMap& map, const std::string& name, const Tensor<T>& t) {
  map[name] = t.template cast<double>();
}

template <typename T>
Tensor<T> get_tensor(const TensorMap& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) throw std::runtime_error("tensor not found in container: " + name);
  return it->second.template cast<T>();
}

inline void put_scalar(TensorMap& map, const std::string& name, double v) {
  map[name] = Tensor<double>::scalar(v);
}

inline double get_scalar(const TensorMap& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) throw std::runtime_error("scalar not found in container: " + name);
  return it->second.data.at(0);
}

}  // namespace fewlabel

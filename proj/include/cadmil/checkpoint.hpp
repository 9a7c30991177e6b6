#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cadmil/tensor.hpp"

namespace cadmil {

static_assert(std::endian::native == std::endian::little,
              "checkpoint/volume serialization assumes a little-endian host");

inline uint64_t fnv1a64(const unsigned char* data, size_t n, uint64_t h = 14695981039346656037ULL) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

/// Ordered collection of named tensors with binary (de)serialization.
///
/// File layout: magic "MILCKPT1", u32 version, then per tensor
/// u32 name length + name bytes + u8 dtype (0=f32, 1=f64) + u32 rank +
/// i64 extents + raw little-endian payload, and finally a u64 FNV-1a
/// checksum of all payload bytes in record order.
class TensorStore {
 public:
  struct Entry {
    std::string name;
    uint8_t dtype = 0;
    Shape shape;
    std::vector<unsigned char> bytes;
  };

  static constexpr char kMagic[9] = "MILCKPT1";
  static constexpr uint32_t kVersion = 1;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    Entry e;
    e.name = name;
    e.dtype = dtype_of<T>();
    e.shape = t.shape;
    e.bytes.resize(t.data.size() * sizeof(T));
    std::memcpy(e.bytes.data(), t.data.data(), e.bytes.size());
    auto it = index_.find(name);
    if (it == index_.end()) {
      index_[name] = entries_.size();
      entries_.push_back(std::move(e));
    } else {
      entries_[it->second] = std::move(e);
    }
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("checkpoint tensor not found: " + name);
    const Entry& e = entries_[it->second];
    if (e.dtype != dtype_of<T>())
      throw std::runtime_error("checkpoint tensor '" + name + "' has dtype code " +
                               std::to_string(e.dtype) + ", requested " +
                               std::to_string(dtype_of<T>()));
    Tensor<T> t(e.shape);
    std::memcpy(t.data.data(), e.bytes.data(), e.bytes.size());
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    f.write(kMagic, 8);
    write_u32(f, kVersion);
    uint64_t checksum = 14695981039346656037ULL;
    for (const Entry& e : entries_) {
      write_u32(f, static_cast<uint32_t>(e.name.size()));
      f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      f.put(static_cast<char>(e.dtype));
      write_u32(f, static_cast<uint32_t>(e.shape.size()));
      for (int64_t ext : e.shape) f.write(reinterpret_cast<const char*>(&ext), 8);
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
      checksum = fnv1a64(e.bytes.data(), e.bytes.size(), checksum);
    }
    f.write(reinterpret_cast<const char*>(&checksum), 8);
    if (!f) throw std::runtime_error("write failed for checkpoint: " + path.string());
  }

  static TensorStore load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    const auto file_size = static_cast<uint64_t>(f.tellg());
    f.seekg(0);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
      throw std::runtime_error("bad checkpoint magic in " + path.string());
    const uint32_t version = read_u32(f);
    if (version != kVersion)
      throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

    TensorStore store;
    uint64_t checksum = 14695981039346656037ULL;
    uint64_t pos = 12;
    while (pos + 8 < file_size) {
      Entry e;
      const uint32_t name_len = read_u32(f);
      e.name.resize(name_len);
      f.read(e.name.data(), name_len);
      e.dtype = static_cast<uint8_t>(f.get());
      const uint32_t rank = read_u32(f);
      e.shape.resize(rank);
      for (uint32_t i = 0; i < rank; ++i) f.read(reinterpret_cast<char*>(&e.shape[i]), 8);
      const size_t elem = e.dtype == 0 ? 4 : 8;
      e.bytes.resize(static_cast<size_t>(numel(e.shape)) * elem);
      f.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
      if (!f) throw std::runtime_error("truncated checkpoint: " + path.string());
      checksum = fnv1a64(e.bytes.data(), e.bytes.size(), checksum);
      pos += 4 + name_len + 1 + 4 + 8ull * rank + e.bytes.size();
      store.index_[e.name] = store.entries_.size();
      store.entries_.push_back(std::move(e));
    }
    uint64_t stored = 0;
    f.read(reinterpret_cast<char*>(&stored), 8);
    if (!f || stored != checksum)
      throw std::runtime_error("checkpoint checksum mismatch in " + path.string());
    return store;
  }

 private:
  template <typename T>
  static constexpr uint8_t dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
  }

  static void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  }

  static uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }

  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace cadmil

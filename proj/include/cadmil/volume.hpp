#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cadmil/checkpoint.hpp"
#include "cadmil/tensor.hpp"

namespace cadmil {

/// Regular-grid volume with isotropic spacing in mm. Voxels are stored
/// row-major as 32-bit floats; axis order is [D,H,W] (slowest first),
/// with the centerline running along D for straightened artery volumes.
struct Volume {
  Shape shape;
  double spacing_mm = 0.3;
  std::vector<float> data;

  Volume() = default;
  Volume(Shape s, double spacing) : shape(std::move(s)), spacing_mm(spacing) {
    data.assign(static_cast<size_t>(numel(shape)), 0.0f);
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }

  float& at(int64_t d, int64_t h, int64_t w) {
    return data[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)];
  }
  float at(int64_t d, int64_t h, int64_t w) const {
    return data[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)];
  }
};

inline constexpr char kVolumeMagic[9] = "MPRVOL1";  // 8 bytes incl. trailing NUL

/// File layout: magic "MPRVOL1\0", then rank, extents and voxel spacing (mm)
/// as 64-bit little-endian reals, then the voxel payload as 32-bit
/// little-endian reals in row-major order.
inline void save_volume(const std::filesystem::path& path, const Volume& vol) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open volume for writing: " + path.string());
  f.write(kVolumeMagic, 8);
  const double rank = static_cast<double>(vol.shape.size());
  f.write(reinterpret_cast<const char*>(&rank), 8);
  for (int64_t e : vol.shape) {
    const double ext = static_cast<double>(e);
    f.write(reinterpret_cast<const char*>(&ext), 8);
  }
  f.write(reinterpret_cast<const char*>(&vol.spacing_mm), 8);
  f.write(reinterpret_cast<const char*>(vol.data.data()),
          static_cast<std::streamsize>(vol.data.size() * 4));
  if (!f) throw std::runtime_error("write failed for volume: " + path.string());
}

inline Volume load_volume(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open volume: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kVolumeMagic, 8) != 0)
    throw std::runtime_error("bad volume magic in " + path.string());
  double rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 8);
  Volume vol;
  vol.shape.resize(static_cast<size_t>(rank));
  for (auto& e : vol.shape) {
    double ext = 0;
    f.read(reinterpret_cast<char*>(&ext), 8);
    e = static_cast<int64_t>(ext);
  }
  f.read(reinterpret_cast<char*>(&vol.spacing_mm), 8);
  vol.data.resize(static_cast<size_t>(numel(vol.shape)));
  f.read(reinterpret_cast<char*>(vol.data.data()),
         static_cast<std::streamsize>(vol.data.size() * 4));
  if (!f) throw std::runtime_error("truncated volume: " + path.string());
  return vol;
}

}  // namespace cadmil

#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "cadmil/nn.hpp"
#include "cadmil/volume.hpp"

namespace cadmil::myo {

constexpr int64_t kClusterCount = 500;
constexpr int64_t kPatchSide = 16;
constexpr int64_t kLatentDim = 128;
constexpr int64_t kFeatureLen = 512;  // mean | sd | min | max of 128 latents
constexpr int64_t kMaxPatchesPerCluster = 32;

constexpr double kIntensityShift = 100.0;
constexpr double kIntensityScale = 150.0;

// ---------------------------------------------------------------------------
// Spatial clustering
// ---------------------------------------------------------------------------

/// Spatially connected partition of the mask. Voxels are linear indices
/// into the mask volume; centroids are in mm.
struct ClusterSet {
  std::vector<std::vector<int64_t>> voxels;
  std::vector<std::array<double, 3>> centroids_mm;
  Shape grid;

  int64_t total_voxels() const {
    int64_t n = 0;
    for (const auto& c : voxels) n += static_cast<int64_t>(c.size());
    return n;
  }
};

namespace detail {

struct Coord {
  int64_t z, y, x;
};

inline Coord coord_of(int64_t idx, const Shape& grid) {
  return {idx / (grid[1] * grid[2]), (idx / grid[2]) % grid[1], idx % grid[2]};
}

/// Connected components of one cluster under 26-connectivity, largest first
/// (ties by smallest voxel index).
inline std::vector<std::vector<int64_t>> components_of(const std::vector<int64_t>& voxels,
                                                       const Shape& grid,
                                                       const std::vector<int32_t>& owner,
                                                       int32_t self) {
  std::vector<std::vector<int64_t>> comps;
  std::vector<char> seen(voxels.size(), 0);
  std::unordered_map<int64_t, size_t> pos;
  pos.reserve(voxels.size() * 2);
  for (size_t i = 0; i < voxels.size(); ++i) pos[voxels[i]] = i;

  for (size_t start = 0; start < voxels.size(); ++start) {
    if (seen[start]) continue;
    std::vector<int64_t> comp;
    std::vector<size_t> stack{start};
    seen[start] = 1;
    while (!stack.empty()) {
      const size_t cur = stack.back();
      stack.pop_back();
      comp.push_back(voxels[cur]);
      const Coord c = coord_of(voxels[cur], grid);
      for (int64_t dz = -1; dz <= 1; ++dz)
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            const int64_t nz = c.z + dz, ny = c.y + dy, nx = c.x + dx;
            if (nz < 0 || nz >= grid[0] || ny < 0 || ny >= grid[1] || nx < 0 || nx >= grid[2])
              continue;
            const int64_t ni = (nz * grid[1] + ny) * grid[2] + nx;
            if (owner[static_cast<size_t>(ni)] != self) continue;
            auto it = pos.find(ni);
            if (it == pos.end() || seen[it->second]) continue;
            seen[it->second] = 1;
            stack.push_back(it->second);
          }
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  std::sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a.front() < b.front();
  });
  return comps;
}

}  // namespace detail

/// k-means over voxel coordinates followed by a connectivity repair pass
/// that moves disconnected fragments into the adjacent cluster with the
/// largest shared boundary. Deterministic per seed.
inline ClusterSet cluster_myocardium(const Volume& mask, uint64_t seed,
                                     int64_t k = kClusterCount) {
  check_arg(mask.shape.size() == 3, "mask must be rank 3");
  std::vector<int64_t> voxels;
  for (size_t i = 0; i < mask.data.size(); ++i)
    if (mask.data[i] > 0) voxels.push_back(static_cast<int64_t>(i));
  const int64_t n = static_cast<int64_t>(voxels.size());
  check_arg(n >= k, "mask has " + std::to_string(n) + " voxels, fewer than " + std::to_string(k) +
                        " clusters");
  const Shape grid = mask.shape;

  std::vector<std::array<double, 3>> pts(voxels.size());
  for (size_t i = 0; i < voxels.size(); ++i) {
    const auto c = detail::coord_of(voxels[i], grid);
    pts[i] = {static_cast<double>(c.z), static_cast<double>(c.y), static_cast<double>(c.x)};
  }

  std::vector<int32_t> assign(voxels.size(), 0);
  std::vector<std::array<double, 3>> centers(static_cast<size_t>(k));

  if (n == k) {
    for (size_t i = 0; i < voxels.size(); ++i) {
      assign[i] = static_cast<int32_t>(i);
      centers[i] = pts[i];
    }
  } else {
    // k-means++ seeding
    Rng rng(seed);
    std::vector<double> dist2(voxels.size(), std::numeric_limits<double>::max());
    size_t first = static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(n)));
    centers[0] = pts[first];
    for (int64_t c = 1; c < k; ++c) {
      double total = 0;
      for (size_t i = 0; i < pts.size(); ++i) {
        const double dz = pts[i][0] - centers[static_cast<size_t>(c - 1)][0];
        const double dy = pts[i][1] - centers[static_cast<size_t>(c - 1)][1];
        const double dx = pts[i][2] - centers[static_cast<size_t>(c - 1)][2];
        dist2[i] = std::min(dist2[i], dz * dz + dy * dy + dx * dx);
        total += dist2[i];
      }
      double pick = rng.uniform() * total;
      size_t chosen = pts.size() - 1;
      for (size_t i = 0; i < pts.size(); ++i) {
        pick -= dist2[i];
        if (pick <= 0) {
          chosen = i;
          break;
        }
      }
      centers[static_cast<size_t>(c)] = pts[chosen];
    }

    // Lloyd iterations
    for (int iter = 0; iter < 12; ++iter) {
      bool changed = false;
      for (size_t i = 0; i < pts.size(); ++i) {
        double best = std::numeric_limits<double>::max();
        int32_t arg = assign[i];
        for (int64_t c = 0; c < k; ++c) {
          const double dz = pts[i][0] - centers[static_cast<size_t>(c)][0];
          const double dy = pts[i][1] - centers[static_cast<size_t>(c)][1];
          const double dx = pts[i][2] - centers[static_cast<size_t>(c)][2];
          const double d = dz * dz + dy * dy + dx * dx;
          if (d < best) {
            best = d;
            arg = static_cast<int32_t>(c);
          }
        }
        if (arg != assign[i]) {
          assign[i] = arg;
          changed = true;
        }
      }
      std::vector<std::array<double, 4>> acc(static_cast<size_t>(k), {0, 0, 0, 0});
      for (size_t i = 0; i < pts.size(); ++i) {
        auto& a = acc[static_cast<size_t>(assign[i])];
        a[0] += pts[i][0];
        a[1] += pts[i][1];
        a[2] += pts[i][2];
        a[3] += 1;
      }
      // an empty cluster steals the farthest voxel of the largest cluster
      for (int64_t c = 0; c < k; ++c) {
        if (acc[static_cast<size_t>(c)][3] > 0) continue;
        int32_t largest = 0;
        for (int64_t o = 1; o < k; ++o)
          if (acc[static_cast<size_t>(o)][3] > acc[static_cast<size_t>(largest)][3])
            largest = static_cast<int32_t>(o);
        size_t far_i = 0;
        double far_d = -1;
        for (size_t i = 0; i < pts.size(); ++i) {
          if (assign[i] != largest) continue;
          const double dz = pts[i][0] - centers[static_cast<size_t>(largest)][0];
          const double dy = pts[i][1] - centers[static_cast<size_t>(largest)][1];
          const double dx = pts[i][2] - centers[static_cast<size_t>(largest)][2];
          const double d = dz * dz + dy * dy + dx * dx;
          if (d > far_d) {
            far_d = d;
            far_i = i;
          }
        }
        assign[far_i] = static_cast<int32_t>(c);
        acc[static_cast<size_t>(largest)][3] -= 1;
        acc[static_cast<size_t>(c)] = {pts[far_i][0], pts[far_i][1], pts[far_i][2], 1};
        changed = true;
      }
      for (int64_t c = 0; c < k; ++c) {
        auto& a = acc[static_cast<size_t>(c)];
        centers[static_cast<size_t>(c)] = {a[0] / a[3], a[1] / a[3], a[2] / a[3]};
      }
      if (!changed) break;
    }
  }

  // voxel-indexed ownership for the repair pass
  std::vector<int32_t> owner(mask.data.size(), -1);
  for (size_t i = 0; i < voxels.size(); ++i) owner[static_cast<size_t>(voxels[i])] = assign[i];

  for (int pass = 0; pass < 20; ++pass) {
    bool moved = false;
    std::vector<std::vector<int64_t>> lists(static_cast<size_t>(k));
    for (int64_t idx : voxels) lists[static_cast<size_t>(owner[static_cast<size_t>(idx)])].push_back(idx);
    for (int32_t c = 0; c < k; ++c) {
      const auto& vs = lists[static_cast<size_t>(c)];
      if (vs.empty()) continue;
      const auto comps = detail::components_of(vs, grid, owner, c);
      for (size_t f = 1; f < comps.size(); ++f) {
        // adjacent cluster with the largest contact area
        std::unordered_map<int32_t, int64_t> contact;
        for (int64_t idx : comps[f]) {
          const auto co = detail::coord_of(idx, grid);
          for (int64_t dz = -1; dz <= 1; ++dz)
            for (int64_t dy = -1; dy <= 1; ++dy)
              for (int64_t dx = -1; dx <= 1; ++dx) {
                const int64_t nz = co.z + dz, ny = co.y + dy, nx = co.x + dx;
                if (nz < 0 || nz >= grid[0] || ny < 0 || ny >= grid[1] || nx < 0 ||
                    nx >= grid[2])
                  continue;
                const int32_t o = owner[static_cast<size_t>((nz * grid[1] + ny) * grid[2] + nx)];
                if (o >= 0 && o != c) ++contact[o];
              }
        }
        if (contact.empty()) continue;  // isolated fragment, nothing adjacent
        int32_t target = -1;
        int64_t best = -1;
        for (const auto& [cl, cnt] : contact)
          if (cnt > best || (cnt == best && cl < target)) {
            best = cnt;
            target = cl;
          }
        for (int64_t idx : comps[f]) owner[static_cast<size_t>(idx)] = target;
        moved = true;
      }
    }
    if (!moved) break;
  }

  ClusterSet out;
  out.grid = grid;
  out.voxels.assign(static_cast<size_t>(k), {});
  for (int64_t idx : voxels) out.voxels[static_cast<size_t>(owner[static_cast<size_t>(idx)])].push_back(idx);
  out.centroids_mm.resize(static_cast<size_t>(k));
  for (int64_t c = 0; c < k; ++c) {
    auto& vs = out.voxels[static_cast<size_t>(c)];
    std::sort(vs.begin(), vs.end());
    std::array<double, 3> acc{0, 0, 0};
    for (int64_t idx : vs) {
      const auto co = detail::coord_of(idx, grid);
      acc[0] += static_cast<double>(co.z);
      acc[1] += static_cast<double>(co.y);
      acc[2] += static_cast<double>(co.x);
    }
    const double cnt = static_cast<double>(vs.size());
    out.centroids_mm[static_cast<size_t>(c)] = {acc[0] / cnt * mask.spacing_mm,
                                                acc[1] / cnt * mask.spacing_mm,
                                                acc[2] / cnt * mask.spacing_mm};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patch CAE
// ---------------------------------------------------------------------------

/// In-plane patch centered at a mask voxel, zero-padded at volume edges.
template <typename T>
Tensor<T> extract_patch(const Volume& vol, int64_t z, int64_t y, int64_t x) {
  Tensor<T> patch(Shape{1, 1, kPatchSide, kPatchSide});
  for (int64_t py = 0; py < kPatchSide; ++py)
    for (int64_t px = 0; px < kPatchSide; ++px) {
      const int64_t sy = y + py - kPatchSide / 2;
      const int64_t sx = x + px - kPatchSide / 2;
      if (sy < 0 || sy >= vol.shape[1] || sx < 0 || sx >= vol.shape[2]) continue;
      patch.data[py * kPatchSide + px] =
          static_cast<T>((vol.at(z, sy, sx) - kIntensityShift) / kIntensityScale);
    }
  return patch;
}

template <typename T>
struct MyoCaeModel {
  Conv3Layer<T> enc1, enc2;
  PRelu<T> act1, act2, dact0, dact1;
  DenseLayer<T> code_head, expand;
  Conv3TLayer<T> dec1, dec2;
  std::array<int64_t, 2> channels;
  int64_t flat = 0;

  explicit MyoCaeModel(Rng& rng, std::array<int64_t, 2> ch = {8, 16}) : channels(ch) {
    const Conv3Spec sp{{1, 2, 2}, {0, 1, 1}};
    enc1.init(ch[0], 1, {1, 3, 3}, sp, rng);
    enc2.init(ch[1], ch[0], {1, 3, 3}, sp, rng);
    act1.init(ch[0]);
    act2.init(ch[1]);
    flat = ch[1] * (kPatchSide / 4) * (kPatchSide / 4);
    code_head.init(kLatentDim, flat, rng);
    expand.init(flat, kLatentDim, rng);
    dact0.init(ch[1]);
    dec1.init(ch[1], ch[0], {1, 3, 3}, sp, {1, kPatchSide / 2, kPatchSide / 2}, rng);
    dact1.init(ch[0]);
    dec2.init(ch[0], 1, {1, 3, 3}, sp, {1, kPatchSide, kPatchSide}, rng);
  }

  int encode_nodes(Graph<T>& g, int patch) {
    int x = act1.apply(g, enc1.apply(g, patch));
    x = act2.apply(g, enc2.apply(g, x));
    return code_head.apply(g, g.reshape(x, Shape{flat}));
  }

  int decode_nodes(Graph<T>& g, int code) {
    int x = g.reshape(expand.apply(g, code), Shape{channels[1], 1, kPatchSide / 4, kPatchSide / 4});
    x = dact0.apply(g, x);
    x = dact1.apply(g, dec1.apply(g, x));
    return dec2.apply(g, x);
  }

  Tensor<T> encode(const Tensor<T>& patch) {
    Graph<T> g;
    return g.value(encode_nodes(g, g.leaf(patch)));
  }

  Tensor<T> reconstruct(const Tensor<T>& patch) {
    Graph<T> g;
    return g.value(decode_nodes(g, encode_nodes(g, g.leaf(patch))));
  }

  int loss_nodes(Graph<T>& g, int patch) {
    return g.mse(decode_nodes(g, encode_nodes(g, patch)), patch);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> refs;
    enc1.collect("myocae.enc1", refs);
    act1.collect("myocae.act1", refs);
    enc2.collect("myocae.enc2", refs);
    act2.collect("myocae.act2", refs);
    code_head.collect("myocae.code", refs);
    expand.collect("myocae.expand", refs);
    dact0.collect("myocae.dact0", refs);
    dec1.collect("myocae.dec1", refs);
    dact1.collect("myocae.dact1", refs);
    dec2.collect("myocae.dec2", refs);
    return refs;
  }
};

struct MyoPretrainConfig {
  int64_t iterations = 1500;
  int64_t batch = 16;
  double learning_rate = 1e-3;
  uint64_t seed = 1;
};

template <typename T>
std::vector<double> pretrain_myo_cae(MyoCaeModel<T>& cae,
                                     const std::vector<const Volume*>& volumes,
                                     const std::vector<const Volume*>& masks,
                                     const MyoPretrainConfig& cfg) {
  check_arg(!volumes.empty() && volumes.size() == masks.size(), "bad myo pretraining corpus");
  std::vector<std::vector<int64_t>> mask_voxels(volumes.size());
  for (size_t i = 0; i < masks.size(); ++i)
    for (size_t v = 0; v < masks[i]->data.size(); ++v)
      if (masks[i]->data[v] > 0) mask_voxels[i].push_back(static_cast<int64_t>(v));

  Rng rng(derive_seed(cfg.seed, 0xB2, 0));
  AdamOptimizer<T> opt(cae.params(), static_cast<T>(cfg.learning_rate), T(0));
  std::vector<double> losses;
  for (int64_t it = 0; it < cfg.iterations; ++it) {
    opt.zero_grad();
    double batch_loss = 0;
    for (int64_t b = 0; b < cfg.batch; ++b) {
      const size_t vi = rng.uniform_int(volumes.size());
      const int64_t idx = mask_voxels[vi][rng.uniform_int(mask_voxels[vi].size())];
      const auto co = detail::coord_of(idx, masks[vi]->shape);
      const auto patch = extract_patch<T>(*volumes[vi], co.z, co.y, co.x);
      Graph<T> g;
      const int loss = cae.loss_nodes(g, g.leaf(patch));
      g.backward(loss);
      batch_loss += static_cast<double>(g.value(loss).data[0]);
    }
    opt.scale_grads(T(1) / static_cast<T>(cfg.batch));
    opt.step();
    losses.push_back(batch_loss / static_cast<double>(cfg.batch));
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Per-patient features
// ---------------------------------------------------------------------------

/// Cluster latents averaged over sampled member patches, then mean / sd /
/// min / max across clusters per latent dimension, ordered
/// [mean | sd | min | max]. Clusters are reduced in a canonical order
/// (by smallest voxel index) so the result is invariant to cluster order.
template <typename T>
std::vector<float> myo_features(MyoCaeModel<T>& cae, const Volume& vol, const ClusterSet& clusters,
                                uint64_t seed, int64_t patches_per_cluster = 16) {
  check_arg(patches_per_cluster >= 1 && patches_per_cluster <= kMaxPatchesPerCluster,
            "patches_per_cluster must be in [1,32]");
  const size_t k = clusters.voxels.size();

  std::vector<size_t> order(k);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return clusters.voxels[a].front() < clusters.voxels[b].front();
  });

  std::vector<std::vector<double>> latents;
  latents.reserve(k);
  for (const size_t c : order) {
    const auto& vs = clusters.voxels[c];
    // per-cluster stream keyed by content, not cluster order
    Rng rng(derive_seed(seed, static_cast<uint64_t>(vs.front()), 17));
    std::vector<int64_t> sample = vs;
    if (static_cast<int64_t>(sample.size()) > patches_per_cluster) {
      for (int64_t i = 0; i < patches_per_cluster; ++i) {
        const size_t j = i + static_cast<size_t>(rng.uniform_int(sample.size() - i));
        std::swap(sample[static_cast<size_t>(i)], sample[j]);
      }
      sample.resize(static_cast<size_t>(patches_per_cluster));
    }
    std::vector<double> mean_latent(static_cast<size_t>(kLatentDim), 0.0);
    for (int64_t idx : sample) {
      const auto co = detail::coord_of(idx, clusters.grid);
      const Tensor<T> z = cae.encode(extract_patch<T>(vol, co.z, co.y, co.x));
      for (int64_t d = 0; d < kLatentDim; ++d)
        mean_latent[static_cast<size_t>(d)] += static_cast<double>(z.data[d]);
    }
    for (auto& v : mean_latent) v /= static_cast<double>(sample.size());
    latents.push_back(std::move(mean_latent));
  }

  std::vector<float> features(static_cast<size_t>(kFeatureLen));
  for (int64_t d = 0; d < kLatentDim; ++d) {
    double mean = 0, lo = latents[0][static_cast<size_t>(d)], hi = lo;
    for (const auto& l : latents) {
      const double v = l[static_cast<size_t>(d)];
      mean += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    mean /= static_cast<double>(latents.size());
    double var = 0;
    for (const auto& l : latents) {
      const double dv = l[static_cast<size_t>(d)] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(latents.size());
    features[static_cast<size_t>(d)] = static_cast<float>(mean);
    features[static_cast<size_t>(kLatentDim + d)] = static_cast<float>(std::sqrt(var));
    features[static_cast<size_t>(2 * kLatentDim + d)] = static_cast<float>(lo);
    features[static_cast<size_t>(3 * kLatentDim + d)] = static_cast<float>(hi);
  }
  return features;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr char kFeatureMagic[9] = "MYOFEA1";  // 8 bytes incl. trailing NUL

inline void write_myo_features(const std::filesystem::path& path, const std::vector<float>& feat) {
  check_arg(static_cast<int64_t>(feat.size()) == kFeatureLen, "myocardium features must have 512 values");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write features: " + path.string());
  f.write(kFeatureMagic, 8);
  f.write(reinterpret_cast<const char*>(feat.data()), static_cast<std::streamsize>(feat.size() * 4));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<float> read_myo_features(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read features: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kFeatureMagic, 8) != 0)
    throw std::runtime_error("bad feature magic in " + path.string());
  std::vector<float> feat(static_cast<size_t>(kFeatureLen));
  f.read(reinterpret_cast<char*>(feat.data()), static_cast<std::streamsize>(feat.size() * 4));
  if (!f) throw std::runtime_error("truncated features: " + path.string());
  return feat;
}

}  // namespace cadmil::myo

#include <catch2/catch_amalgamated.hpp>

#include "cadmil/myo_encoder.hpp"
#include "cadmil/synthgen.hpp"

using namespace cadmil;
using namespace cadmil::myo;

namespace {

std::pair<Volume, Volume> rendered_myo(const std::array<double, 4>& ffr, uint64_t seed) {
  Volume vol, mask;
  synthgen::render_myocardium(ffr, 60.0, 18.0, seed, vol, mask);
  return {vol, mask};
}

MyoCaeModel<float>& trained_cae() {
  static MyoCaeModel<float>* m = [] {
    Rng rng(2);
    auto* cae = new MyoCaeModel<float>(rng);
    static auto a = rendered_myo({1.0, 1.0, 1.0, 1.0}, 11);
    static auto b = rendered_myo({0.7, 1.0, 0.9, 1.0}, 12);
    MyoPretrainConfig cfg;
    cfg.iterations = 700;
    cfg.batch = 12;
    cfg.seed = 5;
    pretrain_myo_cae(*cae, {&a.first, &b.first}, {&a.second, &b.second}, cfg);
    return cae;
  }();
  return *m;
}

}  // namespace

TEST_CASE("a 500-voxel mask of isolated voxels becomes 500 singletons") {
  Volume mask(Shape{10, 40, 40}, 0.3);
  int64_t placed = 0;
  for (int64_t z = 0; z < 10 && placed < 500; z += 2)
    for (int64_t y = 0; y < 40 && placed < 500; y += 2)
      for (int64_t x = 0; x < 40 && placed < 500; x += 2) {
        mask.at(z, y, x) = 1.0f;
        ++placed;
      }
  REQUIRE(placed == 500);
  const auto clusters = cluster_myocardium(mask, 7);
  REQUIRE(clusters.voxels.size() == 500);
  for (const auto& c : clusters.voxels) CHECK(c.size() == 1);
}

TEST_CASE("masks smaller than the cluster count are rejected") {
  Volume mask(Shape{4, 20, 20}, 0.3);
  for (int64_t i = 0; i < 400; ++i) mask.data[static_cast<size_t>(i * 2)] = 1.0f;
  REQUIRE_THROWS_WITH(cluster_myocardium(mask, 3),
                      Catch::Matchers::ContainsSubstring("fewer than 500"));
}

TEST_CASE("clusters partition the mask and every cluster is connected") {
  const auto [vol, mask] = rendered_myo({0.7, 1.0, 1.0, 1.0}, 3);
  const auto clusters = cluster_myocardium(mask, 19);
  REQUIRE(clusters.voxels.size() == 500);

  int64_t mask_count = 0;
  for (float v : mask.data) mask_count += v > 0 ? 1 : 0;
  REQUIRE(clusters.total_voxels() == mask_count);

  std::vector<char> seen(mask.data.size(), 0);
  for (const auto& c : clusters.voxels) {
    REQUIRE(!c.empty());
    for (int64_t idx : c) {
      REQUIRE(mask.data[static_cast<size_t>(idx)] > 0);
      REQUIRE(seen[static_cast<size_t>(idx)] == 0);
      seen[static_cast<size_t>(idx)] = 1;
    }
  }

  // flood-fill connectivity check per cluster
  const Shape grid = mask.shape;
  for (const auto& c : clusters.voxels) {
    std::unordered_map<int64_t, char> member;
    for (int64_t idx : c) member[idx] = 0;
    std::vector<int64_t> stack{c.front()};
    member[c.front()] = 1;
    size_t visited = 0;
    while (!stack.empty()) {
      const int64_t idx = stack.back();
      stack.pop_back();
      ++visited;
      const int64_t z = idx / (grid[1] * grid[2]), y = (idx / grid[2]) % grid[1],
                    x = idx % grid[2];
      for (int64_t dz = -1; dz <= 1; ++dz)
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            const int64_t nz = z + dz, ny = y + dy, nx = x + dx;
            if (nz < 0 || nz >= grid[0] || ny < 0 || ny >= grid[1] || nx < 0 || nx >= grid[2])
              continue;
            const int64_t ni = (nz * grid[1] + ny) * grid[2] + nx;
            auto it = member.find(ni);
            if (it != member.end() && it->second == 0) {
              it->second = 1;
              stack.push_back(ni);
            }
          }
    }
    REQUIRE(visited == c.size());
  }
}

TEST_CASE("clustering is deterministic per seed") {
  const auto [vol, mask] = rendered_myo({1.0, 1.0, 1.0, 1.0}, 4);
  const auto a = cluster_myocardium(mask, 23);
  const auto b = cluster_myocardium(mask, 23);
  REQUIRE(a.voxels == b.voxels);
}

TEST_CASE("features of a constant volume are [v | 0 | v | v]") {
  const auto [vol_ignored, mask] = rendered_myo({1.0, 1.0, 1.0, 1.0}, 5);
  Volume vol(mask.shape, mask.spacing_mm);
  std::fill(vol.data.begin(), vol.data.end(), 137.0f);
  Rng rng(3);
  MyoCaeModel<float> cae(rng);
  const auto clusters = cluster_myocardium(mask, 29);
  const auto feat = myo_features(cae, vol, clusters, 31);
  REQUIRE(feat.size() == 512);
  for (int64_t d = 0; d < 128; ++d) {
    const float v = feat[static_cast<size_t>(d)];
    CHECK(feat[static_cast<size_t>(128 + d)] == 0.0f);         // sd
    CHECK(feat[static_cast<size_t>(256 + d)] == v);            // min
    CHECK(feat[static_cast<size_t>(384 + d)] == v);            // max
  }
}

TEST_CASE("feature statistics satisfy min <= mean <= max") {
  const auto [vol, mask] = rendered_myo({0.6, 1.0, 0.9, 1.0}, 6);
  Rng rng(4);
  MyoCaeModel<float> cae(rng);
  const auto clusters = cluster_myocardium(mask, 37);
  const auto feat = myo_features(cae, vol, clusters, 41, 8);
  for (int64_t d = 0; d < 128; ++d) {
    CHECK(feat[static_cast<size_t>(256 + d)] <= feat[static_cast<size_t>(d)]);
    CHECK(feat[static_cast<size_t>(d)] <= feat[static_cast<size_t>(384 + d)]);
  }
}

TEST_CASE("shuffling cluster order never changes the feature vector") {
  const auto [vol, mask] = rendered_myo({0.8, 1.0, 1.0, 0.7}, 7);
  Rng rng(5);
  MyoCaeModel<float> cae(rng);
  auto clusters = cluster_myocardium(mask, 43);
  const auto feat = myo_features(cae, vol, clusters, 47, 6);

  ClusterSet shuffled = clusters;
  Rng perm(6);
  std::vector<size_t> order(shuffled.voxels.size());
  std::iota(order.begin(), order.end(), size_t{0});
  perm.shuffle(order);
  for (size_t i = 0; i < order.size(); ++i) {
    shuffled.voxels[i] = clusters.voxels[order[i]];
    shuffled.centroids_mm[i] = clusters.centroids_mm[order[i]];
  }
  REQUIRE(myo_features(cae, vol, shuffled, 47, 6) == feat);
}

TEST_CASE("ischemia raises the dispersion block of the features") {
  auto& cae = trained_cae();
  const auto [vol_isch, mask_isch] = rendered_myo({0.6, 1.0, 1.0, 1.0}, 8);
  const auto [vol_none, mask_none] = rendered_myo({1.0, 1.0, 1.0, 1.0}, 8);
  REQUIRE(mask_isch.data == mask_none.data);
  const auto clusters = cluster_myocardium(mask_isch, 53);

  const auto f_isch = myo_features(cae, vol_isch, clusters, 59, 8);
  const auto f_none = myo_features(cae, vol_none, clusters, 59, 8);
  double sd_isch = 0, sd_none = 0;
  for (int64_t d = 128; d < 256; ++d) {
    sd_isch += f_isch[static_cast<size_t>(d)] * f_isch[static_cast<size_t>(d)];
    sd_none += f_none[static_cast<size_t>(d)] * f_none[static_cast<size_t>(d)];
  }
  INFO("sd norm ischemic " << std::sqrt(sd_isch) << " vs clean " << std::sqrt(sd_none));
  CHECK(std::sqrt(sd_isch) > std::sqrt(sd_none));
}

TEST_CASE("pretrained myo cae halves the reconstruction error of an untrained one") {
  auto& cae = trained_cae();
  Rng rng(9);
  MyoCaeModel<float> untrained(rng);
  const auto [vol, mask] = rendered_myo({0.9, 1.0, 0.75, 1.0}, 21);  // held out

  double trained_mse = 0, untrained_mse = 0;
  int count = 0;
  for (size_t i = 0; i < mask.data.size(); i += 997) {
    if (mask.data[i] == 0.0f) continue;
    const int64_t z = static_cast<int64_t>(i) / (64 * 64), y = (static_cast<int64_t>(i) / 64) % 64,
                  x = static_cast<int64_t>(i) % 64;
    const auto patch = extract_patch<float>(vol, z, y, x);
    auto mse = [&](MyoCaeModel<float>& m) {
      const auto r = m.reconstruct(patch);
      double acc = 0;
      for (int64_t j = 0; j < patch.size(); ++j) {
        const double d = r.data[j] - patch.data[j];
        acc += d * d;
      }
      return acc / static_cast<double>(patch.size());
    };
    trained_mse += mse(cae);
    untrained_mse += mse(untrained);
    ++count;
  }
  trained_mse /= count;
  untrained_mse /= count;
  INFO("trained " << trained_mse << " untrained " << untrained_mse);
  CHECK(trained_mse <= 0.5 * untrained_mse);

  // identical patches yield identical latents
  const auto p = extract_patch<float>(vol, 12, 32, 18);
  REQUIRE(cae.encode(p).data == cae.encode(p).data);
  REQUIRE(cae.encode(p).shape == Shape{128});
}

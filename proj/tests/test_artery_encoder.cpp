#include <catch2/catch_amalgamated.hpp>

#include "cadmil/artery_encoder.hpp"

using namespace cadmil;
using namespace cadmil::artery;

namespace {

Volume tube_volume(int64_t length, double noise, uint64_t seed, double taper = 0.15) {
  synthgen::ArteryGeometry geo;
  geo.length_pts = length;
  geo.taper = taper;
  return synthgen::render_mpr(geo, noise, seed);
}

/// VCAE + 1D-CAE pretrained once on an easy low-noise corpus and shared
/// by the slower checks below.
struct TrainedCaes {
  VcaeModel<float> vcae;
  SeqCaeModel<float> seq;
  std::vector<Volume> corpus;
};

TrainedCaes& trained_caes() {
  static TrainedCaes* t = [] {
    Rng rng(5);
    auto* out = new TrainedCaes{VcaeModel<float>(rng), SeqCaeModel<float>(rng), {}};
    synthgen::CohortConfig cfg;
    cfg.seed = 77;
    cfg.noise_sd = 12.0;
    for (int p = 0; p < 3; ++p) {
      auto rec = synthgen::sample_patient(cfg, p);
      for (size_t a = 0; a < rec.arteries.size() && out->corpus.size() < 24; ++a) {
        rec.arteries[a].length_pts = std::min<int64_t>(rec.arteries[a].length_pts, 140);
        for (auto& s : rec.arteries[a].stenoses)
          s.center_pt = std::min(s.center_pt, static_cast<double>(rec.arteries[a].length_pts - 5));
        out->corpus.push_back(synthgen::render_mpr(rec.arteries[a], cfg.noise_sd,
                                                   derive_seed(rec.seed, a, 2)));
      }
    }
    PretrainConfig pcfg;
    pcfg.vcae_iterations = 1400;
    pcfg.seq_iterations = 600;
    pcfg.batch = 6;
    pcfg.seed = 3;
    pretrain_artery_caes(out->vcae, out->seq, out->corpus, pcfg);
    return out;
  }();
  return *t;
}

}  // namespace

TEST_CASE("extract_subvolumes yields one padded 40x40x5 patch per centerline point") {
  const Volume vol = tube_volume(100, 10.0, 3);
  const auto patches = extract_subvolumes<float>(vol);
  REQUIRE(patches.size() == 100);
  for (const auto& p : patches) REQUIRE(p.shape == Shape{1, 5, 40, 40});

  // two leading slices of the first patch are padding
  for (int64_t d = 0; d < 2; ++d)
    for (int64_t i = 0; i < 40 * 40; ++i) REQUIRE(patches[0].data[d * 1600 + i] == 0.0f);
  // and the trailing slices of the last patch
  for (int64_t d = 3; d < 5; ++d)
    for (int64_t i = 0; i < 40 * 40; ++i) REQUIRE(patches[99].data[d * 1600 + i] == 0.0f);
}

TEST_CASE("constant-intensity volume gives identical interior patches") {
  Volume vol(Shape{60, 40, 40}, 0.3);
  std::fill(vol.data.begin(), vol.data.end(), 137.0f);
  const auto patches = extract_subvolumes<float>(vol);
  for (size_t z = 3; z + 3 < patches.size(); ++z) REQUIRE(patches[z].data == patches[2].data);
}

TEST_CASE("patch extraction rejects undersized cross-sections") {
  Volume vol(Shape{60, 39, 40}, 0.3);
  REQUIRE_THROWS_AS(extract_patch<float>(vol, 5), std::invalid_argument);
}

TEST_CASE("encoding length is 1024 for all artery lengths") {
  Rng rng(9);
  VcaeModel<float> vcae(rng);
  SeqCaeModel<float> seq(rng);
  for (const int64_t L : {int64_t(50), int64_t(137), int64_t(800)}) {
    const Volume vol = tube_volume(L, 5.0, 21);
    const auto enc = encode_artery(vcae, seq, vol);
    REQUIRE(enc.size() == 1024);
  }
}

TEST_CASE("inference encoding is deterministic") {
  Rng rng(13);
  VcaeModel<float> vcae(rng);
  const Volume vol = tube_volume(64, 20.0, 5);
  const auto p = extract_patch<float>(vol, 30);
  const auto mu1 = vcae.encode(p);
  const auto mu2 = vcae.encode(p);
  REQUIRE(mu1.shape == Shape{16});
  REQUIRE(mu1.data == mu2.data);
}

TEST_CASE("sequence encoder rejects arteries longer than the padded maximum") {
  Rng rng(13);
  SeqCaeModel<float> seq(rng);
  Tensor<float> fm(Shape{16, 801});
  REQUIRE_THROWS_WITH(sequence_encode(seq, fm), Catch::Matchers::ContainsSubstring("800"));
}

TEST_CASE("all-zero feature map encodes every row identically") {
  Rng rng(17);
  SeqCaeModel<float> seq(rng);
  Tensor<float> fm(Shape{16, 300});
  const auto enc = sequence_encode(seq, fm);
  const auto zero_response = seq.encode(Tensor<float>(Shape{1, 800}));
  for (int64_t row = 0; row < 16; ++row)
    for (int64_t c = 0; c < 64; ++c)
      REQUIRE(enc[static_cast<size_t>(row * 64 + c)] == zero_response.data[c]);
}

TEST_CASE("padding determinism: equal post-padding rows give equal encodings") {
  Rng rng(19);
  SeqCaeModel<float> seq(rng);
  Rng content(4);
  Tensor<float> fm_short(Shape{16, 60});
  for (auto& v : fm_short.data) v = static_cast<float>(content.normal());
  Tensor<float> fm_long(Shape{16, 90});  // same head, zero tail
  for (int64_t r = 0; r < 16; ++r)
    for (int64_t z = 0; z < 60; ++z) fm_long.data[r * 90 + z] = fm_short.data[r * 60 + z];
  REQUIRE(sequence_encode(seq, fm_short) == sequence_encode(seq, fm_long));
}

TEST_CASE("row processing order does not change row codes") {
  Rng rng(23);
  SeqCaeModel<float> seq(rng);
  Rng content(6);
  Tensor<float> fm(Shape{16, 120});
  for (auto& v : fm.data) v = static_cast<float>(content.normal());
  const auto enc = sequence_encode(seq, fm);
  for (const int64_t row : {int64_t(15), int64_t(7), int64_t(0)}) {
    const auto codes = seq.encode(pad_row(fm, row));
    for (int64_t c = 0; c < 64; ++c)
      REQUIRE(codes.data[c] == enc[static_cast<size_t>(row * 64 + c)]);
  }
}

TEST_CASE("sequence pretraining loss decreases across seeds") {
  synthgen::CohortConfig cfg;
  cfg.seed = 31;
  cfg.noise_sd = 12.0;
  auto rec = synthgen::sample_patient(cfg, 0);
  std::vector<Volume> corpus;
  for (size_t a = 0; a < 6; ++a) {
    rec.arteries[a].length_pts = std::min<int64_t>(rec.arteries[a].length_pts, 120);
    for (auto& s : rec.arteries[a].stenoses)
      s.center_pt = std::min(s.center_pt, static_cast<double>(rec.arteries[a].length_pts - 5));
    corpus.push_back(synthgen::render_mpr(rec.arteries[a], cfg.noise_sd, derive_seed(1, a, 0)));
  }

  int improved = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 100);
    VcaeModel<float> vcae(rng, {4, 4, 4});  // encoder only feeds precomputed rows below
    SeqCaeModel<float> seq(rng);
    std::vector<Tensor<float>> rows;
    for (const auto& vol : corpus) {
      Tensor<float> fm = feature_map(vcae, vol);
      for (int64_t r = 0; r < 16; ++r) rows.push_back(pad_row(fm, r));
    }
    AdamOptimizer<float> opt(seq.params(), 1e-3f, 0.0f);
    Rng pick(seed + 500);
    std::vector<double> losses;
    for (int it = 0; it < 100; ++it) {
      opt.zero_grad();
      Graph<float> g;
      const int loss = seq.loss_nodes(g, g.leaf(rows[pick.uniform_int(rows.size())]));
      g.backward(loss);
      opt.step();
      losses.push_back(g.value(loss).data[0]);
    }
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) head += losses[static_cast<size_t>(i)];
    for (int i = 80; i < 100; ++i) tail += losses[static_cast<size_t>(i)];
    if (tail < head) ++improved;
  }
  CHECK(improved >= 9);
}

TEST_CASE("pretrained vcae beats an untrained one on held-out reconstruction") {
  auto& t = trained_caes();
  Rng rng(55);
  VcaeModel<float> untrained(rng);

  synthgen::CohortConfig cfg;
  cfg.seed = 78;  // held-out arteries
  cfg.noise_sd = 12.0;
  auto rec = synthgen::sample_patient(cfg, 0);
  double trained_mse = 0, untrained_mse = 0;
  int count = 0;
  for (size_t a = 0; a < 3; ++a) {
    rec.arteries[a].length_pts = std::min<int64_t>(rec.arteries[a].length_pts, 90);
    for (auto& s : rec.arteries[a].stenoses)
      s.center_pt = std::min(s.center_pt, static_cast<double>(rec.arteries[a].length_pts - 5));
    const Volume vol = synthgen::render_mpr(rec.arteries[a], cfg.noise_sd, derive_seed(2, a, 0));
    for (int64_t z = 10; z < vol.shape[0]; z += 17) {
      const auto patch = extract_patch<float>(vol, z);
      auto mse = [&](VcaeModel<float>& m) {
        const auto rec_patch = m.reconstruct(patch);
        double acc = 0;
        for (int64_t i = 0; i < patch.size(); ++i) {
          const double d = rec_patch.data[i] - patch.data[i];
          acc += d * d;
        }
        return acc / static_cast<double>(patch.size());
      };
      trained_mse += mse(t.vcae);
      untrained_mse += mse(untrained);
      ++count;
    }
  }
  trained_mse /= count;
  untrained_mse /= count;
  INFO("trained " << trained_mse << " untrained " << untrained_mse);
  CHECK(trained_mse <= 0.5 * untrained_mse);
}

TEST_CASE("converged vcae has finite positive kl and cycle-consistent latents") {
  auto& t = trained_caes();
  double kl_total = 0, rel_total = 0;
  int count = 0;
  for (size_t a = 0; a < std::min<size_t>(t.corpus.size(), 6); ++a) {
    const Volume& vol = t.corpus[a];
    for (int64_t z = 8; z < vol.shape[0]; z += 23) {
      const auto patch = extract_patch<float>(vol, z);
      Graph<float> g;
      const auto [mu, logvar] = t.vcae.encode_nodes(g, g.leaf(patch));
      kl_total += g.value(g.gaussian_kl(mu, logvar)).data[0];

      const auto mu_orig = g.value(mu);
      const auto mu_re = t.vcae.encode(t.vcae.reconstruct(patch));
      double dn = 0, nn = 0;
      for (int64_t i = 0; i < 16; ++i) {
        dn += (mu_re.data[i] - mu_orig.data[i]) * (mu_re.data[i] - mu_orig.data[i]);
        nn += mu_orig.data[i] * mu_orig.data[i];
      }
      rel_total += std::sqrt(dn / nn);
      ++count;
    }
  }
  CHECK(kl_total / count > 0.0);
  CHECK(std::isfinite(kl_total));
  INFO("mean cycle relative error " << rel_total / count);
  CHECK(rel_total / count < 0.10);
}

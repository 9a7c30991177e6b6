#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <utility>
#include <vector>

#include "cadmil/nn.hpp"
#include "cadmil/synthgen.hpp"
#include "cadmil/volume.hpp"

namespace cadmil::artery {

constexpr int64_t kPatchDepth = 5;
constexpr int64_t kPatchSide = 40;
constexpr int64_t kLatentDim = 16;     // 3D-VCAE latent size
constexpr int64_t kSequenceLen = 800;  // padded sequence length
constexpr int64_t kSequenceCodes = 64; // 1D-CAE latent size
constexpr int64_t kEncodingLen = kLatentDim * kSequenceCodes;  // 1024

// fixed intensity normalization applied to every patch
constexpr double kIntensityShift = 225.0;
constexpr double kIntensityScale = 350.0;

/// Local sub-volume centered on one centerline point: 5 slices, zero-padded
/// across the volume ends, center-cropped to 40x40 in-plane.
template <typename T>
Tensor<T> extract_patch(const Volume& vol, int64_t z) {
  check_arg(vol.shape.size() == 3, "MPR volume must be rank 3, got " + shape_str(vol.shape));
  const int64_t L = vol.shape[0], H = vol.shape[1], W = vol.shape[2];
  check_arg(H >= kPatchSide && W >= kPatchSide,
            "MPR cross-section must be at least 40x40, got " + shape_str(vol.shape));
  check_arg(z >= 0 && z < L, "centerline index out of range");
  const int64_t oy = (H - kPatchSide) / 2;
  const int64_t ox = (W - kPatchSide) / 2;

  Tensor<T> patch(Shape{1, kPatchDepth, kPatchSide, kPatchSide});
  for (int64_t d = 0; d < kPatchDepth; ++d) {
    const int64_t src = z + d - kPatchDepth / 2;
    if (src < 0 || src >= L) continue;  // zero padding
    for (int64_t y = 0; y < kPatchSide; ++y)
      for (int64_t x = 0; x < kPatchSide; ++x)
        patch.data[(d * kPatchSide + y) * kPatchSide + x] = static_cast<T>(
            (vol.at(src, oy + y, ox + x) - kIntensityShift) / kIntensityScale);
  }
  return patch;
}

/// One patch per centerline point, proximal to distal.
template <typename T>
std::vector<Tensor<T>> extract_subvolumes(const Volume& vol) {
  std::vector<Tensor<T>> patches;
  patches.reserve(static_cast<size_t>(vol.shape[0]));
  for (int64_t z = 0; z < vol.shape[0]; ++z) patches.push_back(extract_patch<T>(vol, z));
  return patches;
}

// ---------------------------------------------------------------------------
// 3D variational convolutional autoencoder
// ---------------------------------------------------------------------------

template <typename T>
struct VcaeModel {
  Conv3Layer<T> enc1, enc2, enc3;
  PRelu<T> act1, act2, act3, dact0, dact1, dact2;
  DenseLayer<T> mu_head, logvar_head, expand;
  Conv3TLayer<T> dec1, dec2, dec3;
  std::array<int64_t, 3> channels;
  int64_t flat = 0;

  explicit VcaeModel(Rng& rng, std::array<int64_t, 3> ch = {16, 32, 32}) : channels(ch) {
    const Conv3Spec sp{{1, 2, 2}, {1, 1, 1}};
    enc1.init(ch[0], 1, {3, 3, 3}, sp, rng);
    enc2.init(ch[1], ch[0], {3, 3, 3}, sp, rng);
    enc3.init(ch[2], ch[1], {3, 3, 3}, sp, rng);
    act1.init(ch[0]);
    act2.init(ch[1]);
    act3.init(ch[2]);
    flat = ch[2] * kPatchDepth * 5 * 5;
    mu_head.init(kLatentDim, flat, rng);
    logvar_head.init(kLatentDim, flat, rng);
    expand.init(flat, kLatentDim, rng);
    dact0.init(ch[2]);
    dec1.init(ch[2], ch[1], {3, 3, 3}, sp, {kPatchDepth, 10, 10}, rng);
    dact1.init(ch[1]);
    dec2.init(ch[1], ch[0], {3, 3, 3}, sp, {kPatchDepth, 20, 20}, rng);
    dact2.init(ch[0]);
    dec3.init(ch[0], 1, {3, 3, 3}, sp, {kPatchDepth, kPatchSide, kPatchSide}, rng);
  }

  std::pair<int, int> encode_nodes(Graph<T>& g, int patch) {
    int x = act1.apply(g, enc1.apply(g, patch));
    x = act2.apply(g, enc2.apply(g, x));
    x = act3.apply(g, enc3.apply(g, x));
    x = g.reshape(x, Shape{flat});
    const int mu = mu_head.apply(g, x);
    const int logvar = g.clamp(logvar_head.apply(g, x), T(-10), T(10));
    return {mu, logvar};
  }

  int decode_nodes(Graph<T>& g, int z) {
    int x = g.reshape(expand.apply(g, z), Shape{channels[2], kPatchDepth, 5, 5});
    x = dact0.apply(g, x);
    x = dact1.apply(g, dec1.apply(g, x));
    x = dact2.apply(g, dec2.apply(g, x));
    return dec3.apply(g, x);
  }

  /// Deterministic inference: returns the latent mean.
  Tensor<T> encode(const Tensor<T>& patch) {
    Graph<T> g;
    return g.value(encode_nodes(g, g.leaf(patch)).first);
  }

  Tensor<T> reconstruct(const Tensor<T>& patch) {
    Graph<T> g;
    const auto [mu, logvar] = encode_nodes(g, g.leaf(patch));
    return g.value(decode_nodes(g, mu));
  }

  /// Reconstruction + beta * KL with a reparameterized latent sample.
  int loss_nodes(Graph<T>& g, int patch, Rng& rng, T beta_kl) {
    const auto [mu, logvar] = encode_nodes(g, patch);
    Tensor<T> eps(Shape{kLatentDim});
    for (auto& v : eps.data) v = static_cast<T>(rng.normal());
    const int z = g.add(mu, g.mul(g.exp(g.scale(logvar, T(0.5))), g.leaf(std::move(eps))));
    const int recon = g.mse(decode_nodes(g, z), patch);
    return g.add_scaled(recon, g.gaussian_kl(mu, logvar), beta_kl);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> refs;
    enc1.collect("vcae.enc1", refs);
    act1.collect("vcae.act1", refs);
    enc2.collect("vcae.enc2", refs);
    act2.collect("vcae.act2", refs);
    enc3.collect("vcae.enc3", refs);
    act3.collect("vcae.act3", refs);
    mu_head.collect("vcae.mu", refs);
    logvar_head.collect("vcae.logvar", refs);
    expand.collect("vcae.expand", refs);
    dact0.collect("vcae.dact0", refs);
    dec1.collect("vcae.dec1", refs);
    dact1.collect("vcae.dact1", refs);
    dec2.collect("vcae.dec2", refs);
    dact2.collect("vcae.dact2", refs);
    dec3.collect("vcae.dec3", refs);
    return refs;
  }
};

// ---------------------------------------------------------------------------
// 1D convolutional autoencoder, shared across the 16 latent sequences
// ---------------------------------------------------------------------------

template <typename T>
struct SeqCaeModel {
  Conv1Layer<T> enc1, enc2, enc3, enc4;
  PRelu<T> act1, act2, act3, act4, dact0, dact1, dact2, dact3;
  DenseLayer<T> code_head, expand;
  Conv1TLayer<T> dec1, dec2, dec3, dec4;
  std::array<int64_t, 4> channels;
  int64_t flat = 0;

  explicit SeqCaeModel(Rng& rng, std::array<int64_t, 4> ch = {8, 16, 16, 32}) : channels(ch) {
    const Conv1Spec sp{2, 2};
    enc1.init(ch[0], 1, 5, sp, rng);
    enc2.init(ch[1], ch[0], 5, sp, rng);
    enc3.init(ch[2], ch[1], 5, sp, rng);
    enc4.init(ch[3], ch[2], 5, sp, rng);
    act1.init(ch[0]);
    act2.init(ch[1]);
    act3.init(ch[2]);
    act4.init(ch[3]);
    flat = ch[3] * (kSequenceLen / 16);
    code_head.init(kSequenceCodes, flat, rng);
    expand.init(flat, kSequenceCodes, rng);
    dact0.init(ch[3]);
    dec1.init(ch[3], ch[2], 5, sp, kSequenceLen / 8, rng);
    dact1.init(ch[2]);
    dec2.init(ch[2], ch[1], 5, sp, kSequenceLen / 4, rng);
    dact2.init(ch[1]);
    dec3.init(ch[1], ch[0], 5, sp, kSequenceLen / 2, rng);
    dact3.init(ch[0]);
    dec4.init(ch[0], 1, 5, sp, kSequenceLen, rng);
  }

  int encode_nodes(Graph<T>& g, int seq) {
    int x = act1.apply(g, enc1.apply(g, seq));
    x = act2.apply(g, enc2.apply(g, x));
    x = act3.apply(g, enc3.apply(g, x));
    x = act4.apply(g, enc4.apply(g, x));
    return code_head.apply(g, g.reshape(x, Shape{flat}));
  }

  int decode_nodes(Graph<T>& g, int code) {
    int x = g.reshape(expand.apply(g, code), Shape{channels[3], kSequenceLen / 16});
    x = dact0.apply(g, x);
    x = dact1.apply(g, dec1.apply(g, x));
    x = dact2.apply(g, dec2.apply(g, x));
    x = dact3.apply(g, dec3.apply(g, x));
    return dec4.apply(g, x);
  }

  /// Encode one padded sequence [1,800] into 64 codes.
  Tensor<T> encode(const Tensor<T>& seq) {
    Graph<T> g;
    return g.value(encode_nodes(g, g.leaf(seq)));
  }

  int loss_nodes(Graph<T>& g, int seq) { return g.mse(decode_nodes(g, encode_nodes(g, seq)), seq); }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> refs;
    enc1.collect("seqcae.enc1", refs);
    act1.collect("seqcae.act1", refs);
    enc2.collect("seqcae.enc2", refs);
    act2.collect("seqcae.act2", refs);
    enc3.collect("seqcae.enc3", refs);
    act3.collect("seqcae.act3", refs);
    enc4.collect("seqcae.enc4", refs);
    act4.collect("seqcae.act4", refs);
    code_head.collect("seqcae.code", refs);
    expand.collect("seqcae.expand", refs);
    dact0.collect("seqcae.dact0", refs);
    dec1.collect("seqcae.dec1", refs);
    dact1.collect("seqcae.dact1", refs);
    dec2.collect("seqcae.dec2", refs);
    dact2.collect("seqcae.dact2", refs);
    dec3.collect("seqcae.dec3", refs);
    dact3.collect("seqcae.dact3", refs);
    dec4.collect("seqcae.dec4", refs);
    return refs;
  }
};

// ---------------------------------------------------------------------------
// Two-stage encoding
// ---------------------------------------------------------------------------

/// Latent traces along the artery: row i holds latent i at every
/// centerline point, shape [16, L].
template <typename T>
Tensor<T> feature_map(VcaeModel<T>& vcae, const Volume& vol) {
  const int64_t L = vol.shape[0];
  Tensor<T> fm(Shape{kLatentDim, L});
  for (int64_t z = 0; z < L; ++z) {
    const Tensor<T> mu = vcae.encode(extract_patch<T>(vol, z));
    for (int64_t i = 0; i < kLatentDim; ++i) fm.data[i * L + z] = mu.data[i];
  }
  return fm;
}

/// Zero-pad one feature-map row at the distal end to the fixed length.
template <typename T>
Tensor<T> pad_row(const Tensor<T>& fm, int64_t row) {
  const int64_t L = fm.shape[1];
  Tensor<T> seq(Shape{1, kSequenceLen});
  for (int64_t z = 0; z < L; ++z) seq.data[z] = fm.data[row * L + z];
  return seq;
}

/// Second-stage encoding: each of the 16 rows through the shared 1D-CAE,
/// concatenated row-major into exactly 1024 values.
template <typename T>
std::vector<T> sequence_encode(SeqCaeModel<T>& seq_cae, const Tensor<T>& fm) {
  check_arg(fm.shape.size() == 2 && fm.shape[0] == kLatentDim,
            "feature map must be [16,L], got " + shape_str(fm.shape));
  check_arg(fm.shape[1] <= kSequenceLen,
            "artery length " + std::to_string(fm.shape[1]) + " exceeds the maximum padded length " +
                std::to_string(kSequenceLen));
  std::vector<T> encoding;
  encoding.reserve(static_cast<size_t>(kEncodingLen));
  for (int64_t row = 0; row < kLatentDim; ++row) {
    const Tensor<T> codes = seq_cae.encode(pad_row(fm, row));
    encoding.insert(encoding.end(), codes.data.begin(), codes.data.end());
  }
  return encoding;
}

template <typename T>
std::vector<T> encode_artery(VcaeModel<T>& vcae, SeqCaeModel<T>& seq_cae, const Volume& vol) {
  return sequence_encode(seq_cae, feature_map(vcae, vol));
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int64_t vcae_iterations = 2500;
  int64_t seq_iterations = 2500;
  int64_t batch = 8;
  double learning_rate = 1e-3;
  // weighted against a per-voxel mean reconstruction error, so the KL
  // pressure stays a small fraction of the objective
  double beta_kl = 1e-4;
  uint64_t seed = 1;
};

struct PretrainStats {
  std::vector<double> vcae_losses;
  std::vector<double> seq_losses;
};

/// Train the 3D-VCAE on random patches drawn from the given volumes, then
/// the 1D-CAE on latent rows of the (now frozen) VCAE feature maps.
template <typename T>
PretrainStats pretrain_artery_caes(VcaeModel<T>& vcae, SeqCaeModel<T>& seq_cae,
                                   const std::vector<Volume>& volumes, const PretrainConfig& cfg) {
  check_arg(!volumes.empty(), "pretraining corpus is empty");
  PretrainStats stats;
  Rng rng(derive_seed(cfg.seed, 0xA1, 0));

  {
    AdamOptimizer<T> opt(vcae.params(), static_cast<T>(cfg.learning_rate), T(0));
    for (int64_t it = 0; it < cfg.vcae_iterations; ++it) {
      opt.zero_grad();
      double batch_loss = 0;
      for (int64_t b = 0; b < cfg.batch; ++b) {
        const auto& vol = volumes[rng.uniform_int(volumes.size())];
        const auto patch =
            extract_patch<T>(vol, static_cast<int64_t>(rng.uniform_int(
                                      static_cast<uint64_t>(vol.shape[0]))));
        Graph<T> g;
        const int loss = vcae.loss_nodes(g, g.leaf(patch), rng, static_cast<T>(cfg.beta_kl));
        g.backward(loss);
        batch_loss += static_cast<double>(g.value(loss).data[0]);
      }
      opt.scale_grads(T(1) / static_cast<T>(cfg.batch));
      opt.step();
      stats.vcae_losses.push_back(batch_loss / static_cast<double>(cfg.batch));
    }
  }

  // feature maps for the sequence stage, computed once
  std::vector<Tensor<T>> rows;
  const size_t max_arteries = std::min<size_t>(volumes.size(), 200);
  for (size_t a = 0; a < max_arteries; ++a) {
    const Tensor<T> fm = feature_map(vcae, volumes[a]);
    for (int64_t r = 0; r < kLatentDim; ++r) rows.push_back(pad_row(fm, r));
  }

  {
    AdamOptimizer<T> opt(seq_cae.params(), static_cast<T>(cfg.learning_rate), T(0));
    for (int64_t it = 0; it < cfg.seq_iterations; ++it) {
      opt.zero_grad();
      double batch_loss = 0;
      for (int64_t b = 0; b < cfg.batch; ++b) {
        const auto& row = rows[rng.uniform_int(rows.size())];
        Graph<T> g;
        const int loss = seq_cae.loss_nodes(g, g.leaf(row));
        g.backward(loss);
        batch_loss += static_cast<double>(g.value(loss).data[0]);
      }
      opt.scale_grads(T(1) / static_cast<T>(cfg.batch));
      opt.step();
      stats.seq_losses.push_back(batch_loss / static_cast<double>(cfg.batch));
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr char kEncodingMagic[9] = "ARTENC1";  // 8 bytes incl. trailing NUL

/// artery_enc.bin: magic, u32 artery count, then N x 1024 f32 values.
inline void write_artery_encodings(const std::filesystem::path& path,
                                   const std::vector<std::vector<float>>& encodings) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write encodings: " + path.string());
  f.write(kEncodingMagic, 8);
  const uint32_t n = static_cast<uint32_t>(encodings.size());
  f.write(reinterpret_cast<const char*>(&n), 4);
  for (const auto& e : encodings) {
    check_arg(static_cast<int64_t>(e.size()) == kEncodingLen, "artery encoding must have 1024 values");
    f.write(reinterpret_cast<const char*>(e.data()), static_cast<std::streamsize>(e.size() * 4));
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<std::vector<float>> read_artery_encodings(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read encodings: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kEncodingMagic, 8) != 0)
    throw std::runtime_error("bad encoding magic in " + path.string());
  uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  std::vector<std::vector<float>> encodings(n, std::vector<float>(kEncodingLen));
  for (auto& e : encodings)
    f.read(reinterpret_cast<char*>(e.data()), static_cast<std::streamsize>(e.size() * 4));
  if (!f) throw std::runtime_error("truncated encodings: " + path.string());
  return encodings;
}

}  // namespace cadmil::artery

#pragma once

#include <array>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "cadmil/checkpoint.hpp"
#include "cadmil/nn.hpp"

namespace cadmil::mil {

constexpr int64_t kArteryInputDim = 1024;
constexpr int64_t kMyoInputDim = 512;
constexpr int64_t kEmbedDim = 64;
constexpr int64_t kAttnHidden = 32;

enum class Mode { combined, arteries_only, myo_only };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::combined: return "combined";
    case Mode::arteries_only: return "arteries";
    default: return "myo";
  }
}

inline Mode parse_mode(const std::string& s) {
  if (s == "combined") return Mode::combined;
  if (s == "arteries") return Mode::arteries_only;
  if (s == "myo") return Mode::myo_only;
  throw std::invalid_argument("mode must be combined, arteries or myo, got '" + s + "'");
}

/// One patient: a bag of artery encodings plus the shared myocardium
/// features and the FFR-derived label.
struct BagData {
  int64_t patient_id = 0;
  std::vector<std::vector<float>> artery_encodings;  // N x 1024
  std::vector<float> myo_features;                   // 512
  int label = 0;
  double min_ffr = 1.0;
};

/// Three 64-unit dense layers with PReLU and dropout between them.
template <typename T>
struct Fcn {
  DenseLayer<T> l1, l2, l3;
  PRelu<T> a1, a2, a3;

  void init(int64_t in, Rng& rng) {
    l1.init(kEmbedDim, in, rng);
    l2.init(kEmbedDim, kEmbedDim, rng);
    l3.init(kEmbedDim, kEmbedDim, rng);
    a1.init(kEmbedDim);
    a2.init(kEmbedDim);
    a3.init(kEmbedDim);
  }

  int apply(Graph<T>& g, int x, double drop, Rng* rng, bool training) {
    x = a1.apply(g, l1.apply(g, x));
    if (training) x = dropout(g, x, drop, *rng, true);
    x = a2.apply(g, l2.apply(g, x));
    if (training) x = dropout(g, x, drop, *rng, true);
    return a3.apply(g, l3.apply(g, x));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    l1.collect(prefix + ".l1", out);
    a1.collect(prefix + ".a1", out);
    l2.collect(prefix + ".l2", out);
    a2.collect(prefix + ".a2", out);
    l3.collect(prefix + ".l3", out);
    a3.collect(prefix + ".a3", out);
  }
};

/// Attention-based multiple-instance classifier. A shared FCN embeds each
/// artery, a second FCN embeds the myocardium, instances are concatenations
/// of the two, and a softmax-normalized attention network pools them into
/// one bag embedding fed to a sigmoid head. Parameter count is independent
/// of the number of arteries.
template <typename T>
struct MilModel {
  Mode mode = Mode::combined;
  Fcn<T> fcn_art, fcn_myo;
  Tensor<T> attn_v, attn_w;
  DenseLayer<T> head;
  // per-feature standardization, frozen at training time
  Tensor<T> art_mean, art_sd, myo_mean, myo_sd;

  MilModel(Mode m, Rng& rng) : mode(m) {
    if (uses_arteries()) {
      fcn_art.init(kArteryInputDim, rng);
      art_mean = Tensor<T>(Shape{kArteryInputDim});
      art_sd = Tensor<T>(Shape{kArteryInputDim}, T(1));
    }
    if (uses_myo()) {
      fcn_myo.init(kMyoInputDim, rng);
      myo_mean = Tensor<T>(Shape{kMyoInputDim});
      myo_sd = Tensor<T>(Shape{kMyoInputDim}, T(1));
    }
    attn_v = Tensor<T>(Shape{kAttnHidden, instance_width()});
    attn_w = Tensor<T>(Shape{1, kAttnHidden});
    init_weight(attn_v, instance_width(), rng);
    init_weight(attn_w, kAttnHidden, rng);
    head.init(1, instance_width(), rng);
  }

  bool uses_arteries() const { return mode != Mode::myo_only; }
  bool uses_myo() const { return mode != Mode::arteries_only; }
  int64_t instance_width() const { return mode == Mode::combined ? 2 * kEmbedDim : kEmbedDim; }

  struct Forward {
    int probability;
    int attention_weights;
    std::vector<int> instances;
  };

  Forward forward(Graph<T>& g, const BagData& bag, bool training = false, double drop = 0.5,
                  Rng* drop_rng = nullptr) {
    check_arg(!uses_arteries() || !bag.artery_encodings.empty(),
              "bag must contain at least one artery");
    check_arg(!uses_myo() || static_cast<int64_t>(bag.myo_features.size()) == kMyoInputDim,
              "bag must carry 512 myocardium features");

    int myo_emb = -1;
    if (uses_myo())
      myo_emb = fcn_myo.apply(g, g.leaf(standardize(bag.myo_features, myo_mean, myo_sd)), drop,
                              drop_rng, training);

    std::vector<int> instances;
    if (mode == Mode::myo_only) {
      instances.push_back(myo_emb);
    } else {
      for (const auto& enc : bag.artery_encodings) {
        check_arg(static_cast<int64_t>(enc.size()) == kArteryInputDim,
                  "artery encoding must have 1024 values");
        const int art_emb =
            fcn_art.apply(g, g.leaf(standardize(enc, art_mean, art_sd)), drop, drop_rng, training);
        if (mode == Mode::combined) {
          const std::array<int, 2> parts{art_emb, myo_emb};
          instances.push_back(g.concat(parts));
        } else {
          instances.push_back(art_emb);
        }
      }
    }

    std::vector<int> scores;
    scores.reserve(instances.size());
    const int v = g.param(attn_v);
    const int w = g.param(attn_w);
    for (int inst : instances) scores.push_back(g.dense(g.tanh(g.dense(inst, v, -1)), w, -1));
    const int weights = g.softmax(g.concat(scores));
    const int pooled = g.weighted_sum(weights, instances);
    const int prob = g.sigmoid(head.apply(g, pooled));
    return {prob, weights, std::move(instances)};
  }

  /// Deterministic inference probability for one patient.
  double classify(const BagData& bag) {
    Graph<T> g;
    return static_cast<double>(g.value(forward(g, bag).probability).data[0]);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> refs;
    if (uses_arteries()) fcn_art.collect("mil.fcn_art", refs);
    if (uses_myo()) fcn_myo.collect("mil.fcn_myo", refs);
    refs.push_back({"mil.attn.v", &attn_v, true});
    refs.push_back({"mil.attn.w", &attn_w, true});
    head.collect("mil.head", refs);
    return refs;
  }

 private:
  Tensor<T> standardize(const std::vector<float>& x, const Tensor<T>& mean, const Tensor<T>& sd) {
    Tensor<T> out(Shape{static_cast<int64_t>(x.size())});
    for (size_t i = 0; i < x.size(); ++i)
      out.data[i] = (static_cast<T>(x[i]) - mean.data[static_cast<int64_t>(i)]) /
                    sd.data[static_cast<int64_t>(i)];
    return out;
  }
};

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <typename T>
void save_mil_checkpoint(const std::filesystem::path& path, MilModel<T>& model,
                         AdamOptimizer<T>* opt, int64_t iteration) {
  TensorStore store;
  store.put("meta.mode", Tensor<double>(Shape{1}, static_cast<double>(model.mode)));
  store.put("meta.iteration", Tensor<double>(Shape{1}, static_cast<double>(iteration)));
  store_params<T>(store, model.params());
  if (model.uses_arteries()) {
    store.put("norm.art_mean", model.art_mean);
    store.put("norm.art_sd", model.art_sd);
  }
  if (model.uses_myo()) {
    store.put("norm.myo_mean", model.myo_mean);
    store.put("norm.myo_sd", model.myo_sd);
  }
  if (opt) {
    const auto& refs = opt->params();
    for (size_t i = 0; i < refs.size(); ++i) {
      store.put("adam.m." + refs[i].name, opt->moment1(i));
      store.put("adam.v." + refs[i].name, opt->moment2(i));
    }
  }
  store.save(path);
}

template <typename T>
MilModel<T> load_mil_checkpoint(const std::filesystem::path& path, int64_t* iteration = nullptr) {
  const TensorStore store = TensorStore::load(path);
  const Mode mode = static_cast<Mode>(
      static_cast<int>(store.get<double>("meta.mode").data[0]));
  Rng rng(0);
  MilModel<T> model(mode, rng);
  load_params<T>(store, model.params());
  if (model.uses_arteries()) {
    model.art_mean = store.get<T>("norm.art_mean");
    model.art_sd = store.get<T>("norm.art_sd");
  }
  if (model.uses_myo()) {
    model.myo_mean = store.get<T>("norm.myo_mean");
    model.myo_sd = store.get<T>("norm.myo_sd");
  }
  if (iteration) *iteration = static_cast<int64_t>(store.get<double>("meta.iteration").data[0]);
  return model;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Iterations at which checkpoints are emitted for a given schedule.
inline std::vector<int64_t> checkpoint_schedule(int64_t iterations, int64_t interval) {
  check_arg(iterations > 0 && interval > 0 && iterations % interval == 0,
            "checkpoint interval must evenly divide the iteration count");
  std::vector<int64_t> at;
  for (int64_t it = interval; it <= iterations; it += interval) at.push_back(it);
  return at;
}

/// Per-feature mean and sd of the training features, frozen into the model.
template <typename T>
void fit_standardization(MilModel<T>& model, const std::vector<BagData>& bags) {
  if (model.uses_arteries()) {
    std::vector<double> mean(kArteryInputDim, 0), var(kArteryInputDim, 0);
    int64_t n = 0;
    for (const auto& b : bags)
      for (const auto& e : b.artery_encodings) {
        for (int64_t i = 0; i < kArteryInputDim; ++i) mean[static_cast<size_t>(i)] += e[static_cast<size_t>(i)];
        ++n;
      }
    for (auto& m : mean) m /= static_cast<double>(n);
    for (const auto& b : bags)
      for (const auto& e : b.artery_encodings)
        for (int64_t i = 0; i < kArteryInputDim; ++i) {
          const double d = e[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)];
          var[static_cast<size_t>(i)] += d * d;
        }
    for (int64_t i = 0; i < kArteryInputDim; ++i) {
      model.art_mean.data[i] = static_cast<T>(mean[static_cast<size_t>(i)]);
      model.art_sd.data[i] =
          static_cast<T>(std::max(1e-4, std::sqrt(var[static_cast<size_t>(i)] / static_cast<double>(n))));
    }
  }
  if (model.uses_myo()) {
    std::vector<double> mean(kMyoInputDim, 0), var(kMyoInputDim, 0);
    for (const auto& b : bags)
      for (int64_t i = 0; i < kMyoInputDim; ++i)
        mean[static_cast<size_t>(i)] += b.myo_features[static_cast<size_t>(i)];
    for (auto& m : mean) m /= static_cast<double>(bags.size());
    for (const auto& b : bags)
      for (int64_t i = 0; i < kMyoInputDim; ++i) {
        const double d = b.myo_features[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)];
        var[static_cast<size_t>(i)] += d * d;
      }
    for (int64_t i = 0; i < kMyoInputDim; ++i) {
      model.myo_mean.data[i] = static_cast<T>(mean[static_cast<size_t>(i)]);
      model.myo_sd.data[i] = static_cast<T>(
          std::max(1e-4, std::sqrt(var[static_cast<size_t>(i)] / static_cast<double>(bags.size()))));
    }
  }
}

/// Mini-batches of one patient, shuffled epochs, BCE objective, checkpoints
/// at every interval. Returns the written checkpoint paths in order.
template <typename T>
std::vector<std::filesystem::path> train_mil(const std::vector<BagData>& train_bags,
                                             const TrainConfig& cfg, Mode mode,
                                             const std::filesystem::path& out_dir,
                                             MilModel<T>* out_model = nullptr) {
  check_arg(!train_bags.empty(), "training set is empty");
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  Rng rng(derive_seed(cfg.seed, 0xA7, static_cast<uint64_t>(mode)));
  MilModel<T> model(mode, rng);
  fit_standardization(model, train_bags);
  AdamOptimizer<T> opt(model.params(), static_cast<T>(cfg.learning_rate),
                       static_cast<T>(cfg.l2_coefficient));

  std::vector<size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), size_t{0});

  std::vector<std::filesystem::path> checkpoints;
  for (int64_t it = 1; it <= cfg.iteration_count; ++it) {
    const size_t pos = static_cast<size_t>((it - 1) % static_cast<int64_t>(order.size()));
    if (pos == 0) rng.shuffle(order);
    const BagData& bag = train_bags[order[pos]];

    opt.zero_grad();
    Graph<T> g;
    const auto fwd = model.forward(g, bag, true, cfg.dropout_rate, &rng);
    g.backward(g.bce(fwd.probability, static_cast<T>(bag.label)));
    opt.step();

    if (it % cfg.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%07lld.bin", static_cast<long long>(it));
      const auto path = out_dir / name;
      save_mil_checkpoint(path, model, &opt, it);
      checkpoints.push_back(path);
    }
  }
  if (out_model) *out_model = std::move(model);
  return checkpoints;
}

}  // namespace cadmil::mil

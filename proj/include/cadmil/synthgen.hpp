#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cadmil/rng.hpp"
#include "cadmil/volume.hpp"

namespace cadmil::synthgen {

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

constexpr double kVoxelMm = 0.3;
constexpr int64_t kCrossSection = 40;
constexpr int64_t kMinLength = 50;
constexpr int64_t kMaxLength = 800;
constexpr int kTerritories = 4;

struct Stenosis {
  double center_pt = 0;     // position along the centerline, in grid points
  double length_mm = 10.0;  // lesion length
  double min_radius_mm = 1.0;
  bool calcified = false;
};

struct ArteryGeometry {
  int64_t length_pts = 100;    // L, grid step 0.3 mm
  double ref_radius_mm = 1.5;  // r0
  double taper = 0.15;         // fraction of r0 lost from ostium to tip
  std::vector<Stenosis> stenoses;
  int territory = 0;

  /// Reference lumen radius at a centerline position, before lesions.
  double local_radius(double z) const {
    return ref_radius_mm * (1.0 - taper * z / static_cast<double>(length_pts));
  }

  /// Lumen radius including stenosis dips (Gaussian profile, sigma = l/4).
  double lumen_radius(double z) const {
    double r = local_radius(z);
    for (const auto& s : stenoses) {
      const double sigma = s.length_mm / kVoxelMm / 4.0;
      const double depth = local_radius(s.center_pt) - s.min_radius_mm;
      const double dz = (z - s.center_pt) / sigma;
      r -= depth * std::exp(-0.5 * dz * dz);
    }
    return std::max(r, 0.12);
  }

  void validate() const {
    check_arg(length_pts >= kMinLength && length_pts <= kMaxLength,
              "artery length " + std::to_string(length_pts) + " outside [" +
                  std::to_string(kMinLength) + "," + std::to_string(kMaxLength) + "]");
    check_arg(ref_radius_mm > 0, "reference radius must be positive");
    for (const auto& s : stenoses) {
      check_arg(s.center_pt >= 0 && s.center_pt < static_cast<double>(length_pts),
                "stenosis center must lie strictly inside [0,L)");
      check_arg(s.length_mm > 0, "stenosis length must be positive");
      check_arg(s.min_radius_mm > 0 && s.min_radius_mm < local_radius(s.center_pt),
                "stenosis minimum radius must be in (0, local reference radius)");
    }
  }
};

// ---------------------------------------------------------------------------
// Hemodynamic toy oracle
// ---------------------------------------------------------------------------

/// Poiseuille-flavored resistances: R_i = c * l_i * (1/r_min^4 - 1/r0^4),
/// FFR = R_micro / (R_micro + sum R_i). Constants are calibrated so a
/// 50%-diameter, 10 mm lesion at r0 = 1.5 mm gives FFR = 0.80 exactly.
struct FfrConstants {
  double c = 1.0;
  double r_micro = 3200.0 / 27.0;
};

inline double ffr_oracle(const ArteryGeometry& geo, const FfrConstants& k = {}) {
  double total = 0.0;
  const double inv_r0 = 1.0 / std::pow(geo.ref_radius_mm, 4);
  for (const auto& s : geo.stenoses)
    total += k.c * s.length_mm * (1.0 / std::pow(s.min_radius_mm, 4) - inv_r0);
  return k.r_micro / (k.r_micro + total);
}

/// Inverse of the oracle for a single lesion: the minimum radius that
/// produces resistance R at lesion length l in an artery of radius r0.
inline double solve_min_radius(double resistance, double length_mm, double r0,
                               const FfrConstants& k = {}) {
  return std::pow(resistance / (k.c * length_mm) + 1.0 / std::pow(r0, 4), -0.25);
}

// ---------------------------------------------------------------------------
// Cohort model
// ---------------------------------------------------------------------------

struct CohortConfig {
  int64_t patient_count = 200;
  uint64_t seed = 11;
  double arteries_mean = 18.5;
  double arteries_sd = 4.3;
  double min_ffr_mean = 0.79;
  double min_ffr_sd = 0.10;
  double noise_sd = 25.0;      // additive noise in artery volumes
  double coupling = 60.0;      // myocardial intensity drop per unit FFR deficit
  double myo_noise_sd = 18.0;  // additive noise in the myocardium volume

  void validate() const {
    check_arg(patient_count > 0, "patient_count must be positive");
    check_arg(arteries_sd >= 0 && min_ffr_sd >= 0 && noise_sd >= 0 && myo_noise_sd >= 0,
              "standard deviations must be nonnegative");
  }
};

struct PatientRecord {
  int64_t id = 0;
  uint64_t seed = 0;
  std::vector<ArteryGeometry> arteries;
  std::vector<Volume> artery_volumes;  // empty until rendered
  Volume myo_volume, myo_mask;
  std::vector<double> ffr;
  double min_ffr = 1.0;
  int label = 0;
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

constexpr double kLumenIntensity = 400.0;
constexpr double kBackgroundIntensity = 50.0;
constexpr double kCalciumIntensity = 900.0;
constexpr double kEdgeWidthMm = 0.15;

/// Straightened MPR volume [L,40,40]: a bright tube of locally varying
/// radius on a darker background, logistic-smoothed boundary, optional
/// calcified blobs, additive Gaussian noise.
inline Volume render_mpr(const ArteryGeometry& geo, double noise_sd, uint64_t seed) {
  geo.validate();
  const int64_t L = geo.length_pts, S = kCrossSection;
  Volume vol(Shape{L, S, S}, kVoxelMm);
  const double cy = (static_cast<double>(S) - 1.0) / 2.0;
  const double cx = cy;

  std::vector<double> radial(static_cast<size_t>(S * S));
  for (int64_t y = 0; y < S; ++y)
    for (int64_t x = 0; x < S; ++x)
      radial[static_cast<size_t>(y * S + x)] =
          std::hypot((static_cast<double>(y) - cy), (static_cast<double>(x) - cx)) * kVoxelMm;

  for (int64_t z = 0; z < L; ++z) {
    const double r = geo.lumen_radius(static_cast<double>(z));
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        const double d = radial[static_cast<size_t>(y * S + x)];
        const double in_lumen = 1.0 / (1.0 + std::exp((d - r) / kEdgeWidthMm));
        vol.at(z, y, x) =
            static_cast<float>(kBackgroundIntensity +
                               (kLumenIntensity - kBackgroundIntensity) * in_lumen);
      }
  }

  for (const auto& s : geo.stenoses) {
    if (!s.calcified) continue;
    // bright blob sitting at the lumen boundary of the lesion center
    const double bz = s.center_pt;
    const double by = cy + geo.lumen_radius(bz) / kVoxelMm;
    const double bx = cx;
    const double sigma = 2.0;
    const int64_t reach = 3 * static_cast<int64_t>(sigma) + 1;
    for (int64_t z = std::max<int64_t>(0, static_cast<int64_t>(bz) - reach);
         z < std::min(L, static_cast<int64_t>(bz) + reach + 1); ++z)
      for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
          const double d2 = (static_cast<double>(z) - bz) * (static_cast<double>(z) - bz) +
                            (static_cast<double>(y) - by) * (static_cast<double>(y) - by) +
                            (static_cast<double>(x) - bx) * (static_cast<double>(x) - bx);
          if (d2 > 9.0 * sigma * sigma) continue;
          const double add = (kCalciumIntensity - kLumenIntensity) *
                             std::exp(-d2 / (2.0 * sigma * sigma));
          vol.at(z, y, x) = static_cast<float>(vol.at(z, y, x) + add);
        }
  }

  if (noise_sd > 0) {
    Rng rng(seed);
    for (auto& v : vol.data) v = static_cast<float>(v + rng.normal(0.0, noise_sd));
  }
  return vol;
}

constexpr int64_t kMyoDim = 64;
constexpr int64_t kMyoSlices = 24;
constexpr double kMyoInnerRadius = 10.0;  // voxels
constexpr double kMyoOuterRadius = 20.0;
constexpr double kMyoIntensity = 120.0;
constexpr double kCavityIntensity = 300.0;
constexpr double kMyoBackground = 30.0;
constexpr double kIschemiaThreshold = 0.85;

inline int myo_territory_of(int64_t y, int64_t x) {
  const double cy = (static_cast<double>(kMyoDim) - 1.0) / 2.0;
  const double ang = std::atan2(static_cast<double>(y) - cy, static_cast<double>(x) - cy);
  const double t = (ang + 3.14159265358979323846) / (3.14159265358979323846 / 2.0);
  return std::min(kTerritories - 1, static_cast<int>(t));
}

/// Toy short-axis LV: an annular ring stack. Territories are four fixed
/// angular sectors. A territory whose feeding artery has FFR below 0.85
/// receives a hypo-attenuation proportional to coupling * (0.85 - FFR)
/// plus in-plane textural smoothing.
inline void render_myocardium(const std::array<double, kTerritories>& territory_ffr,
                              double coupling, double noise_sd, uint64_t seed, Volume& vol,
                              Volume& mask) {
  vol = Volume(Shape{kMyoSlices, kMyoDim, kMyoDim}, kVoxelMm);
  mask = Volume(Shape{kMyoSlices, kMyoDim, kMyoDim}, kVoxelMm);
  Rng rng(seed);
  const double base = kMyoIntensity + rng.normal(0.0, 12.0);

  // smooth low-frequency texture field shared by all territories
  std::array<std::array<double, 4>, 3> waves{};
  for (auto& w : waves)
    w = {rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25),
         rng.uniform(0.0, 6.283185307179586)};

  const double cy = (static_cast<double>(kMyoDim) - 1.0) / 2.0;
  std::array<double, kTerritories> drop{};
  for (int t = 0; t < kTerritories; ++t)
    drop[static_cast<size_t>(t)] =
        territory_ffr[static_cast<size_t>(t)] < kIschemiaThreshold
            ? coupling * (kIschemiaThreshold - territory_ffr[static_cast<size_t>(t)])
            : 0.0;

  for (int64_t z = 0; z < kMyoSlices; ++z)
    for (int64_t y = 0; y < kMyoDim; ++y)
      for (int64_t x = 0; x < kMyoDim; ++x) {
        const double r = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cy);
        double v;
        if (r >= kMyoInnerRadius && r <= kMyoOuterRadius) {
          mask.at(z, y, x) = 1.0f;
          double tex = 0.0;
          for (const auto& w : waves)
            tex += 2.5 * std::cos(w[0] * static_cast<double>(x) + w[1] * static_cast<double>(y) +
                                  w[2] * static_cast<double>(z) + w[3]);
          v = base + tex - drop[static_cast<size_t>(myo_territory_of(y, x))];
        } else if (r < kMyoInnerRadius) {
          v = kCavityIntensity;
        } else {
          v = kMyoBackground;
        }
        vol.at(z, y, x) = static_cast<float>(v);
      }

  if (noise_sd > 0)
    for (auto& v : vol.data) v = static_cast<float>(v + rng.normal(0.0, noise_sd));

  // ischemic territories get their in-plane texture smoothed
  Volume smoothed = vol;
  for (int64_t z = 0; z < kMyoSlices; ++z)
    for (int64_t y = 1; y < kMyoDim - 1; ++y)
      for (int64_t x = 1; x < kMyoDim - 1; ++x) {
        if (mask.at(z, y, x) == 0.0f) continue;
        const int terr = myo_territory_of(y, x);
        const double d = drop[static_cast<size_t>(terr)];
        if (d <= 0.0) continue;
        const double alpha = std::min(0.75, 0.12 * d);
        double acc = 0.0;
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) acc += vol.at(z, y + dy, x + dx);
        smoothed.at(z, y, x) =
            static_cast<float>((1.0 - alpha) * vol.at(z, y, x) + alpha * acc / 9.0);
      }
  vol = std::move(smoothed);
}

// ---------------------------------------------------------------------------
// Patient sampling
// ---------------------------------------------------------------------------

namespace detail {

/// Place lesions on one artery so its oracle FFR comes out close to the
/// requested target. Resistance is split across one or two serial lesions
/// and the minimum radius solved in closed form.
inline void realize_lesions(ArteryGeometry& geo, double target_ffr, Rng& rng,
                            const FfrConstants& k = {}) {
  if (target_ffr >= 0.995) return;
  const double needed = k.r_micro * (1.0 - target_ffr) / target_ffr;
  const int n_lesions = (rng.uniform() < 0.3 && geo.length_pts > 120) ? 2 : 1;
  std::array<double, 2> fractions{1.0, 0.0};
  if (n_lesions == 2) {
    fractions[0] = rng.uniform(0.55, 0.85);
    fractions[1] = 1.0 - fractions[0];
  }
  const double span = static_cast<double>(geo.length_pts);
  for (int j = 0; j < n_lesions; ++j) {
    Stenosis s;
    const double max_len = std::min(20.0, span * kVoxelMm / 4.0);
    s.length_mm = rng.uniform(std::min(4.0, max_len), max_len);
    const double lo = n_lesions == 2 && j == 1 ? 0.55 : 0.15;
    const double hi = n_lesions == 2 && j == 0 ? 0.45 : 0.85;
    s.center_pt = rng.uniform(lo * span, hi * span);
    s.min_radius_mm = solve_min_radius(needed * fractions[static_cast<size_t>(j)], s.length_mm,
                                       geo.ref_radius_mm, k);
    // keep the dip below the tapered local reference
    s.min_radius_mm = std::min(s.min_radius_mm, 0.95 * geo.local_radius(s.center_pt));
    s.min_radius_mm = std::max(s.min_radius_mm, 0.15);
    s.calcified = rng.uniform() < 0.3;
    geo.stenoses.push_back(s);
  }
}

}  // namespace detail

/// Sample geometry, oracle FFR values and the label for one patient.
/// Volumes are not rendered; see render_patient.
inline PatientRecord sample_patient(const CohortConfig& cfg, int64_t index) {
  PatientRecord rec;
  rec.id = index;
  rec.seed = derive_seed(cfg.seed, static_cast<uint64_t>(index), 1);
  Rng rng(rec.seed);

  const int64_t n = std::clamp<int64_t>(
      static_cast<int64_t>(std::lround(rng.normal(cfg.arteries_mean, cfg.arteries_sd))), 4, 30);
  const double target_min = std::clamp(rng.normal(cfg.min_ffr_mean, cfg.min_ffr_sd), 0.35, 1.0);
  const size_t worst = static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(n)));
  const double r0 = std::clamp(rng.normal(1.6, 0.25), 1.0, 2.2);

  for (int64_t i = 0; i < n; ++i) {
    ArteryGeometry geo;
    geo.length_pts = std::clamp<int64_t>(
        static_cast<int64_t>(std::lround(90.0 * std::exp(rng.normal(0.0, 0.38)))), kMinLength,
        kMaxLength);
    geo.ref_radius_mm = r0;
    geo.taper = rng.uniform(0.05, 0.30);
    geo.territory = static_cast<int>(i % kTerritories);

    double target;
    if (static_cast<size_t>(i) == worst) {
      target = target_min;
    } else {
      const double u = rng.uniform();
      if (u < 0.45)
        target = 1.0;  // lesion-free
      else if (u < 0.85)
        target = rng.uniform(std::max(target_min, 0.90), 0.995);
      else
        target = rng.uniform(std::max(target_min, 0.84), 0.92);  // anatomic decoy
    }
    detail::realize_lesions(geo, target, rng);
    geo.validate();
    rec.arteries.push_back(std::move(geo));
  }

  rec.ffr.reserve(rec.arteries.size());
  rec.min_ffr = 1.0;
  for (const auto& geo : rec.arteries) {
    const double f = ffr_oracle(geo);
    rec.ffr.push_back(f);
    rec.min_ffr = std::min(rec.min_ffr, f);
  }
  rec.label = rec.min_ffr <= 0.8 ? 1 : 0;
  return rec;
}

/// Render all volumes of a sampled patient: one MPR per artery plus the
/// myocardium volume and mask.
inline void render_patient(PatientRecord& rec, const CohortConfig& cfg) {
  rec.artery_volumes.clear();
  rec.artery_volumes.reserve(rec.arteries.size());
  for (size_t i = 0; i < rec.arteries.size(); ++i)
    rec.artery_volumes.push_back(
        render_mpr(rec.arteries[i], cfg.noise_sd, derive_seed(rec.seed, i, 2)));

  std::array<double, kTerritories> territory_ffr;
  territory_ffr.fill(1.0);
  for (size_t i = 0; i < rec.arteries.size(); ++i) {
    auto& t = territory_ffr[static_cast<size_t>(rec.arteries[i].territory)];
    t = std::min(t, rec.ffr[i]);
  }
  render_myocardium(territory_ffr, cfg.coupling, cfg.myo_noise_sd, derive_seed(rec.seed, 99, 3),
                    rec.myo_volume, rec.myo_mask);
}

inline PatientRecord generate_patient(const CohortConfig& cfg, int64_t index) {
  PatientRecord rec = sample_patient(cfg, index);
  render_patient(rec, cfg);
  return rec;
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

inline std::string patient_dir_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "patient_%04lld", static_cast<long long>(index));
  return buf;
}

inline std::string artery_file_name(size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu.vol", index);
  return buf;
}

struct PatientMeta {
  int64_t id = 0;
  uint64_t seed = 0;
  double min_ffr = 1.0;
  int label = 0;
  std::vector<double> ffr;
  std::vector<int> territory;
};

inline void write_patient(const std::filesystem::path& dir, const PatientRecord& rec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "arteries");
  for (size_t i = 0; i < rec.artery_volumes.size(); ++i)
    save_volume(dir / "arteries" / artery_file_name(i), rec.artery_volumes[i]);
  save_volume(dir / "myo.vol", rec.myo_volume);
  save_volume(dir / "myo.mask", rec.myo_mask);

  std::ofstream meta(dir / "meta");
  if (!meta) throw std::runtime_error("cannot write meta in " + dir.string());
  meta << "# synthetic patient record\n";
  meta << "patient_id=" << rec.id << "\n";
  meta << "seed=" << rec.seed << "\n";
  meta << "n_arteries=" << rec.arteries.size() << "\n";
  meta << "label=" << rec.label << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", rec.min_ffr);
  meta << "min_ffr=" << buf << "\n";
  for (size_t i = 0; i < rec.ffr.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", rec.ffr[i]);
    meta << "ffr_" << i << "=" << buf << "\n";
    meta << "territory_" << i << "=" << rec.arteries[i].territory << "\n";
  }
}

inline PatientMeta read_patient_meta(const std::filesystem::path& dir) {
  std::ifstream f(dir / "meta");
  if (!f) throw std::runtime_error("cannot read meta in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  PatientMeta m;
  m.id = std::stoll(kv.at("patient_id"));
  m.seed = std::stoull(kv.at("seed"));
  m.label = std::stoi(kv.at("label"));
  m.min_ffr = std::stod(kv.at("min_ffr"));
  const size_t n = std::stoul(kv.at("n_arteries"));
  for (size_t i = 0; i < n; ++i) {
    m.ffr.push_back(std::stod(kv.at("ffr_" + std::to_string(i))));
    m.territory.push_back(std::stoi(kv.at("territory_" + std::to_string(i))));
  }
  return m;
}

}  // namespace cadmil::synthgen

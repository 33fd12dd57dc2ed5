#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "runet/rng.hpp"
#include "runet/tensor.hpp"

namespace runet {

using MaskVol = TensorT<std::uint8_t>;

enum class Orientation { axial, coronal, sagittal };
enum class Direction { forward, reverse };
enum class SplitTag { train, val, test };

inline const char* orientation_name(Orientation o) {
  switch (o) {
    case Orientation::axial: return "axial";
    case Orientation::coronal: return "coronal";
    case Orientation::sagittal: return "sagittal";
  }
  return "?";
}

inline const char* split_name(SplitTag s) {
  switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

/// Image + binary label + field-of-view cone, all [X,Y,Z] row-major with the
/// axial slicing axis last.
struct VolumeSample {
  std::string id;
  Tensor image;   // values in [0,1], zero outside the cone
  MaskVol label;  // subset of fov by construction
  MaskVol fov;
  float voxel_spacing = 0.5f;
  bool ambiguous = false;
  std::uint32_t amb_slice_a = 0;  // designated labeled axial slice
  std::uint32_t amb_slice_b = 0;  // voxel-identical decoy slice, label-free

  std::size_t nx() const { return image.dim(0); }
  std::size_t ny() const { return image.dim(1); }
  std::size_t nz() const { return image.dim(2); }
};

struct GeneratorConfig {
  std::size_t size_x = 64, size_y = 64, size_z = 32;
  double half_angle_lat_deg = 42.5;  // lateral fan spread (paper analogue 85)
  double half_angle_ap_deg = 35.0;   // anterior-posterior spread (70)
  double radius_lo = 1.6, radius_hi = 2.4;  // tube radius in voxels
  double z0_frac = 0.22, z1_frac = 0.62;    // structure extent along z
  double background_level = 0.18, structure_level = 0.85;
  double speckle = 0.35;  // multiplicative noise amplitude
  double label_fraction_lo = 0.002, label_fraction_hi = 0.015;
  double ambiguity_fraction = 0.0;
  double voxel_spacing = 0.5;

  void validate() const {
    if (size_x < 8 || size_y < 8 || size_z < 8)
      throw ConfigError("generator volume dims must be >= 8");
    if (radius_lo <= 0 || radius_hi < radius_lo)
      throw ConfigError("generator radius range invalid");
    if (label_fraction_lo <= 0 || label_fraction_hi <= label_fraction_lo)
      throw ConfigError("label fraction band invalid");
    if (ambiguity_fraction < 0 || ambiguity_fraction > 1)
      throw ConfigError("ambiguity_fraction must lie in [0,1]");
  }
};

// ---------------------------------------------------------------------------
// Cone field of view
// ---------------------------------------------------------------------------

/// Apex-up elliptical cone along the axial axis: apex just above slice 0,
/// cross-section radii grow linearly with depth. 90-degree half angles
/// degenerate to the full fan.
inline MaskVol cone_mask(std::size_t nx, std::size_t ny, std::size_t nz,
                         double half_angle_lat_deg, double half_angle_ap_deg) {
  if (half_angle_lat_deg <= 0 || half_angle_ap_deg <= 0)
    throw ParamError("cone half angles must be positive");
  const double cx = 0.5 * static_cast<double>(nx - 1);
  const double cy = 0.5 * static_cast<double>(ny - 1);
  const double apex_offset = 2.0;  // apex sits slightly above the volume
  const bool full_x = half_angle_lat_deg >= 90.0;
  const bool full_y = half_angle_ap_deg >= 90.0;
  const double tx = full_x ? 0.0 : std::tan(half_angle_lat_deg * M_PI / 180.0);
  const double ty = full_y ? 0.0 : std::tan(half_angle_ap_deg * M_PI / 180.0);

  MaskVol mask({nx, ny, nz});
  for (std::size_t x = 0; x < nx; ++x) {
    const double dx = std::fabs(static_cast<double>(x) - cx);
    for (std::size_t y = 0; y < ny; ++y) {
      const double dy = std::fabs(static_cast<double>(y) - cy);
      for (std::size_t z = 0; z < nz; ++z) {
        const double depth = static_cast<double>(z) + apex_offset;
        double q = 0.0;
        if (!full_x) {
          const double rx = tx * depth;
          q += (dx / rx) * (dx / rx);
        }
        if (!full_y) {
          const double ry = ty * depth;
          q += (dy / ry) * (dy / ry);
        }
        mask[(x * ny + y) * nz + z] = q <= 1.0 ? 1 : 0;
      }
    }
  }
  return mask;
}

inline MaskVol cone_mask(const GeneratorConfig& cfg) {
  return cone_mask(cfg.size_x, cfg.size_y, cfg.size_z, cfg.half_angle_lat_deg,
                   cfg.half_angle_ap_deg);
}

// ---------------------------------------------------------------------------
// Synthetic phantom
// ---------------------------------------------------------------------------

namespace detail {

struct P3 {
  double x, y, z;
};

/// Largest ellipse factor at depth z (1.0 = on the cone surface).
inline double cone_norm(const GeneratorConfig& cfg, double x, double y,
                        double z) {
  const double cx = 0.5 * (cfg.size_x - 1);
  const double cy = 0.5 * (cfg.size_y - 1);
  const double depth = z + 2.0;
  double q = 0.0;
  if (cfg.half_angle_lat_deg < 90.0) {
    const double rx = std::tan(cfg.half_angle_lat_deg * M_PI / 180.0) * depth;
    q += ((x - cx) / rx) * ((x - cx) / rx);
  }
  if (cfg.half_angle_ap_deg < 90.0) {
    const double ry = std::tan(cfg.half_angle_ap_deg * M_PI / 180.0) * depth;
    q += ((y - cy) / ry) * ((y - cy) / ry);
  }
  return std::sqrt(q);
}

/// Pulls a point toward the cone axis until it sits within `margin` of the
/// cone surface.
inline P3 clamp_into_cone(const GeneratorConfig& cfg, P3 p, double margin) {
  const double cx = 0.5 * (cfg.size_x - 1);
  const double cy = 0.5 * (cfg.size_y - 1);
  const double q = cone_norm(cfg, p.x, p.y, p.z);
  if (q <= margin) return p;
  const double s = margin / q;
  return {cx + (p.x - cx) * s, cy + (p.y - cy) * s, p.z};
}

/// Sling-plus-legs centerline: two legs descending along z joined by an
/// arc at the deep end.
inline std::vector<P3> phantom_centerline(const GeneratorConfig& cfg,
                                          Rng& rng) {
  const double cx = 0.5 * (cfg.size_x - 1);
  const double cy = 0.5 * (cfg.size_y - 1);
  const double z0 = cfg.z0_frac * cfg.size_z;
  const double z1 = cfg.z1_frac * cfg.size_z;
  const double leg_dx = rng.uniform(0.10, 0.16) * cfg.size_x;
  const double leg_dy = rng.uniform(-0.05, 0.05) * cfg.size_y;
  const double bulge = rng.uniform(0.10, 0.16) * cfg.size_y;
  const double margin = 0.78;

  std::vector<P3> pts;
  const double step = 0.5;
  // legs taper toward the apex (V silhouette)
  for (int side = -1; side <= 1; side += 2) {
    for (double z = z0; z <= z1; z += step) {
      const double u = (z - z0) / std::max(1e-9, z1 - z0);
      const double dx = leg_dx * (0.70 + 0.30 * u);
      pts.push_back(clamp_into_cone(
          cfg, {cx + side * dx, cy + leg_dy * u, z}, margin));
    }
  }
  // sling arc joining the leg ends through the posterior side
  const double dx1 = leg_dx;
  for (double t = 0.0; t <= 1.0; t += 0.02) {
    const double theta = M_PI * t;
    const double x = cx - dx1 * std::cos(theta);
    const double y = cy + leg_dy + bulge * std::sin(theta);
    const double z = z1 + std::sin(theta);  // slight dip past the leg ends
    pts.push_back(clamp_into_cone(cfg, {x, y, z}, margin));
  }
  return pts;
}

inline MaskVol rasterize_tube(const GeneratorConfig& cfg,
                              const std::vector<P3>& line, double radius) {
  MaskVol vol({cfg.size_x, cfg.size_y, cfg.size_z});
  const double r2 = radius * radius;
  const long nx = static_cast<long>(cfg.size_x);
  const long ny = static_cast<long>(cfg.size_y);
  const long nz = static_cast<long>(cfg.size_z);
  for (const auto& p : line) {
    const long x0 = std::max(0L, static_cast<long>(std::floor(p.x - radius)));
    const long x1 = std::min(nx - 1, static_cast<long>(std::ceil(p.x + radius)));
    const long y0 = std::max(0L, static_cast<long>(std::floor(p.y - radius)));
    const long y1 = std::min(ny - 1, static_cast<long>(std::ceil(p.y + radius)));
    const long z0 = std::max(0L, static_cast<long>(std::floor(p.z - radius)));
    const long z1 = std::min(nz - 1, static_cast<long>(std::ceil(p.z + radius)));
    for (long x = x0; x <= x1; ++x)
      for (long y = y0; y <= y1; ++y)
        for (long z = z0; z <= z1; ++z) {
          const double dx = x - p.x, dy = y - p.y, dz = z - p.z;
          if (dx * dx + dy * dy + dz * dz <= r2)
            vol[(static_cast<std::size_t>(x) * cfg.size_y + y) * cfg.size_z +
                z] = 1;
        }
  }
  return vol;
}

/// Separable [1/4, 1/2, 1/4] blur along each axis, `passes` times.
inline std::vector<float> blur3(const std::vector<float>& in, std::size_t nx,
                                std::size_t ny, std::size_t nz,
                                int passes) {
  std::vector<float> a = in, b(in.size());
  auto pass_axis = [&](const std::vector<float>& src, std::vector<float>& dst,
                       int axis) {
    const std::size_t dims[3] = {nx, ny, nz};
    const std::size_t strides[3] = {ny * nz, nz, 1};
    const std::size_t n = dims[axis];
    const std::size_t s = strides[axis];
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t z = 0; z < nz; ++z) {
          const std::size_t idx = (x * ny + y) * nz + z;
          const std::size_t pos = axis == 0 ? x : axis == 1 ? y : z;
          const float c = src[idx];
          const float lo = pos > 0 ? src[idx - s] : c;
          const float hi = pos + 1 < n ? src[idx + s] : c;
          dst[idx] = 0.25f * lo + 0.5f * c + 0.25f * hi;
        }
  };
  for (int p = 0; p < passes; ++p) {
    pass_axis(a, b, 0);
    pass_axis(b, a, 1);
    pass_axis(a, b, 2);
    std::swap(a, b);
  }
  return a;
}

}  // namespace detail

inline double label_fraction(const VolumeSample& s) {
  double cnt = 0;
  for (std::size_t i = 0; i < s.label.numel(); ++i) cnt += s.label[i];
  return cnt / static_cast<double>(s.label.numel());
}

/// Deterministic synthetic volume: bright curved tube (sling + two legs)
/// inside an apex-up cone, multiplicative speckle, blurred edges. When
/// `force_ambiguous` (or the config fraction draw) applies, one axial slice
/// past the structure is made a voxel-identical copy of a mid-structure
/// slice with an all-background label.
inline VolumeSample generate_volume(const GeneratorConfig& cfg,
                                    std::uint64_t seed,
                                    int force_ambiguous = -1) {
  cfg.validate();
  Rng rng(Rng::mix(seed, 0x766f6cULL));
  VolumeSample s;
  s.voxel_spacing = static_cast<float>(cfg.voxel_spacing);
  s.fov = cone_mask(cfg);

  const auto line = detail::phantom_centerline(cfg, rng);
  double radius = rng.uniform(cfg.radius_lo, cfg.radius_hi);
  const double target_mid =
      0.5 * (cfg.label_fraction_lo + cfg.label_fraction_hi);
  MaskVol tube;
  double frac = 0.0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    tube = detail::rasterize_tube(cfg, line, radius);
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < tube.numel(); ++i)
      cnt += tube[i] && s.fov[i];
    frac = static_cast<double>(cnt) / static_cast<double>(tube.numel());
    if (frac >= cfg.label_fraction_lo && frac <= cfg.label_fraction_hi) break;
    if (frac <= 0.0)
      throw ConfigError("generator produced an empty structure");
    radius *= std::sqrt(target_mid / frac);
    radius = std::clamp(radius, 0.6, 0.45 * static_cast<double>(cfg.size_z));
  }
  if (frac < cfg.label_fraction_lo || frac > cfg.label_fraction_hi)
    throw ConfigError("generator could not reach the label fraction band");

  s.label = MaskVol({cfg.size_x, cfg.size_y, cfg.size_z});
  for (std::size_t i = 0; i < tube.numel(); ++i)
    s.label[i] = tube[i] && s.fov[i] ? 1 : 0;

  // image: blurred structure over speckled background, zero outside cone
  std::vector<float> soft(tube.numel());
  for (std::size_t i = 0; i < soft.size(); ++i)
    soft[i] = tube[i] ? 1.0f : 0.0f;
  soft = detail::blur3(soft, cfg.size_x, cfg.size_y, cfg.size_z, 2);

  s.image = Tensor({cfg.size_x, cfg.size_y, cfg.size_z});
  for (std::size_t i = 0; i < s.image.numel(); ++i) {
    if (!s.fov[i]) continue;  // also: no rng draw outside the cone
    const double base = cfg.background_level +
                        (cfg.structure_level - cfg.background_level) *
                            std::min(1.0f, 1.25f * soft[i]);
    const double noisy = base * (1.0 + cfg.speckle * rng.uniform(-1.0, 1.0));
    s.image[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
  }

  const bool ambiguous = force_ambiguous >= 0
                             ? force_ambiguous > 0
                             : rng.uniform() < cfg.ambiguity_fraction;
  if (ambiguous) {
    // deepest and shallowest labeled axial slices
    std::size_t z_top = 0, z_bot = cfg.size_z;
    for (std::size_t x = 0; x < cfg.size_x; ++x)
      for (std::size_t y = 0; y < cfg.size_y; ++y)
        for (std::size_t z = 0; z < cfg.size_z; ++z)
          if (s.label[(x * cfg.size_y + y) * cfg.size_z + z]) {
            z_top = std::max(z_top, z);
            z_bot = std::min(z_bot, z);
          }
    const std::size_t s_mus = (z_bot + z_top) / 2;
    const std::size_t s_dec = z_top + 4;  // past structure and its blur halo
    if (s_dec + 3 > cfg.size_z)
      throw ConfigError("volume too shallow for the ambiguous construct");
    for (std::size_t x = 0; x < cfg.size_x; ++x)
      for (std::size_t y = 0; y < cfg.size_y; ++y)
        s.image[(x * cfg.size_y + y) * cfg.size_z + s_dec] =
            s.image[(x * cfg.size_y + y) * cfg.size_z + s_mus];
    s.ambiguous = true;
    s.amb_slice_a = static_cast<std::uint32_t>(s_mus);
    s.amb_slice_b = static_cast<std::uint32_t>(s_dec);
  }
  return s;
}

/// Stratified dataset: exactly floor(n * fraction) ambiguous volumes,
/// deterministically spread over the index range.
inline std::vector<VolumeSample> generate_dataset(const GeneratorConfig& cfg,
                                                  std::size_t n,
                                                  std::uint64_t seed) {
  std::vector<VolumeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = cfg.ambiguity_fraction;
    const bool amb = std::floor((i + 1) * f) > std::floor(i * f);
    VolumeSample s = generate_volume(cfg, Rng::mix(seed, i), amb ? 1 : 0);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "vol_%04zu", i);
    s.id = buf;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

/// Centered zero-padding up to the target size; the axial (z) axis may
/// instead be center-cropped, but never through labeled voxels.
inline VolumeSample pad_to_canonical(const VolumeSample& in, std::size_t tx,
                                     std::size_t ty, std::size_t tz) {
  if (in.nx() > tx || in.ny() > ty)
    throw ParamError("pad_to_canonical cannot shrink x/y axes (" +
                     std::to_string(in.nx()) + "x" + std::to_string(in.ny()) +
                     " vs target " + std::to_string(tx) + "x" +
                     std::to_string(ty) + ")");
  std::size_t z_lo = 0, src_nz = in.nz();
  if (in.nz() > tz) {
    z_lo = (in.nz() - tz) / 2;
    src_nz = tz;
    for (std::size_t x = 0; x < in.nx(); ++x)
      for (std::size_t y = 0; y < in.ny(); ++y)
        for (std::size_t z = 0; z < in.nz(); ++z)
          if ((z < z_lo || z >= z_lo + tz) &&
              in.label[(x * in.ny() + y) * in.nz() + z])
            throw ParamError("cropping to " + std::to_string(tz) +
                             " axial slices would remove label voxels");
  }
  VolumeSample out;
  out.id = in.id;
  out.voxel_spacing = in.voxel_spacing;
  out.ambiguous = in.ambiguous;
  out.image = Tensor({tx, ty, tz});
  out.label = MaskVol({tx, ty, tz});
  out.fov = MaskVol({tx, ty, tz});
  const std::size_t ox = (tx - in.nx()) / 2;
  const std::size_t oy = (ty - in.ny()) / 2;
  const std::size_t oz = in.nz() > tz ? 0 : (tz - in.nz()) / 2;
  for (std::size_t x = 0; x < in.nx(); ++x)
    for (std::size_t y = 0; y < in.ny(); ++y)
      for (std::size_t z = 0; z < src_nz; ++z) {
        const std::size_t src = (x * in.ny() + y) * in.nz() + (z + z_lo);
        const std::size_t dst =
            ((x + ox) * ty + (y + oy)) * tz + (z + oz);
        out.image[dst] = in.image[src];
        out.label[dst] = in.label[src];
        out.fov[dst] = in.fov[src];
      }
  if (in.ambiguous) {
    out.amb_slice_a =
        static_cast<std::uint32_t>(in.amb_slice_a - z_lo + oz);
    out.amb_slice_b =
        static_cast<std::uint32_t>(in.amb_slice_b - z_lo + oz);
  }
  return out;
}

/// Re-embeds a probability volume into a larger canonical grid (inverse of
/// the centered crop), zero-filled where cropped.
inline Tensor embed_volume(const Tensor& prob, std::size_t tx, std::size_t ty,
                           std::size_t tz) {
  if (prob.dim(0) == tx && prob.dim(1) == ty && prob.dim(2) == tz) return prob;
  if (prob.dim(0) != tx || prob.dim(1) != ty || prob.dim(2) > tz)
    throw ShapeError("embed_volume only restores a centered axial crop");
  Tensor out({tx, ty, tz});
  const std::size_t oz = (tz - prob.dim(2)) / 2;
  for (std::size_t x = 0; x < tx; ++x)
    for (std::size_t y = 0; y < ty; ++y)
      for (std::size_t z = 0; z < prob.dim(2); ++z)
        out[(x * ty + y) * tz + (z + oz)] =
            prob[(x * ty + y) * prob.dim(2) + z];
  return out;
}

// ---------------------------------------------------------------------------
// Slicing
// ---------------------------------------------------------------------------

struct SliceSequence {
  Orientation orientation = Orientation::axial;
  Direction direction = Direction::forward;
  std::vector<Tensor> image;  // [1,H,W] each
  std::vector<Tensor> label;
  std::vector<Tensor> fov;
};

inline std::size_t slicing_axis(Orientation o) {
  switch (o) {
    case Orientation::axial: return 2;
    case Orientation::coronal: return 1;
    case Orientation::sagittal: return 0;
  }
  return 2;
}

namespace detail {

template <class Out, class Src>
Tensor take_slice(const Src& vol, std::size_t nx, std::size_t ny,
                  std::size_t nz, Orientation o, std::size_t k) {
  std::size_t h, w;
  switch (o) {
    case Orientation::axial: h = nx; w = ny; break;
    case Orientation::coronal: h = nx; w = nz; break;
    case Orientation::sagittal: h = ny; w = nz; break;
    default: h = nx; w = ny;
  }
  Tensor t({1, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      std::size_t x, y, z;
      switch (o) {
        case Orientation::axial: x = i; y = j; z = k; break;
        case Orientation::coronal: x = i; y = k; z = j; break;
        default: x = k; y = i; z = j; break;
      }
      t[i * w + j] = static_cast<float>(vol[(x * ny + y) * nz + z]);
    }
  return t;
}

}  // namespace detail

/// Ordered 2D slices along the orientation axis. Axial volumes feed
/// apex-first by default (top to bottom); reverse flips the order.
inline SliceSequence extract_slices(const VolumeSample& v, Orientation o,
                                    Direction dir = Direction::forward) {
  SliceSequence seq;
  seq.orientation = o;
  seq.direction = dir;
  const std::size_t n = v.image.dim(slicing_axis(o));
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t k = dir == Direction::forward ? t : n - 1 - t;
    seq.image.push_back(detail::take_slice<float>(v.image, v.nx(), v.ny(),
                                                  v.nz(), o, k));
    seq.label.push_back(detail::take_slice<float>(v.label, v.nx(), v.ny(),
                                                  v.nz(), o, k));
    seq.fov.push_back(detail::take_slice<float>(v.fov, v.nx(), v.ny(), v.nz(),
                                                o, k));
  }
  return seq;
}

/// Reassembles per-slice maps into a volume; exact inverse of
/// extract_slices for the same orientation and direction.
inline Tensor reassemble_slices(const std::vector<Tensor>& slices,
                                std::size_t nx, std::size_t ny, std::size_t nz,
                                Orientation o, Direction dir) {
  Tensor out({nx, ny, nz});
  const std::size_t n = slices.size();
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t k = dir == Direction::forward ? t : n - 1 - t;
    const Tensor& s = slices[t];
    const std::size_t h = s.dim(1), w = s.dim(2);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        std::size_t x, y, z;
        switch (o) {
          case Orientation::axial: x = i; y = j; z = k; break;
          case Orientation::coronal: x = i; y = k; z = j; break;
          default: x = k; y = i; z = j; break;
        }
        out[(x * ny + y) * nz + z] = s[i * w + j];
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitCounts {
  std::size_t train, val, test;
};

/// 85:5:10 proportions with at least one volume in val and test.
inline SplitCounts split_counts(std::size_t n) {
  if (n < 3) throw ParamError("need at least 3 volumes to split");
  std::size_t test = std::max<std::size_t>(1, std::llround(0.10 * n));
  std::size_t val = std::max<std::size_t>(1, std::llround(0.05 * n));
  if (test + val >= n) throw ParamError("split proportions impossible for n=" +
                                        std::to_string(n));
  return {n - val - test, val, test};
}

/// Disjoint, exhaustive, seed-deterministic assignment.
inline std::vector<SplitTag> split_dataset(std::size_t n,
                                           const SplitCounts& counts,
                                           std::uint64_t seed) {
  if (counts.train + counts.val + counts.test != n)
    throw ParamError("split counts must sum to dataset size");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(Rng::mix(seed, 0x73706c6974ULL));
  shuffle(idx, rng);
  std::vector<SplitTag> tags(n, SplitTag::train);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < counts.train) tags[idx[i]] = SplitTag::train;
    else if (i < counts.train + counts.val) tags[idx[i]] = SplitTag::val;
    else tags[idx[i]] = SplitTag::test;
  }
  return tags;
}

// ---------------------------------------------------------------------------
// Volume and manifest files
// ---------------------------------------------------------------------------

inline constexpr char kVolumeMagic[9] = "RUNETVOL";

inline void save_volume(const VolumeSample& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kVolumeMagic, 8);
  write_u32(os, 1);  // format version
  write_u64(os, v.nx());
  write_u64(os, v.ny());
  write_u64(os, v.nz());
  write_f32(os, v.voxel_spacing);
  write_u32(os, v.ambiguous ? 1u : 0u);
  write_u32(os, v.amb_slice_a);
  write_u32(os, v.amb_slice_b);
  os.write(reinterpret_cast<const char*>(v.image.data()),
           static_cast<std::streamsize>(v.image.numel() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(v.label.data()),
           static_cast<std::streamsize>(v.label.numel()));
  os.write(reinterpret_cast<const char*>(v.fov.data()),
           static_cast<std::streamsize>(v.fov.numel()));
  if (!os) throw IoError("failed writing " + path);
}

inline VolumeSample load_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kVolumeMagic, 8) != 0)
    throw IoError(path + " is not a volume file");
  if (read_u32(is) != 1) throw IoError(path + ": unsupported volume version");
  VolumeSample v;
  const std::size_t nx = read_u64(is), ny = read_u64(is), nz = read_u64(is);
  v.voxel_spacing = read_f32(is);
  v.ambiguous = read_u32(is) != 0;
  v.amb_slice_a = read_u32(is);
  v.amb_slice_b = read_u32(is);
  v.image = Tensor({nx, ny, nz});
  v.label = MaskVol({nx, ny, nz});
  v.fov = MaskVol({nx, ny, nz});
  is.read(reinterpret_cast<char*>(v.image.data()),
          static_cast<std::streamsize>(v.image.numel() * sizeof(float)));
  is.read(reinterpret_cast<char*>(v.label.data()),
          static_cast<std::streamsize>(v.label.numel()));
  is.read(reinterpret_cast<char*>(v.fov.data()),
          static_cast<std::streamsize>(v.fov.numel()));
  if (!is) throw IoError(path + ": truncated volume payload");
  return v;
}

struct ManifestEntry {
  std::string id, path;
  SplitTag split = SplitTag::train;
};

inline void save_manifest(const std::vector<ManifestEntry>& entries,
                          const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& e : entries)
    os << e.id << "," << e.path << "," << split_name(e.split) << "\n";
  if (!os) throw IoError("failed writing " + path);
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string split;
    if (!std::getline(ss, e.id, ',') || !std::getline(ss, e.path, ',') ||
        !std::getline(ss, split))
      throw IoError("malformed manifest line: " + line);
    if (split == "train") e.split = SplitTag::train;
    else if (split == "val") e.split = SplitTag::val;
    else if (split == "test") e.split = SplitTag::test;
    else throw IoError("unknown split tag in manifest: " + split);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace runet

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "runet/tensor.hpp"
#include "runet/volume.hpp"

namespace runet {

/// Raised when a surface-distance metric is undefined (empty volume);
/// reports propagate this as a missing value, never as 0.
class MetricUndefined : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// voxel = 1 iff prob >= tau (inclusive).
inline MaskVol threshold(const Tensor& prob, double tau = 0.5) {
  MaskVol out(prob.shape());
  for (std::size_t i = 0; i < prob.numel(); ++i)
    out[i] = static_cast<double>(prob[i]) >= tau ? 1 : 0;
  return out;
}

inline MaskVol mask_and(const MaskVol& a, const MaskVol& b) {
  expect_same_shape("mask_and", a.shape(), b.shape());
  MaskVol out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] && b[i] ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Morphology and components
// ---------------------------------------------------------------------------

namespace detail {

inline const int kFace[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};

template <bool Dilate>
MaskVol morph6(const MaskVol& in) {
  const long nx = static_cast<long>(in.dim(0));
  const long ny = static_cast<long>(in.dim(1));
  const long nz = static_cast<long>(in.dim(2));
  MaskVol out(in.shape());
  for (long x = 0; x < nx; ++x)
    for (long y = 0; y < ny; ++y)
      for (long z = 0; z < nz; ++z) {
        const std::size_t idx =
            (static_cast<std::size_t>(x) * ny + y) * nz + z;
        bool v = in[idx];
        if (Dilate ? v : !v) {
          out[idx] = Dilate ? 1 : 0;
          continue;
        }
        bool hit = false;
        for (const auto& d : kFace) {
          const long ax = x + d[0], ay = y + d[1], az = z + d[2];
          // outside the volume counts as background
          const bool nb = ax >= 0 && ax < nx && ay >= 0 && ay < ny &&
                          az >= 0 && az < nz &&
                          in[(static_cast<std::size_t>(ax) * ny + ay) * nz + az];
          if (Dilate ? nb : !nb) {
            hit = true;
            break;
          }
        }
        out[idx] = Dilate ? (hit ? 1 : 0) : (hit ? 0 : 1);
      }
  return out;
}

}  // namespace detail

inline MaskVol dilate6(const MaskVol& in) { return detail::morph6<true>(in); }
inline MaskVol erode6(const MaskVol& in) { return detail::morph6<false>(in); }

/// 26-connected component labelling; returns label per voxel (0 =
/// background) and component sizes indexed by label-1.
inline std::vector<std::size_t> connected_components(
    const MaskVol& in, std::vector<std::uint32_t>& labels) {
  const long nx = static_cast<long>(in.dim(0));
  const long ny = static_cast<long>(in.dim(1));
  const long nz = static_cast<long>(in.dim(2));
  labels.assign(in.numel(), 0);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < in.numel(); ++start) {
    if (!in[start] || labels[start]) continue;
    const std::uint32_t id = static_cast<std::uint32_t>(sizes.size() + 1);
    std::size_t count = 0;
    stack.push_back(start);
    labels[start] = id;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++count;
      const long z = static_cast<long>(cur % nz);
      const long y = static_cast<long>((cur / nz) % ny);
      const long x = static_cast<long>(cur / (ny * nz));
      for (long dx = -1; dx <= 1; ++dx)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dz = -1; dz <= 1; ++dz) {
            if (!dx && !dy && !dz) continue;
            const long ax = x + dx, ay = y + dy, az = z + dz;
            if (ax < 0 || ax >= nx || ay < 0 || ay >= ny || az < 0 ||
                az >= nz)
              continue;
            const std::size_t ni =
                (static_cast<std::size_t>(ax) * ny + ay) * nz + az;
            if (in[ni] && !labels[ni]) {
              labels[ni] = id;
              stack.push_back(ni);
            }
          }
    }
    sizes.push_back(count);
  }
  return sizes;
}

struct PostprocessConfig {
  int closing_iterations = 1;
  double min_size_frac = 0.01;       // of the largest component
  std::size_t min_size_floor = 27;
};

/// Morphological closing (6-connected cross, dilate then erode) followed by
/// removal of small 26-connected components.
inline MaskVol postprocess(const MaskVol& in,
                           const PostprocessConfig& cfg = {}) {
  MaskVol cur = in;
  for (int i = 0; i < cfg.closing_iterations; ++i) cur = erode6(dilate6(cur));
  std::vector<std::uint32_t> labels;
  const auto sizes = connected_components(cur, labels);
  if (sizes.empty()) return cur;
  const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
  const std::size_t min_size = std::max<std::size_t>(
      cfg.min_size_floor,
      static_cast<std::size_t>(std::ceil(cfg.min_size_frac * largest)));
  for (std::size_t i = 0; i < cur.numel(); ++i)
    if (cur[i] && sizes[labels[i] - 1] < min_size) cur[i] = 0;
  return cur;
}

// ---------------------------------------------------------------------------
// Overlap and surface distances
// ---------------------------------------------------------------------------

/// 2|A n B| / (|A| + |B|) over masked voxels; 1 when both are empty.
inline double dsi(const MaskVol& a, const MaskVol& b,
                  const MaskVol* mask = nullptr) {
  expect_same_shape("dsi", a.shape(), b.shape());
  if (mask) expect_same_shape("dsi mask", a.shape(), mask->shape());
  std::size_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (mask && !(*mask)[i]) continue;
    na += a[i] ? 1 : 0;
    nb += b[i] ? 1 : 0;
    ni += (a[i] && b[i]) ? 1 : 0;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

/// Foreground voxels with at least one 6-connected background neighbor
/// (out-of-bounds is background).
inline std::vector<std::size_t> surface_voxels(const MaskVol& v) {
  const long nx = static_cast<long>(v.dim(0));
  const long ny = static_cast<long>(v.dim(1));
  const long nz = static_cast<long>(v.dim(2));
  std::vector<std::size_t> out;
  for (long x = 0; x < nx; ++x)
    for (long y = 0; y < ny; ++y)
      for (long z = 0; z < nz; ++z) {
        const std::size_t idx =
            (static_cast<std::size_t>(x) * ny + y) * nz + z;
        if (!v[idx]) continue;
        for (const auto& d : detail::kFace) {
          const long ax = x + d[0], ay = y + d[1], az = z + d[2];
          if (ax < 0 || ax >= nx || ay < 0 || ay >= ny || az < 0 ||
              az >= nz ||
              !v[(static_cast<std::size_t>(ax) * ny + ay) * nz + az]) {
            out.push_back(idx);
            break;
          }
        }
      }
  return out;
}

namespace detail {

// Felzenszwalb-Huttenlocher exact squared Euclidean distance transform.
inline void dt1d(const double* f, double* d, std::size_t n, int* v,
                 double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::size_t q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + q * q) - (f[p] + static_cast<double>(p) * p)) /
          (2.0 * q - 2.0 * p);
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = static_cast<int>(q);
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

/// Squared distance to the nearest seed voxel, exact on the grid.
inline std::vector<double> edt_sq(const std::vector<std::size_t>& seeds,
                                  std::size_t nx, std::size_t ny,
                                  std::size_t nz) {
  const double inf = 1e18;
  std::vector<double> d(nx * ny * nz, inf);
  for (std::size_t s : seeds) d[s] = 0.0;
  const std::size_t nmax = std::max({nx, ny, nz});
  std::vector<double> f(nmax), dd(nmax), z(nmax + 1);
  std::vector<int> v(nmax);
  // z lines
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) {
      double* line = d.data() + (x * ny + y) * nz;
      dt1d(line, dd.data(), nz, v.data(), z.data());
      std::copy(dd.begin(), dd.begin() + nz, line);
    }
  // y lines
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t zz = 0; zz < nz; ++zz) {
      for (std::size_t y = 0; y < ny; ++y) f[y] = d[(x * ny + y) * nz + zz];
      dt1d(f.data(), dd.data(), ny, v.data(), z.data());
      for (std::size_t y = 0; y < ny; ++y) d[(x * ny + y) * nz + zz] = dd[y];
    }
  // x lines
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t zz = 0; zz < nz; ++zz) {
      for (std::size_t x = 0; x < nx; ++x) f[x] = d[(x * ny + y) * nz + zz];
      dt1d(f.data(), dd.data(), nx, v.data(), z.data());
      for (std::size_t x = 0; x < nx; ++x) d[(x * ny + y) * nz + zz] = dd[x];
    }
  return d;
}

}  // namespace detail

struct SurfaceDistances {
  double mad = 0.0;  // symmetric mean surface distance, voxels
  double hdd = 0.0;  // Hausdorff distance, voxels
};

/// Euclidean surface distances in voxel units via an exact distance
/// transform. MAD averages the two directed mean surface distances; HDD is
/// the max of the two directed maxima.
inline SurfaceDistances surface_distances(const MaskVol& a, const MaskVol& b) {
  expect_same_shape("surface_distances", a.shape(), b.shape());
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  if (sa.empty() || sb.empty())
    throw MetricUndefined("surface distances undefined for an empty volume");
  const std::size_t nx = a.dim(0), ny = a.dim(1), nz = a.dim(2);
  const auto da = detail::edt_sq(sb, nx, ny, nz);  // distance to B's surface
  const auto db = detail::edt_sq(sa, nx, ny, nz);
  double sum_ab = 0.0, max_ab = 0.0;
  for (std::size_t s : sa) {
    const double dist = std::sqrt(da[s]);
    sum_ab += dist;
    max_ab = std::max(max_ab, dist);
  }
  double sum_ba = 0.0, max_ba = 0.0;
  for (std::size_t s : sb) {
    const double dist = std::sqrt(db[s]);
    sum_ba += dist;
    max_ba = std::max(max_ba, dist);
  }
  SurfaceDistances out;
  out.mad = 0.5 * (sum_ab / sa.size() + sum_ba / sb.size());
  out.hdd = std::max(max_ab, max_ba);
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

enum class EnsembleMode { mean, sum };

/// Voxelwise mean (default) of exactly three orientation probability maps,
/// each zeroed outside its field of view.
inline Tensor ensemble_mean(const std::vector<Tensor>& probs,
                            const std::vector<MaskVol>& fov_masks,
                            EnsembleMode mode = EnsembleMode::mean) {
  if (probs.size() != 3 || fov_masks.size() != 3)
    throw ParamError("ensemble expects exactly 3 probability volumes");
  for (std::size_t k = 1; k < 3; ++k)
    expect_same_shape("ensemble", probs[0].shape(), probs[k].shape());
  Tensor out(probs[0].shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 3; ++k)
      acc += fov_masks[k][i] ? static_cast<double>(probs[k][i]) : 0.0;
    out[i] = static_cast<float>(mode == EnsembleMode::mean ? acc / 3.0 : acc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::string volume_id;
  std::string method;  // axial | coronal | sagittal | ensemble
  std::string stage;   // raw | postprocessed
  double dsi = 0.0;
  std::optional<double> mad_voxels, hdd_voxels;
};

struct SummaryRow {
  std::string method, stage, metric;
  double median = 0.0, q1 = 0.0, q3 = 0.0;
  std::size_t outlier_count = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<SummaryRow> summary;
  std::vector<std::string> missing;  // "<volume>/<method>" with no prediction
};

struct Quartiles {
  double q1, median, q3;
  std::size_t outliers;
};

/// Linearly interpolated quartiles; outliers beyond 1.5 IQR from q1/q3
/// (the usual boxplot semantics).
inline Quartiles quartiles(std::vector<double> v) {
  if (v.empty()) throw ParamError("quartiles of an empty set");
  std::sort(v.begin(), v.end());
  auto at = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(v.size() - 1, lo + 1);
    const double w = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - w) + v[hi] * w;
  };
  Quartiles q{at(0.25), at(0.5), at(0.75), 0};
  const double iqr = q.q3 - q.q1;
  for (double x : v)
    if (x < q.q1 - 1.5 * iqr || x > q.q3 + 1.5 * iqr) ++q.outliers;
  return q;
}

/// Metrics for one prediction against one sample: threshold, restrict to the
/// field of view, then raw and postprocessed stages.
inline std::vector<MetricsRow> evaluate_volume(const std::string& volume_id,
                                               const std::string& method,
                                               const Tensor& prob,
                                               const VolumeSample& sample,
                                               double tau = 0.5,
                                               const PostprocessConfig& pp = {}) {
  expect_same_shape("prediction vs volume", prob.shape(),
                    sample.image.shape());
  const MaskVol raw = mask_and(threshold(prob, tau), sample.fov);
  const MaskVol cleaned = postprocess(raw, pp);
  std::vector<MetricsRow> rows;
  for (const auto* stage : {"raw", "postprocessed"}) {
    const MaskVol& bin = std::string(stage) == "raw" ? raw : cleaned;
    MetricsRow r;
    r.volume_id = volume_id;
    r.method = method;
    r.stage = stage;
    r.dsi = dsi(bin, sample.label, &sample.fov);
    try {
      const auto sd = surface_distances(bin, sample.label);
      r.mad_voxels = sd.mad;
      r.hdd_voxels = sd.hdd;
    } catch (const MetricUndefined&) {
      // left missing
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void summarize(MetricsReport& report) {
  report.summary.clear();
  for (const auto* method : {"axial", "coronal", "sagittal", "ensemble"}) {
    for (const auto* stage : {"raw", "postprocessed"}) {
      for (const auto* metric : {"dsi", "mad_voxels", "hdd_voxels"}) {
        std::vector<double> vals;
        for (const auto& r : report.rows) {
          if (r.method != method || r.stage != stage) continue;
          if (std::string(metric) == "dsi") vals.push_back(r.dsi);
          else if (std::string(metric) == "mad_voxels" && r.mad_voxels)
            vals.push_back(*r.mad_voxels);
          else if (std::string(metric) == "hdd_voxels" && r.hdd_voxels)
            vals.push_back(*r.hdd_voxels);
        }
        if (vals.empty()) continue;
        const Quartiles q = quartiles(vals);
        report.summary.push_back(
            {method, stage, metric, q.median, q.q1, q.q3, q.outliers});
      }
    }
  }
}

inline void write_metrics_csv(const MetricsReport& report, std::ostream& os) {
  os << "volume_id,method,stage,dsi,mad_voxels,hdd_voxels\n";
  for (const auto& r : report.rows) {
    os << r.volume_id << "," << r.method << "," << r.stage << "," << r.dsi
       << ",";
    if (r.mad_voxels) os << *r.mad_voxels;
    os << ",";
    if (r.hdd_voxels) os << *r.hdd_voxels;
    os << "\n";
  }
}

inline void write_summary_csv(const MetricsReport& report, std::ostream& os) {
  os << "method,stage,metric,median,q1,q3,outlier_count\n";
  for (const auto& s : report.summary)
    os << s.method << "," << s.stage << "," << s.metric << "," << s.median
       << "," << s.q1 << "," << s.q3 << "," << s.outlier_count << "\n";
}

/// DSI restricted to a set of axial slices (within the field of view); used
/// for scoring the slice-ambiguous construct.
inline double dsi_on_axial_slices(const MaskVol& pred, const VolumeSample& v,
                                  const std::vector<std::size_t>& slices) {
  std::size_t na = 0, nb = 0, ni = 0;
  const std::size_t ny = v.ny(), nz = v.nz();
  for (std::size_t x = 0; x < v.nx(); ++x)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t z : slices) {
        const std::size_t idx = (x * ny + y) * nz + z;
        if (!v.fov[idx]) continue;
        na += pred[idx] ? 1 : 0;
        nb += v.label[idx] ? 1 : 0;
        ni += (pred[idx] && v.label[idx]) ? 1 : 0;
      }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

}  // namespace runet

#pragma once

#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "runet/clstm.hpp"
#include "runet/grad_check.hpp"
#include "runet/loss.hpp"
#include "runet/lstm.hpp"
#include "runet/metrics.hpp"
#include "runet/model.hpp"
#include "runet/ops.hpp"

namespace runet {

// Independent reference implementations ("oracles"). These deliberately
// take a different route than the production kernels: per-output-pixel
// sliding windows instead of tap-major accumulation loops, all-pairs
// distance scans instead of distance transforms, set arithmetic instead of
// running sums. The verification suite and the test suites compare the two
// routes on random instances.

namespace oracle {

/// Sliding-window cross-correlation, one output element at a time.
template <class T>
TensorT<T> conv2d(const TensorT<T>& in, const TensorT<T>& w,
                  const TensorT<T>& b, int stride, Pad pad) {
  const long Ci = static_cast<long>(in.dim(0));
  const long H = static_cast<long>(in.dim(1));
  const long W = static_cast<long>(in.dim(2));
  const long Co = static_cast<long>(w.dim(0));
  const long kh = static_cast<long>(w.dim(2));
  const long kw = static_cast<long>(w.dim(3));
  const long p = pad == Pad::same ? (kh - 1) / 2 : 0;
  const long Ho = (H + 2 * p - kh) / stride + 1;
  const long Wo = (W + 2 * p - kw) / stride + 1;
  TensorT<T> out({static_cast<std::size_t>(Co), static_cast<std::size_t>(Ho),
                  static_cast<std::size_t>(Wo)});
  for (long co = 0; co < Co; ++co)
    for (long oh = 0; oh < Ho; ++oh)
      for (long ow = 0; ow < Wo; ++ow) {
        double acc = static_cast<double>(b[co]);
        for (long ci = 0; ci < Ci; ++ci)
          for (long r = 0; r < kh; ++r)
            for (long c = 0; c < kw; ++c) {
              const long ih = oh * stride + r - p;
              const long iw = ow * stride + c - p;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += static_cast<double>(
                         w[((co * Ci + ci) * kh + r) * kw + c]) *
                     static_cast<double>(in[(ci * H + ih) * W + iw]);
            }
        out[(co * Ho + oh) * Wo + ow] = static_cast<T>(acc);
      }
  return out;
}

/// Window-scan max pool.
template <class T>
TensorT<T> maxpool2d(const TensorT<T>& in) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  TensorT<T> out({C, H / 2, W / 2});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oh = 0; oh < H / 2; ++oh)
      for (std::size_t ow = 0; ow < W / 2; ++ow) {
        T best = in[(c * H + 2 * oh) * W + 2 * ow];
        for (std::size_t r = 0; r < 2; ++r)
          for (std::size_t s = 0; s < 2; ++s)
            best = std::max(best, in[(c * H + 2 * oh + r) * W + 2 * ow + s]);
        out[(c * H / 2 + oh) * W / 2 + ow] = best;
      }
  return out;
}

struct Voxel {
  long x, y, z;
};

/// A volume's surface voxels by direct neighborhood inspection.
inline std::vector<Voxel> surface(const MaskVol& v) {
  const long nx = static_cast<long>(v.dim(0));
  const long ny = static_cast<long>(v.dim(1));
  const long nz = static_cast<long>(v.dim(2));
  auto at = [&](long x, long y, long z) -> bool {
    if (x < 0 || x >= nx || y < 0 || y >= ny || z < 0 || z >= nz) return false;
    return v[(static_cast<std::size_t>(x) * ny + y) * nz + z] != 0;
  };
  std::vector<Voxel> out;
  for (long x = 0; x < nx; ++x)
    for (long y = 0; y < ny; ++y)
      for (long z = 0; z < nz; ++z) {
        if (!at(x, y, z)) continue;
        if (!at(x - 1, y, z) || !at(x + 1, y, z) || !at(x, y - 1, z) ||
            !at(x, y + 1, z) || !at(x, y, z - 1) || !at(x, y, z + 1))
          out.push_back({x, y, z});
      }
  return out;
}

/// All-pairs MAD/HDD over surface voxels, O(n^2).
inline SurfaceDistances surface_distances(const MaskVol& a, const MaskVol& b) {
  const auto sa = surface(a);
  const auto sb = surface(b);
  if (sa.empty() || sb.empty())
    throw MetricUndefined("oracle: empty surface");
  auto directed = [](const std::vector<Voxel>& from,
                     const std::vector<Voxel>& to, double& mean, double& mx) {
    double sum = 0.0;
    mx = 0.0;
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) {
        const double dx = static_cast<double>(p.x - q.x);
        const double dy = static_cast<double>(p.y - q.y);
        const double dz = static_cast<double>(p.z - q.z);
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      const double d = std::sqrt(best);
      sum += d;
      mx = std::max(mx, d);
    }
    mean = sum / static_cast<double>(from.size());
  };
  double mean_ab, max_ab, mean_ba, max_ba;
  directed(sa, sb, mean_ab, max_ab);
  directed(sb, sa, mean_ba, max_ba);
  return {0.5 * (mean_ab + mean_ba), std::max(max_ab, max_ba)};
}

/// DSI via explicit index sets.
inline double dsi_sets(const MaskVol& a, const MaskVol& b) {
  std::set<std::size_t> sa, sb;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a[i]) sa.insert(i);
    if (b[i]) sb.insert(i);
  }
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (std::size_t i : sa) inter += sb.count(i);
  return 2.0 * static_cast<double>(inter) /
         static_cast<double>(sa.size() + sb.size());
}

/// Canonical weight mapping: dense LSTM matrices into center-tap 3x3
/// kernels, peephole vectors into [C,1,1] tensors.
template <class T>
ClstmWeightsT<T> clstm_from_lstm(const LstmWeightsT<T>& w) {
  const std::size_t nh = w.hidden(), nx = w.input();
  auto kernel = [&](const TensorT<T>& dense, std::size_t ci) {
    TensorT<T> k({nh, ci, 3, 3});
    for (std::size_t o = 0; o < nh; ++o)
      for (std::size_t i = 0; i < ci; ++i)
        k[((o * ci + i) * 3 + 1) * 3 + 1] = dense[o * ci + i];
    return make_leaf<T>(std::move(k), false);
  };
  auto peep = [&](const TensorT<T>& v) {
    TensorT<T> p({nh, 1, 1});
    for (std::size_t i = 0; i < nh; ++i) p[i] = v[i];
    return make_leaf<T>(std::move(p), false);
  };
  auto bias = [&](const TensorT<T>& v) { return make_leaf<T>(v, false); };
  ClstmWeightsT<T> c;
  c.peephole_mode = PeepholeMode::full;
  c.w_xi = kernel(w.w_xi, nx); c.w_hi = kernel(w.w_hi, nh);
  c.w_xf = kernel(w.w_xf, nx); c.w_hf = kernel(w.w_hf, nh);
  c.w_xc = kernel(w.w_xc, nx); c.w_hc = kernel(w.w_hc, nh);
  c.w_xo = kernel(w.w_xo, nx); c.w_ho = kernel(w.w_ho, nh);
  c.p_i = peep(w.p_i); c.p_f = peep(w.p_f); c.p_o = peep(w.p_o);
  c.b_i = bias(w.b_i); c.b_f = bias(w.b_f); c.b_c = bias(w.b_c);
  c.b_o = bias(w.b_o);
  return c;
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

template <class T>
TensorT<T> random_tensor(std::vector<std::size_t> shape, Rng& rng,
                         double lo = -1.0, double hi = 1.0) {
  TensorT<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline double max_abs_diff(const TensorT<double>& a, const TensorT<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline MaskVol random_blob(std::size_t n, Rng& rng, int blobs = 2) {
  MaskVol v({n, n, n});
  for (int b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(2.0, n - 3.0);
    const double cy = rng.uniform(2.0, n - 3.0);
    const double cz = rng.uniform(2.0, n - 3.0);
    const double r = rng.uniform(1.5, 3.5);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t z = 0; z < n; ++z) {
          const double dx = x - cx, dy = y - cy, dz = z - cz;
          if (dx * dx + dy * dy + dz * dz <= r * r)
            v[(x * n + y) * n + z] = 1;
        }
  }
  return v;
}

}  // namespace detail

/// Runs the oracle suite: gradient checks for every primitive, the
/// CLSTM-to-LSTM reduction, brute-force equivalences and the transpose
/// adjoint identity, plus a negative control proving the gradient checker
/// detects a broken backward rule.
inline std::vector<VerifyCheck> run_verification(std::uint64_t seed = 20240901) {
  using D = double;
  std::vector<VerifyCheck> checks;
  auto add = [&](const std::string& name, bool pass, std::string detail) {
    checks.push_back({name, pass, std::move(detail)});
  };
  auto fmt = [](double v) {
    std::ostringstream ss;
    ss.precision(3);
    ss << std::scientific << v;
    return ss.str();
  };
  Rng rng(Rng::mix(seed, 0x76657269ULL));

  {  // conv2d vs sliding-window oracle
    double worst = 0.0;
    for (int rep = 0; rep < 5; ++rep) {
      auto x = detail::random_tensor<D>({1, 8, 8}, rng);
      auto w = detail::random_tensor<D>({4, 1, 3, 3}, rng);
      auto b = detail::random_tensor<D>({4}, rng);
      worst = std::max(worst, detail::max_abs_diff(
                                  conv2d_fwd(x, w, b, 1, Pad::same),
                                  oracle::conv2d(x, w, b, 1, Pad::same)));
      auto x2 = detail::random_tensor<D>({3, 10, 12}, rng);
      auto w2 = detail::random_tensor<D>({2, 3, 3, 3}, rng);
      auto b2 = detail::random_tensor<D>({2}, rng);
      worst = std::max(worst, detail::max_abs_diff(
                                  conv2d_fwd(x2, w2, b2, 2, Pad::same),
                                  oracle::conv2d(x2, w2, b2, 2, Pad::same)));
      worst = std::max(worst, detail::max_abs_diff(
                                  conv2d_fwd(x2, w2, b2, 1, Pad::valid),
                                  oracle::conv2d(x2, w2, b2, 1, Pad::valid)));
    }
    add("conv2d_matches_sliding_window", worst <= 1e-10, fmt(worst));
  }

  {  // maxpool vs window scan (exact)
    double worst = 0.0;
    for (int rep = 0; rep < 5; ++rep) {
      auto x = detail::random_tensor<D>({2, 8, 8}, rng);
      worst = std::max(
          worst, detail::max_abs_diff(maxpool2d_fwd(x, nullptr),
                                      oracle::maxpool2d(x)));
    }
    add("maxpool_matches_window_scan", worst == 0.0, fmt(worst));
  }

  {  // <T x, y> == <x, T* y> with T* the stride-2 conv
    double worst = 0.0;
    for (int rep = 0; rep < 8; ++rep) {
      auto x = detail::random_tensor<D>({2, 5, 6}, rng);
      auto w = detail::random_tensor<D>({3, 2, 3, 3}, rng);
      TensorT<D> zb({3}), zb2({2});
      auto y = detail::random_tensor<D>({3, 10, 12}, rng);
      const auto tx = conv_transpose2d_fwd(x, w, zb);
      // swap kernel channel roles for the adjoint direction
      TensorT<D> wt({2, 3, 3, 3});
      for (std::size_t co = 0; co < 3; ++co)
        for (std::size_t ci = 0; ci < 2; ++ci)
          for (std::size_t k = 0; k < 9; ++k)
            wt[(ci * 3 + co) * 9 + k] = w[(co * 2 + ci) * 9 + k];
      const auto ty = conv2d_fwd(y, wt, zb2, 2, Pad::same);
      double ip1 = 0.0, ip2 = 0.0, nx = 0.0, ny = 0.0;
      for (std::size_t i = 0; i < tx.numel(); ++i) ip1 += tx[i] * y[i];
      for (std::size_t i = 0; i < x.numel(); ++i) ip2 += x[i] * ty[i];
      for (std::size_t i = 0; i < x.numel(); ++i) nx += x[i] * x[i];
      for (std::size_t i = 0; i < y.numel(); ++i) ny += y[i] * y[i];
      worst = std::max(worst, std::fabs(ip1 - ip2) /
                                  (std::sqrt(nx) * std::sqrt(ny)));
    }
    add("conv_transpose_adjoint_identity", worst <= 1e-8, fmt(worst));
  }

  {  // gradient checks for every registered primitive
    struct Named {
      const char* name;
      double err;
    };
    std::vector<Named> errs;
    auto x = detail::random_tensor<D>({2, 6, 6}, rng);
    auto w = detail::random_tensor<D>({3, 2, 3, 3}, rng);
    auto b = detail::random_tensor<D>({3}, rng);

    errs.push_back({"conv2d", grad_check(
        [](const std::vector<VarT<D>>& in) {
          return vsum(conv2d(in[0], in[1], in[2], 1, Pad::same));
        },
        {x, w, b})});
    errs.push_back({"conv2d_s2", grad_check(
        [](const std::vector<VarT<D>>& in) {
          return vsum(conv2d(in[0], in[1], in[2], 2, Pad::same));
        },
        {x, w, b})});
    errs.push_back({"conv2d_valid", grad_check(
        [](const std::vector<VarT<D>>& in) {
          return vsum(conv2d(in[0], in[1], in[2], 1, Pad::valid));
        },
        {x, w, b})});
    errs.push_back({"conv_transpose2d", grad_check(
        [](const std::vector<VarT<D>>& in) {
          return vsum(conv_transpose2d(in[0], in[1], in[2]));
        },
        {x, w, b})});
    errs.push_back({"maxpool2d", grad_check(
        [](const std::vector<VarT<D>>& in) {
          return vsum(hadamard(maxpool2d(in[0]).out, maxpool2d(in[0]).out));
        },
        {x})});
    for (auto kind : {Act::sigmoid, Act::tanh_fn, Act::relu}) {
      const char* nm = kind == Act::sigmoid ? "sigmoid"
                       : kind == Act::tanh_fn ? "tanh" : "relu";
      errs.push_back({nm, grad_check(
          [kind](const std::vector<VarT<D>>& in) {
            auto y = activation(in[0], kind);
            return vsum(hadamard(y, y));
          },
          {x})});
    }
    errs.push_back({"add_hadamard", grad_check(
        [](const std::vector<VarT<D>>& in) {
          return vsum(hadamard(vadd(in[0], in[1]), in[0]));
        },
        {x, detail::random_tensor<D>({2, 6, 6}, rng)})});
    errs.push_back({"concat_channels", grad_check(
        [](const std::vector<VarT<D>>& in) {
          auto y = concat_channels(in[0], in[1]);
          return vsum(hadamard(y, y));
        },
        {x, detail::random_tensor<D>({3, 6, 6}, rng)})});
    errs.push_back({"channel_scale", grad_check(
        [](const std::vector<VarT<D>>& in) {
          auto y = channel_scale(in[0], in[1]);
          return vsum(hadamard(y, y));
        },
        {x, detail::random_tensor<D>({2}, rng)})});
    errs.push_back({"dropout", grad_check(
        [](const std::vector<VarT<D>>& in) {
          Rng drop_rng(99);  // fixed mask across FD evaluations
          auto y = dropout(in[0], 0.3, true, drop_rng);
          return vsum(hadamard(y, y));
        },
        {x})});
    {
      auto p = detail::random_tensor<D>({1, 6, 6}, rng, 0.05, 0.95);
      TensorT<D> g({1, 6, 6}), m({1, 6, 6});
      for (std::size_t i = 0; i < g.numel(); ++i) {
        g[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
        m[i] = rng.uniform() < 0.8 ? 1.0 : 0.0;
      }
      errs.push_back({"dice_loss_masked", grad_check(
          [g, m](const std::vector<VarT<D>>& in) {
            return dice_loss_masked(in[0], make_leaf<D>(g), make_leaf<D>(m));
          },
          {p})});
    }
    {
      auto wc = ClstmWeightsT<D>::init(2, 3, 6, 6, PeepholeMode::full, rng);
      std::vector<TensorT<D>> pts;
      for (auto& pv : wc.params()) {
        for (std::size_t i = 0; i < pv->value.numel(); ++i)
          pv->value[i] = static_cast<D>(rng.uniform(-0.4, 0.4));
        pts.push_back(pv->value);
      }
      auto xs = detail::random_tensor<D>({2, 6, 6}, rng);
      errs.push_back({"clstm_step", grad_check(
          [&wc, xs](const std::vector<VarT<D>>& in) {
            ClstmWeightsT<D> w = wc;
            w.w_xi = in[0]; w.w_hi = in[1]; w.w_xf = in[2]; w.w_hf = in[3];
            w.w_xc = in[4]; w.w_hc = in[5]; w.w_xo = in[6]; w.w_ho = in[7];
            w.p_i = in[8]; w.p_f = in[9]; w.p_o = in[10];
            w.b_i = in[11]; w.b_f = in[12]; w.b_c = in[13]; w.b_o = in[14];
            auto st = zero_state<D>(3, 6, 6);
            auto [next, gates] = clstm_step(make_leaf<D>(xs), st, w);
            return vsum(hadamard(next.hidden, next.hidden));
          },
          pts)});
    }
    double worst = 0.0;
    std::string worst_name = "-";
    for (const auto& e : errs)
      if (e.err > worst) {
        worst = e.err;
        worst_name = e.name;
      }
    add("grad_check_primitives", worst < 1e-4, worst_name + " " + fmt(worst));
  }

  {  // CLSTM at 1x1 with center-tap kernels reduces to the dense LSTM
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
      const std::size_t nx = 1 + rng.below(4), nh = 1 + rng.below(5);
      auto w = LstmWeightsT<D>::random(nx, nh, rng);
      auto xs = detail::random_tensor<D>({nx}, rng);
      LstmStateT<D> prev{detail::random_tensor<D>({nh}, rng),
                         detail::random_tensor<D>({nh}, rng)};
      auto [dense_next, dense_gates] = lstm_step(xs, prev, w);

      auto cw = oracle::clstm_from_lstm(w);
      TensorT<D> xt({nx, 1, 1});
      for (std::size_t i = 0; i < nx; ++i) xt[i] = xs[i];
      CellStateT<D> cprev{make_leaf<D>(TensorT<D>({nh, 1, 1})),
                          make_leaf<D>(TensorT<D>({nh, 1, 1}))};
      for (std::size_t i = 0; i < nh; ++i) {
        cprev.hidden->value[i] = prev.hidden[i];
        cprev.cell->value[i] = prev.cell[i];
      }
      NoGradGuard ng;
      auto [conv_next, conv_gates] = clstm_step(make_leaf<D>(xt), cprev, cw);
      for (std::size_t i = 0; i < nh; ++i) {
        worst = std::max(worst, std::fabs(conv_next.hidden->value[i] -
                                          dense_next.hidden[i]));
        worst = std::max(worst, std::fabs(conv_next.cell->value[i] -
                                          dense_next.cell[i]));
      }
    }
    add("clstm_reduces_to_lstm", worst <= 1e-12, fmt(worst));
  }

  {  // surface distances vs all-pairs brute force
    double worst = 0.0;
    for (int rep = 0; rep < 4; ++rep) {
      auto a = detail::random_blob(12, rng);
      auto b = detail::random_blob(12, rng);
      if (surface_voxels(a).empty() || surface_voxels(b).empty()) continue;
      const auto fast = surface_distances(a, b);
      const auto slow = oracle::surface_distances(a, b);
      worst = std::max({worst, std::fabs(fast.mad - slow.mad),
                        std::fabs(fast.hdd - slow.hdd)});
    }
    add("surface_distances_match_brute_force", worst <= 1e-9, fmt(worst));
  }

  {  // DSI vs set arithmetic (exact)
    double worst = 0.0;
    for (int rep = 0; rep < 4; ++rep) {
      auto a = detail::random_blob(10, rng);
      auto b = detail::random_blob(10, rng);
      worst = std::max(worst, std::fabs(dsi(a, b) - oracle::dsi_sets(a, b)));
    }
    add("dsi_matches_set_oracle", worst == 0.0, fmt(worst));
  }

  {  // negative control: a perturbed conv backward must be caught
    auto x = detail::random_tensor<D>({1, 5, 5}, rng);
    auto w = detail::random_tensor<D>({2, 1, 3, 3}, rng);
    auto b = detail::random_tensor<D>({2}, rng);
    const double err = grad_check(
        [](const std::vector<VarT<D>>& in) {
          auto out = make_leaf<D>(
              conv2d_fwd(in[0]->value, in[1]->value, in[2]->value, 1,
                         Pad::same));
          out->requires_grad = true;
          out->parents = {in[0], in[1], in[2]};
          auto xs = in[0]->value.shape();
          auto ws = in[1]->value.shape();
          auto xv = in[0], wv = in[1], bv = in[2];
          out->backward_fn = [xv, wv, bv, xs, ws](NodeT<D>& n) {
            auto gx = conv2d_bwd_input(n.grad, wv->value, xs, 1, Pad::same);
            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] *= 1.05;
            xv->accumulate(gx);  // deliberately wrong scale
            wv->accumulate(conv2d_bwd_weights(n.grad, xv->value, ws, 1,
                                              Pad::same));
            bv->accumulate(conv2d_bwd_bias(n.grad));
          };
          return vsum(hadamard(out, out));
        },
        {x, w, b});
    add("negative_control_detects_broken_backward", err > 1e-4, fmt(err));
  }

  return checks;
}

}  // namespace runet

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "runet/clstm.hpp"
#include "runet/ops.hpp"
#include "runet/rng.hpp"

namespace runet {

enum class ArchKind { runet, unet };

inline const char* arch_name(ArchKind a) {
  return a == ArchKind::runet ? "runet" : "unet";
}

/// Declarative encoder-decoder description. Level 1 is full resolution;
/// channels double per level. Levels listed in clstm_levels carry a
/// convolutional LSTM as the block's second layer (encoder and decoder
/// side, bottleneck counts as the deepest level).
struct NetworkSpec {
  std::size_t depth = 5;
  std::size_t base_filters = 32;  // half of the classic U-net width
  std::vector<std::size_t> clstm_levels = {1, 3, 5};
  std::size_t input_h = 256, input_w = 256;
  std::size_t in_channels = 1;
  double dropout_rate = 0.3;
  PeepholeMode peephole_mode = PeepholeMode::full;

  std::size_t filters_at(std::size_t level) const {
    return base_filters << (level - 1);
  }

  bool level_has_clstm(std::size_t level) const {
    return std::find(clstm_levels.begin(), clstm_levels.end(), level) !=
           clstm_levels.end();
  }

  std::size_t level_h(std::size_t level) const {
    return input_h >> (level - 1);
  }
  std::size_t level_w(std::size_t level) const {
    return input_w >> (level - 1);
  }

  void validate() const {
    if (depth < 1) throw ConfigError("network depth must be >= 1");
    if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
    const std::size_t div = std::size_t(1) << (depth - 1);
    if (input_h % div || input_w % div)
      throw ConfigError("input size " + std::to_string(input_h) + "x" +
                        std::to_string(input_w) + " must be divisible by 2^" +
                        std::to_string(depth - 1) + " = " +
                        std::to_string(div));
    for (std::size_t lvl : clstm_levels)
      if (lvl < 1 || lvl > depth)
        throw ConfigError("clstm level " + std::to_string(lvl) +
                          " outside [1," + std::to_string(depth) + "]");
  }

  /// Odd-numbered levels 1,3,5,... clipped to depth.
  static std::vector<std::size_t> default_clstm_levels(std::size_t depth) {
    std::vector<std::size_t> lv;
    for (std::size_t l = 1; l <= depth; l += 2) lv.push_back(l);
    return lv;
  }
};

template <class T>
struct ConvParamT {
  VarT<T> w, b;
};

template <class T>
struct BlockT {
  ConvParamT<T> conv1;
  bool has_clstm = false;
  ConvParamT<T> conv2;      // used when !has_clstm
  ClstmWeightsT<T> clstm;   // used when has_clstm
};

template <class T>
class ModelT {
 public:
  NetworkSpec spec;
  ArchKind arch = ArchKind::runet;
  std::vector<BlockT<T>> enc;       // levels 1..depth (last is bottleneck)
  std::vector<ConvParamT<T>> ups;   // ups[l-1] upsamples into level l
  std::vector<BlockT<T>> dec;       // dec[l-1] is decoder block at level l
  ConvParamT<T> head;               // 1x1 conv to a single channel
  std::vector<VarT<T>> params;      // declaration order (checkpoint order)

  std::size_t clstm_count() const {
    std::size_t n = 0;
    for (const auto& b : enc) n += b.has_clstm;
    for (const auto& b : dec) n += b.has_clstm;
    return n;
  }
};

using Model = ModelT<float>;

template <class T>
std::size_t count_parameters(const ModelT<T>& m) {
  std::size_t n = 0;
  for (const auto& p : m.params) n += p->value.numel();
  return n;
}

namespace detail {

template <class T>
ConvParamT<T> init_conv(std::size_t co, std::size_t ci, std::size_t k,
                        Rng& rng) {
  TensorT<T> w({co, ci, k, k});
  const double s = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
  for (std::size_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.uniform(-s, s));
  return {make_leaf<T>(std::move(w), true),
          make_leaf<T>(TensorT<T>({co}), true)};
}

template <class T>
void collect(std::vector<VarT<T>>& out, const ConvParamT<T>& c) {
  out.push_back(c.w);
  out.push_back(c.b);
}

template <class T>
BlockT<T> init_block(std::size_t in_ch, std::size_t ch, bool with_clstm,
                     std::size_t state_h, std::size_t state_w,
                     PeepholeMode mode, Rng& rng,
                     std::vector<VarT<T>>& params) {
  BlockT<T> b;
  b.conv1 = init_conv<T>(ch, in_ch, 3, rng);
  collect(params, b.conv1);
  b.has_clstm = with_clstm;
  if (with_clstm) {
    b.clstm = ClstmWeightsT<T>::init(ch, ch, state_h, state_w, mode, rng);
    for (auto& p : b.clstm.params()) params.push_back(p);
  } else {
    b.conv2 = init_conv<T>(ch, ch, 3, rng);
    collect(params, b.conv2);
  }
  return b;
}

}  // namespace detail

/// Deterministic construction from (spec, seed). U-net uses a plain second
/// convolution everywhere; RU-net places CLSTMs at spec.clstm_levels.
template <class T>
ModelT<T> build_model(const NetworkSpec& spec, ArchKind arch,
                      std::uint64_t seed) {
  spec.validate();
  ModelT<T> m;
  m.spec = spec;
  m.arch = arch;
  Rng rng(Rng::mix(seed, 0x6d6f64656cULL));

  const std::size_t d = spec.depth;
  std::size_t in_ch = spec.in_channels;
  for (std::size_t lvl = 1; lvl <= d; ++lvl) {
    const bool clstm = arch == ArchKind::runet && spec.level_has_clstm(lvl);
    m.enc.push_back(detail::init_block<T>(in_ch, spec.filters_at(lvl), clstm,
                                          spec.level_h(lvl), spec.level_w(lvl),
                                          spec.peephole_mode, rng, m.params));
    in_ch = spec.filters_at(lvl);
  }
  m.ups.resize(d > 0 ? d - 1 : 0);
  m.dec.resize(d > 0 ? d - 1 : 0);
  for (std::size_t lvl = d - 1; lvl >= 1; --lvl) {
    // transposed conv from level lvl+1 channels into level lvl channels
    m.ups[lvl - 1] =
        detail::init_conv<T>(spec.filters_at(lvl), spec.filters_at(lvl + 1), 3, rng);
    detail::collect(m.params, m.ups[lvl - 1]);
    const bool clstm = arch == ArchKind::runet && spec.level_has_clstm(lvl);
    m.dec[lvl - 1] = detail::init_block<T>(
        2 * spec.filters_at(lvl), spec.filters_at(lvl), clstm,
        spec.level_h(lvl), spec.level_w(lvl), spec.peephole_mode, rng,
        m.params);
    if (lvl == 1) break;
  }
  m.head = detail::init_conv<T>(1, spec.filters_at(1), 1, rng);
  detail::collect(m.params, m.head);
  return m;
}

template <class T>
ModelT<T> build_runet(const NetworkSpec& spec, std::uint64_t seed) {
  return build_model<T>(spec, ArchKind::runet, seed);
}

template <class T>
ModelT<T> build_unet(const NetworkSpec& spec, std::uint64_t seed) {
  return build_model<T>(spec, ArchKind::unet, seed);
}

/// Per-volume recurrent state: one cell state per CLSTM in forward
/// encounter order (encoder levels ascending, then decoder descending).
template <class T>
struct VolumeStateT {
  std::vector<CellStateT<T>> cells;
};

template <class T>
VolumeStateT<T> initial_state(const ModelT<T>& m) {
  VolumeStateT<T> st;
  const auto& spec = m.spec;
  for (std::size_t lvl = 1; lvl <= spec.depth; ++lvl)
    if (m.enc[lvl - 1].has_clstm)
      st.cells.push_back(zero_state<T>(spec.filters_at(lvl), spec.level_h(lvl),
                                       spec.level_w(lvl)));
  for (std::size_t lvl = spec.depth - 1; lvl >= 1 && spec.depth > 1; --lvl) {
    if (m.dec[lvl - 1].has_clstm)
      st.cells.push_back(zero_state<T>(spec.filters_at(lvl), spec.level_h(lvl),
                                       spec.level_w(lvl)));
    if (lvl == 1) break;
  }
  return st;
}

template <class T>
VolumeStateT<T> detach_volume_state(const VolumeStateT<T>& st) {
  VolumeStateT<T> out;
  out.cells.reserve(st.cells.size());
  for (const auto& c : st.cells) out.cells.push_back(detach_state(c));
  return out;
}

namespace detail {

template <class T>
VarT<T> run_block(const BlockT<T>& blk, VarT<T> x, VolumeStateT<T>& st,
                  std::size_t& cell_idx, double dropout_rate, bool training,
                  Rng& rng) {
  x = activation(conv2d(x, blk.conv1.w, blk.conv1.b), Act::relu);
  x = dropout(x, dropout_rate, training, rng);
  if (blk.has_clstm) {
    auto [next, gates] = clstm_step(x, st.cells[cell_idx], blk.clstm);
    st.cells[cell_idx] = next;  // carried state is the raw H_t / C_t pair
    ++cell_idx;
    x = activation(next.hidden, Act::relu);
  } else {
    x = activation(conv2d(x, blk.conv2.w, blk.conv2.b), Act::relu);
  }
  return dropout(x, dropout_rate, training, rng);
}

}  // namespace detail

/// One slice through the network, threading recurrent state. Returns the
/// sigmoid probability map [1,H,W].
template <class T>
VarT<T> forward_slice(const ModelT<T>& m, const VarT<T>& x,
                      VolumeStateT<T>& st, bool training, Rng& rng) {
  const auto& spec = m.spec;
  const auto& s = x->value.shape();
  if (s.size() != 3 || s[0] != spec.in_channels || s[1] != spec.input_h ||
      s[2] != spec.input_w)
    throw ShapeError("forward_slice: expected input [" +
                     std::to_string(spec.in_channels) + "," +
                     std::to_string(spec.input_h) + "," +
                     std::to_string(spec.input_w) + "]");
  std::size_t cell_idx = 0;
  std::vector<VarT<T>> skips;
  VarT<T> cur = x;
  for (std::size_t lvl = 1; lvl <= spec.depth; ++lvl) {
    cur = detail::run_block(m.enc[lvl - 1], cur, st, cell_idx,
                            spec.dropout_rate, training, rng);
    if (lvl < spec.depth) {
      skips.push_back(cur);
      cur = maxpool2d(cur).out;
    }
  }
  for (std::size_t lvl = spec.depth - 1; lvl >= 1 && spec.depth > 1; --lvl) {
    auto up = activation(
        conv_transpose2d(cur, m.ups[lvl - 1].w, m.ups[lvl - 1].b), Act::relu);
    up = dropout(up, spec.dropout_rate, training, rng);
    cur = concat_channels(skips[lvl - 1], up);  // encoder channels first
    cur = detail::run_block(m.dec[lvl - 1], cur, st, cell_idx,
                            spec.dropout_rate, training, rng);
    if (lvl == 1) break;
  }
  return activation(conv2d(cur, m.head.w, m.head.b, 1, Pad::same),
                    Act::sigmoid);
}

/// Inference/contract entry point: zero states at sequence start, states
/// thread across the entire volume, dropout only in training mode.
template <class T>
std::vector<TensorT<T>> forward_volume(const ModelT<T>& m,
                                       const std::vector<TensorT<T>>& slices,
                                       bool training, Rng& rng) {
  if (slices.empty())
    throw ParamError("forward_volume requires a non-empty slice sequence");
  std::vector<TensorT<T>> out;
  out.reserve(slices.size());
  VolumeStateT<T> st = initial_state(m);
  for (std::size_t t = 0; t < slices.size(); ++t) {
    if (slices[t].shape() != slices[0].shape())
      throw ShapeError("slice " + std::to_string(t) +
                       " changed shape mid-sequence");
    if (training) {
      auto y = forward_slice(m, make_leaf<T>(slices[t]), st, true, rng);
      out.push_back(y->value);
    } else {
      NoGradGuard ng;
      auto y = forward_slice(m, make_leaf<T>(slices[t]), st, false, rng);
      out.push_back(y->value);
    }
  }
  return out;
}

}  // namespace runet

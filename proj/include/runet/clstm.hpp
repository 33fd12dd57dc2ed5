#pragma once

#include <string>
#include <utility>
#include <vector>

#include "runet/autograd.hpp"
#include "runet/ops.hpp"
#include "runet/rng.hpp"

namespace runet {

enum class PeepholeMode { full, channel };

/// Hidden/cell pair threaded from one slice to the next.
template <class T>
struct CellStateT {
  VarT<T> hidden, cell;
};

template <class T>
CellStateT<T> zero_state(std::size_t channels, std::size_t h, std::size_t w) {
  return {make_leaf<T>(TensorT<T>({channels, h, w})),
          make_leaf<T>(TensorT<T>({channels, h, w}))};
}

template <class T>
CellStateT<T> detach_state(const CellStateT<T>& s) {
  return {detach(s.hidden), detach(s.cell)};
}

/// Convolutional LSTM weights: the dense gate matrices become 3x3
/// same-padded kernels; peepholes stay elementwise against the cell state,
/// either one weight per channel-and-position (full) or one per channel.
template <class T>
struct ClstmWeightsT {
  VarT<T> w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho;
  VarT<T> p_i, p_f, p_o;
  VarT<T> b_i, b_f, b_c, b_o;
  PeepholeMode peephole_mode = PeepholeMode::full;

  std::size_t hidden_channels() const { return w_hi->value.dim(0); }
  std::size_t in_channels() const { return w_xi->value.dim(1); }

  std::vector<VarT<T>> params() const {
    return {w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho,
            p_i,  p_f,  p_o,  b_i,  b_f,  b_c,  b_o};
  }

  /// Training initialization: kernels uniform(-s, s) with s = 1/sqrt(fan_in),
  /// forget bias +1, other biases and peepholes zero.
  static ClstmWeightsT init(std::size_t in_ch, std::size_t hidden_ch,
                            std::size_t state_h, std::size_t state_w,
                            PeepholeMode mode, Rng& rng) {
    auto kernel = [&](std::size_t co, std::size_t ci) {
      TensorT<T> k({co, ci, 3, 3});
      const double s = 1.0 / std::sqrt(static_cast<double>(ci) * 9.0);
      for (std::size_t i = 0; i < k.numel(); ++i)
        k[i] = static_cast<T>(rng.uniform(-s, s));
      return make_leaf<T>(std::move(k), true);
    };
    auto peep = [&]() {
      if (mode == PeepholeMode::channel)
        return make_leaf<T>(TensorT<T>({hidden_ch}), true);
      return make_leaf<T>(TensorT<T>({hidden_ch, state_h, state_w}), true);
    };
    auto bias = [&](T v) {
      return make_leaf<T>(TensorT<T>::full({hidden_ch}, v), true);
    };
    ClstmWeightsT w;
    w.peephole_mode = mode;
    w.w_xi = kernel(hidden_ch, in_ch); w.w_hi = kernel(hidden_ch, hidden_ch);
    w.w_xf = kernel(hidden_ch, in_ch); w.w_hf = kernel(hidden_ch, hidden_ch);
    w.w_xc = kernel(hidden_ch, in_ch); w.w_hc = kernel(hidden_ch, hidden_ch);
    w.w_xo = kernel(hidden_ch, in_ch); w.w_ho = kernel(hidden_ch, hidden_ch);
    w.p_i = peep(); w.p_f = peep(); w.p_o = peep();
    w.b_i = bias(T(0)); w.b_f = bias(T(1)); w.b_c = bias(T(0));
    w.b_o = bias(T(0));
    return w;
  }
};

template <class T>
struct ClstmGatesT {
  VarT<T> input_gate, forget_gate, output_gate, candidate;
};

namespace detail {

template <class T>
VarT<T> peephole_term(const VarT<T>& peep, const VarT<T>& cell,
                      PeepholeMode mode) {
  if (mode == PeepholeMode::channel) return channel_scale(cell, peep);
  return hadamard(peep, cell);
}

}  // namespace detail

/// One convolutional LSTM step. Gate order i, f, C, o, H; o peeps at the
/// updated cell state.
template <class T>
std::pair<CellStateT<T>, ClstmGatesT<T>> clstm_step(const VarT<T>& x,
                                                    const CellStateT<T>& prev,
                                                    const ClstmWeightsT<T>& w) {
  const auto& xs = x->value.shape();
  const auto& hs = prev.hidden->value.shape();
  if (xs.size() != 3)
    throw ShapeError("clstm_step input must be [C,H,W]");
  if (hs.size() != 3 || hs[1] != xs[1] || hs[2] != xs[2])
    throw ShapeError("clstm_step: state spatial dims " + std::to_string(hs[1]) +
                     "x" + std::to_string(hs[2]) + " do not match input " +
                     std::to_string(xs[1]) + "x" + std::to_string(xs[2]));
  expect_same_shape("clstm state", prev.hidden->value.shape(),
                    prev.cell->value.shape());

  const std::size_t ch = w.hidden_channels();
  auto zb = make_leaf<T>(TensorT<T>({ch}), false);

  auto gate_pre = [&](const VarT<T>& wx, const VarT<T>& wh, const VarT<T>& b) {
    return vadd(conv2d(x, wx, b), conv2d(prev.hidden, wh, zb));
  };

  ClstmGatesT<T> g;
  g.input_gate = activation(
      vadd(gate_pre(w.w_xi, w.w_hi, w.b_i),
           detail::peephole_term(w.p_i, prev.cell, w.peephole_mode)),
      Act::sigmoid);
  g.forget_gate = activation(
      vadd(gate_pre(w.w_xf, w.w_hf, w.b_f),
           detail::peephole_term(w.p_f, prev.cell, w.peephole_mode)),
      Act::sigmoid);
  g.candidate = activation(gate_pre(w.w_xc, w.w_hc, w.b_c), Act::tanh_fn);

  CellStateT<T> next;
  next.cell = vadd(hadamard(g.forget_gate, prev.cell),
                   hadamard(g.input_gate, g.candidate));
  g.output_gate = activation(
      vadd(gate_pre(w.w_xo, w.w_ho, w.b_o),
           detail::peephole_term(w.p_o, next.cell, w.peephole_mode)),
      Act::sigmoid);
  next.hidden = hadamard(g.output_gate, activation(next.cell, Act::tanh_fn));
  return {next, g};
}

template <class T>
struct RolloutT {
  std::vector<VarT<T>> hidden;  // H_t for every step
  CellStateT<T> final_state;
};

/// Threads state through the whole sequence; the graph this records supports
/// full BPTT over the rollout.
template <class T>
RolloutT<T> clstm_rollout(const std::vector<VarT<T>>& sequence,
                          const ClstmWeightsT<T>& w,
                          const CellStateT<T>& initial) {
  if (sequence.empty())
    throw ParamError("clstm_rollout requires a non-empty sequence");
  RolloutT<T> out;
  CellStateT<T> st = initial;
  for (const auto& x : sequence) {
    auto [next, gates] = clstm_step(x, st, w);
    out.hidden.push_back(next.hidden);
    st = next;
  }
  out.final_state = st;
  return out;
}

template <class T>
struct BatchedRolloutT {
  // one entry per slice batch; state entering each batch is value-carried
  // but gradient-detached
  std::vector<RolloutT<T>> batches;
  std::vector<CellStateT<T>> carried_in;  // detached incoming state per batch
};

/// Truncated-BPTT rollout: state values carry across contiguous batches,
/// gradients stop at batch boundaries.
template <class T>
BatchedRolloutT<T> clstm_rollout_batched(const std::vector<VarT<T>>& sequence,
                                         const ClstmWeightsT<T>& w,
                                         const CellStateT<T>& initial,
                                         std::size_t batch_size) {
  if (batch_size == 0) throw ParamError("batch_size must be positive");
  if (sequence.size() % batch_size != 0)
    throw ConfigError("sequence length " + std::to_string(sequence.size()) +
                      " is not divisible by batch size " +
                      std::to_string(batch_size));
  BatchedRolloutT<T> out;
  CellStateT<T> st = initial;
  for (std::size_t start = 0; start < sequence.size(); start += batch_size) {
    CellStateT<T> entry = detach_state(st);
    out.carried_in.push_back(entry);
    std::vector<VarT<T>> chunk(sequence.begin() + start,
                               sequence.begin() + start + batch_size);
    out.batches.push_back(clstm_rollout(chunk, w, entry));
    st = out.batches.back().final_state;
  }
  return out;
}

}  // namespace runet

#pragma once

#include <string>
#include <utility>

#include "runet/ops.hpp"
#include "runet/rng.hpp"
#include "runet/tensor.hpp"

namespace runet {

// Dense peephole LSTM cell. This is the reference cell the convolutional
// variant must reduce to at 1x1 spatial extent; it is kept free of the
// autograd machinery on purpose.

template <class T>
struct LstmWeightsT {
  // dense gate matrices, [hidden, input] / [hidden, hidden]
  TensorT<T> w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho;
  TensorT<T> p_i, p_f, p_o;          // peephole vectors, [hidden]
  TensorT<T> b_i, b_f, b_c, b_o;     // [hidden]

  std::size_t hidden() const { return w_xi.dim(0); }
  std::size_t input() const { return w_xi.dim(1); }

  void validate() const {
    const std::size_t nh = hidden(), nx = input();
    auto mat = [&](const TensorT<T>& m, std::size_t cols, const char* name) {
      if (m.rank() != 2 || m.dim(0) != nh || m.dim(1) != cols)
        throw ShapeError(std::string("lstm weights: ") + name +
                         " must be [" + std::to_string(nh) + "," +
                         std::to_string(cols) + "]");
    };
    auto vec = [&](const TensorT<T>& v, const char* name) {
      if (v.rank() != 1 || v.dim(0) != nh)
        throw ShapeError(std::string("lstm weights: ") + name +
                         " must be [" + std::to_string(nh) + "]");
    };
    mat(w_xi, nx, "w_xi"); mat(w_xf, nx, "w_xf");
    mat(w_xc, nx, "w_xc"); mat(w_xo, nx, "w_xo");
    mat(w_hi, nh, "w_hi"); mat(w_hf, nh, "w_hf");
    mat(w_hc, nh, "w_hc"); mat(w_ho, nh, "w_ho");
    vec(p_i, "p_i"); vec(p_f, "p_f"); vec(p_o, "p_o");
    vec(b_i, "b_i"); vec(b_f, "b_f"); vec(b_c, "b_c"); vec(b_o, "b_o");
  }

  static LstmWeightsT random(std::size_t input, std::size_t hidden, Rng& rng,
                             double scale = 0.5) {
    auto mat = [&](std::size_t r, std::size_t c) {
      TensorT<T> m({r, c});
      for (std::size_t i = 0; i < m.numel(); ++i)
        m[i] = static_cast<T>(rng.uniform(-scale, scale));
      return m;
    };
    auto vec = [&](std::size_t n) {
      TensorT<T> v({n});
      for (std::size_t i = 0; i < n; ++i)
        v[i] = static_cast<T>(rng.uniform(-scale, scale));
      return v;
    };
    LstmWeightsT w;
    w.w_xi = mat(hidden, input); w.w_hi = mat(hidden, hidden);
    w.w_xf = mat(hidden, input); w.w_hf = mat(hidden, hidden);
    w.w_xc = mat(hidden, input); w.w_hc = mat(hidden, hidden);
    w.w_xo = mat(hidden, input); w.w_ho = mat(hidden, hidden);
    w.p_i = vec(hidden); w.p_f = vec(hidden); w.p_o = vec(hidden);
    w.b_i = vec(hidden); w.b_f = vec(hidden); w.b_c = vec(hidden);
    w.b_o = vec(hidden);
    return w;
  }
};

template <class T>
struct LstmStateT {
  TensorT<T> hidden, cell;
};

template <class T>
struct LstmGatesT {
  TensorT<T> input_gate, forget_gate, output_gate, candidate;
};

namespace detail {

/// out[j] = b[j] + sum_i w[j,i] x[i], accumulated in double.
template <class T>
TensorT<T> matvec_bias(const TensorT<T>& w, const TensorT<T>& x,
                       const TensorT<T>& b) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (x.dim(0) != cols)
    throw ShapeError("matvec: vector length " + std::to_string(x.dim(0)) +
                     " does not match matrix columns " + std::to_string(cols));
  TensorT<T> out({rows});
  for (std::size_t j = 0; j < rows; ++j) {
    double acc = static_cast<double>(b[j]);
    const T* row = w.data() + j * cols;
    for (std::size_t i = 0; i < cols; ++i)
      acc += static_cast<double>(row[i]) * static_cast<double>(x[i]);
    out[j] = static_cast<T>(acc);
  }
  return out;
}

}  // namespace detail

/// One step of the peephole LSTM: i and f peep at the previous cell state,
/// o peeps at the freshly updated one, h = o . tanh(c).
template <class T>
std::pair<LstmStateT<T>, LstmGatesT<T>> lstm_step(const TensorT<T>& x,
                                                  const LstmStateT<T>& prev,
                                                  const LstmWeightsT<T>& w) {
  w.validate();
  const std::size_t nh = w.hidden();
  if (prev.hidden.dim(0) != nh || prev.cell.dim(0) != nh)
    throw ShapeError("lstm_step: state size does not match hidden size " +
                     std::to_string(nh));

  auto gate = [&](const TensorT<T>& wx, const TensorT<T>& wh,
                  const TensorT<T>& peep, const TensorT<T>& peek_cell,
                  const TensorT<T>& b) {
    TensorT<T> a = detail::matvec_bias(wx, x, b);
    TensorT<T> hh = detail::matvec_bias(wh, prev.hidden, TensorT<T>({nh}));
    for (std::size_t j = 0; j < nh; ++j)
      a[j] = a[j] + hh[j] + peep[j] * peek_cell[j];
    for (std::size_t j = 0; j < nh; ++j) a[j] = sigmoid_scalar(a[j]);
    return a;
  };

  LstmGatesT<T> g;
  g.input_gate = gate(w.w_xi, w.w_hi, w.p_i, prev.cell, w.b_i);
  g.forget_gate = gate(w.w_xf, w.w_hf, w.p_f, prev.cell, w.b_f);

  TensorT<T> cand = detail::matvec_bias(w.w_xc, x, w.b_c);
  {
    TensorT<T> hh = detail::matvec_bias(w.w_hc, prev.hidden, TensorT<T>({nh}));
    for (std::size_t j = 0; j < nh; ++j) cand[j] = std::tanh(cand[j] + hh[j]);
  }
  g.candidate = cand;

  LstmStateT<T> next;
  next.cell = TensorT<T>({nh});
  for (std::size_t j = 0; j < nh; ++j)
    next.cell[j] =
        g.forget_gate[j] * prev.cell[j] + g.input_gate[j] * cand[j];

  g.output_gate = gate(w.w_xo, w.w_ho, w.p_o, next.cell, w.b_o);

  next.hidden = TensorT<T>({nh});
  for (std::size_t j = 0; j < nh; ++j)
    next.hidden[j] = g.output_gate[j] * std::tanh(next.cell[j]);

  return {next, g};
}

template <class T>
LstmStateT<T> lstm_zero_state(std::size_t hidden) {
  return {TensorT<T>({hidden}), TensorT<T>({hidden})};
}

}  // namespace runet

#include <catch2/catch_amalgamated.hpp>

#include "runet/clstm.hpp"
#include "runet/grad_check.hpp"
#include "runet/lstm.hpp"
#include "runet/verify.hpp"

using namespace runet;
using D = double;

namespace {

TensorT<D> rand_tensor(std::vector<std::size_t> shape, Rng& rng,
                       double lo = -1, double hi = 1) {
  TensorT<D> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Direct transcription of the dense peephole LSTM equations, written
/// independently of lstm_step (per-element, no matvec helper).
void lstm_reference(const TensorT<D>& x, const TensorT<D>& h0,
                    const TensorT<D>& c0, const LstmWeightsT<D>& w,
                    TensorT<D>& h1, TensorT<D>& c1) {
  const std::size_t nh = w.hidden(), nx = w.input();
  auto dot = [&](const TensorT<D>& m, const TensorT<D>& v, std::size_t row,
                 std::size_t cols) {
    double acc = 0;
    for (std::size_t i = 0; i < cols; ++i) acc += m[row * cols + i] * v[i];
    return acc;
  };
  h1 = TensorT<D>({nh});
  c1 = TensorT<D>({nh});
  for (std::size_t j = 0; j < nh; ++j) {
    const double i_t = 1.0 / (1.0 + std::exp(-(dot(w.w_xi, x, j, nx) +
                                               dot(w.w_hi, h0, j, nh) +
                                               w.p_i[j] * c0[j] + w.b_i[j])));
    const double f_t = 1.0 / (1.0 + std::exp(-(dot(w.w_xf, x, j, nx) +
                                               dot(w.w_hf, h0, j, nh) +
                                               w.p_f[j] * c0[j] + w.b_f[j])));
    const double cand = std::tanh(dot(w.w_xc, x, j, nx) +
                                  dot(w.w_hc, h0, j, nh) + w.b_c[j]);
    const double c_t = f_t * c0[j] + i_t * cand;
    const double o_t = 1.0 / (1.0 + std::exp(-(dot(w.w_xo, x, j, nx) +
                                               dot(w.w_ho, h0, j, nh) +
                                               w.p_o[j] * c_t + w.b_o[j])));
    c1[j] = c_t;
    h1[j] = o_t * std::tanh(c_t);
  }
}

ClstmWeightsT<D> random_clstm(std::size_t in_ch, std::size_t hid,
                              std::size_t h, std::size_t w, Rng& rng,
                              double scale = 0.4) {
  auto cw = ClstmWeightsT<D>::init(in_ch, hid, h, w, PeepholeMode::full, rng);
  for (auto& p : cw.params())
    for (std::size_t i = 0; i < p->value.numel(); ++i)
      p->value[i] = rng.uniform(-scale, scale);
  return cw;
}

}  // namespace

TEST_CASE("lstm_step: zero weights give i=f=o=0.5, c=h=0") {
  LstmWeightsT<D> w;
  const std::size_t nh = 3, nx = 2;
  w.w_xi = TensorT<D>({nh, nx}); w.w_hi = TensorT<D>({nh, nh});
  w.w_xf = TensorT<D>({nh, nx}); w.w_hf = TensorT<D>({nh, nh});
  w.w_xc = TensorT<D>({nh, nx}); w.w_hc = TensorT<D>({nh, nh});
  w.w_xo = TensorT<D>({nh, nx}); w.w_ho = TensorT<D>({nh, nh});
  w.p_i = TensorT<D>({nh}); w.p_f = TensorT<D>({nh}); w.p_o = TensorT<D>({nh});
  w.b_i = TensorT<D>({nh}); w.b_f = TensorT<D>({nh});
  w.b_c = TensorT<D>({nh}); w.b_o = TensorT<D>({nh});

  Rng rng(7);
  auto x = rand_tensor({nx}, rng);
  auto [next, gates] = lstm_step(x, lstm_zero_state<D>(nh), w);
  for (std::size_t j = 0; j < nh; ++j) {
    CHECK(gates.input_gate[j] == 0.5);
    CHECK(gates.forget_gate[j] == 0.5);
    CHECK(gates.output_gate[j] == 0.5);
    CHECK(next.cell[j] == 0.0);
    CHECK(next.hidden[j] == 0.0);
  }

  // saturated forget gate passes the previous cell through
  w.b_f = TensorT<D>::full({nh}, 20.0);
  LstmStateT<D> prev{TensorT<D>({nh}), TensorT<D>({nh})};
  prev.cell[0] = 0.7; prev.cell[1] = -0.4; prev.cell[2] = 1.3;
  auto [next2, gates2] = lstm_step(x, prev, w);
  for (std::size_t j = 0; j < nh; ++j)
    CHECK(next2.cell[j] == Catch::Approx(prev.cell[j]).margin(1e-6));
}

TEST_CASE("lstm_step matches an independent transcription within 1e-12") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t nx = 1 + rng.below(5), nh = 4;
    auto w = LstmWeightsT<D>::random(nx, nh, rng);
    auto x = rand_tensor({nx}, rng);
    LstmStateT<D> prev{rand_tensor({nh}, rng), rand_tensor({nh}, rng)};
    auto [next, gates] = lstm_step(x, prev, w);
    TensorT<D> h_ref, c_ref;
    lstm_reference(x, prev.hidden, prev.cell, w, h_ref, c_ref);
    for (std::size_t j = 0; j < nh; ++j) {
      CHECK(std::fabs(next.hidden[j] - h_ref[j]) <= 1e-12);
      CHECK(std::fabs(next.cell[j] - c_ref[j]) <= 1e-12);
    }
  }
}

TEST_CASE("lstm gates stay in their open intervals") {
  Rng rng(13);
  for (int rep = 0; rep < 10; ++rep) {
    auto w = LstmWeightsT<D>::random(3, 5, rng, 2.0);
    auto x = rand_tensor({3}, rng, -3, 3);
    LstmStateT<D> prev{rand_tensor({5}, rng), rand_tensor({5}, rng)};
    auto [next, g] = lstm_step(x, prev, w);
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(g.input_gate[j] > 0.0); CHECK(g.input_gate[j] < 1.0);
      CHECK(g.forget_gate[j] > 0.0); CHECK(g.forget_gate[j] < 1.0);
      CHECK(g.output_gate[j] > 0.0); CHECK(g.output_gate[j] < 1.0);
      CHECK(g.candidate[j] > -1.0); CHECK(g.candidate[j] < 1.0);
    }
  }
}

TEST_CASE("clstm_step: all-zero weights give zero state") {
  Rng rng(17);
  auto cw = ClstmWeightsT<D>::init(2, 3, 4, 4, PeepholeMode::full, rng);
  for (auto& p : cw.params()) p->value.fill(0.0);
  auto x = make_leaf<D>(rand_tensor({2, 4, 4}, rng));
  auto [next, gates] = clstm_step(x, zero_state<D>(3, 4, 4), cw);
  for (std::size_t i = 0; i < next.hidden->value.numel(); ++i) {
    CHECK(next.hidden->value[i] == 0.0);
    CHECK(next.cell->value[i] == 0.0);
  }
}

TEST_CASE("clstm_step rejects spatial mismatch") {
  Rng rng(19);
  auto cw = random_clstm(2, 3, 4, 4, rng);
  auto x = make_leaf<D>(rand_tensor({2, 4, 6}, rng));
  CHECK_THROWS_AS(clstm_step(x, zero_state<D>(3, 4, 4), cw), ShapeError);
}

TEST_CASE("clstm at 1x1 with center-tap kernels reduces to lstm") {
  Rng rng(23);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t nx = 1 + rng.below(4), nh = 1 + rng.below(5);
    auto w = LstmWeightsT<D>::random(nx, nh, rng);
    auto x = rand_tensor({nx}, rng);
    LstmStateT<D> prev{rand_tensor({nh}, rng), rand_tensor({nh}, rng)};
    auto [dense_next, dense_gates] = lstm_step(x, prev, w);

    auto cw = oracle::clstm_from_lstm(w);
    TensorT<D> xt({nx, 1, 1});
    for (std::size_t i = 0; i < nx; ++i) xt[i] = x[i];
    CellStateT<D> cprev = zero_state<D>(nh, 1, 1);
    for (std::size_t i = 0; i < nh; ++i) {
      cprev.hidden->value[i] = prev.hidden[i];
      cprev.cell->value[i] = prev.cell[i];
    }
    NoGradGuard ng;
    auto [cnext, cgates] = clstm_step(make_leaf<D>(xt), cprev, cw);
    for (std::size_t i = 0; i < nh; ++i) {
      worst = std::max(worst,
                       std::fabs(cnext.hidden->value[i] - dense_next.hidden[i]));
      worst = std::max(worst,
                       std::fabs(cnext.cell->value[i] - dense_next.cell[i]));
      worst = std::max(worst, std::fabs(cgates.input_gate->value[i] -
                                        dense_gates.input_gate[i]));
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("clstm interior translation equivariance for constant input") {
  // constant spatial input + translation-invariant (zero) state + shared
  // kernels: interior outputs must be spatially constant
  Rng rng(29);
  auto cw = ClstmWeightsT<D>::init(2, 3, 8, 8, PeepholeMode::full, rng);
  // kernels random (already), peepholes constant per channel, biases as-is
  for (auto p : {cw.p_i, cw.p_f, cw.p_o})
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 64; ++i)
        p->value[c * 64 + i] = 0.1 * static_cast<double>(c + 1);
  TensorT<D> x({2, 8, 8});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 64; ++i)
      x[c * 64 + i] = c == 0 ? 0.35 : -0.6;
  NoGradGuard ng;
  auto [next, gates] = clstm_step(make_leaf<D>(x), zero_state<D>(3, 8, 8), cw);
  for (std::size_t c = 0; c < 3; ++c) {
    const double ref = next.hidden->value[(c * 8 + 2) * 8 + 2];
    for (std::size_t i = 2; i < 6; ++i)
      for (std::size_t j = 2; j < 6; ++j)
        CHECK(std::fabs(next.hidden->value[(c * 8 + i) * 8 + j] - ref) <=
              1e-10);
  }
}

TEST_CASE("clstm gates stay in open intervals") {
  Rng rng(31);
  auto cw = random_clstm(2, 3, 4, 4, rng, 1.5);
  auto x = make_leaf<D>(rand_tensor({2, 4, 4}, rng, -2, 2));
  CellStateT<D> st{make_leaf<D>(rand_tensor({3, 4, 4}, rng)),
                   make_leaf<D>(rand_tensor({3, 4, 4}, rng))};
  NoGradGuard ng;
  auto [next, g] = clstm_step(x, st, cw);
  for (std::size_t i = 0; i < g.input_gate->value.numel(); ++i) {
    CHECK(g.input_gate->value[i] > 0.0); CHECK(g.input_gate->value[i] < 1.0);
    CHECK(g.forget_gate->value[i] > 0.0); CHECK(g.forget_gate->value[i] < 1.0);
    CHECK(g.output_gate->value[i] > 0.0); CHECK(g.output_gate->value[i] < 1.0);
    CHECK(g.candidate->value[i] > -1.0); CHECK(g.candidate->value[i] < 1.0);
  }
}

TEST_CASE("rollout: length-1 equals a single step; zero weights give zeros") {
  Rng rng(37);
  auto cw = random_clstm(1, 2, 4, 4, rng);
  auto x = make_leaf<D>(rand_tensor({1, 4, 4}, rng));
  NoGradGuard ng;
  auto roll = clstm_rollout<D>({x}, cw, zero_state<D>(2, 4, 4));
  auto [next, g] = clstm_step(x, zero_state<D>(2, 4, 4), cw);
  CHECK(roll.hidden.size() == 1);
  CHECK(roll.hidden[0]->value == next.hidden->value);

  for (auto& p : cw.params()) p->value.fill(0.0);
  auto roll0 = clstm_rollout<D>({x, x, x}, cw, zero_state<D>(2, 4, 4));
  for (const auto& h : roll0.hidden)
    for (std::size_t i = 0; i < h->value.numel(); ++i)
      CHECK(h->value[i] == 0.0);

  CHECK_THROWS_AS(clstm_rollout<D>({}, cw, zero_state<D>(2, 4, 4)),
                  ParamError);
}

TEST_CASE("zero initial state: first output depends only on X1 and weights") {
  Rng rng(41);
  auto cw = random_clstm(1, 2, 4, 4, rng);
  auto x1 = make_leaf<D>(rand_tensor({1, 4, 4}, rng));
  auto other_a = make_leaf<D>(rand_tensor({1, 4, 4}, rng));
  auto other_b = make_leaf<D>(rand_tensor({1, 4, 4}, rng));
  NoGradGuard ng;
  auto ra = clstm_rollout<D>({x1, other_a}, cw, zero_state<D>(2, 4, 4));
  auto rb = clstm_rollout<D>({x1, other_b}, cw, zero_state<D>(2, 4, 4));
  CHECK(ra.hidden[0]->value == rb.hidden[0]->value);
}

TEST_CASE("rollout gradients match finite differences (length 3)") {
  Rng rng(43);
  auto cw = random_clstm(1, 2, 4, 4, rng);
  std::vector<TensorT<D>> slices = {rand_tensor({1, 4, 4}, rng),
                                    rand_tensor({1, 4, 4}, rng),
                                    rand_tensor({1, 4, 4}, rng)};
  std::vector<TensorT<D>> points = slices;
  for (auto& p : cw.params()) points.push_back(p->value);
  const double err = grad_check(
      [&cw](const std::vector<VarT<D>>& in) {
        ClstmWeightsT<D> w = cw;
        w.w_xi = in[3]; w.w_hi = in[4]; w.w_xf = in[5]; w.w_hf = in[6];
        w.w_xc = in[7]; w.w_hc = in[8]; w.w_xo = in[9]; w.w_ho = in[10];
        w.p_i = in[11]; w.p_f = in[12]; w.p_o = in[13];
        w.b_i = in[14]; w.b_f = in[15]; w.b_c = in[16]; w.b_o = in[17];
        auto roll = clstm_rollout<D>({in[0], in[1], in[2]}, w,
                                     zero_state<D>(2, 4, 4));
        VarT<D> loss;
        for (const auto& h : roll.hidden) {
          auto term = vsum(hadamard(h, h));
          loss = loss ? vadd(loss, term) : term;
        }
        return loss;
      },
      points);
  CHECK(err < 1e-4);
}

TEST_CASE("truncated BPTT: single batch equals full BPTT") {
  Rng rng(47);
  auto cw = random_clstm(1, 2, 4, 4, rng);
  std::vector<VarT<D>> seq;
  for (int t = 0; t < 4; ++t)
    seq.push_back(make_leaf<D>(rand_tensor({1, 4, 4}, rng)));

  auto loss_of = [&](const std::vector<VarT<D>>& hidden) {
    VarT<D> loss;
    for (const auto& h : hidden) {
      auto term = vsum(hadamard(h, h));
      loss = loss ? vadd(loss, term) : term;
    }
    return loss;
  };

  auto full = clstm_rollout<D>(seq, cw, zero_state<D>(2, 4, 4));
  backward(loss_of(full.hidden));
  std::vector<TensorT<D>> full_grads;
  for (auto& p : cw.params()) {
    p->ensure_grad();
    full_grads.push_back(p->grad);
    p->zero_grad();
  }

  auto batched = clstm_rollout_batched<D>(seq, cw, zero_state<D>(2, 4, 4), 4);
  REQUIRE(batched.batches.size() == 1);
  backward(loss_of(batched.batches[0].hidden));
  auto params = cw.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k]->ensure_grad();
    for (std::size_t i = 0; i < full_grads[k].numel(); ++i)
      CHECK(params[k]->grad[i] == full_grads[k][i]);
    params[k]->zero_grad();
  }
}

TEST_CASE("truncated BPTT: batch-2 loss sends no gradient into batch 1") {
  Rng rng(53);
  auto cw = random_clstm(1, 2, 4, 4, rng);
  std::vector<VarT<D>> seq;
  for (int t = 0; t < 4; ++t)
    seq.push_back(make_leaf<D>(rand_tensor({1, 4, 4}, rng), true));

  auto batched = clstm_rollout_batched<D>(seq, cw, zero_state<D>(2, 4, 4), 2);
  REQUIRE(batched.batches.size() == 2);
  VarT<D> loss;
  for (const auto& h : batched.batches[1].hidden) {
    auto term = vsum(hadamard(h, h));
    loss = loss ? vadd(loss, term) : term;
  }
  backward(loss);
  // batch-1 inputs receive exactly zero gradient
  for (int t = 0; t < 2; ++t) {
    seq[t]->ensure_grad();
    for (std::size_t i = 0; i < seq[t]->grad.numel(); ++i)
      CHECK(seq[t]->grad[i] == 0.0);
  }
  // batch-2 inputs receive some gradient
  double sum = 0.0;
  for (int t = 2; t < 4; ++t) {
    seq[t]->ensure_grad();
    for (std::size_t i = 0; i < seq[t]->grad.numel(); ++i)
      sum += std::fabs(seq[t]->grad[i]);
  }
  CHECK(sum > 0.0);
}

TEST_CASE("truncated BPTT: carried state values match the full rollout") {
  Rng rng(59);
  auto cw = random_clstm(1, 2, 4, 4, rng);
  std::vector<VarT<D>> seq;
  for (int t = 0; t < 6; ++t)
    seq.push_back(make_leaf<D>(rand_tensor({1, 4, 4}, rng)));
  NoGradGuard ng;
  auto full = clstm_rollout<D>(seq, cw, zero_state<D>(2, 4, 4));
  auto batched = clstm_rollout_batched<D>(seq, cw, zero_state<D>(2, 4, 4), 2);
  std::size_t t = 0;
  for (const auto& b : batched.batches)
    for (const auto& h : b.hidden) {
      CHECK(h->value == full.hidden[t]->value);  // bit-for-bit
      ++t;
    }
  CHECK(batched.batches.back().final_state.cell->value ==
        full.final_state.cell->value);
}

#include <catch2/catch_amalgamated.hpp>

#include "runet/grad_check.hpp"
#include "runet/loss.hpp"
#include "runet/ops.hpp"
#include "runet/rng.hpp"

using namespace runet;
using D = double;

namespace {

TensorT<D> rand_tensor(std::vector<std::size_t> shape, Rng& rng,
                       double lo = -1, double hi = 1) {
  TensorT<D> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("grad_check on sum(x^2) is tiny") {
  Rng rng(101);
  auto x = rand_tensor({3, 5, 5}, rng);
  const double err = grad_check(
      [](const std::vector<VarT<D>>& in) {
        return vsum(hadamard(in[0], in[0]));
      },
      {x});
  CHECK(err < 1e-6);
}

TEST_CASE("backward accumulates across reuse") {
  // f = sum(x * x) + sum(x): grad = 2x + 1
  Rng rng(103);
  auto xt = rand_tensor({4}, rng);
  auto x = make_leaf<D>(xt, true);
  auto f = vadd(vsum(hadamard(x, x)), vsum(x));
  backward(f);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(x->grad[i] == Catch::Approx(2 * xt[i] + 1).epsilon(1e-12));
}

TEST_CASE("no-grad mode records nothing") {
  Rng rng(104);
  auto x = make_leaf<D>(rand_tensor({4}, rng), true);
  NoGradGuard ng;
  auto y = vsum(hadamard(x, x));
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
}

TEST_CASE("detach stops gradient flow") {
  Rng rng(105);
  auto xt = rand_tensor({4}, rng);
  auto x = make_leaf<D>(xt, true);
  auto mid = hadamard(x, x);
  auto cut = detach(mid);
  auto f = vsum(hadamard(cut, x));
  backward(f);
  // only the direct x factor contributes: grad = x^2 (not 3x^2)
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(x->grad[i] == Catch::Approx(xt[i] * xt[i]).epsilon(1e-12));
}

TEST_CASE("conv2d gradients vs finite differences") {
  Rng rng(107);
  auto x = rand_tensor({2, 6, 6}, rng);
  auto w = rand_tensor({3, 2, 3, 3}, rng);
  auto b = rand_tensor({3}, rng);
  for (int stride : {1, 2}) {
    const double err = grad_check(
        [stride](const std::vector<VarT<D>>& in) {
          auto y = conv2d(in[0], in[1], in[2], stride, Pad::same);
          return vsum(hadamard(y, y));
        },
        {x, w, b});
    CHECK(err < 1e-4);
  }
  const double verr = grad_check(
      [](const std::vector<VarT<D>>& in) {
        auto y = conv2d(in[0], in[1], in[2], 1, Pad::valid);
        return vsum(hadamard(y, y));
      },
      {x, w, b});
  CHECK(verr < 1e-4);
}

TEST_CASE("conv_transpose2d gradients vs finite differences") {
  Rng rng(109);
  auto x = rand_tensor({3, 4, 4}, rng);
  auto w = rand_tensor({2, 3, 3, 3}, rng);
  auto b = rand_tensor({2}, rng);
  const double err = grad_check(
      [](const std::vector<VarT<D>>& in) {
        auto y = conv_transpose2d(in[0], in[1], in[2]);
        return vsum(hadamard(y, y));
      },
      {x, w, b});
  CHECK(err < 1e-4);
}

TEST_CASE("maxpool/activation/concat/channel_scale gradients") {
  Rng rng(113);
  auto x = rand_tensor({2, 6, 6}, rng);
  CHECK(grad_check(
            [](const std::vector<VarT<D>>& in) {
              auto y = maxpool2d(in[0]).out;
              return vsum(hadamard(y, y));
            },
            {x}) < 1e-4);
  for (auto kind : {Act::sigmoid, Act::tanh_fn, Act::relu}) {
    CHECK(grad_check(
              [kind](const std::vector<VarT<D>>& in) {
                auto y = activation(in[0], kind);
                return vsum(hadamard(y, y));
              },
              {x}) < 1e-4);
  }
  auto x2 = rand_tensor({3, 6, 6}, rng);
  CHECK(grad_check(
            [](const std::vector<VarT<D>>& in) {
              auto y = concat_channels(in[0], in[1]);
              return vsum(hadamard(y, y));
            },
            {x, x2}) < 1e-4);
  auto s = rand_tensor({2}, rng);
  CHECK(grad_check(
            [](const std::vector<VarT<D>>& in) {
              auto y = channel_scale(in[0], in[1]);
              return vsum(hadamard(y, y));
            },
            {x, s}) < 1e-4);
}

TEST_CASE("hadamard gradient vs finite differences (both inputs)") {
  Rng rng(127);
  auto a = rand_tensor({3, 4, 4}, rng);
  auto b = rand_tensor({3, 4, 4}, rng);
  const double err = grad_check(
      [](const std::vector<VarT<D>>& in) {
        auto y = hadamard(in[0], in[1]);
        return vsum(hadamard(y, y));
      },
      {a, b});
  CHECK(err < 1e-5);
}

TEST_CASE("dropout gradient with a fixed mask") {
  Rng rng(131);
  auto x = rand_tensor({2, 5, 5}, rng);
  const double err = grad_check(
      [](const std::vector<VarT<D>>& in) {
        Rng mask_rng(777);
        auto y = dropout(in[0], 0.3, true, mask_rng);
        return vsum(hadamard(y, y));
      },
      {x});
  CHECK(err < 1e-4);
}

TEST_CASE("concat gradient split recovers each side") {
  Rng rng(137);
  auto at = rand_tensor({2, 3, 3}, rng);
  auto bt = rand_tensor({1, 3, 3}, rng);
  auto a = make_leaf<D>(at, true);
  auto b = make_leaf<D>(bt, true);
  auto y = concat_channels(a, b);
  backward(vsum(hadamard(y, y)));
  for (std::size_t i = 0; i < at.numel(); ++i)
    CHECK(a->grad[i] == Catch::Approx(2 * at[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < bt.numel(); ++i)
    CHECK(b->grad[i] == Catch::Approx(2 * bt[i]).epsilon(1e-12));
}

TEST_CASE("dice loss: fixed values and gradient") {
  // |A| = |B| = 2, overlap 1, hard predictions -> loss 0.5
  TensorT<D> p({1, 2, 2}, {1, 1, 0, 0});
  TensorT<D> g({1, 2, 2}, {0, 1, 1, 0});
  TensorT<D> m = TensorT<D>::full({1, 2, 2}, 1);
  auto loss = dice_loss_masked(make_leaf<D>(p), make_leaf<D>(g),
                               make_leaf<D>(m));
  CHECK(loss->value[0] == Catch::Approx(0.5).margin(1e-5));

  // pred == target -> ~0; disjoint -> ~1
  auto same = dice_loss_masked(make_leaf<D>(g), make_leaf<D>(g),
                               make_leaf<D>(m));
  CHECK(same->value[0] == Catch::Approx(0.0).margin(1e-5));
  TensorT<D> far({1, 2, 2}, {1, 0, 0, 0});
  TensorT<D> tgt({1, 2, 2}, {0, 0, 0, 1});
  auto dis = dice_loss_masked(make_leaf<D>(far), make_leaf<D>(tgt),
                              make_leaf<D>(m));
  CHECK(dis->value[0] == Catch::Approx(1.0).margin(1e-5));

  Rng rng(139);
  auto pr = rand_tensor({1, 4, 4}, rng, 0.05, 0.95);
  TensorT<D> gt({1, 4, 4}), mask({1, 4, 4});
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    gt[i] = rng.uniform() < 0.4 ? 1 : 0;
    mask[i] = rng.uniform() < 0.75 ? 1 : 0;
  }
  const double err = grad_check(
      [gt, mask](const std::vector<VarT<D>>& in) {
        return dice_loss_masked(in[0], make_leaf<D>(gt), make_leaf<D>(mask));
      },
      {pr});
  CHECK(err < 1e-4);
}

TEST_CASE("dice loss: masked-out voxels carry no gradient") {
  Rng rng(149);
  auto pr = rand_tensor({1, 4, 4}, rng, 0.05, 0.95);
  TensorT<D> gt({1, 4, 4}), mask({1, 4, 4});
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    gt[i] = rng.uniform() < 0.5 ? 1 : 0;
    mask[i] = i % 3 == 0 ? 0 : 1;
  }
  auto p = make_leaf<D>(pr, true);
  auto loss = dice_loss_masked(p, make_leaf<D>(gt), make_leaf<D>(mask));
  backward(loss);
  for (std::size_t i = 0; i < pr.numel(); ++i)
    if (mask[i] == 0) CHECK(p->grad[i] == 0.0);
  CHECK(loss->value[0] >= 0.0);
  CHECK(loss->value[0] <= 1.0);
}

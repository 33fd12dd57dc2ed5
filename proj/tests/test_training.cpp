#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "runet/checkpoint.hpp"
#include "runet/train.hpp"
#include "runet/volume.hpp"

using namespace runet;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

/// Tiny scripted volume: constant image, label present only when asked,
/// full field of view.
VolumeSample scripted_volume(const std::string& id, std::size_t n,
                             std::size_t nz, bool with_label,
                             std::uint64_t seed) {
  VolumeSample v;
  v.id = id;
  Rng rng(seed);
  v.image = Tensor({n, n, nz});
  for (std::size_t i = 0; i < v.image.numel(); ++i)
    v.image[i] = static_cast<float>(rng.uniform(0.1, 0.3));
  v.label = MaskVol({n, n, nz});
  v.fov = MaskVol({n, n, nz});
  v.fov.fill(1);
  if (with_label) {
    // a small bright block confined to slices 1..2 (the first batch of 4)
    for (std::size_t x = n / 2 - 1; x <= n / 2; ++x)
      for (std::size_t y = n / 2 - 1; y <= n / 2; ++y)
        for (std::size_t z = 1; z <= 2; ++z) {
          v.label[(x * n + y) * nz + z] = 1;
          v.image[(x * n + y) * nz + z] = 0.9f;
        }
  }
  return v;
}

NetworkSpec tiny_spec(std::size_t hw = 8, std::size_t depth = 2) {
  NetworkSpec s;
  s.depth = depth;
  s.base_filters = 2;
  s.clstm_levels = {1};
  s.input_h = hw;
  s.input_w = hw;
  s.dropout_rate = 0.1;
  return s;
}

TrainConfig tiny_cfg(std::size_t epochs, std::size_t batch = 4) {
  TrainConfig cfg;
  cfg.adam.lr = 1e-3;
  cfg.epochs = epochs;
  cfg.batch_axial = batch;
  cfg.batch_other = batch;
  cfg.val_check = TrainConfig::ValCheck::per_epoch;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("adam: first-step magnitude, zero-gradient behaviour") {
  AdamConfig cfg;
  cfg.lr = 1e-2;

  {  // zero gradient from a fresh state: parameters unchanged
    std::vector<Var> params = {
        make_leaf<float>(Tensor::full({4}, 1.0f), true)};
    AdamStateT<float> st;
    st.init(params);
    params[0]->ensure_grad();
    adam_step(params, st, cfg);
    CHECK(params[0]->value == Tensor::full({4}, 1.0f));
  }

  // first step with a constant nonzero gradient moves by ~ lr * sign(g)
  std::vector<Var> params = {
      make_leaf<float>(Tensor::full({4}, 1.0f), true)};
  AdamStateT<float> st;
  st.init(params);
  params[0]->ensure_grad();
  for (std::size_t i = 0; i < 4; ++i)
    params[0]->grad[i] = i % 2 ? 0.37f : -0.81f;
  adam_step(params, st, cfg);
  CHECK(st.t == 1);
  for (std::size_t i = 0; i < 4; ++i) {
    const double delta = static_cast<double>(params[0]->value[i]) - 1.0;
    const double expect = i % 2 ? -cfg.lr : cfg.lr;
    CHECK(delta == Catch::Approx(expect).epsilon(1e-3));
  }

  // zero gradient afterwards: moments decay in magnitude
  const Tensor m_before = st.m[0];
  params[0]->zero_grad();
  adam_step(params, st, cfg);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(std::fabs(st.m[0][i]) < std::fabs(m_before[i]));
}

TEST_CASE("adam converges on f(x)=x^2 from x=1") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::vector<VarT<double>> params = {
      make_leaf<double>(TensorT<double>::scalar(1.0), true)};
  AdamStateT<double> st;
  st.init(params);
  for (int i = 0; i < 200; ++i) {
    params[0]->zero_grad();
    params[0]->ensure_grad();
    params[0]->grad[0] = 2.0 * params[0]->value[0];
    adam_step(params, st, cfg);
  }
  CHECK(std::fabs(params[0]->value[0]) < 0.05);
}

TEST_CASE("one small step strictly decreases the batch loss") {
  // line-search sanity at lr = 1e-7, in double precision
  NetworkSpec s = tiny_spec();
  s.dropout_rate = 0.0;
  auto m = build_model<double>(s, ArchKind::runet, 17);
  Rng rng(23);
  std::vector<TensorT<double>> xs, gs, ms;
  for (int t = 0; t < 2; ++t) {
    xs.push_back(testutil::rand_tensor<double>({1, 8, 8}, rng, 0, 1));
    TensorT<double> g({1, 8, 8});
    TensorT<double> mk = TensorT<double>::full({1, 8, 8}, 1.0);
    for (std::size_t i = 0; i < g.numel(); ++i)
      g[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    gs.push_back(g);
    ms.push_back(mk);
  }
  const double before = testutil::model_loss(m, xs, gs, ms)->value[0];
  backward(testutil::model_loss(m, xs, gs, ms));
  AdamStateT<double> st;
  st.init(m.params);
  AdamConfig cfg;
  cfg.lr = 1e-7;
  adam_step(m.params, st, cfg);
  zero_grads(m.params);
  NoGradGuard ng;
  const double after = testutil::model_loss(m, xs, gs, ms)->value[0];
  CHECK(after < before);
}

TEST_CASE("slice batch partitioning") {
  CHECK(make_slice_batches(154, 14).size() == 11);
  CHECK(make_slice_batches(128, 16).size() == 8);
  const auto two = make_slice_batches(32, 16);
  REQUIRE(two.size() == 2);
  std::vector<std::size_t> joined;
  for (const auto& b : two) joined.insert(joined.end(), b.begin(), b.end());
  for (std::size_t i = 0; i < 32; ++i) CHECK(joined[i] == i);
  CHECK_THROWS_WITH(make_slice_batches(30, 14),
                    Catch::Matchers::ContainsSubstring("pad"));
}

TEST_CASE("muscle-batch doubling follows the validation gate") {
  // 8x8x8 volume, batch 4 -> 2 batches; label sits in slices 3/4 (batch 1)
  auto vol = scripted_volume("v0", 8, 8, true, 3);
  auto empty = scripted_volume("v1", 8, 8, false, 4);
  NetworkSpec s = tiny_spec();
  TrainConfig cfg = tiny_cfg(1);

  SECTION("no muscle anywhere: no batch doubled") {
    auto m = build_model<float>(s, ArchKind::runet, 1);
    AdamState opt;
    opt.init(m.params);
    Rng rng(9);
    const auto stats = train_epoch(m, opt, {empty}, Orientation::axial,
                                   Direction::forward, cfg, rng, 0.0, 0);
    CHECK(stats.doubled_batches == 0);
    CHECK(stats.steps == 2);
  }
  SECTION("gate already reached: no doubling regardless of content") {
    auto m = build_model<float>(s, ArchKind::runet, 1);
    AdamState opt;
    opt.init(m.params);
    Rng rng(9);
    const auto stats = train_epoch(m, opt, {vol}, Orientation::axial,
                                   Direction::forward, cfg, rng, 0.6, 0);
    CHECK(stats.doubled_batches == 0);
    CHECK(stats.steps == 2);
  }
  SECTION("doubling active: steps = base + muscle batches") {
    auto m = build_model<float>(s, ArchKind::runet, 1);
    AdamState opt;
    opt.init(m.params);
    Rng rng(9);
    const auto stats =
        train_epoch(m, opt, {vol, empty}, Orientation::axial,
                    Direction::forward, cfg, rng, 0.0, 0);
    // 4 base batches, exactly 1 contains muscle voxels
    CHECK(stats.doubled_batches == 1);
    CHECK(stats.steps == 5);
  }
}

TEST_CASE("non-finite loss aborts naming the batch") {
  auto vol = scripted_volume("v0", 8, 8, true, 3);
  NetworkSpec s = tiny_spec();
  auto m = build_model<float>(s, ArchKind::runet, 1);
  // poison the sigmoid head bias so the probability map goes NaN
  m.params.back()->value[0] = std::numeric_limits<float>::quiet_NaN();
  AdamState opt;
  opt.init(m.params);
  Rng rng(9);
  TrainConfig cfg = tiny_cfg(1);
  CHECK_THROWS_AS(train_epoch(m, opt, {vol}, Orientation::axial,
                              Direction::forward, cfg, rng, 0.0, 0),
                  TrainError);
  try {
    train_epoch(m, opt, {vol}, Orientation::axial, Direction::forward, cfg,
                rng, 0.0, 0);
  } catch (const TrainError& e) {
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
    CHECK(std::string(e.what()).find("v0") != std::string::npos);
  }
}

TEST_CASE("best tracker: scripted trajectory, strict improvement only") {
  BestTracker t;
  const double traj[] = {0.2, 0.5, 0.4, 0.5, 0.7, 0.7};
  const bool expect[] = {true, true, false, false, true, false};
  for (int i = 0; i < 6; ++i) CHECK(t.offer(traj[i]) == expect[i]);
  CHECK(t.best == 0.7);
}

TEST_CASE("checkpoint round trip is byte-exact") {
  NetworkSpec s = tiny_spec();
  auto m = build_model<float>(s, ArchKind::runet, 2);
  AdamState opt;
  opt.init(m.params);
  Rng rng(1234);
  rng.next_u64();
  Checkpoint c = make_checkpoint(m, opt, 3, 0.42, rng);

  const fs::path dir = fs::temp_directory_path() / "runet_ckpt_test";
  fs::create_directories(dir);
  const std::string p1 = (dir / "a.ckpt").string();
  const std::string p2 = (dir / "b.ckpt").string();
  save_checkpoint(c, p1);
  Checkpoint back = load_checkpoint(p1);
  save_checkpoint(back, p2);
  CHECK(read_file(p1) == read_file(p2));
  CHECK(back.epoch == 3);
  CHECK(back.best_val_dsi == 0.42);
  CHECK(back.rng == rng);
  CHECK(back.spec.depth == s.depth);
  CHECK(back.spec.clstm_levels == s.clstm_levels);

  // truncated file: clean error
  std::string blob = read_file(p1);
  std::ofstream cut(dir / "cut.ckpt", std::ios::binary);
  cut.write(blob.data(), static_cast<std::streamsize>(blob.size() / 2));
  cut.close();
  CHECK_THROWS_AS(load_checkpoint((dir / "cut.ckpt").string()), IoError);
  CHECK_THROWS_AS(load_checkpoint(p1 + ".missing"), IoError);

  // not-a-checkpoint magic
  std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
  junk << "definitely not a checkpoint";
  junk.close();
  CHECK_THROWS_WITH(load_checkpoint((dir / "junk.ckpt").string()),
                    Catch::Matchers::ContainsSubstring("not a checkpoint"));
}

TEST_CASE("fit: zero epochs returns the initialized checkpoint") {
  GeneratorConfig g;
  g.size_x = 16;
  g.size_y = 16;
  g.size_z = 8;
  g.radius_lo = 1.0;
  g.radius_hi = 1.4;
  g.label_fraction_lo = 0.001;
  g.label_fraction_hi = 0.05;
  auto train_set = std::vector<VolumeSample>{generate_volume(g, 1, 0)};
  auto val_set = std::vector<VolumeSample>{generate_volume(g, 2, 0)};
  train_set[0].id = "t0";
  val_set[0].id = "v0";

  NetworkSpec s = tiny_spec(16, 2);
  auto m = build_model<float>(s, ArchKind::runet, 4);
  const Tensor w0 = m.params[0]->value;
  TrainConfig cfg = tiny_cfg(0);
  const FitResult r = fit(m, train_set, val_set, cfg, Orientation::axial,
                          Direction::forward);
  CHECK(r.curves.empty());
  REQUIRE(r.best.has_value());
  CHECK(r.best->params[0] == w0);
  CHECK(r.last.params[0] == w0);
  CHECK(r.total_steps == 0);
}

TEST_CASE("fit rejects overlapping train/val sets") {
  GeneratorConfig g;
  g.size_x = 16;
  g.size_y = 16;
  g.size_z = 8;
  g.radius_lo = 1.0;
  g.radius_hi = 1.4;
  g.label_fraction_lo = 0.001;
  g.label_fraction_hi = 0.05;
  auto v = generate_volume(g, 1, 0);
  v.id = "same";
  NetworkSpec s = tiny_spec(16, 2);
  auto m = build_model<float>(s, ArchKind::runet, 4);
  TrainConfig cfg = tiny_cfg(1);
  CHECK_THROWS_AS(
      fit(m, {v}, {v}, cfg, Orientation::axial, Direction::forward),
      ParamError);
}

TEST_CASE("fixed seeds make training bit-reproducible; resume matches") {
  GeneratorConfig g;
  g.size_x = 16;
  g.size_y = 16;
  g.size_z = 8;
  g.radius_lo = 1.0;
  g.radius_hi = 1.4;
  g.label_fraction_lo = 0.001;
  g.label_fraction_hi = 0.05;
  std::vector<VolumeSample> train_set, val_set;
  for (int i = 0; i < 2; ++i) {
    auto v = generate_volume(g, 10 + i, 0);
    v.id = "t" + std::to_string(i);
    train_set.push_back(std::move(v));
  }
  {
    auto v = generate_volume(g, 99, 0);
    v.id = "val";
    val_set.push_back(std::move(v));
  }

  NetworkSpec s = tiny_spec(16, 2);
  TrainConfig cfg = tiny_cfg(4);

  const fs::path dir = fs::temp_directory_path() / "runet_resume_test";
  fs::create_directories(dir);

  auto run_full = [&](const std::string& tag) {
    auto m = build_model<float>(s, ArchKind::runet, 7);
    FitHooks hooks;
    hooks.on_best = [&](const Checkpoint& c) {
      save_checkpoint(c, (dir / (tag + "_best.ckpt")).string());
    };
    return fit(m, train_set, val_set, cfg, Orientation::axial,
               Direction::forward, nullptr, hooks);
  };

  const FitResult a = run_full("a");
  const FitResult b = run_full("b");
  // identical seeds + config -> identical checkpoints
  save_checkpoint(a.last, (dir / "a_last.ckpt").string());
  save_checkpoint(b.last, (dir / "b_last.ckpt").string());
  CHECK(read_file((dir / "a_last.ckpt").string()) ==
        read_file((dir / "b_last.ckpt").string()));
  CHECK(read_file((dir / "a_best.ckpt").string()) ==
        read_file((dir / "b_best.ckpt").string()));

  // interrupted at epoch 2 + resume -> bit-identical to uninterrupted
  auto m2 = build_model<float>(s, ArchKind::runet, 7);
  TrainConfig cfg_half = cfg;
  cfg_half.epochs = 2;
  FitHooks hooks2;
  hooks2.on_best = [&](const Checkpoint& c) {
    save_checkpoint(c, (dir / "c_best.ckpt").string());
  };
  const FitResult half =
      fit(m2, train_set, val_set, cfg_half, Orientation::axial,
          Direction::forward, nullptr, hooks2);
  save_checkpoint(half.last, (dir / "c_half.ckpt").string());
  const Checkpoint mid = load_checkpoint((dir / "c_half.ckpt").string());

  auto m3 = build_model<float>(s, ArchKind::runet, 7);
  const FitResult rest =
      fit(m3, train_set, val_set, cfg, Orientation::axial, Direction::forward,
          &mid, hooks2);
  save_checkpoint(rest.last, (dir / "c_last.ckpt").string());
  CHECK(read_file((dir / "c_last.ckpt").string()) ==
        read_file((dir / "a_last.ckpt").string()));
  CHECK(read_file((dir / "c_best.ckpt").string()) ==
        read_file((dir / "a_best.ckpt").string()));

  // curves: resumed run's rows continue the full run's tail
  CHECK(a.curves.size() == b.curves.size());
  CHECK(half.curves.size() + rest.curves.size() == a.curves.size());
  for (std::size_t i = 0; i < rest.curves.size(); ++i) {
    const auto& x = a.curves[half.curves.size() + i];
    const auto& y = rest.curves[i];
    CHECK(x.step == y.step);
    CHECK(x.train_loss == y.train_loss);
    CHECK(x.val_dsi == y.val_dsi);
  }
}

// Command-line front end: generate / train / predict / eval / verify.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
// numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include "runet/checkpoint.hpp"
#include "runet/config.hpp"
#include "runet/metrics.hpp"
#include "runet/model.hpp"
#include "runet/report.hpp"
#include "runet/train.hpp"
#include "runet/verify.hpp"
#include "runet/volume.hpp"

namespace fs = std::filesystem;
using namespace runet;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string fidelity;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_out = true) {
  cmd->add_option("--config", a.config_path, "key=value config file");
  cmd->add_option("--seed", a.seed, "master seed (overrides config)");
  cmd->add_option("--fidelity", a.fidelity,
                  "parameter profile: desk or paper");
  if (with_out) cmd->add_option("--out", a.out_dir, "output directory")->required();
}

RunConfig resolve_config(const CommonArgs& a,
                         const std::map<std::string, std::string>& extra = {}) {
  KvConfig merged;
  if (!a.config_path.empty())
    merged = KvConfig::from_file(a.config_path);
  if (!a.fidelity.empty()) merged.set("fidelity", a.fidelity);
  if (a.seed >= 0) merged.set("seed", std::to_string(a.seed));
  for (const auto& [k, v] : extra) merged.set(k, v);
  return RunConfig::from(merged);
}

void write_resolved(const RunConfig& rc, const fs::path& dir,
                    const std::map<std::string, std::string>& run_keys) {
  KvConfig out = rc.resolved;
  for (const auto& [k, v] : run_keys) out.set(k, v);
  std::ofstream os(dir / "resolved.cfg");
  if (!os) throw IoError("cannot write " + (dir / "resolved.cfg").string());
  out.write(os);
}

std::vector<std::pair<ManifestEntry, VolumeSample>> load_split(
    const std::string& manifest_path, SplitTag split) {
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<std::pair<ManifestEntry, VolumeSample>> out;
  for (const auto& e : load_manifest(manifest_path)) {
    if (e.split != split) continue;
    VolumeSample v = load_volume((base / e.path).string());
    v.id = e.id;
    out.emplace_back(e, std::move(v));
  }
  return out;
}

std::vector<VolumeSample> canonicalize_for(
    std::vector<std::pair<ManifestEntry, VolumeSample>>& loaded,
    Orientation orient, const RunConfig& rc) {
  std::vector<VolumeSample> out;
  out.reserve(loaded.size());
  for (auto& [e, v] : loaded) {
    if (orient != Orientation::axial && v.nz() != rc.z_for(orient))
      out.push_back(pad_to_canonical(v, v.nx(), v.ny(), rc.z_for(orient)));
    else
      out.push_back(std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_generate(const CommonArgs& common, std::size_t count_override) {
  std::map<std::string, std::string> extra;
  if (count_override) extra["gen.count"] = std::to_string(count_override);
  RunConfig rc = resolve_config(common, extra);
  fs::create_directories(common.out_dir);

  auto samples = generate_dataset(rc.gen, rc.dataset_count, rc.seed);
  const auto counts = split_counts(samples.size());
  const auto tags = split_dataset(samples.size(), counts, rc.seed);

  std::vector<ManifestEntry> manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string fname = samples[i].id + ".rvol";
    save_volume(samples[i], (fs::path(common.out_dir) / fname).string());
    manifest.push_back({samples[i].id, fname, tags[i]});
  }
  save_manifest(manifest, (fs::path(common.out_dir) / "manifest.csv").string());
  write_resolved(rc, common.out_dir, {{"command", "generate"}});
  std::printf("generated %zu volumes (train %zu, val %zu, test %zu) in %s\n",
              samples.size(), counts.train, counts.val, counts.test,
              common.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int train_one(const RunConfig& rc_in, const std::string& dataset,
              Orientation orient, Direction dir, ArchKind arch,
              const fs::path& run_dir, const std::string& resume_path) {
  RunConfig rc = rc_in;
  fs::create_directories(run_dir);
  rc.set_input_for(orient);
  rc.net.validate();

  auto train_loaded = load_split(dataset, SplitTag::train);
  auto val_loaded = load_split(dataset, SplitTag::val);
  if (train_loaded.empty() || val_loaded.empty())
    throw ConfigError("dataset needs non-empty train and val splits");
  auto train_set = canonicalize_for(train_loaded, orient, rc);
  auto val_set = canonicalize_for(val_loaded, orient, rc);

  Model model = build_model<float>(rc.net, arch, rc.seed);
  Checkpoint resume;
  const Checkpoint* resume_ptr = nullptr;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    resume_ptr = &resume;
  }

  FitHooks hooks;
  hooks.on_best = [&](const Checkpoint& c) {
    save_checkpoint(c, (run_dir / "best.ckpt").string());
  };
  hooks.on_epoch_end = [&](const Checkpoint& c) {
    save_checkpoint(c, (run_dir / "last.ckpt").string());
  };
  hooks.on_progress = [&](std::size_t epoch, double val_dsi) {
    std::printf("[%s/%s] epoch %zu/%zu val_dsi %.4f\n", arch_name(arch),
                orientation_name(orient), epoch, rc.train.epochs, val_dsi);
    std::fflush(stdout);
  };

  write_resolved(rc, run_dir,
                 {{"command", "train"},
                  {"orientation", orientation_name(orient)},
                  {"direction", dir == Direction::forward ? "forward" : "reverse"},
                  {"arch", arch_name(arch)},
                  {"dataset", dataset}});

  FitResult result =
      fit(model, train_set, val_set, rc.train, orient, dir, resume_ptr, hooks);

  {
    std::ofstream os(run_dir / "curves.csv");
    write_curves_csv(result.curves, os);
  }
  {
    std::size_t per_epoch = 1;
    if (!result.curves.empty()) {
      per_epoch = 0;
      for (const auto& r : result.curves)
        if (r.epoch == result.curves.front().epoch) ++per_epoch;
    }
    std::ofstream os(run_dir / "curves.svg");
    write_curves_svg(result.curves, per_epoch, os);
  }
  save_checkpoint(result.last, (run_dir / "last.ckpt").string());
  std::printf("[%s/%s] done: best val DSI %.4f, %zu steps, run dir %s\n",
              arch_name(arch), orientation_name(orient), result.best_val_dsi,
              result.total_steps, run_dir.string().c_str());
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& dataset,
              const std::string& orientation, const std::string& direction,
              const std::string& arch, const std::string& resume_path,
              std::size_t epochs_override, unsigned jobs) {
  std::map<std::string, std::string> extra;
  if (epochs_override) extra["train.epochs"] = std::to_string(epochs_override);
  const RunConfig rc = resolve_config(common, extra);
  const ArchKind ak = parse_arch(arch);

  if (orientation != "all") {
    const Orientation o = parse_orientation(orientation);
    const Direction d = direction.empty()
                            ? Direction::forward
                            : parse_direction(direction);
    return train_one(rc, dataset, o, d, ak, common.out_dir, resume_path);
  }

  // three independent orientation jobs, optionally thread-parallel
  const Orientation all[3] = {Orientation::axial, Orientation::coronal,
                              Orientation::sagittal};
  std::vector<std::thread> pool;
  std::vector<int> rcs(3, 0);
  for (int i = 0; i < 3; ++i) {
    auto job = [&, i]() {
      try {
        rcs[i] = train_one(rc, dataset, all[i], Direction::forward, ak,
                           fs::path(common.out_dir) / orientation_name(all[i]),
                           resume_path);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "orientation %s failed: %s\n",
                     orientation_name(all[i]), e.what());
        rcs[i] = 2;
      }
    };
    if (jobs > 1) {
      pool.emplace_back(job);
      if (pool.size() == jobs) {
        for (auto& t : pool) t.join();
        pool.clear();
      }
    } else {
      job();
    }
  }
  for (auto& t : pool) t.join();
  for (int r : rcs)
    if (r) return r;
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_predict(const CommonArgs& common, const std::string& ckpt_path,
                const std::string& volume_path, const std::string& dataset,
                const std::string& split, const std::string& orientation,
                const std::string& direction) {
  RunConfig rc = resolve_config(common);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = model_from_checkpoint(ckpt);
  const Orientation o = parse_orientation(orientation);
  const Direction d =
      direction.empty() ? Direction::forward : parse_direction(direction);

  auto predict_one = [&](const VolumeSample& v, const fs::path& out_file) {
    SliceSequence probe = extract_slices(v, o, d);
    const auto& s = probe.image.front().shape();
    if (s[1] != model.spec.input_h || s[2] != model.spec.input_w)
      throw ConfigError(
          "volume slices are " + std::to_string(s[1]) + "x" +
          std::to_string(s[2]) + " but the checkpoint requires " +
          std::to_string(model.spec.input_h) + "x" +
          std::to_string(model.spec.input_w) +
          " (canonicalize the volume first)");
    const Tensor prob = predict_volume(model, v, o, d);
    std::ofstream os(out_file, std::ios::binary);
    if (!os) throw IoError("cannot write " + out_file.string());
    write_tensor(os, prob);
  };

  if (!volume_path.empty()) {
    VolumeSample v = load_volume(volume_path);
    if (o != Orientation::axial && v.nz() != rc.z_for(o))
      v = pad_to_canonical(v, v.nx(), v.ny(), rc.z_for(o));
    predict_one(v, common.out_dir);
    return 0;
  }

  fs::create_directories(common.out_dir);
  SplitTag tag = SplitTag::test;
  if (split == "train") tag = SplitTag::train;
  else if (split == "val") tag = SplitTag::val;
  auto loaded = load_split(dataset, tag);
  auto vols = canonicalize_for(loaded, o, rc);
  for (const auto& v : vols)
    predict_one(v, fs::path(common.out_dir) / (v.id + ".prob"));
  std::printf("wrote %zu probability volumes to %s\n", vols.size(),
              common.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_eval(const CommonArgs& common, const std::string& dataset,
             const std::map<std::string, std::string>& pred_dirs) {
  RunConfig rc = resolve_config(common);
  fs::create_directories(common.out_dir);
  auto loaded = load_split(dataset, SplitTag::test);
  if (loaded.empty()) throw ConfigError("dataset has no test split");

  MetricsReport report;
  for (auto& [entry, sample] : loaded) {
    std::map<std::string, Tensor> probs;  // method -> axial-grid volume
    for (const auto& [method, dir] : pred_dirs) {
      const fs::path f = fs::path(dir) / (sample.id + ".prob");
      if (!fs::exists(f)) {
        report.missing.push_back(sample.id + "/" + method);
        continue;
      }
      std::ifstream is(f, std::ios::binary);
      Tensor prob = read_tensor(is);
      probs[method] =
          embed_volume(prob, sample.nx(), sample.ny(), sample.nz());
    }
    for (const auto& [method, prob] : probs) {
      auto rows = evaluate_volume(sample.id, method, prob, sample, rc.eval_tau,
                                  rc.post);
      report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    }
    if (probs.size() == 3) {
      std::vector<Tensor> three;
      std::vector<MaskVol> masks;
      for (const char* method : {"axial", "coronal", "sagittal"}) {
        three.push_back(probs.at(method));
        masks.push_back(sample.fov);
      }
      const Tensor ens = ensemble_mean(three, masks, rc.ensemble);
      auto rows = evaluate_volume(sample.id, "ensemble", ens, sample,
                                  rc.eval_tau, rc.post);
      report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    }
  }
  summarize(report);

  {
    std::ofstream os(fs::path(common.out_dir) / "metrics.csv");
    write_metrics_csv(report, os);
  }
  {
    std::ofstream os(fs::path(common.out_dir) / "summary.csv");
    write_summary_csv(report, os);
  }
  for (const char* metric : {"dsi", "mad_voxels", "hdd_voxels"}) {
    std::ofstream os(fs::path(common.out_dir) /
                     ("boxplot_" + std::string(metric) + ".svg"));
    write_boxplot_svg(report, metric, os);
  }
  write_resolved(rc, common.out_dir, {{"command", "eval"}});
  for (const auto& m : report.missing)
    std::fprintf(stderr, "missing prediction: %s\n", m.c_str());
  std::printf("evaluated %zu rows (%zu missing) -> %s\n", report.rows.size(),
              report.missing.size(), common.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_verify() {
  const auto checks = run_verification();
  bool all = true;
  for (const auto& c : checks) {
    std::printf("[%s] %s (%s)\n", c.pass ? "PASS" : "FAIL", c.name.c_str(),
                c.detail.c_str());
    all = all && c.pass;
  }
  return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"recurrent U-net volumetric segmentation pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, pred_args, eval_args;
  std::size_t gen_count = 0;

  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  add_common(gen, gen_args);
  gen->add_option("-n,--count", gen_count, "number of volumes");

  std::string tr_dataset, tr_orient = "axial", tr_dir, tr_arch = "runet",
              tr_resume;
  std::size_t tr_epochs = 0;
  unsigned tr_jobs = 1;
  auto* tr = app.add_subcommand("train", "train one network");
  add_common(tr, train_args);
  tr->add_option("--dataset", tr_dataset, "dataset manifest")->required();
  tr->add_option("--orientation", tr_orient,
                 "axial|coronal|sagittal|all");
  tr->add_option("--direction", tr_dir, "forward|reverse");
  tr->add_option("--arch", tr_arch, "runet|unet");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--epochs", tr_epochs, "override epoch count");
  tr->add_option("--jobs", tr_jobs, "parallel orientation jobs");

  std::string pr_ckpt, pr_volume, pr_dataset, pr_split = "test",
              pr_orient = "axial", pr_dir;
  auto* pr = app.add_subcommand("predict", "run inference");
  add_common(pr, pred_args);
  pr->add_option("--checkpoint", pr_ckpt, "trained checkpoint")->required();
  pr->add_option("--volume", pr_volume, "single volume file");
  pr->add_option("--dataset", pr_dataset, "dataset manifest");
  pr->add_option("--split", pr_split, "split to predict (with --dataset)");
  pr->add_option("--orientation", pr_orient, "slicing orientation");
  pr->add_option("--direction", pr_dir, "forward|reverse");

  std::string ev_dataset, ev_ax, ev_cor, ev_sag;
  auto* ev = app.add_subcommand("eval", "metrics report");
  add_common(ev, eval_args);
  ev->add_option("--dataset", ev_dataset, "dataset manifest")->required();
  ev->add_option("--pred-axial", ev_ax, "axial predictions dir");
  ev->add_option("--pred-coronal", ev_cor, "coronal predictions dir");
  ev->add_option("--pred-sagittal", ev_sag, "sagittal predictions dir");

  auto* vf = app.add_subcommand("verify", "run the oracle suite");
  (void)vf;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors exit 1, --help exits 0
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_args, gen_count);
    if (tr->parsed())
      return cmd_train(train_args, tr_dataset, tr_orient, tr_dir, tr_arch,
                       tr_resume, tr_epochs, tr_jobs);
    if (pr->parsed()) {
      if (pr_volume.empty() && pr_dataset.empty())
        throw ConfigError("predict needs --volume or --dataset");
      return cmd_predict(pred_args, pr_ckpt, pr_volume, pr_dataset, pr_split,
                         pr_orient, pr_dir);
    }
    if (ev->parsed()) {
      std::map<std::string, std::string> dirs;
      if (!ev_ax.empty()) dirs["axial"] = ev_ax;
      if (!ev_cor.empty()) dirs["coronal"] = ev_cor;
      if (!ev_sag.empty()) dirs["sagittal"] = ev_sag;
      if (dirs.empty())
        throw ConfigError("eval needs at least one --pred-* directory");
      return cmd_eval(eval_args, ev_dataset, dirs);
    }
    if (vf->parsed()) return cmd_verify();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ParamError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

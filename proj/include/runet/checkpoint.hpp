#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "runet/adam.hpp"
#include "runet/model.hpp"
#include "runet/rng.hpp"
#include "runet/tensor.hpp"

namespace runet {

inline constexpr char kCkptMagic[10] = "RUNETCKPT";
inline constexpr std::uint32_t kCkptVersion = 1;

/// Everything needed to resume or deploy: architecture description, all
/// parameter tensors, optimizer accumulators, progress counters, RNG state.
struct Checkpoint {
  NetworkSpec spec;
  ArchKind arch = ArchKind::runet;
  std::vector<Tensor> params;
  AdamState opt;
  std::uint32_t epoch = 0;       // completed epochs
  double best_val_dsi = -1.0;    // -1 = no validation recorded yet
  Rng rng{0};
};

inline Checkpoint make_checkpoint(const Model& m, const AdamState& opt,
                                  std::uint32_t epoch, double best_val_dsi,
                                  const Rng& rng) {
  Checkpoint c;
  c.spec = m.spec;
  c.arch = m.arch;
  c.params.reserve(m.params.size());
  for (const auto& p : m.params) c.params.push_back(p->value);
  c.opt = opt;
  c.epoch = epoch;
  c.best_val_dsi = best_val_dsi;
  c.rng = rng;
  return c;
}

inline void apply_checkpoint(const Checkpoint& c, Model& m) {
  if (c.params.size() != m.params.size())
    throw ParamError("checkpoint parameter count " +
                     std::to_string(c.params.size()) +
                     " does not match model (" +
                     std::to_string(m.params.size()) + ")");
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    expect_same_shape("checkpoint param", m.params[i]->value.shape(),
                      c.params[i].shape());
    m.params[i]->value = c.params[i];
  }
}

inline Model model_from_checkpoint(const Checkpoint& c) {
  Model m = build_model<float>(c.spec, c.arch, 0);
  apply_checkpoint(c, m);
  return m;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ostringstream os(std::ios::binary);
  os.write(kCkptMagic, 9);
  write_u32(os, kCkptVersion);
  os.put(c.arch == ArchKind::runet ? 0 : 1);
  write_u64(os, c.spec.depth);
  write_u64(os, c.spec.base_filters);
  write_u64(os, c.spec.clstm_levels.size());
  for (std::size_t lvl : c.spec.clstm_levels) write_u64(os, lvl);
  write_u64(os, c.spec.input_h);
  write_u64(os, c.spec.input_w);
  write_u64(os, c.spec.in_channels);
  write_f64(os, c.spec.dropout_rate);
  os.put(c.spec.peephole_mode == PeepholeMode::full ? 0 : 1);
  write_u32(os, c.epoch);
  write_f64(os, c.best_val_dsi);
  c.rng.save(os);
  write_u64(os, c.opt.t);
  write_u64(os, c.params.size());
  for (const auto& t : c.params) write_tensor(os, t);
  const bool with_opt = c.opt.m.size() == c.params.size();
  os.put(with_opt ? 1 : 0);
  if (with_opt) {
    for (const auto& t : c.opt.m) write_tensor(os, t);
    for (const auto& t : c.opt.v) write_tensor(os, t);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path + " for writing");
  const std::string blob = os.str();
  file.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!file) throw IoError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[9];
  is.read(magic, 9);
  if (!is || std::memcmp(magic, kCkptMagic, 9) != 0)
    throw IoError(path + " is not a checkpoint file");
  if (read_u32(is) != kCkptVersion)
    throw IoError(path + ": unsupported checkpoint version");
  Checkpoint c;
  c.arch = is.get() == 0 ? ArchKind::runet : ArchKind::unet;
  c.spec.depth = read_u64(is);
  c.spec.base_filters = read_u64(is);
  c.spec.clstm_levels.resize(read_u64(is));
  for (auto& lvl : c.spec.clstm_levels) lvl = read_u64(is);
  c.spec.input_h = read_u64(is);
  c.spec.input_w = read_u64(is);
  c.spec.in_channels = read_u64(is);
  c.spec.dropout_rate = read_f64(is);
  c.spec.peephole_mode = is.get() == 0 ? PeepholeMode::full
                                       : PeepholeMode::channel;
  c.epoch = read_u32(is);
  c.best_val_dsi = read_f64(is);
  c.rng.load(is);
  c.opt.t = read_u64(is);
  const std::uint64_t n_params = read_u64(is);
  if (n_params > 1u << 20) throw IoError(path + ": implausible param count");
  c.params.reserve(n_params);
  for (std::uint64_t i = 0; i < n_params; ++i)
    c.params.push_back(read_tensor(is));
  const int with_opt = is.get();
  if (with_opt == 1) {
    for (std::uint64_t i = 0; i < n_params; ++i)
      c.opt.m.push_back(read_tensor(is));
    for (std::uint64_t i = 0; i < n_params; ++i)
      c.opt.v.push_back(read_tensor(is));
  } else if (with_opt != 0) {
    throw IoError(path + ": truncated checkpoint");
  }
  return c;
}

}  // namespace runet

#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "runet/metrics.hpp"
#include "runet/model.hpp"
#include "runet/train.hpp"
#include "runet/volume.hpp"

namespace runet {

/// Flat key=value configuration ('#' starts a comment). Values from the
/// command line override the file; the fully resolved map is written into
/// the run directory for provenance.
class KvConfig {
 public:
  static KvConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    KvConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": expected key=value, got '" + t + "'");
      cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    kv_[key] = value;
  }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string str(const std::string& key, const std::string& dflt) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
  }

  double num(const std::string& key, double dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": '" + it->second +
                        "' is not a number");
    }
  }

  std::size_t integer(const std::string& key, std::size_t dflt) const {
    const double v = num(key, static_cast<double>(dflt));
    if (v < 0 || v != std::floor(v))
      throw ConfigError("config key " + key + " must be a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  /// merges `other` over this one
  void overlay(const KvConfig& other) {
    for (const auto& [k, v] : other.kv_) kv_[k] = v;
  }

  void write(std::ostream& os) const {
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }
  std::map<std::string, std::string> kv_;
};

inline Orientation parse_orientation(const std::string& s) {
  if (s == "axial") return Orientation::axial;
  if (s == "coronal") return Orientation::coronal;
  if (s == "sagittal") return Orientation::sagittal;
  throw ConfigError("unknown orientation '" + s + "'");
}

inline Direction parse_direction(const std::string& s) {
  if (s == "forward") return Direction::forward;
  if (s == "reverse") return Direction::reverse;
  throw ConfigError("unknown direction '" + s + "'");
}

inline ArchKind parse_arch(const std::string& s) {
  if (s == "runet") return ArchKind::runet;
  if (s == "unet") return ArchKind::unet;
  throw ConfigError("unknown arch '" + s + "'");
}

inline std::vector<std::size_t> parse_level_list(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty() || s == "none") return out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(static_cast<std::size_t>(std::stoul(tok)));
  }
  return out;
}

/// Fully resolved run settings: fidelity profile defaults, then config
/// file, then command-line flags.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string fidelity = "desk";
  GeneratorConfig gen;
  std::size_t dataset_count = 20;
  NetworkSpec net;
  TrainConfig train;
  double eval_tau = 0.5;
  PostprocessConfig post;
  EnsembleMode ensemble = EnsembleMode::mean;
  std::size_t canonical_z_other = 32;  // z size for coronal/sagittal training
  KvConfig resolved;

  static RunConfig from(const KvConfig& merged) {
    RunConfig rc;
    rc.fidelity = merged.str("fidelity", "desk");
    KvConfig base = profile(rc.fidelity);
    base.overlay(merged);
    const KvConfig& c = base;

    rc.seed = c.integer("seed", 0);
    rc.gen.size_x = c.integer("gen.size_x", 64);
    rc.gen.size_y = c.integer("gen.size_y", 64);
    rc.gen.size_z = c.integer("gen.size_z", 32);
    rc.gen.half_angle_lat_deg = c.num("gen.half_angle_lat", 42.5);
    rc.gen.half_angle_ap_deg = c.num("gen.half_angle_ap", 35.0);
    rc.gen.radius_lo = c.num("gen.radius_lo", 1.6);
    rc.gen.radius_hi = c.num("gen.radius_hi", 2.4);
    rc.gen.z0_frac = c.num("gen.z0_frac", 0.22);
    rc.gen.z1_frac = c.num("gen.z1_frac", 0.62);
    rc.gen.background_level = c.num("gen.background", 0.18);
    rc.gen.structure_level = c.num("gen.structure", 0.85);
    rc.gen.speckle = c.num("gen.speckle", 0.35);
    rc.gen.label_fraction_lo = c.num("gen.label_lo", 0.002);
    rc.gen.label_fraction_hi = c.num("gen.label_hi", 0.015);
    rc.gen.ambiguity_fraction = c.num("gen.ambiguity", 0.0);
    rc.gen.voxel_spacing = c.num("gen.spacing", 0.5);
    rc.dataset_count = c.integer("gen.count", 20);

    rc.net.depth = c.integer("net.depth", 3);
    rc.net.base_filters = c.integer("net.base_filters", 8);
    const std::string levels = c.str("net.clstm_levels", "odd");
    rc.net.clstm_levels = levels == "odd"
                              ? NetworkSpec::default_clstm_levels(rc.net.depth)
                              : parse_level_list(levels);
    rc.net.dropout_rate = c.num("net.dropout", 0.3);
    rc.net.peephole_mode = c.str("net.peepholes", "full") == "channel"
                               ? PeepholeMode::channel
                               : PeepholeMode::full;

    rc.train.adam.lr = c.num("train.lr", 1e-5);
    rc.train.adam.beta1 = c.num("train.beta1", 0.9);
    rc.train.adam.beta2 = c.num("train.beta2", 0.999);
    rc.train.adam.eps = c.num("train.eps", 1e-8);
    rc.train.epochs = c.integer("train.epochs", 100);
    rc.train.batch_axial = c.integer("train.batch_axial", 14);
    rc.train.batch_other = c.integer("train.batch_other", 16);
    rc.train.oversample_until_val_dsi = c.num("train.oversample_gate", 0.5);
    rc.train.val_check = c.str("train.val_check", "step") == "epoch"
                             ? TrainConfig::ValCheck::per_epoch
                             : TrainConfig::ValCheck::per_step;
    rc.train.seed = rc.seed;

    rc.eval_tau = c.num("eval.tau", 0.5);
    rc.post.min_size_floor = c.integer("eval.min_size_floor", 27);
    rc.post.min_size_frac = c.num("eval.min_size_frac", 0.01);
    rc.ensemble = c.str("eval.ensemble", "mean") == "sum" ? EnsembleMode::sum
                                                          : EnsembleMode::mean;
    rc.canonical_z_other = c.integer("canonical_z_other", rc.gen.size_z);
    rc.resolved = c;
    rc.resolved.set("fidelity", rc.fidelity);
    rc.resolved.set("seed", std::to_string(rc.seed));
    return rc;
  }

  /// Input size for a given orientation at the canonical volume size.
  void set_input_for(Orientation o) {
    switch (o) {
      case Orientation::axial:
        net.input_h = gen.size_x;
        net.input_w = gen.size_y;
        break;
      case Orientation::coronal:
        net.input_h = gen.size_x;
        net.input_w = canonical_z_other;
        break;
      case Orientation::sagittal:
        net.input_h = gen.size_y;
        net.input_w = canonical_z_other;
        break;
    }
  }

  std::size_t z_for(Orientation o) const {
    return o == Orientation::axial ? gen.size_z : canonical_z_other;
  }

 private:
  static KvConfig profile(const std::string& fidelity) {
    KvConfig p;
    if (fidelity == "desk") {
      p.set("gen.size_x", "64"); p.set("gen.size_y", "64");
      p.set("gen.size_z", "32"); p.set("gen.count", "20");
      p.set("net.depth", "3"); p.set("net.base_filters", "8");
      p.set("train.lr", "1e-3"); p.set("train.epochs", "40");
      p.set("train.batch_axial", "8"); p.set("train.batch_other", "16");
      p.set("train.val_check", "epoch");
      p.set("canonical_z_other", "32");
    } else if (fidelity == "paper") {
      p.set("gen.size_x", "256"); p.set("gen.size_y", "256");
      p.set("gen.size_z", "154"); p.set("gen.count", "100");
      p.set("net.depth", "5"); p.set("net.base_filters", "32");
      p.set("train.lr", "1e-5"); p.set("train.epochs", "100");
      p.set("train.batch_axial", "14"); p.set("train.batch_other", "16");
      p.set("train.val_check", "step");
      p.set("canonical_z_other", "128");
    } else {
      throw ConfigError("unknown fidelity '" + fidelity +
                        "' (expected desk or paper)");
    }
    return p;
  }
};

}  // namespace runet

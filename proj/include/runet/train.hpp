#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "runet/adam.hpp"
#include "runet/checkpoint.hpp"
#include "runet/loss.hpp"
#include "runet/metrics.hpp"
#include "runet/model.hpp"
#include "runet/volume.hpp"

namespace runet {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  AdamConfig adam;                        // lr 1e-5, betas 0.9/0.999, eps 1e-8
  std::size_t epochs = 100;
  std::size_t batch_axial = 14;
  std::size_t batch_other = 16;           // coronal / sagittal
  double oversample_until_val_dsi = 0.5;  // muscle-batch double-training gate
  enum class ValCheck { per_step, per_epoch };
  ValCheck val_check = ValCheck::per_step;
  std::uint64_t seed = 0;

  std::size_t batch_for(Orientation o) const {
    return o == Orientation::axial ? batch_axial : batch_other;
  }
};

/// Contiguous, order-preserving batches over [0, n).
inline std::vector<std::vector<std::size_t>> make_slice_batches(
    std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw ParamError("batch size must be positive");
  if (n % batch_size != 0) {
    const std::size_t padded = (n / batch_size + 1) * batch_size;
    throw ConfigError("slice count " + std::to_string(n) +
                      " is not divisible by batch size " +
                      std::to_string(batch_size) + "; pad the volume to " +
                      std::to_string(padded) + " slices");
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> b(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) b[i] = start + i;
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

/// Inference pass over a whole volume; returns the probability volume in
/// the sample's own grid.
inline Tensor predict_volume(const Model& m, const VolumeSample& v,
                             Orientation o,
                             Direction dir = Direction::forward) {
  SliceSequence seq = extract_slices(v, o, dir);
  Rng unused(0);  // dropout is inactive outside training
  auto probs = forward_volume(m, seq.image, false, unused);
  return reassemble_slices(probs, v.nx(), v.ny(), v.nz(), o, dir);
}

struct ValidationResult {
  double mean_dsi = 0.0;
  double mean_loss = 0.0;
};

/// Thresholded volumetric DSI within the field of view, plus the masked
/// Dice loss, averaged over the validation volumes.
inline ValidationResult validate(const Model& m,
                                 const std::vector<VolumeSample>& val,
                                 Orientation o, Direction dir,
                                 double tau = 0.5) {
  if (val.empty()) throw ParamError("validation set is empty");
  ValidationResult r;
  for (const auto& v : val) {
    SliceSequence seq = extract_slices(v, o, dir);
    Rng unused(0);
    auto probs = forward_volume(m, seq.image, false, unused);
    double loss = 0.0;
    for (std::size_t t = 0; t < probs.size(); ++t)
      loss += dice_loss_value(probs[t], seq.label[t], seq.fov[t]);
    r.mean_loss += loss / static_cast<double>(probs.size());
    Tensor prob_vol = reassemble_slices(probs, v.nx(), v.ny(), v.nz(), o, dir);
    const MaskVol bin = mask_and(threshold(prob_vol, tau), v.fov);
    r.mean_dsi += dsi(bin, v.label, &v.fov);
  }
  r.mean_dsi /= static_cast<double>(val.size());
  r.mean_loss /= static_cast<double>(val.size());
  return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  std::vector<double> batch_losses;  // one per optimizer step
  std::size_t steps = 0;
  std::size_t doubled_batches = 0;
};

namespace detail {

inline bool batch_has_muscle(const SliceSequence& seq,
                             const std::vector<std::size_t>& batch) {
  for (std::size_t i : batch)
    for (std::size_t k = 0; k < seq.label[i].numel(); ++k)
      if (seq.label[i][k] != 0.0f) return true;
  return false;
}

}  // namespace detail

/// One full pass over the training volumes: per-epoch random volume order,
/// contiguous slice batches with state carried across batches (detached),
/// one masked-Dice backward + Adam step per batch cycle. While the best
/// validation DSI is below the oversampling gate, batches containing muscle
/// run two complete cycles. U-net additionally shuffles slices per volume.
inline EpochStats train_epoch(
    Model& model, AdamState& opt, const std::vector<VolumeSample>& train,
    Orientation orient, Direction dir, const TrainConfig& cfg, Rng& rng,
    const double& best_val_dsi, std::size_t epoch,
    const std::function<void(double batch_loss)>& after_step = {}) {
  EpochStats stats;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);

  const std::size_t batch_size = cfg.batch_for(orient);
  for (std::size_t vi : order) {
    const VolumeSample& vol = train[vi];
    SliceSequence seq = extract_slices(vol, orient, dir);
    std::vector<std::size_t> slice_order(seq.image.size());
    for (std::size_t i = 0; i < slice_order.size(); ++i) slice_order[i] = i;
    if (model.arch == ArchKind::unet) shuffle(slice_order, rng);

    const auto batches = make_slice_batches(slice_order.size(), batch_size);
    VolumeStateT<float> st = initial_state(model);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<std::size_t> batch;
      for (std::size_t pos : batches[bi]) batch.push_back(slice_order[pos]);

      const bool muscle = detail::batch_has_muscle(seq, batch);
      const int cycles =
          muscle && best_val_dsi < cfg.oversample_until_val_dsi ? 2 : 1;
      if (cycles == 2) ++stats.doubled_batches;

      for (int c = 0; c < cycles; ++c) {
        VolumeStateT<float> cur = detach_volume_state(st);
        Var loss_sum;
        for (std::size_t si : batch) {
          auto x = make_leaf<float>(seq.image[si]);
          auto y = forward_slice(model, x, cur, true, rng);
          auto l = dice_loss_masked(y, make_leaf<float>(seq.label[si]),
                                    make_leaf<float>(seq.fov[si]));
          loss_sum = loss_sum ? vadd(loss_sum, l) : l;
        }
        auto loss = vscale(loss_sum, 1.0 / static_cast<double>(batch.size()));
        const double lv = loss->value[0];
        if (!std::isfinite(lv))
          throw TrainError("non-finite loss at epoch " +
                           std::to_string(epoch) + ", volume " + vol.id +
                           ", batch " + std::to_string(bi));
        backward(loss);
        adam_step(model.params, opt, cfg.adam);
        zero_grads(model.params);
        st = cur;
        stats.batch_losses.push_back(lv);
        ++stats.steps;
        if (after_step) after_step(lv);
      }
    }
  }
  return stats;
}

/// Best-checkpoint selection rule: overwrite only on strict improvement.
struct BestTracker {
  double best = -1.0;
  bool offer(double val_dsi) {
    if (val_dsi > best) {
      best = val_dsi;
      return true;
    }
    return false;
  }
};

struct CurveRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dsi = 0.0;
};

struct FitResult {
  std::optional<Checkpoint> best;  // empty if never improved since start
  Checkpoint last;
  std::vector<CurveRow> curves;
  double best_val_dsi = -1.0;
  std::size_t total_steps = 0;
};

struct FitHooks {
  std::function<void(const Checkpoint&)> on_epoch_end;  // last state
  std::function<void(const Checkpoint&)> on_best;       // improved best
  std::function<void(std::size_t epoch, double val_dsi)> on_progress;
};

/// The full protocol: epoch loop with per-epoch data randomization,
/// muscle-batch double-training until the validation gate, best-checkpoint
/// selection on strict improvement, resumable at epoch boundaries.
inline FitResult fit(Model& model, const std::vector<VolumeSample>& train,
                     const std::vector<VolumeSample>& val,
                     const TrainConfig& cfg, Orientation orient,
                     Direction dir, const Checkpoint* resume = nullptr,
                     const FitHooks& hooks = {}) {
  for (const auto& t : train)
    for (const auto& v : val)
      if (t.id == v.id && !t.id.empty())
        throw ParamError("train/val sets overlap on volume " + t.id);

  AdamState opt;
  opt.init(model.params);
  Rng rng(Rng::mix(cfg.seed, 0x747261696eULL));
  std::size_t start_epoch = 0;
  BestTracker tracker;
  FitResult result;

  if (resume) {
    apply_checkpoint(*resume, model);
    opt = resume->opt;
    if (!opt.matches(model.params)) opt.init(model.params);
    rng = resume->rng;
    start_epoch = resume->epoch;
    tracker.best = resume->best_val_dsi;
  } else {
    const ValidationResult v0 = validate(model, val, orient, dir);
    tracker.offer(v0.mean_dsi);
    result.best = make_checkpoint(model, opt, 0, tracker.best, rng);
    if (hooks.on_best) hooks.on_best(*result.best);
  }
  const double& best_val = tracker.best;

  ValidationResult last_val = validate(model, val, orient, dir);
  std::size_t step = resume ? resume->opt.t : 0;

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    auto record_best = [&](std::size_t done_epochs) {
      result.best = make_checkpoint(
          model, opt, static_cast<std::uint32_t>(done_epochs), tracker.best,
          rng);
      if (hooks.on_best) hooks.on_best(*result.best);
    };
    auto after_step = [&](double batch_loss) {
      ++step;
      if (cfg.val_check == TrainConfig::ValCheck::per_step) {
        last_val = validate(model, val, orient, dir);
        if (tracker.offer(last_val.mean_dsi)) record_best(epoch + 1);
      }
      result.curves.push_back(
          {step, epoch, batch_loss, last_val.mean_loss, last_val.mean_dsi});
    };
    train_epoch(model, opt, train, orient, dir, cfg, rng, best_val, epoch,
                after_step);

    if (cfg.val_check == TrainConfig::ValCheck::per_epoch) {
      last_val = validate(model, val, orient, dir);
      if (tracker.offer(last_val.mean_dsi)) record_best(epoch + 1);
    }
    result.last = make_checkpoint(model, opt, static_cast<std::uint32_t>(epoch + 1),
                                  best_val, rng);
    if (hooks.on_epoch_end) hooks.on_epoch_end(result.last);
    if (hooks.on_progress) hooks.on_progress(epoch + 1, last_val.mean_dsi);
  }

  if (cfg.epochs <= start_epoch)
    result.last = make_checkpoint(model, opt, static_cast<std::uint32_t>(start_epoch),
                                  best_val, rng);
  result.best_val_dsi = best_val;
  result.total_steps = step;
  return result;
}

inline void write_curves_csv(const std::vector<CurveRow>& rows,
                             std::ostream& os) {
  os << "step,epoch,train_loss,val_loss,val_dsi\n";
  for (const auto& r : rows)
    os << r.step << "," << r.epoch << "," << r.train_loss << "," << r.val_loss
       << "," << r.val_dsi << "\n";
}

}  // namespace runet

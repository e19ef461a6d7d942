#pragma once

// Training loop shared by the supervised baseline and FocalMix.
//
// Random stream (one Rng seeded with SSLConfig::seed), consumed per step in
// this order:
//   1. labeled draws, per sample: crop choice and centre, then the
//      augmentation transform (when enabled);
//   2. unlabeled draws, per sample: scan index, crop centre, K transforms;
//   3. image MixUp: batch shuffle, then one mix weight per pair;
//   4. object MixUp: per object, donor index then mix weight.
// All draws happen before any parallel work, so results do not depend on
// FOCALMIX_THREADS.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "focalmix/anchors.hpp"
#include "focalmix/detector.hpp"
#include "focalmix/error.hpp"
#include "focalmix/eval.hpp"
#include "focalmix/inference.hpp"
#include "focalmix/loss.hpp"
#include "focalmix/parallel.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/ssl.hpp"
#include "focalmix/transforms.hpp"

namespace focalmix {

struct TrainConfig {
  int epochs = 20;
  int steps_per_epoch = 20;
  double base_lr = 1e-3;
  double reg_weight = 1.0;
  bool image_mixup = true;
  bool object_mixup = true;
  bool augment_labeled = true;
  double positive_crop_fraction = 0.5;
  int val_every = 0;  // 0: validate after the last epoch only
  FocalParams focal;
  AssignParams assign;
  DecodeParams decode;

  void validate() const {
    detail::require(epochs >= 1 && steps_per_epoch >= 1, "epochs and steps_per_epoch must be >= 1");
    detail::require(base_lr > 0.0, "base_lr must be positive");
    detail::require(reg_weight >= 0.0, "reg_weight must be non-negative");
    detail::require(positive_crop_fraction >= 0.0 && positive_crop_fraction <= 1.0,
                    "positive_crop_fraction must lie in [0,1]");
    detail::require(val_every >= 0, "val_every must be >= 0");
    detail::require(assign.negative_iou <= assign.positive_iou, "negative_iou must not exceed positive_iou");
    focal.validate();
  }
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double loss_labeled = std::numeric_limits<double>::quiet_NaN();
  double loss_unlabeled = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> cpm_val;
};

struct EvalResult {
  std::vector<std::vector<Detection>> detections;
  MatchResult matches;
  FrocCurve curve;
  double cpm = 0.0;
};

template <typename T>
EvalResult evaluate_model(const ModelState<T>& s, std::span<const LabeledScan> scans, const DecodeParams& dp) {
  EvalResult r;
  r.detections.resize(scans.size());
  parallel_for(scans.size(), [&](std::size_t i) { r.detections[i] = detect(s, scans[i].volume, dp); });
  std::vector<std::vector<Box3D>> gts;
  for (const auto& sc : scans) gts.push_back(sc.boxes);
  r.matches = match_detections(r.detections, gts);
  r.curve = froc(r.matches);
  r.cpm = cpm(r.curve);
  return r;
}

template <typename T>
struct TrainResult {
  ModelState<T> state;
  std::vector<EpochMetrics> log;
};

namespace detail {

inline Shape3 random_window_center(const Shape3& vol, const Shape3& patch, Rng& rng) {
  Shape3 c{};
  for (int a = 0; a < 3; ++a) {
    const int span = std::max(0, vol[a] - patch[a]);
    c[a] = static_cast<int>(rng.integer(0, span)) + patch[a] / 2;
  }
  return c;
}

inline Shape3 clamp_window_center(Shape3 c, const Shape3& vol, const Shape3& patch) {
  for (int a = 0; a < 3; ++a) {
    if (vol[a] >= patch[a]) c[a] = std::clamp(c[a], patch[a] / 2, vol[a] - patch[a] + patch[a] / 2);
  }
  return c;
}

struct LabeledDraw {
  std::size_t scan = 0;
  Shape3 center{};
  CubeTransform transform;
};

struct UnlabeledDraw {
  std::size_t scan = 0;
  Shape3 center{};
  std::vector<CubeTransform> transforms;
};

}  // namespace detail

/// Labeled training sample: crop, optional symmetry augmentation,
/// normalisation, IoU target assignment.
inline TrainingSample make_labeled_sample(const LabeledScan& scan, const Shape3& center, const CubeTransform& t,
                                          const AnchorGrid& grid, const AssignParams& ap) {
  LabeledScan patch = crop_patch(scan, center, grid.patch_shape(), grid.max_stride());
  TrainingSample s;
  s.source = Source::Labeled;
  if (t.is_identity()) {
    s.patch = std::move(patch.volume);
    s.objects = std::move(patch.boxes);
  } else {
    s.patch = apply_to_volume(t, patch.volume);
    for (const auto& b : patch.boxes) s.objects.push_back(apply_to_box(t, b, grid.patch_shape()));
  }
  normalize(s.patch);
  s.targets = assign_targets(grid, s.objects, ap);
  return s;
}

/// Unlabeled training sample: crop, normalisation, ensembled and sharpened
/// targets; confident post-NMS detections become MixUp objects.
template <typename T>
TrainingSample make_unlabeled_sample(const ModelState<T>& s, const LabeledScan& scan, const Shape3& center,
                                     std::span<const CubeTransform> transforms, const AnchorGrid& grid,
                                     const SSLConfig& cfg, const DecodeParams& dp) {
  LabeledScan patch = crop_patch(scan, center, grid.patch_shape(), grid.max_stride());
  TrainingSample u;
  u.source = Source::Unlabeled;
  u.patch = std::move(patch.volume);
  normalize(u.patch);
  const EnsemblePrediction e = ensemble_predict(s, u.patch, grid, transforms);
  u.targets = targets_from_ensemble(e, cfg.T);
  DecodeParams odp = dp;
  odp.min_score = cfg.object_conf_threshold;
  for (const auto& d : decode_detections(grid, e.probs, e.offsets, odp))
    if (center_inside(d.box, grid.patch_shape())) u.objects.push_back(d.box);
  return u;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains a fresh detector. With unlabeled_per_batch == 0 and both MixUp
/// levels disabled this is the fully supervised baseline.
template <typename T = float>
TrainResult<T> train(std::span<const LabeledScan> labeled, std::span<const LabeledScan> unlabeled,
                     const SSLConfig& ssl, const DetectorConfig& model_cfg, const TrainConfig& tc,
                     std::span<const LabeledScan> validation = {}, const EpochCallback& on_epoch = {}) {
  if (labeled.empty()) throw ConfigError("training needs at least one labeled scan");
  ssl.validate();
  tc.validate();
  const int U = unlabeled.empty() ? 0 : ssl.unlabeled_per_batch;

  TrainResult<T> result{init_model<T>(model_cfg), {}};
  ModelState<T>& state = result.state;
  const AnchorGrid grid(model_cfg.input_patch, model_cfg.levels);
  const Shape3 patch = model_cfg.input_patch;
  const auto& group = enumerate_group();
  Rng rng(ssl.seed);

  std::vector<std::size_t> order(labeled.size());
  std::size_t cursor = order.size();
  const std::int64_t total_steps = static_cast<std::int64_t>(tc.epochs) * tc.steps_per_epoch;
  auto mix_weight = [&] { return sample_mix_weight(ssl.eta, rng); };

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(state.step, total_steps, tc.base_lr);
    double sum_l = 0.0, sum_u = 0.0;
    std::size_t n_l = 0, n_u = 0;

    for (int it = 0; it < tc.steps_per_epoch; ++it) {
      const double lr = cosine_lr(state.step, total_steps, tc.base_lr);

      std::vector<detail::LabeledDraw> ldraws(ssl.labeled_per_batch);
      for (auto& d : ldraws) {
        if (cursor >= order.size()) {
          for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
          rng.shuffle(std::span<std::size_t>(order));
          cursor = 0;
        }
        d.scan = order[cursor++];
        const auto& sc = labeled[d.scan];
        if (!sc.boxes.empty() && rng.uniform() < tc.positive_crop_fraction) {
          const Box3D& b = sc.boxes[rng.below(sc.boxes.size())];
          Shape3 c{};
          for (int a = 0; a < 3; ++a) {
            const int j = std::max(0, static_cast<int>(std::floor(0.5 * patch[a] - 0.5 * b.edge)) - 2);
            c[a] = static_cast<int>(std::floor(b.center[a])) + static_cast<int>(rng.integer(-j, j));
          }
          d.center = detail::clamp_window_center(c, sc.volume.shape, patch);
        } else {
          d.center = detail::random_window_center(sc.volume.shape, patch, rng);
        }
        if (tc.augment_labeled) d.transform = group[rng.below(group.size())];
      }

      std::vector<detail::UnlabeledDraw> udraws(U);
      for (auto& d : udraws) {
        d.scan = static_cast<std::size_t>(rng.below(unlabeled.size()));
        d.center = detail::random_window_center(unlabeled[d.scan].volume.shape, patch, rng);
        d.transforms = sample_transforms(ssl.K, rng);
      }

      const std::size_t n = ldraws.size() + udraws.size();
      std::vector<TrainingSample> batch(n);
      parallel_for(n, [&](std::size_t i) {
        if (i < ldraws.size()) {
          const auto& d = ldraws[i];
          batch[i] = make_labeled_sample(labeled[d.scan], d.center, d.transform, grid, tc.assign);
        } else {
          const auto& d = udraws[i - ldraws.size()];
          batch[i] = make_unlabeled_sample(state, unlabeled[d.scan], d.center, d.transforms, grid, ssl, tc.decode);
        }
      });

      if (tc.image_mixup) {
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<TrainingSample> mixed;
        mixed.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double lam = mix_weight();
          mixed.push_back(image_mixup(batch[perm[i]], batch[perm[(i + 1) % n]], lam));
        }
        batch = std::move(mixed);
      }
      if (tc.object_mixup) object_mixup(batch, mix_weight, rng);

      std::vector<Gradients<T>> grads(n);
      std::vector<double> losses(n, 0.0);
      parallel_for(n, [&](std::size_t i) {
        ForwardCache<T> cache;
        const DetectorOutput out = forward(state, batch[i].patch, &cache);
        const DetectionLoss dl = detection_loss(out.probs, out.offsets, batch[i].targets, tc.focal, tc.reg_weight);
        losses[i] = dl.total;
        grads[i] = state.zero_gradients();
        backward(state, cache, dl.grad_prob, dl.grad_offsets, grads[i]);
      });

      Gradients<T> total = state.zero_gradients();
      const T scale = static_cast<T>(1.0 / static_cast<double>(n));
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(losses[i])) throw DivergenceError("non-finite training loss");
        for (std::size_t k = 0; k < total.size(); ++k)
          for (std::size_t j = 0; j < total[k].size(); ++j) total[k][j] += scale * grads[i][k][j];
        if (batch[i].source == Source::Labeled) {
          sum_l += losses[i];
          ++n_l;
        } else {
          sum_u += losses[i];
          ++n_u;
        }
      }
      adam_step(state, total, lr);
    }

    if (n_l) m.loss_labeled = sum_l / static_cast<double>(n_l);
    if (n_u) m.loss_unlabeled = sum_u / static_cast<double>(n_u);
    const bool validate_now =
        !validation.empty() && (epoch == tc.epochs || (tc.val_every > 0 && epoch % tc.val_every == 0));
    if (validate_now) m.cpm_val = evaluate_model(state, validation, tc.decode).cpm;
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

}  // namespace focalmix

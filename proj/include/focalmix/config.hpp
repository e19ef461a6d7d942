#pragma once

// Experiment configuration: one JSON document with sections
//   "gen" (GenConfig), "detector" (DetectorConfig), "ssl" (SSLConfig),
//   "focal" (FocalParams), "train" (TrainConfig), "dataset" (counts).
// Missing keys keep their defaults; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "focalmix/detector.hpp"
#include "focalmix/error.hpp"
#include "focalmix/generator.hpp"
#include "focalmix/loss.hpp"
#include "focalmix/scan_io.hpp"
#include "focalmix/ssl.hpp"
#include "focalmix/trainer.hpp"

namespace focalmix {

struct DatasetCounts {
  int labeled = 4;
  int unlabeled = 32;
  int test = 24;
};

struct ExperimentConfig {
  GenConfig gen;
  DetectorConfig detector;
  SSLConfig ssl;
  TrainConfig train;
  DatasetCounts dataset;

  void validate() const {
    gen.validate();
    detector.validate();
    ssl.validate();
    train.validate();
    detail::require(dataset.labeled >= 0 && dataset.unlabeled >= 0 && dataset.test >= 0,
                    "dataset counts must be non-negative");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

template <typename V>
void read_range(const nlohmann::json& j, const char* key, Range<V>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2) throw ConfigError(std::string(key) + " must be [min, max]");
  out = {a[0].get<V>(), a[1].get<V>()};
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& root) {
  ExperimentConfig c;
  try {
    detail::check_keys(root, "", {"gen", "detector", "ssl", "focal", "train", "dataset"});
    if (root.contains("gen")) {
      const auto& j = root.at("gen");
      detail::check_keys(j, "gen",
                         {"volume_shape", "spacing_mm", "nodule_count_range", "nodule_diameter_range",
                          "nodule_contrast_range", "distractor_count_range", "noise_sigma", "blur_sigma",
                          "bias_amplitude", "seed"});
      auto& g = c.gen;
      detail::read_opt(j, "volume_shape", g.volume_shape);
      detail::read_opt(j, "spacing_mm", g.spacing_mm);
      detail::read_range(j, "nodule_count_range", g.nodule_count_range);
      detail::read_range(j, "nodule_diameter_range", g.nodule_diameter_range);
      detail::read_range(j, "nodule_contrast_range", g.nodule_contrast_range);
      detail::read_range(j, "distractor_count_range", g.distractor_count_range);
      detail::read_opt(j, "noise_sigma", g.noise_sigma);
      detail::read_opt(j, "blur_sigma", g.blur_sigma);
      detail::read_opt(j, "bias_amplitude", g.bias_amplitude);
      detail::read_opt(j, "seed", g.seed);
    }
    if (root.contains("detector")) {
      detail::check_keys(root.at("detector"), "detector",
                         {"input_patch", "stem_channels", "stage_channels", "fpn_channels", "levels",
                          "weight_init_seed", "cls_prior"});
      c.detector = detector_config_from_json(root.at("detector"));
    }
    if (root.contains("ssl")) {
      const auto& j = root.at("ssl");
      detail::check_keys(j, "ssl",
                         {"K", "T", "eta", "labeled_per_batch", "unlabeled_per_batch", "object_conf_threshold",
                          "seed"});
      auto& s = c.ssl;
      detail::read_opt(j, "K", s.K);
      detail::read_opt(j, "T", s.T);
      detail::read_opt(j, "eta", s.eta);
      detail::read_opt(j, "labeled_per_batch", s.labeled_per_batch);
      detail::read_opt(j, "unlabeled_per_batch", s.unlabeled_per_batch);
      detail::read_opt(j, "object_conf_threshold", s.object_conf_threshold);
      detail::read_opt(j, "seed", s.seed);
    }
    if (root.contains("focal")) {
      const auto& j = root.at("focal");
      detail::check_keys(j, "focal", {"alpha0", "alpha1", "gamma"});
      detail::read_opt(j, "alpha0", c.train.focal.alpha0);
      detail::read_opt(j, "alpha1", c.train.focal.alpha1);
      detail::read_opt(j, "gamma", c.train.focal.gamma);
    }
    if (root.contains("train")) {
      const auto& j = root.at("train");
      detail::check_keys(j, "train",
                         {"epochs", "steps_per_epoch", "base_lr", "reg_weight", "image_mixup", "object_mixup",
                          "augment_labeled", "positive_crop_fraction", "val_every", "positive_iou",
                          "negative_iou", "nms_iou", "pre_nms_top_k", "max_detections", "min_score"});
      auto& t = c.train;
      detail::read_opt(j, "epochs", t.epochs);
      detail::read_opt(j, "steps_per_epoch", t.steps_per_epoch);
      detail::read_opt(j, "base_lr", t.base_lr);
      detail::read_opt(j, "reg_weight", t.reg_weight);
      detail::read_opt(j, "image_mixup", t.image_mixup);
      detail::read_opt(j, "object_mixup", t.object_mixup);
      detail::read_opt(j, "augment_labeled", t.augment_labeled);
      detail::read_opt(j, "positive_crop_fraction", t.positive_crop_fraction);
      detail::read_opt(j, "val_every", t.val_every);
      detail::read_opt(j, "positive_iou", t.assign.positive_iou);
      detail::read_opt(j, "negative_iou", t.assign.negative_iou);
      detail::read_opt(j, "nms_iou", t.decode.nms_iou);
      detail::read_opt(j, "pre_nms_top_k", t.decode.pre_nms_top_k);
      detail::read_opt(j, "max_detections", t.decode.max_detections);
      detail::read_opt(j, "min_score", t.decode.min_score);
    }
    if (root.contains("dataset")) {
      const auto& j = root.at("dataset");
      detail::check_keys(j, "dataset", {"count_labeled", "count_unlabeled", "count_test"});
      detail::read_opt(j, "count_labeled", c.dataset.labeled);
      detail::read_opt(j, "count_unlabeled", c.dataset.unlabeled);
      detail::read_opt(j, "count_test", c.dataset.test);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json_value(const ExperimentConfig& c) {
  const auto& g = c.gen;
  const auto& t = c.train;
  return {
      {"gen",
       {{"volume_shape", g.volume_shape},
        {"spacing_mm", g.spacing_mm},
        {"nodule_count_range", {g.nodule_count_range.min, g.nodule_count_range.max}},
        {"nodule_diameter_range", {g.nodule_diameter_range.min, g.nodule_diameter_range.max}},
        {"nodule_contrast_range", {g.nodule_contrast_range.min, g.nodule_contrast_range.max}},
        {"distractor_count_range", {g.distractor_count_range.min, g.distractor_count_range.max}},
        {"noise_sigma", g.noise_sigma},
        {"blur_sigma", g.blur_sigma},
        {"bias_amplitude", g.bias_amplitude},
        {"seed", g.seed}}},
      {"detector", to_json_value(c.detector)},
      {"ssl",
       {{"K", c.ssl.K},
        {"T", c.ssl.T},
        {"eta", c.ssl.eta},
        {"labeled_per_batch", c.ssl.labeled_per_batch},
        {"unlabeled_per_batch", c.ssl.unlabeled_per_batch},
        {"object_conf_threshold", c.ssl.object_conf_threshold},
        {"seed", c.ssl.seed}}},
      {"focal", {{"alpha0", t.focal.alpha0}, {"alpha1", t.focal.alpha1}, {"gamma", t.focal.gamma}}},
      {"train",
       {{"epochs", t.epochs},
        {"steps_per_epoch", t.steps_per_epoch},
        {"base_lr", t.base_lr},
        {"reg_weight", t.reg_weight},
        {"image_mixup", t.image_mixup},
        {"object_mixup", t.object_mixup},
        {"augment_labeled", t.augment_labeled},
        {"positive_crop_fraction", t.positive_crop_fraction},
        {"val_every", t.val_every},
        {"positive_iou", t.assign.positive_iou},
        {"negative_iou", t.assign.negative_iou},
        {"nms_iou", t.decode.nms_iou},
        {"pre_nms_top_k", t.decode.pre_nms_top_k},
        {"max_detections", t.decode.max_detections},
        {"min_score", t.decode.min_score}}},
      {"dataset",
       {{"count_labeled", c.dataset.labeled},
        {"count_unlabeled", c.dataset.unlabeled},
        {"count_test", c.dataset.test}}}};
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config '" + path.string() + "': " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return experiment_config_from_json(j);
}

/// Dataset index bases keep the three splits disjoint and independent of
/// each other's sizes.
inline constexpr std::uint64_t kLabeledBase = 0;
inline constexpr std::uint64_t kUnlabeledBase = 1'000'000;
inline constexpr std::uint64_t kTestBase = 2'000'000;

/// Unlabeled scans are rendered with annotations and stripped afterwards.
inline LabeledScan strip_labels(LabeledScan s) {
  s.boxes.clear();
  return s;
}

}  // namespace focalmix

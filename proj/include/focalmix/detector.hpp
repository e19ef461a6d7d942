#pragma once

// Small 3D feature-pyramid detector:
//   stem conv (stride 1)
//   -> one residual stage per pyramid level (stride-2 conv + two-conv block)
//   -> top-down pyramid (1x1 laterals + nearest upsample + add)
//   -> shared head (3x3x3 conv, rectifier, 1x1 conv to 1 logit + 4 offsets)
// Stage i runs at stride 2^(i+1) and feeds anchor level i.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalmix/anchors.hpp"
#include "focalmix/error.hpp"
#include "focalmix/layers.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

struct DetectorConfig {
  Shape3 input_patch{32, 32, 32};
  int stem_channels = 8;
  std::vector<int> stage_channels{16, 24};
  int fpn_channels = 16;
  std::vector<LevelSpec> levels{{2, 4.0}, {4, 8.0}};
  std::uint64_t weight_init_seed = 1;
  double cls_prior = 0.01;

  void validate() const {
    detail::require(stem_channels > 0 && fpn_channels > 0, "channel counts must be positive");
    detail::require(!stage_channels.empty(), "detector needs at least one stage");
    detail::require(levels.size() == stage_channels.size(),
                    "one anchor level per residual stage is required");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      detail::require(stage_channels[i] > 0, "channel counts must be positive");
      detail::require(levels[i].stride == (2 << i),
                      "level " + std::to_string(i) + " stride must be " + std::to_string(2 << i));
    }
    detail::require(cls_prior > 0.0 && cls_prior < 1.0, "cls_prior must lie in (0,1)");
    const int max_stride = levels.back().stride;
    for (int a = 0; a < 3; ++a)
      detail::require(input_patch[a] > 0 && input_patch[a] % max_stride == 0,
                      "input patch must be divisible by the maximum stride");
  }

  bool operator==(const DetectorConfig&) const = default;
};

inline nlohmann::json to_json_value(const DetectorConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : c.levels) levels.push_back({{"stride", l.stride}, {"base_edge", l.base_edge}});
  return {{"input_patch", c.input_patch},     {"stem_channels", c.stem_channels},
          {"stage_channels", c.stage_channels}, {"fpn_channels", c.fpn_channels},
          {"levels", levels},                 {"weight_init_seed", c.weight_init_seed},
          {"cls_prior", c.cls_prior}};
}

inline DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  DetectorConfig c;
  if (j.contains("input_patch")) c.input_patch = j.at("input_patch").get<Shape3>();
  if (j.contains("stem_channels")) c.stem_channels = j.at("stem_channels").get<int>();
  if (j.contains("stage_channels")) c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  if (j.contains("fpn_channels")) c.fpn_channels = j.at("fpn_channels").get<int>();
  if (j.contains("levels")) {
    c.levels.clear();
    for (const auto& l : j.at("levels"))
      c.levels.push_back({l.at("stride").get<int>(), l.at("base_edge").get<double>()});
  }
  if (j.contains("weight_init_seed")) c.weight_init_seed = j.at("weight_init_seed").get<std::uint64_t>();
  if (j.contains("cls_prior")) c.cls_prior = j.at("cls_prior").get<double>();
  return c;
}

struct ConvLayer {
  ConvSpec spec;
  std::size_t weight = 0;  // parameter index
  std::size_t bias = 0;
};

struct Architecture {
  ConvLayer stem;
  struct Stage {
    ConvLayer down, conv_a, conv_b;
  };
  std::vector<Stage> stages;
  std::vector<ConvLayer> laterals;
  ConvLayer head_conv, head_out;
  static constexpr int kOutputs = 5;  // logit + 4 offsets
};

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  Buffer<T> value;
};

template <typename T>
using Gradients = std::vector<Buffer<T>>;

/// Parameters, Adam moments and step counter.
template <typename T>
struct ModelState {
  DetectorConfig config;
  Architecture arch;
  std::vector<Param<T>> params;
  std::vector<Buffer<T>> adam_m, adam_v;
  std::int64_t step = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }
  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    g.reserve(params.size());
    for (const auto& p : params) g.emplace_back(p.value.size(), T(0));
    return g;
  }
};

namespace detail {

template <typename T>
ConvLayer add_conv(ModelState<T>& s, const std::string& name, ConvSpec spec) {
  ConvLayer l{spec, s.params.size(), s.params.size() + 1};
  s.params.push_back({name + ".weight",
                      {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel, spec.kernel},
                      Buffer<T>(spec.weight_count(), T(0))});
  s.params.push_back({name + ".bias", {spec.out_channels}, Buffer<T>(spec.out_channels, T(0))});
  return l;
}

template <typename T>
void fill_normal(Buffer<T>& v, Rng& rng, double sd) {
  for (T& x : v) x = static_cast<T>(rng.normal() * sd);
}

}  // namespace detail

/// Builds a freshly initialised model: He-normal weights for rectified
/// convolutions, N(0, 0.01) output head, classification bias = logit(prior).
template <typename T>
ModelState<T> init_model(const DetectorConfig& cfg) {
  cfg.validate();
  ModelState<T> s;
  s.config = cfg;
  auto& a = s.arch;
  a.stem = detail::add_conv(s, "stem", {1, cfg.stem_channels, 3, 1});
  int prev = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const int c = cfg.stage_channels[i];
    const std::string p = "stage" + std::to_string(i);
    Architecture::Stage st;
    st.down = detail::add_conv(s, p + ".down", {prev, c, 3, 2});
    st.conv_a = detail::add_conv(s, p + ".conv_a", {c, c, 3, 1});
    st.conv_b = detail::add_conv(s, p + ".conv_b", {c, c, 3, 1});
    a.stages.push_back(st);
    prev = c;
  }
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i)
    a.laterals.push_back(detail::add_conv(s, "lateral" + std::to_string(i),
                                          {cfg.stage_channels[i], cfg.fpn_channels, 1, 1}));
  a.head_conv = detail::add_conv(s, "head.conv", {cfg.fpn_channels, cfg.fpn_channels, 3, 1});
  a.head_out = detail::add_conv(s, "head.out", {cfg.fpn_channels, Architecture::kOutputs, 1, 1});

  Rng rng(cfg.weight_init_seed);
  auto he = [&](const ConvLayer& l, double gain) {
    detail::fill_normal(s.params[l.weight].value, rng, gain * std::sqrt(2.0 / l.spec.fan_in()));
  };
  he(a.stem, 1.0);
  for (const auto& st : a.stages) {
    he(st.down, 1.0);
    he(st.conv_a, 1.0);
    he(st.conv_b, 0.5);
  }
  for (const auto& l : a.laterals) he(l, std::sqrt(0.5));
  he(a.head_conv, 1.0);
  detail::fill_normal(s.params[a.head_out.weight].value, rng, 0.01);
  s.params[a.head_out.bias].value[0] = static_cast<T>(std::log(cfg.cls_prior / (1.0 - cfg.cls_prior)));

  for (const auto& p : s.params) {
    s.adam_m.emplace_back(p.value.size(), T(0));
    s.adam_v.emplace_back(p.value.size(), T(0));
  }
  return s;
}

/// Activations kept by a training forward pass.
template <typename T>
struct ForwardCache {
  Shape3 input_dims{0, 0, 0};
  Tensor<T> input;
  ConvCache<T> stem_c;
  Tensor<T> stem;
  struct Stage {
    ConvCache<T> down_c, a_c, b_c;
    Tensor<T> d, r, s;
  };
  std::vector<Stage> stages;
  std::vector<ConvCache<T>> lat_c;
  std::vector<Tensor<T>> pyramid;
  std::vector<ConvCache<T>> head_c, out_c;
  std::vector<Tensor<T>> head;
  std::vector<double> probs;
  bool valid = false;
};

/// Per-anchor outputs in anchor-grid order.
struct DetectorOutput {
  std::vector<double> probs;
  std::vector<BoxOffsets> offsets;
};

template <typename T>
std::span<const T> pspan(const ModelState<T>& s, std::size_t i) {
  return {s.params[i].value.data(), s.params[i].value.size()};
}

/// Forward pass on any volume whose dimensions the maximum stride divides.
/// `cache` (optional) receives everything the reverse pass needs.
template <typename T>
DetectorOutput forward_any(const ModelState<T>& s, const Volume3D& volume, ForwardCache<T>* cache = nullptr) {
  const auto& cfg = s.config;
  const auto& a = s.arch;
  const int max_stride = cfg.levels.back().stride;
  for (int k = 0; k < 3; ++k)
    if (volume.shape[k] % max_stride != 0)
      throw ConfigError("input dimensions must be divisible by the maximum stride");

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  auto cc = [&](ConvCache<T>& slot) -> ConvCache<T>* { return keep ? &slot : nullptr; };
  auto run = [&](const ConvLayer& l, const Tensor<T>& in, ConvCache<T>* slot) {
    return conv3d_forward<T>(l.spec, pspan(s, l.weight), pspan(s, l.bias), in, slot);
  };

  const std::size_t L = a.stages.size();
  c.input_dims = volume.shape;
  c.stages.assign(L, {});
  c.lat_c.assign(L, {});
  c.pyramid.assign(L, {});
  c.head_c.assign(L, {});
  c.out_c.assign(L, {});
  c.head.assign(L, {});

  c.input = Tensor<T>(1, volume.shape);
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) c.input.data[i] = static_cast<T>(volume.voxels[i]);

  c.stem = run(a.stem, c.input, cc(c.stem_c));
  relu_inplace(c.stem);
  const Tensor<T>* prev = &c.stem;
  for (std::size_t i = 0; i < L; ++i) {
    auto& st = c.stages[i];
    st.d = run(a.stages[i].down, *prev, cc(st.down_c));
    relu_inplace(st.d);
    st.r = run(a.stages[i].conv_a, st.d, cc(st.a_c));
    relu_inplace(st.r);
    st.s = run(a.stages[i].conv_b, st.r, cc(st.b_c));
    add_inplace(st.s, st.d);
    relu_inplace(st.s);
    prev = &st.s;
  }
  for (std::size_t i = L; i-- > 0;) {
    c.pyramid[i] = run(a.laterals[i], c.stages[i].s, cc(c.lat_c[i]));
    if (i + 1 < L) add_inplace(c.pyramid[i], upsample2x(c.pyramid[i + 1]));
  }

  AnchorGrid grid(volume.shape, cfg.levels);
  DetectorOutput out;
  out.probs.resize(grid.total_count());
  out.offsets.resize(grid.total_count());
  for (std::size_t i = 0; i < L; ++i) {
    c.head[i] = run(a.head_conv, c.pyramid[i], cc(c.head_c[i]));
    relu_inplace(c.head[i]);
    const Tensor<T> o = run(a.head_out, c.head[i], cc(c.out_c[i]));
    const std::size_t off = grid.level_offset(i);
    const std::size_t n = o.plane();
    for (std::size_t j = 0; j < n; ++j) {
      out.probs[off + j] = sigmoid(static_cast<double>(o.channel(0)[j]));
      for (int k = 0; k < 4; ++k) out.offsets[off + j][k] = static_cast<double>(o.channel(1 + k)[j]);
    }
  }
  if (keep) {
    c.probs = out.probs;
    c.valid = true;
  } else {
    c.pyramid.clear();
  }
  return out;
}

/// Training/inference forward on a patch of exactly `config.input_patch`.
template <typename T>
DetectorOutput forward(const ModelState<T>& s, const Volume3D& patch, ForwardCache<T>* cache = nullptr) {
  if (patch.shape != s.config.input_patch) throw ConfigError("patch shape does not match the detector input");
  return forward_any(s, patch, cache);
}

/// Reverse pass: accumulates d loss / d params into `grads` given the loss
/// gradient with respect to each anchor's probability and offsets.
template <typename T>
void backward(const ModelState<T>& s, const ForwardCache<T>& c, std::span<const double> grad_prob,
              std::span<const BoxOffsets> grad_offsets, Gradients<T>& grads) {
  if (!c.valid) throw ConfigError("backward called without a forward cache");
  const auto& a = s.arch;
  const std::size_t L = a.stages.size();
  AnchorGrid grid(c.input_dims, s.config.levels);
  if (grad_prob.size() != grid.total_count() || grad_offsets.size() != grid.total_count())
    throw ConfigError("gradient length does not match the anchor grid");
  if (grads.size() != s.params.size()) grads = s.zero_gradients();

  auto back = [&](const ConvLayer& l, const ConvCache<T>& cache, const Tensor<T>& input,
                  const Tensor<T>& dout, bool need_input = true) {
    return conv3d_backward<T>(l.spec, pspan(s, l.weight), cache, input, dout,
                              std::span<T>(grads[l.weight]), std::span<T>(grads[l.bias]), need_input);
  };

  // Heads, one per pyramid level (shared weights).
  std::vector<Tensor<T>> dP(L);
  for (std::size_t i = 0; i < L; ++i) {
    const Shape3 dims = grid.level_dims(i);
    Tensor<T> dout(Architecture::kOutputs, dims);
    const std::size_t off = grid.level_offset(i);
    for (std::size_t j = 0; j < dout.plane(); ++j) {
      const double p = c.probs[off + j];
      dout.channel(0)[j] = static_cast<T>(grad_prob[off + j] * p * (1.0 - p));
      for (int k = 0; k < 4; ++k) dout.channel(1 + k)[j] = static_cast<T>(grad_offsets[off + j][k]);
    }
    Tensor<T> dh = back(a.head_out, c.out_c[i], c.head[i], dout);
    relu_backward_inplace(c.head[i], dh);
    dP[i] = back(a.head_conv, c.head_c[i], c.pyramid[i], dh);
  }
  // Top-down pathway: P_i = lateral_i(S_i) + up(P_{i+1}).
  for (std::size_t i = 0; i + 1 < L; ++i) add_inplace(dP[i + 1], upsample2x_backward(dP[i]));
  std::vector<Tensor<T>> dS(L);
  for (std::size_t i = 0; i < L; ++i) dS[i] = back(a.laterals[i], c.lat_c[i], c.stages[i].s, dP[i]);

  // Residual stages, deepest first.
  for (std::size_t i = L; i-- > 0;) {
    const auto& st = c.stages[i];
    Tensor<T>& ds = dS[i];
    relu_backward_inplace(st.s, ds);
    Tensor<T> dr = back(a.stages[i].conv_b, st.b_c, st.r, ds);
    relu_backward_inplace(st.r, dr);
    Tensor<T> dd = back(a.stages[i].conv_a, st.a_c, st.d, dr);
    add_inplace(dd, ds);
    relu_backward_inplace(st.d, dd);
    const Tensor<T>& below = i == 0 ? c.stem : c.stages[i - 1].s;
    Tensor<T> dprev = back(a.stages[i].down, st.down_c, below, dd);
    if (i == 0) {
      relu_backward_inplace(c.stem, dprev);
      back(a.stem, c.stem_c, c.input, dprev, false);
    } else {
      add_inplace(dS[i - 1], dprev);
    }
  }
}

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update; throws DivergenceError on a non-finite
/// gradient or parameter.
template <typename T>
void adam_step(ModelState<T>& s, const Gradients<T>& grads, double lr, const AdamParams& ap = {}) {
  if (grads.size() != s.params.size()) throw ConfigError("gradient layout does not match the model");
  s.step += 1;
  const double bc1 = 1.0 - std::pow(ap.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(ap.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < s.params.size(); ++k) {
    auto& p = s.params[k].value;
    auto& m = s.adam_m[k];
    auto& v = s.adam_v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      if (!std::isfinite(gi)) throw DivergenceError("non-finite gradient in " + s.params[k].name);
      const double mi = ap.beta1 * static_cast<double>(m[i]) + (1.0 - ap.beta1) * gi;
      const double vi = ap.beta2 * static_cast<double>(v[i]) + (1.0 - ap.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double upd = lr * (mi / bc1) / (std::sqrt(vi / bc2) + ap.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - upd);
      if (!std::isfinite(static_cast<double>(p[i])))
        throw DivergenceError("non-finite parameter in " + s.params[k].name);
    }
  }
}

/// base_lr * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace focalmix

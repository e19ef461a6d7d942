#pragma once

// Central finite-difference checks of the hand-written gradients. Every
// check returns the worst relative error |a - n| / max(|a|, |n|, floor)
// over its samples.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "focalmix/anchors.hpp"
#include "focalmix/detector.hpp"
#include "focalmix/layers.hpp"
#include "focalmix/loss.hpp"
#include "focalmix/rng.hpp"

namespace gradcheck {

using namespace focalmix;

inline double rel_error(double analytic, double numeric, double floor = 1e-12) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Random (p, y, params) kept 1e-3 away from the |y - p| kink and from the
// clamp region.
inline double soft_focal(Rng& rng, int samples, double h = 1e-5) {
  double worst = 0.0;
  for (int i = 0; i < samples; ++i) {
    FocalParams fp{rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99), rng.uniform(0.0, 4.0)};
    const double u = rng.uniform();
    const double y = u < 0.2 ? 0.0 : u < 0.4 ? 1.0 : rng.uniform();
    double p;
    do p = rng.uniform(1e-3, 1.0 - 1e-3);
    while (std::abs(p - y) < 1e-3);
    const double a = soft_focal_loss(p, y, fp).grad;
    const double n = (soft_focal_loss(p + h, y, fp).loss - soft_focal_loss(p - h, y, fp).loss) / (2.0 * h);
    worst = std::max(worst, rel_error(a, n));
  }
  return worst;
}

inline double focal(Rng& rng, int samples, double h = 1e-5) {
  double worst = 0.0;
  for (int i = 0; i < samples; ++i) {
    FocalParams fp{rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99), rng.uniform(0.0, 4.0)};
    const int y = rng.uniform() < 0.5 ? 0 : 1;
    const double p = rng.uniform(1e-3, 1.0 - 1e-3);
    if (std::abs(p - y) < 1e-3) continue;
    const double a = focal_loss(p, y, fp).grad;
    const double n = (focal_loss(p + h, y, fp).loss - focal_loss(p - h, y, fp).loss) / (2.0 * h);
    worst = std::max(worst, rel_error(a, n));
  }
  return worst;
}

// Differences kept 1e-3 away from the |x| = 1 joint.
inline double smooth_l1_loss(Rng& rng, int samples, double h = 1e-5) {
  double worst = 0.0;
  for (int i = 0; i < samples; ++i) {
    BoxOffsets pred{}, target{};
    for (int k = 0; k < 4; ++k) {
      target[k] = rng.uniform(-2.0, 2.0);
      double d;
      do d = rng.uniform(-3.0, 3.0);
      while (std::abs(std::abs(d) - 1.0) < 1e-3);
      pred[k] = target[k] + d;
    }
    const auto r = smooth_l1(pred, target);
    for (int k = 0; k < 4; ++k) {
      BoxOffsets up = pred, dn = pred;
      up[k] += h;
      dn[k] -= h;
      const double n = (smooth_l1(up, target).loss - smooth_l1(dn, target).loss) / (2.0 * h);
      worst = std::max(worst, rel_error(r.grad[k], n, 1e-8));
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(Rng& rng, int c, Shape3 d, double margin = 0.0) {
  Tensor<double> t(c, d);
  for (double& v : t.data) {
    do v = rng.normal();
    while (std::abs(v) < margin);
  }
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// Probes `count` coordinates of `x` (or all when count >= size).
inline double probe(Rng& rng, std::span<double> x, std::span<const double> analytic,
                    const std::function<double()>& objective, int count, double h) {
  double worst = 0.0;
  const std::size_t n = x.size();
  const std::size_t m = std::min<std::size_t>(n, static_cast<std::size_t>(count));
  for (std::size_t t = 0; t < m; ++t) {
    const std::size_t i = m == n ? t : static_cast<std::size_t>(rng.below(n));
    const double keep = x[i];
    x[i] = keep + h;
    const double up = objective();
    x[i] = keep - h;
    const double dn = objective();
    x[i] = keep;
    worst = std::max(worst, rel_error(analytic[i], (up - dn) / (2.0 * h), 1e-8));
  }
  return worst;
}

// Convolution: objective <w_out, conv(x)> against input, weight and bias
// gradients, for every kernel/stride combination the model uses.
inline double conv(Rng& rng, double h = 1e-5) {
  double worst = 0.0;
  for (int kernel : {1, 3})
    for (int stride : {1, 2}) {
      if (kernel == 1 && stride == 2) continue;
      const ConvSpec spec{2, 3, kernel, stride};
      const Shape3 dims{4, 6, 5};
      Tensor<double> x = random_tensor(rng, 2, dims);
      std::vector<double> w(spec.weight_count()), b(3);
      for (double& v : w) v = rng.normal();
      for (double& v : b) v = rng.normal();
      const Tensor<double> wout = random_tensor(rng, 3, spec.output_dims(dims));
      auto objective = [&] {
        return dot(wout, conv3d_forward<double>(spec, w, b, x, nullptr));
      };
      ConvCache<double> cache;
      conv3d_forward<double>(spec, w, b, x, &cache);
      std::vector<double> dw(w.size(), 0.0), db(b.size(), 0.0);
      const auto dx = conv3d_backward<double>(spec, w, cache, x, wout, dw, db);
      worst = std::max(worst, probe(rng, x.data, dx.data, objective, 1 << 30, h));
      worst = std::max(worst, probe(rng, w, dw, objective, 1 << 30, h));
      worst = std::max(worst, probe(rng, b, db, objective, 1 << 30, h));
    }
  return worst;
}

inline double relu(Rng& rng, double h = 1e-5) {
  Tensor<double> x = random_tensor(rng, 2, {3, 4, 5}, 1e-2);
  const Tensor<double> wout = random_tensor(rng, 2, {3, 4, 5});
  auto objective = [&] {
    Tensor<double> y = x;
    relu_inplace(y);
    return dot(wout, y);
  };
  Tensor<double> y = x;
  relu_inplace(y);
  Tensor<double> g = wout;
  relu_backward_inplace(y, g);
  return probe(rng, x.data, g.data, objective, 1 << 30, h);
}

inline double upsample(Rng& rng, double h = 1e-5) {
  Tensor<double> x = random_tensor(rng, 2, {2, 3, 2});
  const Tensor<double> wout = random_tensor(rng, 2, {4, 6, 4});
  auto objective = [&] { return dot(wout, upsample2x(x)); };
  const auto g = upsample2x_backward(wout);
  return probe(rng, x.data, g.data, objective, 1 << 30, h);
}

inline double add(Rng& rng, double h = 1e-5) {
  Tensor<double> a = random_tensor(rng, 2, {2, 2, 3});
  const Tensor<double> b = random_tensor(rng, 2, {2, 2, 3});
  const Tensor<double> wout = random_tensor(rng, 2, {2, 2, 3});
  auto objective = [&] {
    Tensor<double> y = a;
    add_inplace(y, b);
    return dot(wout, y);
  };
  return probe(rng, a.data, wout.data, objective, 1 << 30, h);
}

inline double sigmoid_layer(Rng& rng, double h = 1e-5) {
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double z = rng.uniform(-12.0, 12.0);
    const double s = sigmoid(z);
    const double n = (sigmoid(z + h) - sigmoid(z - h)) / (2.0 * h);
    worst = std::max(worst, rel_error(s * (1.0 - s), n, 1e-8));
  }
  return worst;
}

inline DetectorConfig micro_config() {
  DetectorConfig c;
  c.input_patch = {8, 8, 8};
  c.stem_channels = 2;
  c.stage_channels = {3, 4};
  c.fpn_channels = 3;
  c.levels = {{2, 4.0}, {4, 8.0}};
  c.weight_init_seed = 5;
  return c;
}

// Whole detector on an 8^3 patch: detection loss with random soft targets
// and regression targets, checked on `count` random parameters per tensor.
inline double micro_network(Rng& rng, int count, double h = 1e-4) {
  auto s = init_model<double>(micro_config());
  // move the head away from its tiny initial scale so every path matters
  for (auto& p : s.params)
    for (double& v : p.value) v += 0.05 * rng.normal();
  Volume3D patch({8, 8, 8});
  for (float& v : patch.voxels) v = static_cast<float>(rng.normal());
  const AnchorGrid grid({8, 8, 8}, s.config.levels);
  AnchorTargets t(grid.total_count());
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.cls[i] = rng.uniform();
    t.train[i] = rng.uniform() < 0.9;
    t.has_reg[i] = rng.uniform() < 0.3;
    for (double& v : t.reg[i]) v = rng.uniform(-0.5, 0.5);
  }
  const FocalParams fp;
  auto objective = [&] {
    const auto out = forward(s, patch);
    return detection_loss(out.probs, out.offsets, t, fp).total;
  };
  ForwardCache<double> cache;
  const auto out = forward(s, patch, &cache);
  const auto dl = detection_loss(out.probs, out.offsets, t, fp);
  auto grads = s.zero_gradients();
  backward(s, cache, dl.grad_prob, dl.grad_offsets, grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < s.params.size(); ++k)
    worst = std::max(worst, probe(rng, s.params[k].value, grads[k], objective, count, h));
  return worst;
}

}  // namespace gradcheck

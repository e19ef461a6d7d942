#pragma once

// Soft-target focal loss, hard-label focal loss, smooth L1, and the
// per-patch detection loss that combines them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "focalmix/anchors.hpp"
#include "focalmix/error.hpp"

namespace focalmix {

struct FocalParams {
  double alpha0 = 0.05;
  double alpha1 = 0.95;
  double gamma = 2.0;

  void validate() const {
    detail::require(alpha0 > 0.0 && alpha0 < 1.0, "alpha0 must lie in (0,1)");
    detail::require(alpha1 > 0.0 && alpha1 < 1.0, "alpha1 must lie in (0,1)");
    detail::require(gamma >= 0.0, "gamma must be non-negative");
  }
};

inline constexpr double kProbEpsilon = 1e-7;

struct LossGrad {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d p
};

namespace detail {
inline void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw ContractError(std::string(what) + " must lie in [0,1]");
}
}  // namespace detail

/// Class weight interpolated linearly in the soft target.
inline double alpha_of(double y, const FocalParams& fp) { return fp.alpha0 + y * (fp.alpha1 - fp.alpha0); }

/// [a0 + y(a1 - a0)] * |y - p|^gamma * CE(y, p), with p clamped to
/// [eps, 1-eps]. The gradient of |y - p|^gamma is taken as 0 at p == y.
inline LossGrad soft_focal_loss(double p, double y, const FocalParams& fp) {
  detail::check_unit(p, "probability");
  detail::check_unit(y, "soft target");
  p = std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
  const double a = alpha_of(y, fp);
  const double diff = y - p;
  const double ad = std::abs(diff);
  const double mod = std::pow(ad, fp.gamma);
  const double ce = -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
  const double dce = -y / p + (1.0 - y) / (1.0 - p);
  double dmod = 0.0;
  if (ad > 0.0 && fp.gamma != 0.0) {
    // d|y-p|^g/dp = -g |y-p|^(g-1) sign(y-p)
    dmod = -fp.gamma * std::pow(ad, fp.gamma - 1.0) * (diff > 0.0 ? 1.0 : -1.0);
  }
  return {a * mod * ce, a * (dmod * ce + mod * dce)};
}

/// -alpha_t (1 - p_t)^gamma ln p_t with p_t = p for y=1, 1-p for y=0.
inline LossGrad focal_loss(double p, int y, const FocalParams& fp) {
  detail::check_unit(p, "probability");
  if (y != 0 && y != 1) throw ContractError("focal_loss requires a binary label");
  p = std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
  if (y == 1) {
    const double q = 1.0 - p;
    const double lg = std::log(p);
    const double loss = -fp.alpha1 * std::pow(q, fp.gamma) * lg;
    const double dq = fp.gamma != 0.0 ? -fp.gamma * std::pow(q, fp.gamma - 1.0) : 0.0;
    return {loss, -fp.alpha1 * (dq * lg + std::pow(q, fp.gamma) / p)};
  }
  const double lg = std::log(1.0 - p);
  const double loss = -fp.alpha0 * std::pow(p, fp.gamma) * lg;
  const double dp = fp.gamma != 0.0 ? fp.gamma * std::pow(p, fp.gamma - 1.0) : 0.0;
  return {loss, -fp.alpha0 * (dp * lg - std::pow(p, fp.gamma) / (1.0 - p))};
}

struct SmoothL1Result {
  double loss = 0.0;
  BoxOffsets grad{};
};

inline SmoothL1Result smooth_l1(const BoxOffsets& pred, const BoxOffsets& target) {
  SmoothL1Result r;
  for (int i = 0; i < 4; ++i) {
    const double x = pred[i] - target[i];
    if (std::abs(x) < 1.0) {
      r.loss += 0.5 * x * x;
      r.grad[i] = x;
    } else {
      r.loss += std::abs(x) - 0.5;
      r.grad[i] = x > 0.0 ? 1.0 : -1.0;
    }
  }
  return r;
}

struct DetectionLoss {
  double total = 0.0;
  double classification = 0.0;
  double regression = 0.0;
  std::vector<double> grad_prob;        // d total / d p_i
  std::vector<BoxOffsets> grad_offsets;  // d total / d offsets_i
};

/// Sum of SFL over train anchors / max(1, target mass over train anchors)
/// + reg_weight * mean smooth L1 over train anchors with regression targets.
/// Reductions run in anchor order.
inline DetectionLoss detection_loss(std::span<const double> probs, std::span<const BoxOffsets> offsets,
                                    const AnchorTargets& t, const FocalParams& fp, double reg_weight = 1.0) {
  const std::size_t n = t.size();
  if (probs.size() != n || offsets.size() != n)
    throw ConfigError("prediction length does not match anchor targets");
  DetectionLoss out;
  out.grad_prob.assign(n, 0.0);
  out.grad_offsets.assign(n, BoxOffsets{});

  double mass = 0.0;
  std::size_t n_reg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!t.train[i]) continue;
    mass += t.cls[i];
    if (t.has_reg[i]) ++n_reg;
  }
  const double cls_norm = 1.0 / std::max(1.0, mass);
  for (std::size_t i = 0; i < n; ++i) {
    if (!t.train[i]) continue;
    const auto lg = soft_focal_loss(probs[i], t.cls[i], fp);
    out.classification += lg.loss;
    out.grad_prob[i] = lg.grad * cls_norm;
  }
  out.classification *= cls_norm;

  if (n_reg > 0 && reg_weight != 0.0) {
    const double reg_norm = reg_weight / static_cast<double>(n_reg);
    for (std::size_t i = 0; i < n; ++i) {
      if (!t.train[i] || !t.has_reg[i]) continue;
      const auto r = smooth_l1(offsets[i], t.reg[i]);
      out.regression += r.loss;
      for (int k = 0; k < 4; ++k) out.grad_offsets[i][k] = r.grad[k] * reg_norm;
    }
    out.regression *= reg_norm;
  }
  out.total = out.classification + out.regression;
  return out;
}

}  // namespace focalmix

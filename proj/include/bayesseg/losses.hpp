#pragma once
// Segmentation losses (differentiable, on probabilities) and hard-mask metrics.
//
// Conventions: region losses add a smoothing constant s = 1 to numerator and
// denominator; logarithms see probabilities clamped to [1e-7, 1 - 1e-7].
// bce_loss and binary_focal_loss average over pixels, nll_loss sums.

#include <cstddef>
#include <string>

#include "bayesseg/tensor.hpp"

namespace bayesseg {

inline constexpr double kRegionSmoothing = 1.0;
inline constexpr double kProbabilityClamp = 1e-7;

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

namespace detail {

inline void check_same_shape(const char* op, const Tensor& probs, const Tensor& mask) {
  if (probs.shape() != mask.shape()) {
    throw ShapeError(op, "shape", "probabilities " + shape_str(probs.shape()) + " vs mask " + shape_str(mask.shape()));
  }
}

inline Tensor clamped(const Tensor& probs) { return clamp(probs, kProbabilityClamp, 1.0 - kProbabilityClamp); }

/// y log p + (1 - y) log(1 - p), per pixel.
inline Tensor bernoulli_log_likelihood(const Tensor& probs, const Tensor& mask) {
  const Tensor p = clamped(probs);
  return mask * log(p) + (1.0 - mask) * log(1.0 - p);
}

}  // namespace detail

/// 1 - (sum p y + s) / (sum (p + y - p y) + s)
inline Tensor jaccard_loss(const Tensor& probs, const Tensor& mask) {
  detail::check_same_shape("jaccard_loss", probs, mask);
  const Tensor intersection = sum(probs * mask);
  const Tensor union_ = sum(probs) + sum(mask) - intersection;
  return 1.0 - (intersection + kRegionSmoothing) / (union_ + kRegionSmoothing);
}

/// 1 - (2 sum p y + s) / (sum p + sum y + s)
inline Tensor dice_loss(const Tensor& probs, const Tensor& mask) {
  detail::check_same_shape("dice_loss", probs, mask);
  const Tensor intersection = sum(probs * mask);
  return 1.0 - (2.0 * intersection + kRegionSmoothing) / (sum(probs) + sum(mask) + kRegionSmoothing);
}

inline Tensor bce_loss(const Tensor& probs, const Tensor& mask) {
  detail::check_same_shape("bce_loss", probs, mask);
  return -mean(detail::bernoulli_log_likelihood(probs, mask));
}

/// mean of -y a (1-p)^g log p - (1-y) a p^g log(1-p)
inline Tensor binary_focal_loss(const Tensor& probs, const Tensor& mask, const FocalParams& params = {}) {
  detail::check_same_shape("binary_focal_loss", probs, mask);
  const Tensor p = detail::clamped(probs);
  const Tensor positive = mask * pow_scalar(1.0 - p, params.gamma) * log(p);
  const Tensor negative = (1.0 - mask) * pow_scalar(p, params.gamma) * log(1.0 - p);
  return -params.alpha * mean(positive + negative);
}

/// dice + 0.5 * focal
inline Tensor total_loss(const Tensor& probs, const Tensor& mask, const FocalParams& params = {}) {
  return dice_loss(probs, mask) + 0.5 * binary_focal_loss(probs, mask, params);
}

/// Summed Bernoulli negative log-likelihood; equals n * bce_loss.
inline Tensor nll_loss(const Tensor& probs, const Tensor& mask) {
  detail::check_same_shape("nll_loss", probs, mask);
  return -sum(detail::bernoulli_log_likelihood(probs, mask));
}

// ---------------------------------------------------------------------------
// Metrics on binary masks.

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
    return *this;
  }
  /// Intersection over union; 1.0 when both masks are empty.
  double iou() const { return (tp + fp + fn) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp + fn); }
  /// TP / (TP + FN); 1.0 when there are no positives.
  double recall() const { return (tp + fn) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
};

namespace detail {

inline void check_binary_mask(const char* op, const Tensor& t) {
  const auto& v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] != 0.0 && v[i] != 1.0) throw DomainError(op, i, "mask is not binary");
}

}  // namespace detail

inline ConfusionCounts confusion_counts(const Tensor& pred_mask, const Tensor& mask) {
  detail::check_same_shape("confusion_counts", pred_mask, mask);
  detail::check_binary_mask("confusion_counts", pred_mask);
  detail::check_binary_mask("confusion_counts", mask);
  ConfusionCounts c;
  const auto& p = pred_mask.values();
  const auto& y = mask.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pred = p[i] == 1.0, truth = y[i] == 1.0;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double iou_metric(const Tensor& pred_mask, const Tensor& mask) { return confusion_counts(pred_mask, mask).iou(); }

inline double recall_metric(const Tensor& pred_mask, const Tensor& mask) {
  return confusion_counts(pred_mask, mask).recall();
}

/// 1 where p > threshold (strict), else 0.
inline Tensor binarize(const Tensor& probs, double threshold = 0.5) {
  std::vector<double> out(probs.size());
  const auto& v = probs.values();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > threshold ? 1.0 : 0.0;
  return Tensor(probs.shape(), std::move(out));
}

}  // namespace bayesseg

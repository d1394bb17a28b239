#pragma once
// Adam, the training loop with early stopping, and split evaluation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bayesseg/calibration.hpp"
#include "bayesseg/data.hpp"
#include "bayesseg/losses.hpp"
#include "bayesseg/segnet.hpp"

namespace bayesseg {

enum class LossKind { dice, jaccard, bce, total, nll };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::dice: return "dice";
    case LossKind::jaccard: return "jaccard";
    case LossKind::bce: return "bce";
    case LossKind::total: return "total";
    case LossKind::nll: return "nll";
  }
  return "?";
}

/// Data term of the objective for one batch. The summed NLL is divided by the
/// batch size so it is a per-example quantity like the KL term.
inline Tensor data_loss(LossKind kind, const Tensor& probs, const Tensor& masks, const FocalParams& focal = {}) {
  switch (kind) {
    case LossKind::dice: return dice_loss(probs, masks);
    case LossKind::jaccard: return jaccard_loss(probs, masks);
    case LossKind::bce: return bce_loss(probs, masks);
    case LossKind::total: return total_loss(probs, masks, focal);
    case LossKind::nll: return nll_loss(probs, masks) * (1.0 / static_cast<double>(probs.dim(0)));
  }
  throw ConfigError("train.loss", "unknown loss kind");
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  /// One bias-corrected update from the gradients currently accumulated.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[k][i] / c1, vhat = v_[k][i] / c2;
        w[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= scale;
  }
  return norm;
}

struct TrainConfig {
  std::size_t batch_size = 8;
  AdamConfig adam;
  std::size_t max_epochs = 50;
  std::size_t patience = 3;
  std::optional<double> kl_scale;  // unset: 1 / N_train
  LossKind loss = LossKind::total;
  FocalParams focal;
  double clip_norm = 10.0;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (!(adam.learning_rate >= 0.0)) throw ConfigError("train.learning_rate", "must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
    if (!(adam.epsilon > 0.0)) throw ConfigError("train.epsilon", "must be > 0");
    if (max_epochs < 1) throw ConfigError("train.max_epochs", "must be >= 1");
    if (patience < 1) throw ConfigError("train.patience", "must be >= 1");
    if (kl_scale && !(*kl_scale >= 0.0 && std::isfinite(*kl_scale))) throw ConfigError("train.kl_scale", "must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm", "must be >= 0");
  }
};

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_iou = 0.0;
  double best_val_loss = 0.0;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  double kl_scale = 0.0;
};

namespace detail {

inline std::string parameter_norms(const SegModel& model) {
  std::ostringstream os;
  for (const auto& p : model.parameters()) {
    double sq = 0.0;
    for (double v : p.value.data()) sq += v * v;
    os << "\n  " << p.name << " |w|=" << std::sqrt(sq);
  }
  return os.str();
}

inline std::vector<std::vector<double>> snapshot(const SegModel& model) {
  std::vector<std::vector<double>> out;
  for (const auto& p : model.parameters()) out.push_back(p.value.values());
  return out;
}

inline void restore(const SegModel& model, const std::vector<std::vector<double>>& snap) {
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) std::copy(snap[k].begin(), snap[k].end(), params[k].value.mutable_data().begin());
}

}  // namespace detail

/// Objective under zero noise: data loss + kl_scale * KL, averaged over the
/// batches with weights equal to their sizes.
inline double validation_loss(const SegModel& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                              double kl_scale) {
  if (samples.empty()) throw DataError("validation_loss: empty split");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(samples.size(), start + cfg.batch_size);
    const Batch b = make_batch({samples.begin() + static_cast<std::ptrdiff_t>(start),
                                samples.begin() + static_cast<std::ptrdiff_t>(end)});
    Noise noise = Noise::zero();
    Tensor kl = Tensor::scalar(0.0);
    const Tensor probs = model.forward_with(b.images, noise, &kl);
    const double loss = data_loss(cfg.loss, probs, b.masks, cfg.focal).item() + kl_scale * kl.item();
    total += loss * static_cast<double>(end - start);
  }
  return total / static_cast<double>(samples.size());
}

/// Mean per-image IoU of the zero-noise prediction.
inline double mean_iou(const SegModel& model, const std::vector<Sample>& samples, double threshold = 0.5) {
  if (samples.empty()) throw DataError("mean_iou: empty split");
  NoGradGuard no_grad;
  double s = 0.0;
  for (const auto& sample : samples) {
    const Tensor probs = model.forward_mean(detail::as_batch(sample.image));
    s += iou_metric(binarize(reshape(probs, sample.mask.shape()), threshold), sample.mask);
  }
  return s / static_cast<double>(samples.size());
}

/// Minimises data_loss + kl_scale * KL with Adam, one weight sample per batch.
/// Stops after `patience` epochs without a strictly lower validation loss and
/// leaves the model holding the best-validation parameters.
inline TrainResult train(SegModel& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TrainConfig& cfg, const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training split");
  if (val_set.empty()) throw DataError("train: empty validation split");

  TrainResult result;
  result.kl_scale = cfg.kl_scale.value_or(1.0 / static_cast<double>(train_set.size()));
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.value);
  Adam adam(params, cfg.adam);
  adam.zero_grad();

  Rng noise_rng(derive_seed(cfg.seed, "noise"));
  const std::uint64_t order_seed = derive_seed(cfg.seed, "order");
  const std::uint64_t augment_seed = derive_seed(cfg.seed, "augment");

  std::vector<std::vector<double>> best = detail::snapshot(model);
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(derive_seed(order_seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[order_rng.next_u64() % (i + 1)]);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample> batch_samples;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train_set[order[i]];
        if (cfg.augment) {
          Rng aug_rng(derive_seed(derive_seed(augment_seed, static_cast<std::uint64_t>(epoch)), s.id));
          batch_samples.push_back(augment(s, aug_rng));
        } else {
          batch_samples.push_back(s);
        }
      }
      const Batch batch = make_batch(batch_samples);
      auto fail = [&](const std::string& what) {
        return NumericError(what + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                            "; parameter norms:" + detail::parameter_norms(model));
      };
      Tensor objective;
      try {
        const StochasticOutput out = model.forward_stochastic(batch.images, noise_rng);
        objective = data_loss(cfg.loss, out.probs, batch.masks, cfg.focal) + result.kl_scale * out.kl;
      } catch (const DomainError& e) {
        // NaN weights reach log() before a loss value exists
        throw fail(std::string("non-finite training loss (") + e.what() + ")");
      }
      const double value = objective.item();
      if (!std::isfinite(value)) throw fail("non-finite training loss");
      backward(objective);
      clip_grad_norm(params, cfg.clip_norm);
      adam.step();
      adam.zero_grad();
      loss_sum += value * static_cast<double>(end - start);
    }

    HistoryRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    row.val_loss = validation_loss(model, val_set, cfg, result.kl_scale);
    if (!std::isfinite(row.val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch) +
                         "; parameter norms:" + detail::parameter_norms(model));
    }
    row.val_iou = mean_iou(model, val_set);
    if (row.val_loss < result.best_val_loss) {
      result.best_val_loss = row.val_loss;
      result.best_epoch = epoch;
      best = detail::snapshot(model);
      since_best = 0;
    } else {
      ++since_best;
    }
    row.best_val_loss = result.best_val_loss;
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
    if (since_best >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  detail::restore(model, best);
  return result;
}

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_iou,best_val_loss\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.val_iou,
                  r.best_val_loss);
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation.

/// MC-mean probabilities for one image together with its ground truth.
struct ImagePrediction {
  std::string id;
  Tensor mean_probs;  // [1,H,W]
  Tensor mask;        // [1,H,W]
};

struct ImageMetrics {
  std::string id;
  ConfusionCounts counts;
  double iou = 0.0;
  double recall = 0.0;
  double ece = 0.0;
};

struct EvalMetrics {
  double iou = 0.0;     // mean per-image IoU
  double recall = 0.0;  // from confusion counts summed over the split
  double ece = 0.0;     // mean per-image ECE
  ConfusionCounts counts;
  std::size_t images = 0;
  std::vector<ReliabilityBin> bins;  // pooled over every pixel of the split
  std::vector<ImageMetrics> per_image;
};

inline EvalMetrics evaluate_predictions(const std::vector<ImagePrediction>& predictions, const McConfig& cfg) {
  if (predictions.empty()) throw DataError("evaluate: empty split");
  EvalMetrics m;
  m.images = predictions.size();
  m.bins = empty_bins(cfg.num_bins);
  std::vector<double> eces;
  double iou_sum = 0.0;
  for (const auto& p : predictions) {
    ImageMetrics im;
    im.id = p.id;
    im.counts = confusion_counts(binarize(p.mean_probs, cfg.threshold), p.mask);
    im.iou = im.counts.iou();
    im.recall = im.counts.recall();
    im.ece = ece_image(p.mean_probs, p.mask, cfg.num_bins, cfg.confidence).ece;
    accumulate_bins(p.mean_probs.data(), p.mask.data(), m.bins, cfg.confidence);
    m.counts += im.counts;
    iou_sum += im.iou;
    eces.push_back(im.ece);
    m.per_image.push_back(std::move(im));
  }
  m.iou = iou_sum / static_cast<double>(m.images);
  m.recall = m.counts.recall();
  m.ece = ece_dataset(eces);
  return m;
}

struct EvalReport {
  EvalMetrics metrics;
  std::vector<ImagePrediction> predictions;
};

/// MC prediction for every sample; each image draws from its own stream
/// derived from (cfg.seed, id), so results do not depend on sample order.
inline EvalReport evaluate(const SegModel& model, const std::vector<Sample>& samples, const McConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw DataError("evaluate: empty split");
  EvalReport report;
  const std::uint64_t base = derive_seed(cfg.seed, "mc");
  for (const auto& s : samples) {
    Rng rng(derive_seed(base, s.id));
    McPrediction p = mc_predict(model, s.image, cfg, rng);
    report.predictions.push_back({s.id, p.mean_probs, s.mask});
  }
  report.metrics = evaluate_predictions(report.predictions, cfg);
  return report;
}

}  // namespace bayesseg

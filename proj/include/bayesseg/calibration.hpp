#pragma once
// Monte-Carlo predictive inference, pixel-level expected calibration error,
// reliability tables/diagrams, and gradient saliency.
//
// Pixel confidence defaults to max(p, 1 - p) with predicted class 1 iff
// p > 0.5, so background pixels count as predictions too. The alternative
// (ConfidenceMode::positive_class) scores the class-1 probability against the
// empirical class-1 frequency of each bin.

#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bayesseg/losses.hpp"
#include "bayesseg/random.hpp"
#include "bayesseg/segnet.hpp"
#include "bayesseg/tensor.hpp"

namespace bayesseg {

enum class ConfidenceMode { max_probability, positive_class };

inline std::string to_string(ConfidenceMode m) {
  return m == ConfidenceMode::max_probability ? "max_probability" : "positive_class";
}

struct McConfig {
  std::size_t num_samples = 50;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  std::size_t num_bins = 15;
  ConfidenceMode confidence = ConfidenceMode::max_probability;

  void validate() const {
    if (num_samples < 1) throw ConfigError("mc.num_samples", "must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("mc.threshold", "must lie in (0, 1)");
    if (num_bins < 1) throw ConfigError("mc.num_bins", "must be >= 1");
  }
};

struct ReliabilityBin {
  double lo = 0.0;
  double hi = 1.0;
  std::size_t count = 0;
  double confidence_sum = 0.0;
  double accuracy_sum = 0.0;

  double mean_confidence() const { return count ? confidence_sum / static_cast<double>(count) : std::nan(""); }
  double mean_accuracy() const { return count ? accuracy_sum / static_cast<double>(count) : std::nan(""); }
};

struct EceResult {
  double ece = 0.0;
  std::vector<ReliabilityBin> bins;
  std::size_t pixels = 0;
};

/// Equal-width bin of `confidence` on [0, 1]: [m/M, (m+1)/M), last bin closed.
inline std::size_t confidence_bin(double confidence, std::size_t num_bins) {
  const double M = static_cast<double>(num_bins);
  auto m = static_cast<std::size_t>(std::clamp(std::floor(confidence * M), 0.0, M - 1.0));
  while (m > 0 && confidence < static_cast<double>(m) / M) --m;
  while (m + 1 < num_bins && confidence >= static_cast<double>(m + 1) / M) ++m;
  return m;
}

inline std::vector<ReliabilityBin> empty_bins(std::size_t num_bins) {
  std::vector<ReliabilityBin> bins(num_bins);
  for (std::size_t m = 0; m < num_bins; ++m) {
    bins[m].lo = static_cast<double>(m) / static_cast<double>(num_bins);
    bins[m].hi = static_cast<double>(m + 1) / static_cast<double>(num_bins);
  }
  return bins;
}

/// Adds every pixel to `bins` (used both per image and pooled over a split).
inline void accumulate_bins(std::span<const double> probs, std::span<const double> mask, std::vector<ReliabilityBin>& bins,
                            ConfidenceMode mode = ConfidenceMode::max_probability) {
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    double confidence, accuracy;
    if (mode == ConfidenceMode::max_probability) {
      confidence = std::max(p, 1.0 - p);
      const double predicted = p > 0.5 ? 1.0 : 0.0;
      accuracy = predicted == mask[i] ? 1.0 : 0.0;
    } else {
      confidence = p;
      accuracy = mask[i];
    }
    auto& bin = bins[confidence_bin(confidence, bins.size())];
    ++bin.count;
    bin.confidence_sum += confidence;
    bin.accuracy_sum += accuracy;
  }
}

inline double ece_from_bins(const std::vector<ReliabilityBin>& bins) {
  std::size_t n = 0;
  double weighted = 0.0;
  for (const auto& b : bins) {
    n += b.count;
    if (b.count) weighted += static_cast<double>(b.count) * std::abs(b.mean_accuracy() - b.mean_confidence());
  }
  return n ? weighted / static_cast<double>(n) : 0.0;
}

inline EceResult ece_image(std::span<const double> probs, std::span<const double> mask, std::size_t num_bins = 15,
                           ConfidenceMode mode = ConfidenceMode::max_probability) {
  if (probs.empty()) throw DataError("ece_image: empty image");
  if (probs.size() != mask.size()) throw ShapeError("ece_image", "size", "probabilities and mask differ in size");
  if (num_bins < 1) throw ConfigError("num_bins", "must be >= 1");
  EceResult r;
  r.bins = empty_bins(num_bins);
  accumulate_bins(probs, mask, r.bins, mode);
  r.pixels = probs.size();
  r.ece = ece_from_bins(r.bins);
  return r;
}

inline EceResult ece_image(const Tensor& mean_probs, const Tensor& mask, std::size_t num_bins = 15,
                           ConfidenceMode mode = ConfidenceMode::max_probability) {
  return ece_image(mean_probs.data(), mask.data(), num_bins, mode);
}

/// Mean of per-image ECE values.
inline double ece_dataset(std::span<const double> per_image) {
  if (per_image.empty()) throw DataError("ece_dataset: no images");
  double s = 0.0;
  for (double e : per_image) s += e;
  return s / static_cast<double>(per_image.size());
}

struct ReliabilityRow {
  double lo, hi;
  std::size_t count;
  double confidence;  // NaN for an empty bin
  double accuracy;    // NaN for an empty bin
  double gap;         // accuracy - confidence
};

inline std::vector<ReliabilityRow> reliability_table(const std::vector<ReliabilityBin>& bins) {
  std::vector<ReliabilityRow> rows;
  rows.reserve(bins.size());
  for (const auto& b : bins) {
    const double conf = b.mean_confidence(), acc = b.mean_accuracy();
    rows.push_back({b.lo, b.hi, b.count, conf, acc, b.count ? acc - conf : std::nan("")});
  }
  return rows;
}

namespace detail {

inline std::string fmt_number(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace detail

inline std::string reliability_csv(const std::vector<ReliabilityRow>& rows) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count,conf,acc,gap\n";
  for (const auto& r : rows) {
    os << detail::fmt_number(r.lo) << ',' << detail::fmt_number(r.hi) << ',' << r.count << ','
       << detail::fmt_number(r.confidence) << ',' << detail::fmt_number(r.accuracy) << ',' << detail::fmt_number(r.gap)
       << '\n';
  }
  return os.str();
}

/// Self-contained SVG reliability diagram: per-bin accuracy bars, the gap to
/// each bin's mean confidence, and the identity diagonal.
inline std::string reliability_svg(const std::vector<ReliabilityRow>& rows, double ece, const std::string& title = "") {
  constexpr double size = 400, margin = 50;
  auto X = [&](double v) { return margin + v * size; };
  auto Y = [&](double v) { return margin + (1.0 - v) * size; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin << "\" height=\"" << size + 2 * margin
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << X(0.5) << "\" y=\"20\" text-anchor=\"middle\">" << title << "</text>\n";
  for (const auto& r : rows) {
    if (r.count == 0) continue;
    const double w = (r.hi - r.lo) * size;
    os << "<rect class=\"output\" x=\"" << detail::fmt_number(X(r.lo)) << "\" y=\"" << detail::fmt_number(Y(r.accuracy))
       << "\" width=\"" << detail::fmt_number(w) << "\" height=\"" << detail::fmt_number(r.accuracy * size)
       << "\" fill=\"#1f77b4\" stroke=\"#0b3d66\"/>\n";
    const double top = std::max(r.accuracy, r.confidence), bottom = std::min(r.accuracy, r.confidence);
    os << "<rect class=\"gap\" x=\"" << detail::fmt_number(X(r.lo)) << "\" y=\"" << detail::fmt_number(Y(top))
       << "\" width=\"" << detail::fmt_number(w) << "\" height=\"" << detail::fmt_number((top - bottom) * size)
       << "\" fill=\"#d62728\" fill-opacity=\"0.35\" stroke=\"#d62728\"/>\n";
  }
  os << "<line x1=\"" << X(0) << "\" y1=\"" << Y(0) << "\" x2=\"" << X(1) << "\" y2=\"" << Y(1)
     << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
  os << "<rect x=\"" << X(0) << "\" y=\"" << Y(1) << "\" width=\"" << size << "\" height=\"" << size
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    os << "<text x=\"" << X(v) << "\" y=\"" << Y(0) + 16 << "\" text-anchor=\"middle\">" << detail::fmt_number(v)
       << "</text>\n";
    os << "<text x=\"" << X(0) - 6 << "\" y=\"" << Y(v) + 4 << "\" text-anchor=\"end\">" << detail::fmt_number(v)
       << "</text>\n";
  }
  os << "<text x=\"" << X(0.5) << "\" y=\"" << Y(0) + 36 << "\" text-anchor=\"middle\">Confidence</text>\n";
  os << "<text x=\"14\" y=\"" << Y(0.5) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << Y(0.5)
     << ")\">Accuracy</text>\n";
  os << "<text x=\"" << X(0.04) << "\" y=\"" << Y(0.92) << "\">ECE = " << detail::fmt_number(ece) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Monte-Carlo prediction.

struct McPrediction {
  Tensor mean_probs;   // [1,H,W]
  Tensor uncertainty;  // [1,H,W], per-pixel standard deviation over samples
  Tensor pred_mask;    // [1,H,W], mean_probs > threshold
};

namespace detail {

inline Tensor as_batch(const Tensor& image) {
  if (image.rank() == 4) return image.detach();
  if (image.rank() == 3) return reshape(image.detach(), {1, image.dim(0), image.dim(1), image.dim(2)});
  throw ShapeError("as_batch", "rank", "expected [C,H,W] or [1,C,H,W], got " + shape_str(image.shape()));
}

/// Two-pass per-element mean and population standard deviation.
inline std::pair<std::vector<double>, std::vector<double>> mean_and_std(const std::vector<std::vector<double>>& draws) {
  const std::size_t n = draws.front().size();
  const double T = static_cast<double>(draws.size());
  std::vector<double> mean(n, 0.0), sd(n, 0.0);
  for (const auto& d : draws)
    for (std::size_t i = 0; i < n; ++i) mean[i] += d[i];
  for (auto& m : mean) m /= T;
  for (const auto& d : draws)
    for (std::size_t i = 0; i < n; ++i) sd[i] += (d[i] - mean[i]) * (d[i] - mean[i]);
  for (auto& s : sd) s = std::sqrt(s / T);
  return {mean, sd};
}

}  // namespace detail

/// Generic MC estimator: `sample(rng)` returns one stochastic probability map
/// (any shape with H*W elements); the results are reshaped to [1,H,W].
template <class Sampler>
McPrediction mc_predict_with(Sampler&& sample, std::size_t height, std::size_t width, const McConfig& cfg, Rng& rng) {
  if (cfg.num_samples < 1) throw ConfigError("mc.num_samples", "must be >= 1");
  std::vector<std::vector<double>> draws;
  draws.reserve(cfg.num_samples);
  for (std::size_t t = 0; t < cfg.num_samples; ++t) draws.push_back(sample(rng).values());
  auto [mean, sd] = detail::mean_and_std(draws);
  McPrediction out;
  out.mean_probs = Tensor({1, height, width}, std::move(mean));
  out.uncertainty = Tensor({1, height, width}, std::move(sd));
  out.pred_mask = binarize(out.mean_probs, cfg.threshold);
  return out;
}

inline McPrediction mc_predict(const SegModel& model, const Tensor& image, const McConfig& cfg, Rng& rng) {
  NoGradGuard no_grad;
  const Tensor batch = detail::as_batch(image);
  if (batch.dim(0) != 1) throw ShapeError("mc_predict", "N", "expected a single image");
  const std::size_t h = batch.dim(2), w = batch.dim(3);
  if (model.stochastic_layer_count() == 0) {
    if (cfg.num_samples < 1) throw ConfigError("mc.num_samples", "must be >= 1");
    McPrediction out;
    out.mean_probs = reshape(model.forward_mean(batch), {1, h, w});
    out.uncertainty = Tensor::zeros({1, h, w});
    out.pred_mask = binarize(out.mean_probs, cfg.threshold);
    return out;
  }
  return mc_predict_with([&](Rng& r) { return model.forward_stochastic(batch, r).probs; }, h, w, cfg, rng);
}

// ---------------------------------------------------------------------------
// Gradient saliency.

/// |d target / d input| reduced by max over channels, where target is the sum
/// of probabilities over pixels predicted positive (p > threshold).
/// `forward` maps a tracked [1,C,H,W] input to [1,1,H,W] probabilities.
template <class Forward>
Tensor saliency_with(Forward&& forward, const Tensor& image, double threshold = 0.5) {
  Tensor input = detail::as_batch(image).clone_leaf();
  const Tensor probs = forward(input);
  const Tensor target = sum(probs * binarize(probs, threshold));
  backward(target);
  const std::size_t c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::vector<double> g = input.grad();
  std::vector<double> map(h * w, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h * w; ++i) map[i] = std::max(map[i], std::abs(g[k * h * w + i]));
  return Tensor({1, h, w}, std::move(map));
}

inline Tensor saliency_map(const SegModel& model, const Tensor& image, double threshold = 0.5) {
  Tensor map = saliency_with([&](const Tensor& x) { return model.forward_mean(x); }, image, threshold);
  model.zero_grad();
  return map;
}

/// Per-pixel standard deviation of the saliency map over cfg.num_samples
/// weight draws.
inline Tensor saliency_uncertainty(const SegModel& model, const Tensor& image, const McConfig& cfg, Rng& rng) {
  const Tensor batch = detail::as_batch(image);
  const std::size_t h = batch.dim(2), w = batch.dim(3);
  if (cfg.num_samples < 1) throw ConfigError("mc.num_samples", "must be >= 1");
  if (model.stochastic_layer_count() == 0) return Tensor::zeros({1, h, w});
  std::vector<std::vector<double>> draws;
  for (std::size_t t = 0; t < cfg.num_samples; ++t) {
    Noise noise(rng);
    draws.push_back(
        saliency_with([&](const Tensor& x) { return model.forward_with(x, noise, nullptr); }, batch, cfg.threshold)
            .values());
  }
  model.zero_grad();
  return Tensor({1, h, w}, detail::mean_and_std(draws).second);
}

}  // namespace bayesseg

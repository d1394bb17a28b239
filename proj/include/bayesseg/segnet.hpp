#pragma once
// Small encoder-decoder segmentation networks with configurable placement of
// stochastic convolution layers and a per-pixel Bernoulli (sigmoid) head.
//
// Encoder: `depth` stages of conv3x3-relu-conv3x3-relu-avgpool2x, stage k
// having base_channels * 2^k channels. The un-pooled output of stage k is the
// skip feature for decoder stage k. Decoders:
//   unet_concat  up2x -> concat(skip) -> conv -> conv
//   linknet_add  up2x -> conv -> add(skip) -> conv
//   fpn_pyramid  1x1 laterals + top-down nearest additions, a two-conv head
//                per level, all levels upsampled and concatenated, then a
//                fusion conv
// Placement of stochastic layers:
//   backbone_output  the last conv of the deepest encoder stage
//   final_block      both convs of the deepest encoder stage
//   per_decoder      the last conv of every decoder stage (one per level)

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "bayesseg/conv.hpp"
#include "bayesseg/random.hpp"
#include "bayesseg/tensor.hpp"
#include "bayesseg/variational.hpp"

namespace bayesseg {

enum class DecoderStyle { unet_concat, linknet_add, fpn_pyramid };
enum class StochasticKind { deterministic, reparam, mnf };
enum class Placement { backbone_output, final_block, per_decoder };

inline std::string to_string(DecoderStyle s) {
  switch (s) {
    case DecoderStyle::unet_concat: return "unet_concat";
    case DecoderStyle::linknet_add: return "linknet_add";
    case DecoderStyle::fpn_pyramid: return "fpn_pyramid";
  }
  return "?";
}
inline std::string to_string(StochasticKind k) {
  switch (k) {
    case StochasticKind::deterministic: return "deterministic";
    case StochasticKind::reparam: return "reparam";
    case StochasticKind::mnf: return "mnf";
  }
  return "?";
}
inline std::string to_string(Placement p) {
  switch (p) {
    case Placement::backbone_output: return "backbone_output";
    case Placement::final_block: return "final_block";
    case Placement::per_decoder: return "per_decoder";
  }
  return "?";
}

template <class E>
std::optional<E> parse_enum(const std::string& text, std::initializer_list<E> candidates) {
  for (E e : candidates)
    if (to_string(e) == text) return e;
  return std::nullopt;
}

struct ArchitectureConfig {
  DecoderStyle decoder_style = DecoderStyle::unet_concat;
  std::size_t depth = 3;
  std::size_t base_channels = 8;
  StochasticKind stochastic_kind = StochasticKind::deterministic;
  Placement placement = Placement::backbone_output;  // ignored when deterministic
  std::size_t input_size = 64;
  std::size_t input_channels = 3;
  MnfOptions mnf;

  void validate() const {
    if (depth < 1) throw ConfigError("architecture.depth", "must be >= 1");
    if (base_channels < 1) throw ConfigError("architecture.base_channels", "must be >= 1");
    if (input_channels < 1) throw ConfigError("architecture.input_channels", "must be >= 1");
    const std::size_t unit = std::size_t{1} << depth;
    if (input_size == 0 || input_size % unit != 0) {
      throw ConfigError("architecture.input_size", "must be a positive multiple of 2^depth = " + std::to_string(unit));
    }
  }
};

using ConvUnit = std::variant<DeterministicConv, ReparamConvLayer, MnfConvLayer>;

struct LayerSlot {
  std::string name;
  ConvUnit unit;
  bool stochastic() const { return !std::holds_alternative<DeterministicConv>(unit); }
};

struct StochasticOutput {
  Tensor probs;
  Tensor kl;
};

class SegModel {
 public:
  SegModel() = default;

  SegModel(const ArchitectureConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    build(rng);
  }

  const ArchitectureConfig& config() const { return config_; }
  const std::vector<LayerSlot>& layers() const { return layers_; }
  std::vector<LayerSlot>& layers() { return layers_; }

  std::size_t stochastic_layer_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.stochastic() ? 1 : 0;
    return n;
  }

  const LayerSlot& layer(const std::string& name) const { return layers_.at(index_.at(name)); }
  LayerSlot& layer(const std::string& name) { return layers_.at(index_.at(name)); }

  std::vector<NamedParameter> parameters() const {
    std::vector<NamedParameter> out;
    for (const auto& l : layers_) {
      std::visit([&](const auto& unit) { unit.append_parameters(l.name, out); }, l.unit);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value.size();
    return n;
  }

  void zero_grad() const {
    for (auto p : parameters()) p.value.zero_grad();
  }

  /// Samples every stochastic layer once (shared across the batch) and returns
  /// per-pixel probabilities together with the summed KL of those layers.
  StochasticOutput forward_stochastic(const Tensor& batch, Rng& rng) const {
    Noise noise(rng);
    Tensor kl = Tensor::scalar(0.0);
    Tensor probs = run(batch, noise, &kl);
    return {probs, kl};
  }

  /// Forward pass with every noise source set to zero: posterior means, and
  /// for MNF layers the flowed base mean of z.
  Tensor forward_mean(const Tensor& batch) const {
    Noise noise = Noise::zero();
    return run(batch, noise, nullptr);
  }

  /// Forward pass with an explicit noise source; `kl` may be null.
  Tensor forward_with(const Tensor& batch, Noise& noise, Tensor* kl) const { return run(batch, noise, kl); }

 private:
  struct Block {
    std::size_t first;  // index of the first conv in layers_
  };

  std::size_t add_layer(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, bool stochastic,
                        Rng& rng) {
    const ConvGeometrySpec geom{1, k / 2};
    ConvUnit unit = DeterministicConv::create(cin, cout, k, geom, rng);
    if (stochastic && config_.stochastic_kind == StochasticKind::reparam) {
      unit = ReparamConvLayer::create(cin, cout, k, geom, rng, config_.mnf.sigma0);
    } else if (stochastic && config_.stochastic_kind == StochasticKind::mnf) {
      unit = MnfConvLayer::create(cin, cout, k, geom, rng, config_.mnf);
    }
    index_[name] = layers_.size();
    layers_.push_back({name, std::move(unit)});
    return layers_.size() - 1;
  }

  std::size_t channels(std::size_t stage) const { return config_.base_channels << stage; }

  bool is_stochastic(Placement where_it_applies) const {
    return config_.stochastic_kind != StochasticKind::deterministic && config_.placement == where_it_applies;
  }

  void build(Rng& rng) {
    const std::size_t depth = config_.depth;
    const std::size_t last = depth - 1;
    std::size_t cin = config_.input_channels;
    for (std::size_t k = 0; k < depth; ++k) {
      const bool deepest = k == last;
      const std::string p = "enc" + std::to_string(k);
      enc_.push_back({add_layer(p + ".conv0", cin, channels(k), 3, deepest && is_stochastic(Placement::final_block), rng)});
      add_layer(p + ".conv1", channels(k), channels(k), 3,
                deepest && (is_stochastic(Placement::final_block) || is_stochastic(Placement::backbone_output)), rng);
      cin = channels(k);
    }

    const bool dec_stochastic = is_stochastic(Placement::per_decoder);
    std::size_t head_in = 0;
    switch (config_.decoder_style) {
      case DecoderStyle::unet_concat: {
        std::size_t below = channels(last);
        for (std::size_t k = depth; k-- > 0;) {
          const std::string p = "dec" + std::to_string(k);
          dec_.push_back({add_layer(p + ".conv0", below + channels(k), channels(k), 3, false, rng)});
          add_layer(p + ".conv1", channels(k), channels(k), 3, dec_stochastic, rng);
          below = channels(k);
        }
        head_in = channels(0);
        break;
      }
      case DecoderStyle::linknet_add: {
        std::size_t below = channels(last);
        for (std::size_t k = depth; k-- > 0;) {
          const std::string p = "dec" + std::to_string(k);
          dec_.push_back({add_layer(p + ".conv0", below, channels(k), 3, false, rng)});
          add_layer(p + ".conv1", channels(k), channels(k), 3, dec_stochastic, rng);
          below = channels(k);
        }
        head_in = channels(0);
        break;
      }
      case DecoderStyle::fpn_pyramid: {
        const std::size_t pc = config_.base_channels;
        for (std::size_t k = 0; k < depth; ++k)
          lateral_.push_back(add_layer("lat" + std::to_string(k), channels(k), pc, 1, false, rng));
        for (std::size_t k = depth; k-- > 0;) {
          const std::string p = "dec" + std::to_string(k);
          dec_.push_back({add_layer(p + ".conv0", pc, pc, 3, false, rng)});
          add_layer(p + ".conv1", pc, pc, 3, dec_stochastic, rng);
        }
        fuse_ = add_layer("fuse", depth * pc, pc, 3, false, rng);
        head_in = pc;
        break;
      }
    }
    head_ = add_layer("head", head_in, 1, 1, false, rng);
  }

  Tensor apply(std::size_t idx, const Tensor& x, Noise& noise, Tensor* kl) const {
    const ConvUnit& unit = layers_[idx].unit;
    if (const auto* det = std::get_if<DeterministicConv>(&unit)) return det->forward(x);
    if (const auto* rep = std::get_if<ReparamConvLayer>(&unit)) {
      const auto draw = rep->sample(noise);
      if (kl) *kl = *kl + rep->kl();
      return rep->forward(x, draw);
    }
    const auto& mnf = std::get<MnfConvLayer>(unit);
    MnfCache cache;
    mnf_sample_weights(mnf, noise, cache);
    if (kl) *kl = *kl + mnf_kl_contribution(mnf, cache);
    return mnf.forward(x, *cache.last);
  }

  Tensor block(const Block& b, const Tensor& x, Noise& noise, Tensor* kl) const {
    return relu(apply(b.first + 1, relu(apply(b.first, x, noise, kl)), noise, kl));
  }

  Tensor run(const Tensor& batch, Noise& noise, Tensor* kl) const {
    if (batch.rank() != 4) throw ShapeError("SegModel", "rank", "expected NCHW batch, got " + shape_str(batch.shape()));
    if (batch.dim(1) != config_.input_channels) {
      throw ShapeError("SegModel", "C", "expected " + std::to_string(config_.input_channels) + " channels, got " +
                                            std::to_string(batch.dim(1)));
    }
    if (batch.dim(2) != config_.input_size) {
      throw ShapeError("SegModel", "H", "expected " + std::to_string(config_.input_size) + ", got " +
                                            std::to_string(batch.dim(2)));
    }
    if (batch.dim(3) != config_.input_size) {
      throw ShapeError("SegModel", "W", "expected " + std::to_string(config_.input_size) + ", got " +
                                            std::to_string(batch.dim(3)));
    }
    const std::size_t depth = config_.depth;
    std::vector<Tensor> skips;
    Tensor x = batch;
    for (std::size_t k = 0; k < depth; ++k) {
      x = block(enc_[k], x, noise, kl);
      skips.push_back(x);
      if (k + 1 < depth || config_.decoder_style != DecoderStyle::fpn_pyramid) x = avg_pool2x(x);
    }

    Tensor features;
    switch (config_.decoder_style) {
      case DecoderStyle::unet_concat:
        for (std::size_t i = 0; i < depth; ++i) {
          const std::size_t k = depth - 1 - i;
          x = block(dec_[i], concat_channels({upsample_nearest2x(x), skips[k]}), noise, kl);
        }
        features = x;
        break;
      case DecoderStyle::linknet_add:
        for (std::size_t i = 0; i < depth; ++i) {
          const std::size_t k = depth - 1 - i;
          const std::size_t first = dec_[i].first;
          Tensor y = relu(apply(first, upsample_nearest2x(x), noise, kl)) + skips[k];
          x = relu(apply(first + 1, y, noise, kl));
        }
        features = x;
        break;
      case DecoderStyle::fpn_pyramid: {
        std::vector<Tensor> levels(depth);
        Tensor top;
        for (std::size_t i = 0; i < depth; ++i) {
          const std::size_t k = depth - 1 - i;
          Tensor lat = apply(lateral_[k], skips[k], noise, kl);
          top = (i == 0) ? lat : lat + upsample_nearest2x(top);
          Tensor level = block(dec_[i], top, noise, kl);
          for (std::size_t u = 0; u < k; ++u) level = upsample_nearest2x(level);
          levels[k] = level;
        }
        features = relu(apply(fuse_, concat_channels(levels), noise, kl));
        break;
      }
    }
    return sigmoid(apply(head_, features, noise, kl));
  }

  ArchitectureConfig config_;
  std::vector<LayerSlot> layers_;
  std::map<std::string, std::size_t> index_;
  std::vector<Block> enc_;
  std::vector<Block> dec_;  // deepest level first
  std::vector<std::size_t> lateral_;
  std::size_t fuse_ = 0;
  std::size_t head_ = 0;
};

inline SegModel build_model(const ArchitectureConfig& config, Rng& rng) { return SegModel(config, rng); }

inline StochasticOutput forward_stochastic(const SegModel& model, const Tensor& batch, Rng& rng) {
  return model.forward_stochastic(batch, rng);
}

inline Tensor forward_mean(const SegModel& model, const Tensor& batch) { return model.forward_mean(batch); }

}  // namespace bayesseg

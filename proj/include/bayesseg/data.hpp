#pragma once
// Samples, folder loading, synthetic polyp-like data, splitting, augmentation
// and batching.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bayesseg/image_io.hpp"
#include "bayesseg/random.hpp"
#include "bayesseg/tensor.hpp"

namespace bayesseg {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// image [C,H,W] in [0,1]; mask [1,H,W] in {0,1}.
struct Sample {
  Tensor image;
  Tensor mask;
  std::string id;
  Split split = Split::train;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

// ---------------------------------------------------------------------------
// Conversions and resizing.

/// Bilinear resize of a [C,H,W] buffer with half-pixel centres.
inline std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t c, std::size_t h, std::size_t w,
                                           std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(c * out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const double* p = src.data() + k * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bottom = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(k * out_h + y) * out_w + x] = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

inline std::vector<double> resize_nearest(const std::vector<double>& src, std::size_t c, std::size_t h, std::size_t w,
                                          std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(h - 1, y * h / out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(w - 1, x * w / out_w);
      for (std::size_t k = 0; k < c; ++k) out[(k * out_h + y) * out_w + x] = src[(k * h + sy) * w + sx];
    }
  }
  return out;
}

/// [C,H,W] in [0,1] with `channels` output channels (gray is replicated).
inline Tensor image_to_tensor(const Image8& img, std::size_t channels, std::size_t target_size) {
  std::vector<double> planar(channels * img.height * img.width);
  for (std::size_t k = 0; k < channels; ++k)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const std::size_t src_c = img.channels == 1 ? 0 : std::min(k, img.channels - 1);
        planar[(k * img.height + y) * img.width + x] = img.at(y, x, src_c) / 255.0;
      }
  if (target_size == 0 || (img.height == target_size && img.width == target_size))
    return Tensor({channels, img.height, img.width}, std::move(planar));
  return Tensor({channels, target_size, target_size},
                resize_bilinear(planar, channels, img.height, img.width, target_size, target_size));
}

/// Nearest resize then binarisation at 127/255 (value > 127 is foreground).
inline Tensor mask_to_tensor(const Image8& img, std::size_t target_size) {
  std::vector<double> raw(img.height * img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) raw[y * img.width + x] = img.at(y, x, 0);
  const std::size_t h = target_size ? target_size : img.height, w = target_size ? target_size : img.width;
  if (h != img.height || w != img.width) raw = resize_nearest(raw, 1, img.height, img.width, h, w);
  for (auto& v : raw) v = v > 127.0 ? 1.0 : 0.0;
  return Tensor({1, h, w}, std::move(raw));
}

/// Quantises a [C,H,W] tensor in [0,1] to 8 bits (values are clamped).
inline Image8 tensor_to_image(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("tensor_to_image", "rank", "expected [C,H,W], got " + shape_str(t.shape()));
  Image8 img;
  img.channels = t.dim(0) == 3 ? 3 : 1;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(img.width * img.height * img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t k = 0; k < img.channels; ++k) {
        const double v = std::clamp(t[(k * img.height + y) * img.width + x], 0.0, 1.0);
        img.pixels[(y * img.width + x) * img.channels + k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

// ---------------------------------------------------------------------------
// Folder datasets: <root>/images/<id>.{png,pgm,ppm}, <root>/masks/<id>.{...}

namespace detail {

inline std::map<std::string, std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset not found: '" + dir.string() + "' is not a directory");
  std::map<std::string, std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_supported_image(entry.path())) out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

}  // namespace detail

inline std::vector<Sample> load_folder(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                                       std::size_t target_size, std::size_t channels = 3) {
  const auto images = detail::list_images(images_dir);
  const auto masks = detail::list_images(masks_dir);
  for (const auto& [id, _] : images)
    if (!masks.count(id)) throw MissingPairError(id);
  for (const auto& [id, _] : masks)
    if (!images.count(id)) throw MissingPairError(id);
  std::vector<Sample> out;
  for (const auto& [id, image_path] : images) {
    Sample s;
    s.image = image_to_tensor(read_image(image_path), channels, target_size);
    s.mask = mask_to_tensor(read_image(masks.at(id)), target_size);
    s.id = id;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& root, std::size_t target_size,
                                        std::size_t channels = 3) {
  if (!std::filesystem::is_directory(root)) throw DataError("dataset not found: '" + root.string() + "'");
  return load_folder(root / "images", root / "masks", target_size, channels);
}

/// Writes `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
inline void write_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(root / "images", ec);
  std::filesystem::create_directories(root / "masks", ec);
  if (ec) throw DataError("cannot create dataset directories under '" + root.string() + "': " + ec.message());
  for (const auto& s : samples) {
    write_image(root / "images" / (s.id + ".png"), tensor_to_image(s.image));
    write_image(root / "masks" / (s.id + ".png"), tensor_to_image(s.mask));
  }
}

// ---------------------------------------------------------------------------
// Synthetic polyp-like images: smooth tinted background with a linear
// gradient, 1-3 brighter dome-shaded ellipses, Gaussian texture noise.

struct SyntheticSpec {
  std::size_t count = 200;
  std::size_t image_size = 64;
  std::size_t min_polyps = 1;
  std::size_t max_polyps = 3;
  double radius_min = 5.0;
  double radius_max = 14.0;
  double background_min = 0.25;
  double background_max = 0.55;
  double foreground_min = 0.2;  // brightness added inside an ellipse
  double foreground_max = 0.35;
  double noise_sigma = 0.03;
  std::uint64_t seed = 0;

  void validate() const {
    if (count < 1) throw ConfigError("count", "must be >= 1");
    if (image_size < 4) throw ConfigError("image_size", "must be >= 4");
    if (min_polyps < 1 || max_polyps < min_polyps) throw ConfigError("min_polyps", "need 1 <= min_polyps <= max_polyps");
    if (radius_min < 1.0 || radius_max < radius_min) throw ConfigError("radius_min", "need 1 <= radius_min <= radius_max");
    if (radius_max > static_cast<double>(image_size)) throw ConfigError("radius_max", "exceeds image_size");
    if (background_min < 0.0 || background_max > 1.0 || background_max < background_min)
      throw ConfigError("background_min", "need 0 <= background_min <= background_max <= 1");
    if (foreground_min < 0.0 || foreground_max < foreground_min)
      throw ConfigError("foreground_min", "need 0 <= foreground_min <= foreground_max");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma", "must be >= 0");
  }
};

/// Axis-aligned ellipse in pixel coordinates (x = column, y = row).
struct Ellipse {
  double cx, cy, a, b;
  bool contains(double x, double y) const {
    const double dx = (x - cx) / a, dy = (y - cy) / b;
    return dx * dx + dy * dy <= 1.0;
  }
};

struct SyntheticSample {
  Sample sample;
  std::vector<Ellipse> ellipses;
};

inline std::vector<SyntheticSample> generate_synthetic_detailed(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.image_size;
  const double size = static_cast<double>(n);
  constexpr double tint[3] = {1.0, 0.72, 0.58};
  constexpr double polyp_tint[3] = {1.0, 0.85, 0.7};
  std::vector<SyntheticSample> out;
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(spec.seed, i));
    SyntheticSample s;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    s.sample.id = id;

    const double base = rng.uniform(spec.background_min, spec.background_max);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double slope = rng.uniform(0.0, 0.15);
    const std::size_t k = spec.min_polyps + rng.index(spec.max_polyps - spec.min_polyps + 1);
    for (std::size_t e = 0; e < k; ++e) {
      Ellipse el;
      el.a = rng.uniform(spec.radius_min, spec.radius_max);
      el.b = rng.uniform(spec.radius_min, spec.radius_max);
      el.cx = rng.uniform(0.15 * size, 0.85 * size);
      el.cy = rng.uniform(0.15 * size, 0.85 * size);
      s.ellipses.push_back(el);
    }
    std::vector<double> lift(k);
    for (auto& l : lift) l = rng.uniform(spec.foreground_min, spec.foreground_max);

    std::vector<double> image(3 * n * n), mask(n * n, 0.0);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        const double ramp = slope * ((fx * std::cos(angle) + fy * std::sin(angle)) / size - 0.5);
        double polyp = 0.0;
        for (std::size_t e = 0; e < k; ++e) {
          const Ellipse& el = s.ellipses[e];
          if (!el.contains(fx, fy)) continue;
          const double dx = (fx - el.cx) / el.a, dy = (fy - el.cy) / el.b;
          polyp = std::max(polyp, lift[e] * (1.0 - 0.35 * (dx * dx + dy * dy)));
          mask[y * n + x] = 1.0;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = (base + ramp) * tint[c] + polyp * polyp_tint[c] + spec.noise_sigma * rng.normal();
          image[(c * n + y) * n + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    s.sample.image = Tensor({3, n, n}, std::move(image));
    s.sample.mask = Tensor({1, n, n}, std::move(mask));
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sample> generate_synthetic(const SyntheticSpec& spec) {
  std::vector<Sample> out;
  for (auto& s : generate_synthetic_detailed(spec)) out.push_back(std::move(s.sample));
  return out;
}

// ---------------------------------------------------------------------------
// Splitting.

struct DatasetSplits {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;

  const std::vector<Sample>& get(Split s) const { return s == Split::train ? train : s == Split::val ? val : test; }
};

/// Seeded shuffle, then floor(0.7 n) / floor(0.2 n) / remainder.
inline DatasetSplits split_dataset(std::vector<Sample> samples, std::uint64_t seed) {
  const std::size_t n = samples.size();
  if (n < 10) throw DataError("split_dataset: need at least 10 samples, got " + std::to_string(n));
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = n; i-- > 1;) std::swap(samples[i], samples[rng.index(i + 1)]);
  const std::size_t n_train = 7 * n / 10, n_val = 2 * n / 10;
  DatasetSplits out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = samples[i];
    if (i < n_train) {
      s.split = Split::train;
      out.train.push_back(std::move(s));
    } else if (i < n_train + n_val) {
      s.split = Split::val;
      out.val.push_back(std::move(s));
    } else {
      s.split = Split::test;
      out.test.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation: photometric jitter on the image only, then random horizontal
// and vertical flips applied to image and mask together, then clamping.

struct AugmentDraws {
  double brightness = 0.0;  // additive, in [-0.2, 0.2]
  double saturation = 1.0;  // factor in [0.8, 1.2]
  double contrast = 1.0;    // factor in [0.8, 1.2]
  bool flip_horizontal = false;
  bool flip_vertical = false;

  static AugmentDraws identity() { return {}; }
  static AugmentDraws draw(Rng& rng) {
    AugmentDraws d;
    d.brightness = rng.uniform(-0.2, 0.2);
    d.saturation = rng.uniform(0.8, 1.2);
    d.contrast = rng.uniform(0.8, 1.2);
    d.flip_horizontal = rng.bernoulli(0.5);
    d.flip_vertical = rng.bernoulli(0.5);
    return d;
  }
};

namespace detail {

inline std::vector<double> flip(const std::vector<double>& v, std::size_t c, std::size_t h, std::size_t w, bool horizontal) {
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sy = horizontal ? y : h - 1 - y;
        const std::size_t sx = horizontal ? w - 1 - x : x;
        out[(k * h + y) * w + x] = v[(k * h + sy) * w + sx];
      }
  return out;
}

}  // namespace detail

inline Sample apply_augment(const Sample& sample, const AugmentDraws& d) {
  const std::size_t c = sample.image.dim(0), h = sample.image.dim(1), w = sample.image.dim(2), hw = h * w;
  std::vector<double> img = sample.image.values();
  std::vector<double> mask = sample.mask.values();

  if (d.brightness != 0.0)
    for (auto& v : img) v += d.brightness;
  if (d.saturation != 1.0 && c == 3) {
    // Rec.601 luma
    for (std::size_t i = 0; i < hw; ++i) {
      const double luma = 0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i];
      for (std::size_t k = 0; k < 3; ++k) img[k * hw + i] = luma + d.saturation * (img[k * hw + i] - luma);
    }
  }
  if (d.contrast != 1.0) {
    for (std::size_t k = 0; k < c; ++k) {
      double m = 0.0;
      for (std::size_t i = 0; i < hw; ++i) m += img[k * hw + i];
      m /= static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) img[k * hw + i] = m + d.contrast * (img[k * hw + i] - m);
    }
  }
  if (d.flip_horizontal) {
    img = detail::flip(img, c, h, w, true);
    mask = detail::flip(mask, 1, h, w, true);
  }
  if (d.flip_vertical) {
    img = detail::flip(img, c, h, w, false);
    mask = detail::flip(mask, 1, h, w, false);
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);

  Sample out = sample;
  out.image = Tensor(sample.image.shape(), std::move(img));
  out.mask = Tensor(sample.mask.shape(), std::move(mask));
  return out;
}

inline Sample augment(const Sample& sample, Rng& rng) { return apply_augment(sample, AugmentDraws::draw(rng)); }

// ---------------------------------------------------------------------------
// Batching.

struct Batch {
  Tensor images;  // [N,C,H,W]
  Tensor masks;   // [N,1,H,W]
};

inline Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw DataError("make_batch: no samples");
  const auto& first = samples.front();
  const std::size_t c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  std::vector<double> images, masks;
  images.reserve(samples.size() * c * h * w);
  masks.reserve(samples.size() * h * w);
  for (const auto& s : samples) {
    if (s.image.shape() != first.image.shape()) throw ShapeError("make_batch", "image", "sample shapes differ");
    images.insert(images.end(), s.image.values().begin(), s.image.values().end());
    masks.insert(masks.end(), s.mask.values().begin(), s.mask.values().end());
  }
  return {Tensor({samples.size(), c, h, w}, std::move(images)), Tensor({samples.size(), 1, h, w}, std::move(masks))};
}

}  // namespace bayesseg

#pragma once
// Stochastic weight posteriors for convolution layers.
//
//  * GaussianWeightPosterior: fully factorised N(mu, softplus(rho)^2), sampled
//    as mu + sigma * eps, with a closed-form KL to the N(0, 1) prior.
//  * RealNvpFlow: stack of masked affine coupling steps.
//  * MnfConvLayer: Gaussian weights whose per-output-channel means are scaled
//    by a flowed auxiliary vector z. Its KL term is the single-sample bound
//        KL(q(w|z)||p(w)) + log q(z) - log s(z|w)
//    where s is an auxiliary Gaussian posterior pulled back through a second
//    flow.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "bayesseg/conv.hpp"
#include "bayesseg/random.hpp"
#include "bayesseg/tensor.hpp"

namespace bayesseg {

inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

/// Default posterior scale at initialisation; keeps early training close to
/// the deterministic network.
inline constexpr double kInitialSigma = 1e-3;

struct PriorSpec {
  enum class Kind { standard_normal };
  Kind kind = Kind::standard_normal;
};

namespace detail {

inline Tensor random_normal(const Shape& shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(shape, std::move(v), true);
}

/// Sum of log N(x; mean, sd^2) over all elements.
inline Tensor gaussian_log_density(const Tensor& x, const Tensor& mean, const Tensor& sd) {
  static const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const Tensor standardized = (x - mean) / sd;
  return -0.5 * sum(square(standardized)) - sum(log(sd)) - half_log_2pi * static_cast<double>(x.size());
}

}  // namespace detail

struct GaussianWeightPosterior {
  Tensor mu;
  Tensor rho;
  PriorSpec prior;

  static GaussianWeightPosterior create(const Shape& shape, double mu_stddev, double sigma0, Rng& rng) {
    GaussianWeightPosterior p;
    p.mu = mu_stddev > 0 ? detail::random_normal(shape, mu_stddev, rng) : Tensor::zeros(shape, true);
    p.rho = Tensor::full(shape, softplus_inverse(sigma0), true);
    return p;
  }

  Tensor sigma() const { return softplus(rho); }

  /// w = mu + sigma * eps for an explicit eps of the posterior's shape.
  Tensor sample_with(const Tensor& eps) const { return mu + sigma() * eps; }
  Tensor sample(Noise& noise) const { return sample_with(noise.standard_normal(mu.shape())); }

  /// sum 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2) against N(0, 1).
  Tensor kl() const {
    const Tensor s = sigma();
    return 0.5 * sum(square(mu) + square(s) - 1.0) - sum(log(s));
  }

  std::size_t size() const { return mu.size(); }

  void append_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    out.push_back({prefix + ".mu", mu});
    out.push_back({prefix + ".rho", rho});
  }
};

inline Tensor kl_gaussian(const GaussianWeightPosterior& posterior) { return posterior.kl(); }

/// Two-layer perceptron: linear -> tanh -> linear.
struct Mlp {
  Tensor w1, b1, w2, b2;

  static Mlp create(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, double out_stddev = 0.0) {
    Mlp m;
    m.w1 = detail::random_normal({hidden, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    m.b1 = Tensor::zeros({hidden}, true);
    m.w2 = out_stddev > 0 ? detail::random_normal({out, hidden}, out_stddev, rng) : Tensor::zeros({out, hidden}, true);
    m.b2 = Tensor::zeros({out}, true);
    return m;
  }

  Tensor operator()(const Tensor& x) const { return linear(tanh(linear(x, w1, b1)), w2, b2); }

  void append_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
  }
};

struct FlowResult {
  Tensor z;
  Tensor log_det;
};

/// RealNVP flow over a vector. Step l keeps coordinates with (i + l) even
/// and applies z <- z * exp(s(kept)) + t(kept) to the others, so
/// log|det| = sum of the scale outputs on the transformed coordinates.
class RealNvpFlow {
 public:
  struct Step {
    std::vector<double> mask;  // 1 = conditioning coordinate
    Mlp scale;
    Mlp shift;
  };

  RealNvpFlow() = default;

  /// Output layers start at zero, so a fresh flow is the identity.
  RealNvpFlow(std::size_t dim, std::size_t depth, std::size_t hidden, Rng& rng, double out_stddev = 0.0) : dim_(dim) {
    for (std::size_t l = 0; l < depth; ++l) {
      Step step;
      step.mask.resize(dim);
      for (std::size_t i = 0; i < dim; ++i) step.mask[i] = ((i + l) % 2 == 0) ? 1.0 : 0.0;
      step.scale = Mlp::create(dim, hidden, dim, rng, out_stddev);
      step.shift = Mlp::create(dim, hidden, dim, rng, out_stddev);
      steps_.push_back(std::move(step));
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t depth() const { return steps_.size(); }
  std::vector<Step>& steps() { return steps_; }
  const std::vector<Step>& steps() const { return steps_; }

  FlowResult forward(const Tensor& z0) const {
    check_dim(z0);
    Tensor z = z0;
    Tensor log_det = Tensor::scalar(0.0);
    for (const auto& step : steps_) {
      const auto [s, t] = coupling(step, z);
      z = z * exp(s) + t;
      log_det = log_det + sum(s);
    }
    return {z, log_det};
  }

  /// Exact inverse; log_det is log|det dz0/dzL| = -(forward log_det).
  FlowResult inverse(const Tensor& z_last) const {
    check_dim(z_last);
    Tensor z = z_last;
    Tensor log_det = Tensor::scalar(0.0);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      const auto [s, t] = coupling(*it, z);
      z = (z - t) * exp(-s);
      log_det = log_det - sum(s);
    }
    return {z, log_det};
  }

  void append_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    for (std::size_t l = 0; l < steps_.size(); ++l) {
      steps_[l].scale.append_parameters(prefix + "." + std::to_string(l) + ".scale", out);
      steps_[l].shift.append_parameters(prefix + "." + std::to_string(l) + ".shift", out);
    }
  }

 private:
  void check_dim(const Tensor& z) const {
    if (z.size() != dim_) {
      throw ShapeError("RealNvpFlow", "dim", "vector of length " + std::to_string(z.size()) +
                                                 " does not match flow dimension " + std::to_string(dim_));
    }
  }

  std::pair<Tensor, Tensor> coupling(const Step& step, const Tensor& z) const {
    const Tensor keep = Tensor::vector(step.mask);
    std::vector<double> free_mask(dim_);
    for (std::size_t i = 0; i < dim_; ++i) free_mask[i] = 1.0 - step.mask[i];
    const Tensor change = Tensor::vector(std::move(free_mask));
    const Tensor conditioned = z * keep;
    Tensor s = step.scale(conditioned) * change;
    Tensor t = step.shift(conditioned) * change;
    for (double v : s.values())
      if (!std::isfinite(v) || std::abs(v) > 700.0) throw NumericError("RealNvpFlow: non-finite scale output");
    return {s, t};
  }

  std::size_t dim_ = 0;
  std::vector<Step> steps_;
};

inline FlowResult flow_forward(const RealNvpFlow& flow, const Tensor& z0) { return flow.forward(z0); }
inline FlowResult flow_inverse(const RealNvpFlow& flow, const Tensor& z_last) { return flow.inverse(z_last); }

struct ConvGeometrySpec {
  std::size_t stride = 1;
  std::size_t padding = 1;
};

inline double he_stddev(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

/// Plain convolution with point-estimate weights.
struct DeterministicConv {
  Tensor kernel;
  Tensor bias;
  ConvGeometrySpec geometry;

  static DeterministicConv create(std::size_t cin, std::size_t cout, std::size_t k, ConvGeometrySpec geom, Rng& rng) {
    DeterministicConv c;
    c.kernel = detail::random_normal({cout, cin, k, k}, he_stddev(cin * k * k), rng);
    c.bias = Tensor::zeros({cout}, true);
    c.geometry = geom;
    return c;
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, kernel, bias, geometry.stride, geometry.padding); }

  void append_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    out.push_back({prefix + ".kernel", kernel});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Mean-field Gaussian convolution sampled with the reparameterization trick.
/// One weight draw is shared by every image of a batch.
struct ReparamConvLayer {
  GaussianWeightPosterior kernel;
  GaussianWeightPosterior bias;
  ConvGeometrySpec geometry;

  static ReparamConvLayer create(std::size_t cin, std::size_t cout, std::size_t k, ConvGeometrySpec geom, Rng& rng,
                                 double sigma0 = kInitialSigma) {
    ReparamConvLayer c;
    c.kernel = GaussianWeightPosterior::create({cout, cin, k, k}, he_stddev(cin * k * k), sigma0, rng);
    c.bias = GaussianWeightPosterior::create({cout}, 0.0, sigma0, rng);
    c.geometry = geom;
    return c;
  }

  struct Draw {
    Tensor kernel;
    Tensor bias;
  };

  Draw sample(Noise& noise) const { return {kernel.sample(noise), bias.sample(noise)}; }

  Tensor forward(const Tensor& x, const Draw& draw) const {
    return conv2d(x, draw.kernel, draw.bias, geometry.stride, geometry.padding);
  }

  Tensor kl() const { return kernel.kl() + bias.kl(); }

  void append_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    kernel.append_parameters(prefix + ".kernel", out);
    bias.append_parameters(prefix + ".bias", out);
  }
};

/// Sampled weights of the kernel (omega) under the reparameterization trick.
inline Tensor sample_reparam(const ReparamConvLayer& layer, Noise& noise) { return layer.kernel.sample(noise); }

struct MnfOptions {
  std::size_t flow_depth = 2;
  std::size_t flow_hidden = 16;
  std::size_t aux_hidden = 16;
  double sigma0 = kInitialSigma;
  double z_sigma0 = 1e-2;
};

/// One joint draw (z, w) from an MNF layer, consumed by `kl_contribution`.
struct MnfDraw {
  Tensor z0;
  Tensor z;        // z_L, one entry per output channel
  Tensor log_q_z;  // log q(z_L) = log q(z0) - forward log-det
  Tensor kernel;
  Tensor bias;
};

class MnfConvLayer {
 public:
  GaussianWeightPosterior kernel;  // mean mu, scaled per output channel by z
  GaussianWeightPosterior bias;
  Tensor z0_mu;
  Tensor z0_rho;
  RealNvpFlow flow;
  RealNvpFlow aux_flow;
  Mlp aux_mu_net;
  Mlp aux_sigma_net;  // pre-softplus
  ConvGeometrySpec geometry;

  static MnfConvLayer create(std::size_t cin, std::size_t cout, std::size_t k, ConvGeometrySpec geom, Rng& rng,
                             const MnfOptions& opt = {}) {
    MnfConvLayer m;
    m.kernel = GaussianWeightPosterior::create({cout, cin, k, k}, he_stddev(cin * k * k), opt.sigma0, rng);
    m.bias = GaussianWeightPosterior::create({cout}, 0.0, opt.sigma0, rng);
    m.z0_mu = Tensor::full({cout}, 1.0, true);
    m.z0_rho = Tensor::full({cout}, softplus_inverse(opt.z_sigma0), true);
    m.flow = RealNvpFlow(cout, opt.flow_depth, opt.flow_hidden, rng);
    m.aux_flow = RealNvpFlow(cout, opt.flow_depth, opt.flow_hidden, rng);
    m.aux_mu_net = Mlp::create(cout, opt.aux_hidden, cout, rng);
    m.aux_sigma_net = Mlp::create(cout, opt.aux_hidden, cout, rng);
    // Start the auxiliary posterior on the base distribution of z.
    std::fill(m.aux_mu_net.b2.mutable_data().begin(), m.aux_mu_net.b2.mutable_data().end(), 1.0);
    std::fill(m.aux_sigma_net.b2.mutable_data().begin(), m.aux_sigma_net.b2.mutable_data().end(),
              softplus_inverse(opt.z_sigma0));
    m.geometry = geom;
    return m;
  }

  std::size_t z_dim() const { return z0_mu.size(); }

  MnfDraw sample(Noise& noise) const {
    MnfDraw d;
    const Tensor z_sd = softplus(z0_rho);
    d.z0 = z0_mu + z_sd * noise.standard_normal(z0_mu.shape());
    const Tensor log_q_z0 = detail::gaussian_log_density(d.z0, z0_mu, z_sd);
    auto [z, log_det] = flow.forward(d.z0);
    d.z = z;
    d.log_q_z = log_q_z0 - log_det;
    d.kernel = channel_scale(kernel.mu, d.z) + kernel.sigma() * noise.standard_normal(kernel.mu.shape());
    d.bias = bias.sample(noise);
    if (!std::isfinite(d.log_q_z.item())) throw NumericError("MnfConvLayer: log q(z) is non-finite");
    return d;
  }

  Tensor forward(const Tensor& x, const MnfDraw& draw) const {
    return conv2d(x, draw.kernel, draw.bias, geometry.stride, geometry.padding);
  }

  /// Auxiliary posterior log s(z_L | w): pull z_L back through the auxiliary
  /// flow and score it under N(mu~(w), sigma~(w)^2), with mu~ and sigma~
  /// computed from the per-output-channel mean of the sampled kernel.
  Tensor log_aux_density(const MnfDraw& draw) const {
    const std::size_t cout = z_dim();
    const Tensor channel_means = mean(reshape(draw.kernel, {cout, draw.kernel.size() / cout}), {1});
    const Tensor aux_mu = aux_mu_net(channel_means);
    const Tensor aux_sd = softplus(aux_sigma_net(channel_means));
    auto [z0, log_det_inv] = aux_flow.inverse(draw.z);
    return detail::gaussian_log_density(z0, aux_mu, aux_sd) + log_det_inv;
  }

  /// KL(q(w|z)||N(0,1)) for the drawn z, plus the bias KL.
  Tensor conditional_kl(const MnfDraw& draw) const {
    const Tensor s = kernel.sigma();
    const Tensor mean_w = channel_scale(kernel.mu, draw.z);
    return 0.5 * sum(square(mean_w) + square(s) - 1.0) - sum(log(s)) + bias.kl();
  }

  /// Negated single-sample lower bound on -KL(q(w)||p(w)); minimised in training.
  Tensor kl_contribution(const std::optional<MnfDraw>& draw) const {
    if (!draw) throw StateError("MnfConvLayer: no cached sample; call sample() first");
    return conditional_kl(*draw) + draw->log_q_z - log_aux_density(*draw);
  }

  void append_parameters(const std::string& prefix, std::vector<NamedParameter>& out) const {
    kernel.append_parameters(prefix + ".kernel", out);
    bias.append_parameters(prefix + ".bias", out);
    out.push_back({prefix + ".z0_mu", z0_mu});
    out.push_back({prefix + ".z0_rho", z0_rho});
    flow.append_parameters(prefix + ".flow", out);
    aux_flow.append_parameters(prefix + ".aux_flow", out);
    aux_mu_net.append_parameters(prefix + ".aux_mu", out);
    aux_sigma_net.append_parameters(prefix + ".aux_sigma", out);
  }
};

/// Per-call cache of the last MNF draw. Concurrent samplers each own one.
struct MnfCache {
  std::optional<MnfDraw> last;
};

inline Tensor mnf_sample_weights(const MnfConvLayer& layer, Noise& noise, MnfCache& cache) {
  cache.last = layer.sample(noise);
  return cache.last->kernel;
}

inline Tensor mnf_kl_contribution(const MnfConvLayer& layer, const MnfCache& cache) {
  return layer.kl_contribution(cache.last);
}

}  // namespace bayesseg

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "bayesseg/gradcheck.hpp"
#include "bayesseg/variational.hpp"

using namespace bayesseg;

namespace {

void fill_random(Tensor t, Rng& rng, double scale) {
  for (auto& v : t.mutable_data()) v = scale * rng.normal();
}

/// Makes every coupling network of `flow` non-trivial.
void randomize_flow(RealNvpFlow& flow, Rng& rng, double scale = 0.4) {
  for (auto& step : flow.steps()) {
    for (Mlp* m : {&step.scale, &step.shift}) {
      fill_random(m->w1, rng, 0.8);
      fill_random(m->b1, rng, 0.3);
      fill_random(m->w2, rng, scale);
      fill_random(m->b2, rng, scale);
    }
  }
}

// ---- plain-double re-implementation used as an oracle ----------------------

std::vector<double> mlp_eval(const Mlp& m, const std::vector<double>& x) {
  const std::size_t hidden = m.w1.dim(0), in = m.w1.dim(1), out = m.w2.dim(0);
  std::vector<double> h(hidden), y(out);
  for (std::size_t j = 0; j < hidden; ++j) {
    double a = m.b1[j];
    for (std::size_t i = 0; i < in; ++i) a += m.w1[j * in + i] * x[i];
    h[j] = std::tanh(a);
  }
  for (std::size_t k = 0; k < out; ++k) {
    double a = m.b2[k];
    for (std::size_t j = 0; j < hidden; ++j) a += m.w2[k * hidden + j] * h[j];
    y[k] = a;
  }
  return y;
}

struct Coupled {
  std::vector<double> s, t;
};

Coupled coupling_eval(const RealNvpFlow::Step& step, const std::vector<double>& z) {
  std::vector<double> cond(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) cond[i] = step.mask[i] * z[i];
  Coupled c{mlp_eval(step.scale, cond), mlp_eval(step.shift, cond)};
  for (std::size_t i = 0; i < z.size(); ++i)
    if (step.mask[i] == 1.0) c.s[i] = 0.0, c.t[i] = 0.0;
  return c;
}

std::pair<std::vector<double>, double> flow_fwd(const RealNvpFlow& f, std::vector<double> z) {
  double ld = 0.0;
  for (const auto& step : f.steps()) {
    const auto c = coupling_eval(step, z);
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = z[i] * std::exp(c.s[i]) + c.t[i];
      ld += c.s[i];
    }
  }
  return {z, ld};
}

std::pair<std::vector<double>, double> flow_inv(const RealNvpFlow& f, std::vector<double> z) {
  double ld = 0.0;
  for (auto it = f.steps().rbegin(); it != f.steps().rend(); ++it) {
    const auto c = coupling_eval(*it, z);
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = (z[i] - c.t[i]) * std::exp(-c.s[i]);
      ld -= c.s[i];
    }
  }
  return {z, ld};
}

double log_normal(double x, double m, double sd) {
  const double u = (x - m) / sd;
  return -0.5 * u * u - std::log(sd) - 0.5 * std::log(2 * std::numbers::pi);
}

double sp(double x) { return std::log1p(std::exp(x)); }

double numerical_logdet(const RealNvpFlow& flow, const std::vector<double>& z0) {
  const std::size_t d = z0.size();
  const double h = 1e-6;
  Eigen::MatrixXd J(d, d);
  NoGradGuard guard;
  for (std::size_t j = 0; j < d; ++j) {
    auto up = z0, down = z0;
    up[j] += h;
    down[j] -= h;
    const auto fu = flow.forward(Tensor::vector(up)).z.values();
    const auto fd = flow.forward(Tensor::vector(down)).z.values();
    for (std::size_t i = 0; i < d; ++i) J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (fu[i] - fd[i]) / (2 * h);
  }
  return std::log(std::abs(J.determinant()));
}

}  // namespace

// ---------------------------------------------------------------------------
// GaussianWeightPosterior / reparameterization

TEST(Reparam, ZeroNoiseGivesMean) {
  Rng rng(1);
  auto layer = ReparamConvLayer::create(2, 3, 3, {}, rng);
  Noise zero = Noise::zero();
  EXPECT_EQ(sample_reparam(layer, zero).values(), layer.kernel.mu.values());
}

TEST(Reparam, VanishingSigmaCollapsesVariance) {
  Rng rng(2);
  auto post = GaussianWeightPosterior::create({1}, 0.0, 1.0, rng);
  post.mu.mutable_data()[0] = 0.7;
  post.rho.mutable_data()[0] = -40.0;
  Noise noise(rng);
  double s = 0.0, s2 = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double w = post.sample(noise).item();
    s += w;
    s2 += w * w;
  }
  const double m = s / n;
  EXPECT_NEAR(m, 0.7, 1e-12);
  EXPECT_LT(s2 / n - m * m, 1e-6);
}

TEST(Reparam, StandardNormalMoments) {
  Rng rng(3);
  auto post = GaussianWeightPosterior::create({1}, 0.0, 1.0, rng);
  EXPECT_NEAR(post.sigma().item(), 1.0, 1e-12);
  Noise noise(rng);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = post.sample(noise).item();
    s += w;
    s2 += w * w;
  }
  const double m = s / n, var = s2 / n - m * m;
  // standard errors: mean 1/sqrt(n), variance sqrt(2/n)
  EXPECT_LT(std::abs(m), 3.0 / std::sqrt(n));
  EXPECT_LT(std::abs(var - 1.0), 3.0 * std::sqrt(2.0 / n));
}

TEST(Reparam, GradientsFlowToMuAndRho) {
  Rng rng(4);
  auto post = GaussianWeightPosterior::create({3}, 0.5, 0.3, rng);
  const double err = grad_check_params(
      [&] {
        Rng r(99);
        Noise noise(r);
        return sum(square(post.sample(noise)));
      },
      {post.mu, post.rho}, 1e-6);
  EXPECT_LT(err, 1e-4);
}

TEST(Reparam, SigmaPositiveAndShapesMatchDeterministic) {
  Rng rng(5);
  auto layer = ReparamConvLayer::create(3, 4, 3, {}, rng);
  auto det = DeterministicConv::create(3, 4, 3, {}, rng);
  EXPECT_EQ(layer.kernel.mu.shape(), det.kernel.shape());
  EXPECT_EQ(layer.kernel.rho.shape(), det.kernel.shape());
  EXPECT_EQ(layer.bias.mu.shape(), det.bias.shape());
  const Tensor ks = layer.kernel.sigma();
  for (double s : ks.data()) EXPECT_GT(s, 0.0);
  GaussianWeightPosterior p = layer.kernel;
  p.rho = Tensor::full(p.rho.shape(), -30.0);
  const Tensor ps = p.sigma();
  for (double s : ps.data()) EXPECT_GT(s, 0.0);
  std::vector<NamedParameter> a, b;
  layer.append_parameters("x", a);
  det.append_parameters("x", b);
  std::size_t na = 0, nb = 0;
  for (auto& p2 : a) na += p2.value.size();
  for (auto& p2 : b) nb += p2.value.size();
  EXPECT_EQ(na, 2 * nb);
}

// ---------------------------------------------------------------------------
// kl_gaussian

TEST(KlGaussian, ClosedForms) {
  Rng rng(0);
  auto p = GaussianWeightPosterior::create({1}, 0.0, 1.0, rng);
  EXPECT_NEAR(kl_gaussian(p).item(), 0.0, 1e-15);
  p.mu.mutable_data()[0] = 1.0;
  EXPECT_NEAR(kl_gaussian(p).item(), 0.5, 1e-15);
  p.mu.mutable_data()[0] = 0.0;
  p.rho.mutable_data()[0] = softplus_inverse(2.0);
  EXPECT_NEAR(kl_gaussian(p).item(), 0.5 * (4.0 - 1.0 - std::log(4.0)), 1e-12);
  EXPECT_NEAR(kl_gaussian(p).item(), 0.806853, 1e-6);
}

TEST(KlGaussian, NonNegativeAndZeroOnlyAtPrior) {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    auto p = GaussianWeightPosterior::create({5}, 1.0, 1.0, rng);
    fill_random(p.rho, rng, 2.0);
    EXPECT_GE(kl_gaussian(p).item(), 0.0);
    EXPECT_GT(kl_gaussian(p).item(), 0.0);
  }
}

TEST(KlGaussian, GradCheck) {
  Rng rng(8);
  for (int seed = 0; seed < 10; ++seed) {
    auto p = GaussianWeightPosterior::create({6}, 1.0, 0.5, rng);
    fill_random(p.rho, rng, 1.0);
    EXPECT_LT(grad_check_params([&] { return kl_gaussian(p); }, {p.mu, p.rho}, 1e-6), 1e-4);
  }
}

// ---------------------------------------------------------------------------
// RealNVP

TEST(Flow, FreshFlowIsIdentity) {
  Rng rng(1);
  RealNvpFlow f(4, 2, 16, rng);
  Tensor z0 = Tensor::vector({0.3, -1.2, 2.0, 0.1});
  auto r = flow_forward(f, z0);
  EXPECT_EQ(r.z.values(), z0.values());
  EXPECT_EQ(r.log_det.item(), 0.0);
  auto inv = flow_inverse(f, z0);
  EXPECT_EQ(inv.z.values(), z0.values());
  EXPECT_EQ(inv.log_det.item(), 0.0);
}

TEST(Flow, HandSetScaleGivesLogDet) {
  Rng rng(2);
  RealNvpFlow f(2, 1, 4, rng);
  // step 0 keeps coordinate 0, transforms coordinate 1 with a constant scale.
  const double s = 0.37;
  f.steps()[0].scale.b2.mutable_data()[1] = s;
  auto r = flow_forward(f, Tensor::vector({0.5, 2.0}));
  EXPECT_NEAR(r.log_det.item(), s, 1e-15);
  EXPECT_NEAR(r.z[0], 0.5, 1e-15);
  EXPECT_NEAR(r.z[1], 2.0 * std::exp(s), 1e-15);
}

TEST(Flow, InverseRoundTripAndLogDetCancel) {
  Rng rng(3);
  for (int seed = 0; seed < 100; ++seed) {
    const std::size_t dim = 2 + seed % 5, depth = 1 + seed % 4;
    RealNvpFlow f(dim, depth, 8, rng);
    randomize_flow(f, rng);
    std::vector<double> z0(dim);
    for (auto& v : z0) v = rng.normal();
    auto fwd = flow_forward(f, Tensor::vector(z0));
    auto inv = flow_inverse(f, fwd.z);
    for (std::size_t i = 0; i < dim; ++i) EXPECT_NEAR(inv.z[i], z0[i], 1e-6);
    EXPECT_NEAR(fwd.log_det.item() + inv.log_det.item(), 0.0, 1e-6);
  }
}

TEST(Flow, LogDetMatchesNumericalJacobian) {
  Rng rng(4);
  for (int seed = 0; seed < 100; ++seed) {
    const std::size_t dim = 2 + seed % 5, depth = 1 + (seed / 5) % 4;
    RealNvpFlow f(dim, depth, 8, rng);
    randomize_flow(f, rng);
    std::vector<double> z0(dim);
    for (auto& v : z0) v = rng.normal();
    const double ld = flow_forward(f, Tensor::vector(z0)).log_det.item();
    EXPECT_NEAR(ld, numerical_logdet(f, z0), 1e-4) << "dim " << dim << " depth " << depth;
  }
}

TEST(Flow, MatchesScalarReimplementation) {
  Rng rng(5);
  RealNvpFlow f(5, 3, 6, rng);
  randomize_flow(f, rng);
  const std::vector<double> z0{0.1, -0.4, 1.3, 0.7, -2.0};
  auto fwd = flow_forward(f, Tensor::vector(z0));
  auto [z, ld] = flow_fwd(f, z0);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(fwd.z[i], z[i], 1e-12);
  EXPECT_NEAR(fwd.log_det.item(), ld, 1e-12);
}

TEST(Flow, LogDetGradCheck) {
  Rng rng(6);
  for (int seed = 0; seed < 5; ++seed) {
    RealNvpFlow f(4, 2, 6, rng);
    randomize_flow(f, rng);
    std::vector<NamedParameter> named;
    f.append_parameters("f", named);
    std::vector<Tensor> params;
    for (auto& p : named) params.push_back(p.value);
    Tensor z0 = Tensor::vector({0.2, -0.5, 0.9, 1.1}, true);
    params.push_back(z0);
    EXPECT_LT(grad_check_params([&] { return flow_forward(f, z0).log_det + sum(square(flow_forward(f, z0).z)); },
                                params, 1e-6),
              1e-4);
    EXPECT_LT(grad_check_params([&] { return flow_inverse(f, z0).log_det + sum(square(flow_inverse(f, z0).z)); },
                                params, 1e-6),
              1e-4);
  }
}

TEST(Flow, DimensionMismatchAndNonFiniteScale) {
  Rng rng(7);
  RealNvpFlow f(3, 2, 4, rng);
  EXPECT_THROW(flow_forward(f, Tensor::vector({1, 2})), ShapeError);
  f.steps()[0].scale.b2.mutable_data()[1] = 1e4;
  EXPECT_THROW(flow_forward(f, Tensor::vector({1, 2, 3})), NumericError);
}

// ---------------------------------------------------------------------------
// MNF

TEST(Mnf, UnitZAndZeroNoiseGiveMean) {
  Rng rng(1);
  auto layer = MnfConvLayer::create(2, 3, 3, {}, rng);
  Noise zero = Noise::zero();
  MnfCache cache;
  Tensor w = mnf_sample_weights(layer, zero, cache);
  EXPECT_EQ(w.values(), layer.kernel.mu.values());
  for (double z : cache.last->z.data()) EXPECT_EQ(z, 1.0);
}

TEST(Mnf, ConstantZScalesMeans) {
  Rng rng(2);
  auto layer = MnfConvLayer::create(2, 3, 3, {}, rng);
  std::fill(layer.z0_mu.mutable_data().begin(), layer.z0_mu.mutable_data().end(), 2.0);
  std::fill(layer.z0_rho.mutable_data().begin(), layer.z0_rho.mutable_data().end(), -40.0);
  std::fill(layer.kernel.rho.mutable_data().begin(), layer.kernel.rho.mutable_data().end(), -40.0);
  Noise noise(rng);
  MnfCache cache;
  Tensor w = mnf_sample_weights(layer, noise, cache);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], 2.0 * layer.kernel.mu[i], 1e-12);
}

TEST(Mnf, LogQAtIdentityFlowIsBaseDensity) {
  Rng rng(3);
  auto layer = MnfConvLayer::create(1, 4, 3, {}, rng);
  std::fill(layer.z0_mu.mutable_data().begin(), layer.z0_mu.mutable_data().end(), 0.0);
  std::fill(layer.z0_rho.mutable_data().begin(), layer.z0_rho.mutable_data().end(), softplus_inverse(1.0));
  Noise noise(rng);
  MnfCache cache;
  mnf_sample_weights(layer, noise, cache);
  double expected = 0.0;
  for (double z : cache.last->z0.data()) expected += log_normal(z, 0.0, 1.0);
  EXPECT_NEAR(cache.last->log_q_z.item(), expected, 1e-12);
  EXPECT_EQ(cache.last->z.values(), cache.last->z0.values());
}

TEST(Mnf, DegenerateKlEqualsGaussianKl) {
  Rng rng(4);
  for (int seed = 0; seed < 10; ++seed) {
    auto layer = MnfConvLayer::create(3, 4, 3, {}, rng);
    fill_random(layer.kernel.rho, rng, 1.0);
    Noise zero = Noise::zero();
    MnfCache cache;
    mnf_sample_weights(layer, zero, cache);
    const double expected = kl_gaussian(layer.kernel).item() + kl_gaussian(layer.bias).item();
    EXPECT_NEAR(mnf_kl_contribution(layer, cache).item(), expected, 1e-6);
  }
}

TEST(Mnf, DegenerateStandardBaseGivesZero) {
  Rng rng(5);
  auto layer = MnfConvLayer::create(2, 2, 1, {1, 0}, rng);
  std::fill(layer.kernel.mu.mutable_data().begin(), layer.kernel.mu.mutable_data().end(), 0.0);
  std::fill(layer.kernel.rho.mutable_data().begin(), layer.kernel.rho.mutable_data().end(), softplus_inverse(1.0));
  std::fill(layer.bias.rho.mutable_data().begin(), layer.bias.rho.mutable_data().end(), softplus_inverse(1.0));
  Noise zero = Noise::zero();
  MnfCache cache;
  mnf_sample_weights(layer, zero, cache);
  EXPECT_NEAR(mnf_kl_contribution(layer, cache).item(), 0.0, 1e-12);
}

TEST(Mnf, KlMatchesStepByStepRecomputation) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    // 4 kernel weights: 2 output channels x 2 input channels x 1 x 1
    MnfOptions opt;
    opt.flow_hidden = 5;
    opt.aux_hidden = 5;
    auto layer = MnfConvLayer::create(2, 2, 1, {1, 0}, rng, opt);
    fill_random(layer.kernel.rho, rng, 0.5);
    fill_random(layer.z0_rho, rng, 0.5);
    randomize_flow(layer.flow, rng);
    randomize_flow(layer.aux_flow, rng);
    for (Mlp* m : {&layer.aux_mu_net, &layer.aux_sigma_net}) {
      fill_random(m->w2, rng, 0.3);
      fill_random(m->b2, rng, 0.3);
    }
    Noise noise(rng);
    MnfCache cache;
    mnf_sample_weights(layer, noise, cache);
    const MnfDraw& d = *cache.last;
    const double got = mnf_kl_contribution(layer, cache).item();

    const std::size_t cout = 2, per = 2;
    // log q(z_L)
    const auto z0 = d.z0.values();
    auto [z, ld] = flow_fwd(layer.flow, z0);
    double log_q = -ld;
    for (std::size_t i = 0; i < cout; ++i) log_q += log_normal(z0[i], layer.z0_mu[i], sp(layer.z0_rho[i]));
    // KL(q(w|z) || N(0,1)) plus bias KL
    double kl = 0.0;
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t j = 0; j < per; ++j) {
        const std::size_t idx = o * per + j;
        const double m = layer.kernel.mu[idx] * z[o], s = sp(layer.kernel.rho[idx]);
        kl += 0.5 * (m * m + s * s - 1.0) - std::log(s);
      }
    for (std::size_t o = 0; o < cout; ++o) {
      const double m = layer.bias.mu[o], s = sp(layer.bias.rho[o]);
      kl += 0.5 * (m * m + s * s - 1.0) - std::log(s);
    }
    // log s(z_L | w)
    std::vector<double> means(cout, 0.0);
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t j = 0; j < per; ++j) means[o] += d.kernel[o * per + j];
      means[o] /= per;
    }
    const auto amu = mlp_eval(layer.aux_mu_net, means);
    const auto asig = mlp_eval(layer.aux_sigma_net, means);
    auto [zb, ldi] = flow_inv(layer.aux_flow, z);
    double log_s = ldi;
    for (std::size_t i = 0; i < cout; ++i) log_s += log_normal(zb[i], amu[i], sp(asig[i]));

    EXPECT_NEAR(got, kl + log_q - log_s, 1e-10);
    for (std::size_t i = 0; i < cout; ++i) EXPECT_NEAR(d.z[i], z[i], 1e-12);
    EXPECT_TRUE(std::isfinite(d.log_q_z.item()));
    EXPECT_EQ(d.z.size(), cout);
  }
}

TEST(Mnf, KlGradCheck) {
  Rng rng(7);
  MnfOptions opt;
  opt.flow_hidden = 4;
  opt.aux_hidden = 4;
  opt.sigma0 = 0.2;
  opt.z_sigma0 = 0.3;
  auto layer = MnfConvLayer::create(2, 3, 1, {1, 0}, rng, opt);
  randomize_flow(layer.flow, rng, 0.2);
  randomize_flow(layer.aux_flow, rng, 0.2);
  fill_random(layer.aux_mu_net.w2, rng, 0.2);
  fill_random(layer.aux_sigma_net.w2, rng, 0.2);
  std::vector<NamedParameter> named;
  layer.append_parameters("m", named);
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.value);
  const double err = grad_check_params(
      [&] {
        Rng r(1234);
        Noise noise(r);
        MnfCache cache;
        mnf_sample_weights(layer, noise, cache);
        return mnf_kl_contribution(layer, cache);
      },
      params, 1e-6);
  EXPECT_LT(err, 1e-4);
}

TEST(Mnf, MissingSampleIsStateError) {
  Rng rng(8);
  auto layer = MnfConvLayer::create(1, 2, 3, {}, rng);
  MnfCache cache;
  EXPECT_THROW(mnf_kl_contribution(layer, cache), StateError);
}

TEST(Mnf, ZeroSigmaForwardEqualsMeanNetwork) {
  Rng rng(9);
  auto layer = MnfConvLayer::create(2, 3, 3, {}, rng);
  std::fill(layer.kernel.rho.mutable_data().begin(), layer.kernel.rho.mutable_data().end(), -60.0);
  std::fill(layer.bias.rho.mutable_data().begin(), layer.bias.rho.mutable_data().end(), -60.0);
  std::fill(layer.z0_rho.mutable_data().begin(), layer.z0_rho.mutable_data().end(), -60.0);
  Tensor x({1, 2, 5, 5}, std::vector<double>(50));
  for (std::size_t i = 0; i < 50; ++i) x.mutable_data()[i] = std::sin(0.3 * static_cast<double>(i));
  Noise noise(rng);
  MnfCache cache;
  mnf_sample_weights(layer, noise, cache);
  const Tensor stochastic = layer.forward(x, *cache.last);
  const Tensor mean_net = conv2d(x, layer.kernel.mu, layer.bias.mu, 1, 1);
  for (std::size_t i = 0; i < stochastic.size(); ++i) EXPECT_NEAR(stochastic[i], mean_net[i], 1e-12);
}

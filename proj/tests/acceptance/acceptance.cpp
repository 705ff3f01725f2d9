// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "miai/cli.hpp"
#include "miai/config.hpp"
#include "miai/evaluation.hpp"
#include "miai/refiner.hpp"

using namespace miai;
using namespace miai::param_names;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[fail] ";
    }
    detail << what << "; ";
  }
};

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t({r, c});
  for (auto& v : t.values()) v = n(rng);
  return t;
}

Tensor random_bits(std::size_t r, std::size_t c, Rng& rng) {
  std::bernoulli_distribution b(0.5);
  Tensor t({r, c});
  for (auto& v : t.values()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

Tensor random_onehot(std::size_t r, std::size_t k, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, k - 1);
  Tensor t({r, k});
  for (std::size_t i = 0; i < r; ++i) t.at(i, u(rng)) = 1.0;
  return t;
}

std::vector<Var> bind_data(Graph& g, const std::vector<Tensor>& xs) {
  std::vector<Var> out;
  for (const auto& x : xs) out.push_back(g.constant(x));
  return out;
}

// ---------------------------------------------------------------------------
// 1. gradients

// One modality per likelihood family so every log-likelihood path is checked.
ModelConfig mixed_config(std::size_t latent) {
  ModelConfig cfg;
  cfg.modalities = {{"g", 3, Likelihood::kGaussian, 0.8, 0},
                    {"b", 4, Likelihood::kBernoulli, 1.0, 0},
                    {"c", 3, Likelihood::kCategorical, 1.0, 3}};
  cfg.latent_dim = latent;
  cfg.hidden = 5;
  cfg.refiner_hidden = 4;
  cfg.beta = {1.0, 0.7, 1.3};
  return cfg;
}

std::vector<Tensor> mixed_data(std::size_t rows, Rng& rng) {
  return {random_tensor(rows, 3, rng), random_bits(rows, 4, rng), random_onehot(rows, 3, rng)};
}

std::vector<Var> leaves_where(const ParamVars& pv, const std::function<bool(const std::string&)>& f) {
  std::vector<Var> out;
  for (const auto& [name, v] : pv.all()) {
    if (f(name)) out.push_back(v);
  }
  return out;
}

double check_all(Graph& g, Var root, const std::vector<Var>& leaves, bool& missing) {
  const auto rep = gradient_check(g, root, leaves, 1e-5);
  for (const auto& e : rep.entries) missing |= !e.has_gradient;
  return rep.max_rel_error();
}

Outcome criterion1() {
  Outcome o;
  const auto all = [](const std::string&) { return true; };
  auto base = mixed_config(3);
  Rng rng(101);

  {  // single-sample ELBO, posterior statistics and parameters
    auto cfg = model_for_family(base, Family::kMixture);
    auto params = init_params(cfg, rng);
    Graph g;
    ParamVars pv(g, params, all);
    auto x = bind_data(g, mixed_data(4, rng));
    GaussianVars q{g.variable(random_tensor(4, 3, rng), "mu"), g.variable(random_tensor(4, 3, rng, 0.3), "ls")};
    auto loss = g.sum(elbo(pv, cfg, x, q, 0b111, g.constant(random_tensor(4, 3, rng))).total);
    bool missing = false;
    const double e1 = check_all(g, loss, {q.mean, q.log_std}, missing);
    Graph g2;
    ParamVars pv2(g2, params, all);
    auto x2 = bind_data(g2, mixed_data(4, rng));
    auto q2 = poe_posterior(pv2, cfg, x2, 0b111);
    auto loss2 = g2.sum(elbo(pv2, cfg, x2, q2, 0b111, g2.constant(random_tensor(4, 3, rng))).total);
    const double e2 = check_all(g2, loss2, leaves_where(pv2, [](const std::string& n) { return !is_lambda(n); }),
                                missing);
    o.check(e1 < 1e-4 && e2 < 1e-4 && !missing, "elbo stats " + num(e1) + " params " + num(e2));
  }
  {  // subset-weighted bound
    auto cfg = model_for_family(base, Family::kMixture);
    auto params = init_params(cfg, rng);
    Graph g;
    ParamVars pv(g, params, all);
    auto x = bind_data(g, mixed_data(3, rng));
    Rng noise(7);
    auto loss = g.sum(mopoe_elbo(pv, cfg, x, uniform_subset_weights(3), noise));
    bool missing = false;
    const double e = check_all(g, loss, leaves_where(pv, all), missing);
    o.check(e < 1e-4 && !missing, "mopoe " + num(e));
  }
  {  // alignment objective: PoE bound plus distillation into lambda
    auto cfg = model_for_family(base, Family::kAlignment);
    auto params = init_params(cfg, rng);
    Graph g;
    ParamVars pv(g, params, all);
    auto x = bind_data(g, mixed_data(3, rng));
    Rng noise(8);
    const std::vector<double> pi{0.2, 0.5, 0.3};
    auto loss = g.sum(alignment_objective(pv, cfg, x, pi, noise));
    bool missing = false;
    const double e = check_all(g, loss, leaves_where(pv, all), missing);
    o.check(e < 1e-4 && !missing, "alignment " + num(e));
  }
  {  // refinement-state ELBO
    auto cfg = model_for_family(base, Family::kProposed);
    auto params = init_params(cfg, rng);
    Graph g;
    ParamVars pv(g, params, all);
    auto x = bind_data(g, mixed_data(3, rng));
    GaussianVars q{g.variable(random_tensor(3, 3, rng), "mu"), g.variable(random_tensor(3, 3, rng, 0.3), "ls")};
    auto loss = g.sum(refinement_loss(pv, cfg, 1, x, q, g.constant(random_tensor(3, 3, rng))).total);
    bool missing = false;
    const double e1 = check_all(g, loss, {q.mean, q.log_std}, missing);
    const double e2 = check_all(g, loss, leaves_where(pv, is_decoder), missing);
    o.check(e1 < 1e-4 && e2 < 1e-4 && !missing, "refinement elbo stats " + num(e1) + " params " + num(e2));
  }
  {  // KL alignment of lambda encoders to refined posteriors
    auto cfg = model_for_family(base, Family::kProposed);
    auto params = init_params(cfg, rng);
    std::vector<GaussianBatch> refined;
    for (int m = 0; m < 3; ++m) refined.push_back({random_tensor(3, 3, rng), random_tensor(3, 3, rng, 0.5)});
    Graph g;
    ParamVars pv(g, params, all);
    auto x = bind_data(g, mixed_data(3, rng));
    auto loss = g.sum(alignment_kl_loss(pv, cfg, x, refined));
    bool missing = false;
    const double e = check_all(g, loss, leaves_where(pv, is_lambda), missing);
    o.check(e < 1e-4 && !missing, "lambda kl " + num(e));
  }
  {  // unrolled refinement loss, T = 4, through refiner, encoder and decoder
    auto cfg = model_for_family(base, Family::kProposed);
    cfg.modalities.pop_back();
    cfg.beta.pop_back();
    auto params = init_params(cfg, rng);
    Graph g;
    ParamVars pv(g, params, [](const std::string& n) { return !is_lambda(n); });
    auto data = mixed_data(3, rng);
    data.pop_back();
    auto x = bind_data(g, data);
    Rng noise(9);
    auto loss = refinement_training_loss(pv, cfg, x, 4, noise);
    bool missing = false;
    const double e = check_all(g, loss, leaves_where(pv, [](const std::string& n) { return !is_lambda(n); }), missing);
    o.check(e < 1e-3 && !missing, "unrolled T=4 " + num(e));
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2. closed-form oracles

double normal_pdf(double x, double mu, double sd) {
  const double u = (x - mu) / sd;
  return std::exp(-0.5 * u * u) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

struct Grid {
  static constexpr double lo = -12.0, hi = 12.0;
  static constexpr int n = 240001;
  static double x(int i) { return lo + i * (hi - lo) / (n - 1); }
};

// Product of 1-D densities normalized numerically on the grid.
std::vector<double> grid_product(const std::vector<std::pair<double, double>>& factors) {
  std::vector<double> p(Grid::n);
  double z = 0.0;
  for (int i = 0; i < Grid::n; ++i) {
    double v = 1.0;
    for (auto [mu, sd] : factors) v *= normal_pdf(Grid::x(i), mu, sd);
    p[i] = v;
    z += v;
  }
  const double dx = (Grid::hi - Grid::lo) / (Grid::n - 1);
  for (auto& v : p) v /= z * dx;
  return p;
}

Outcome criterion2() {
  Outcome o;
  Rng rng(202);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> ls(-1.0, 0.7);
  auto random_gaussian = [&](std::size_t d) {
    DiagGaussian g;
    for (std::size_t i = 0; i < d; ++i) {
      g.mean.push_back(normal(rng));
      g.log_std.push_back(ls(rng));
    }
    return g;
  };

  {  // KL vs Monte Carlo, 1e5 draws
    const auto q = random_gaussian(8), p = random_gaussian(8);
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    std::vector<double> eps(8);
    for (int i = 0; i < n; ++i) {
      for (auto& e : eps) e = normal(rng);
      const auto z = sample_reparam(q, eps);
      const double v = q.log_pdf(z) - p.log_pdf(z);
      s += v;
      s2 += v * v;
    }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    const double kl = kl_diag(q, p);
    o.check(std::abs(mean - kl) < 3 * se, "kl " + num(kl, 6) + " mc " + num(mean, 6) + " se " + num(se, 2));
  }
  const double dx = (Grid::hi - Grid::lo) / (Grid::n - 1);
  {  // PoE moments vs grid product, prior included
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
      std::vector<DiagGaussian> experts;
      std::vector<std::pair<double, double>> factors = {{0.0, 1.0}};
      for (int k = 0; k < 3; ++k) {
        experts.push_back(random_gaussian(1));
        factors.emplace_back(experts.back().mean[0], std::exp(experts.back().log_std[0]));
      }
      const auto fused = poe(experts, true);
      const auto p = grid_product(factors);
      double m1 = 0.0, m2 = 0.0;
      for (int i = 0; i < Grid::n; ++i) {
        m1 += p[i] * Grid::x(i) * dx;
        m2 += p[i] * Grid::x(i) * Grid::x(i) * dx;
      }
      worst = std::max(worst, std::abs(m1 - fused.mean[0]));
      worst = std::max(worst, std::abs((m2 - m1 * m1) - std::exp(2.0 * fused.log_std[0])));
    }
    o.check(worst < 1e-6, "poe moment err " + num(worst, 2));
  }
  {  // MoPoE density vs weighted sum of grid-normalized subset products
    const std::vector<DiagGaussian> experts = {random_gaussian(1), random_gaussian(1), random_gaussian(1)};
    std::vector<double> w = {0.05, 0.1, 0.15, 0.2, 0.1, 0.25, 0.15};
    const auto mix = mopoe(experts, w);
    const auto subsets = nonempty_subsets(3);
    std::vector<double> expect(Grid::n, 0.0);
    for (std::size_t k = 0; k < subsets.size(); ++k) {
      std::vector<std::pair<double, double>> f = {{0.0, 1.0}};
      for (std::size_t m = 0; m < 3; ++m) {
        if (subsets[k] >> m & 1) f.emplace_back(experts[m].mean[0], std::exp(experts[m].log_std[0]));
      }
      const auto p = grid_product(f);
      for (int i = 0; i < Grid::n; ++i) expect[i] += w[k] * p[i];
    }
    double worst = 0.0;
    for (int i = 0; i < Grid::n; i += 100) {
      const double z[1] = {Grid::x(i)};
      worst = std::max(worst, std::abs(mix.pdf(z) - expect[i]));
    }
    o.check(worst < 1e-6, "mopoe Linf " + num(worst, 2));
  }
  return o;
}

// ---------------------------------------------------------------------------
// 3. information gap on bit-split joints

double brute_conditional_entropy(const DiscreteJoint& j, SubsetMask s) {
  const auto M = j.num_modalities();
  auto digits = [&](std::size_t cell) {
    std::vector<std::size_t> d(M);
    for (std::size_t m = M; m-- > 0;) {
      d[m] = cell % j.alphabet[m];
      cell /= j.alphabet[m];
    }
    return d;
  };
  double h = 0.0;
  for (std::size_t a = 0; a < j.prob.size(); ++a) {
    if (j.prob[a] == 0.0) continue;
    const auto da = digits(a);
    double marginal = 0.0;
    for (std::size_t b = 0; b < j.prob.size(); ++b) {
      const auto db = digits(b);
      bool same = true;
      for (std::size_t m = 0; m < M; ++m) {
        if ((s >> m & 1) && da[m] != db[m]) same = false;
      }
      if (same) marginal += j.prob[b];
    }
    h -= j.prob[a] * std::log(j.prob[a] / marginal);
  }
  return h;
}

Outcome criterion3() {
  Outcome o;
  auto joint = [](std::size_t shared, std::vector<std::size_t> priv) {
    BitSplitSpec s;
    s.shared_bits = shared;
    s.private_bits = std::move(priv);
    s.samples = 1;
    return gen_bitsplit(s).joint;
  };
  {
    const double d = delta_gap(joint(3, {0, 0}), uniform_subset_weights(2));
    o.check(d == 0.0, "redundant " + num(d, 17));
  }
  {
    const double d = delta_gap(joint(0, {1, 1}), uniform_subset_weights(2));
    const double expect = 2.0 / 3.0 * std::numbers::ln2;
    o.check(std::abs(d - expect) <= 1e-12, "independent bits err " + num(std::abs(d - expect), 2));
  }
  double worst = 0.0;
  Rng rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<std::pair<std::size_t, std::vector<std::size_t>>> layouts = {
      {1, {1, 2}}, {2, {0, 1}}, {1, {2, 0, 1}}, {0, {1, 1, 1}}, {2, {2, 1}}};
  for (const auto& [shared, priv] : layouts) {
    const auto j = joint(shared, priv);
    const auto subsets = nonempty_subsets(priv.size());
    std::vector<std::vector<double>> weightings = {uniform_subset_weights(priv.size())};
    std::vector<double> w(subsets.size());
    double ws = 0.0;
    for (auto& x : w) ws += (x = u(rng));
    for (auto& x : w) x /= ws;
    double ws2 = 0.0;
    for (double x : w) ws2 += x;
    w.back() += 1.0 - ws2;
    weightings.push_back(w);
    for (const auto& weights : weightings) {
      double expect = 0.0;
      for (std::size_t k = 0; k < subsets.size(); ++k) expect += weights[k] * brute_conditional_entropy(j, subsets[k]);
      worst = std::max(worst, std::abs(delta_gap(j, weights) - expect));
    }
  }
  o.check(worst <= 1e-12, "brute force max err " + num(worst, 2));
  return o;
}

// ---------------------------------------------------------------------------
// 4. refinement step equations

std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  std::vector<double> y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

double elu(double x) { return x > 0 ? x : std::expm1(x); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> layer_norm(const std::vector<double>& v) {
  double m = 0.0, var = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size());
  std::vector<double> out;
  for (double x : v) out.push_back((x - m) / std::sqrt(var + 1e-5));
  return out;
}

ModelConfig refiner_config() {
  ModelConfig cfg;
  cfg.modalities = {{"a", 2, Likelihood::kGaussian, 0.9, 0}, {"b", 3, Likelihood::kGaussian, 1.1, 0}};
  cfg.latent_dim = 3;
  cfg.hidden = 4;
  cfg.refiner_hidden = 5;
  cfg.beta = {1.0, 1.0};
  return model_for_family(cfg, Family::kProposed);
}

void set_gates(ModelParams& p, double bias) {
  for (const char* g : {"ref.gate_mu", "ref.gate_logstd"}) {
    for (auto& v : p.get_mut(std::string(g) + ".w").values()) v = 0.0;
    for (auto& v : p.get_mut(std::string(g) + ".b").values()) v = bias;
  }
}

Outcome criterion4() {
  Outcome o;
  const auto cfg = refiner_config();
  Rng rng(404);
  {
    auto params = init_params(cfg, rng);
    double phase = 0.1;
    for (const auto& [name, t] : params.all()) {
      if (!is_refiner(name)) continue;
      auto& w = params.get_mut(name);
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = 0.35 * std::sin(static_cast<double>(k) + phase);
      phase += 0.9;
    }
    double worst = 0.0;
    for (std::size_t m = 0; m < 2; ++m) {
      const std::size_t dm = cfg.modalities[m].dim;
      const std::vector<double> mu{0.3, -0.7, 1.1}, ls{-0.2, 0.4, -1.5}, gm{1.5, -0.25, 0.1}, gs{-3.0, 0.8, 2.2};
      std::vector<double> x;
      for (std::size_t k = 0; k < dm; ++k) x.push_back(0.5 - 0.9 * static_cast<double>(k));
      RefinementState state{Tensor::matrix(1, 3, mu), Tensor::matrix(1, 3, ls), 0};
      auto next = refine_step(params, cfg, m, Tensor::matrix(1, dm, x), state, Tensor::matrix(1, 3, gm),
                              Tensor::matrix(1, 3, gs));
      const std::string xm = "ref.x." + std::to_string(m);
      auto hx = affine(x, params.get(xm + ".w"), params.get(xm + ".b"));
      for (auto& v : hx) v = elu(v);
      std::vector<double> gin = mu;
      gin.insert(gin.end(), ls.begin(), ls.end());
      for (const auto& part : {layer_norm(gm), layer_norm(gs)}) gin.insert(gin.end(), part.begin(), part.end());
      auto hg = affine(gin, params.get("ref.grad.w"), params.get("ref.grad.b"));
      for (auto& v : hg) v = elu(v);
      std::vector<double> h = hx;
      h.insert(h.end(), hg.begin(), hg.end());
      const auto cm = affine(h, params.get("ref.mu.w"), params.get("ref.mu.b"));
      const auto cs = affine(h, params.get("ref.logstd.w"), params.get("ref.logstd.b"));
      const auto am = affine(h, params.get("ref.gate_mu.w"), params.get("ref.gate_mu.b"));
      const auto as = affine(h, params.get("ref.gate_logstd.w"), params.get("ref.gate_logstd.b"));
      for (std::size_t k = 0; k < 3; ++k) {
        const double a = sigmoid(am[k]), b = sigmoid(as[k]);
        worst = std::max(worst, std::abs(next.mean[k] - (a * mu[k] + (1 - a) * std::tanh(cm[k]))));
        worst = std::max(worst, std::abs(next.log_std[k] - (b * ls[k] + (1 - b) * std::tanh(cs[k]))));
      }
    }
    o.check(worst <= 1e-12, "straightline err " + num(worst, 2));
  }
  {  // gate saturated at 1: state passes through
    auto params = init_params(cfg, rng);
    set_gates(params, 40.0);
    RefinementState s{random_tensor(5, 3, rng), random_tensor(5, 3, rng), 0};
    auto next = refine_step(params, cfg, 0, random_tensor(5, 2, rng), s, random_tensor(5, 3, rng),
                            random_tensor(5, 3, rng));
    double worst = 0.0;
    for (std::size_t k = 0; k < s.mean.size(); ++k) {
      worst = std::max(worst, std::abs(next.mean[k] - s.mean[k]));
      worst = std::max(worst, std::abs(next.log_std[k] - s.log_std[k]));
    }
    o.check(worst < 1e-12, "gate-at-1 drift " + num(worst, 2));
  }
  {  // update stays inside the hull of the old state and (-1, 1)
    auto params = init_params(cfg, rng);
    bool bounded = true;
    for (int trial = 0; trial < 200; ++trial) {
      RefinementState s{random_tensor(4, 3, rng, 3.0), random_tensor(4, 3, rng, 3.0), 0};
      auto next = refine_step(params, cfg, 1, random_tensor(4, 3, rng), s, random_tensor(4, 3, rng, 10.0),
                              random_tensor(4, 3, rng, 10.0));
      for (std::size_t k = 0; k < s.mean.size(); ++k) {
        for (auto [old, now] : {std::pair{s.mean[k], next.mean[k]}, std::pair{s.log_std[k], next.log_std[k]}}) {
          bounded &= now <= std::max(old, 1.0) && now >= std::min(old, -1.0);
        }
      }
    }
    set_gates(params, -40.0);
    RefinementState s{random_tensor(4, 3, rng), random_tensor(4, 3, rng), 0};
    auto next = refine_step(params, cfg, 1, random_tensor(4, 3, rng), s, random_tensor(4, 3, rng),
                            random_tensor(4, 3, rng));
    for (std::size_t k = 0; k < s.mean.size(); ++k) bounded &= std::abs(next.mean[k]) < 1.0 && std::abs(next.log_std[k]) < 1.0;
    o.check(bounded, "tanh bound and convex update");
  }
  return o;
}

// ---------------------------------------------------------------------------
// 5, 6. linear-Gaussian toy

LinearGaussianData toy_data() {
  LinearGaussianSpec spec;
  spec.latent_dim = 8;
  spec.dims = {8, 8};
  spec.samples = 8000;
  spec.noise_std = {1.0, 1.0};
  spec.loading_scale = 0.7;
  spec.seed = 7;
  return gen_linear_gaussian(spec);
}

ModelConfig toy_model(const Dataset& ds) {
  ModelConfig mc;
  mc.modalities = ds.modalities;
  mc.latent_dim = 8;
  mc.hidden = 64;
  mc.refiner_hidden = 64;
  mc.beta = {1.0, 1.0};
  return mc;
}

TrainConfig toy_train(Family f, std::size_t epochs) {
  TrainConfig tc;
  tc.family = f;
  tc.lr = 2e-3;
  tc.epochs = epochs;
  tc.seed = 1;
  tc.steps = 8;
  return tc;
}

Outcome criterion5() {
  Outcome o;
  const auto data = toy_data();
  const auto& ds = data.dataset;
  const auto split = split_indices(ds.size(), 7);
  const auto mc = toy_model(ds);
  const auto prop = train_stage1(mc, toy_train(Family::kProposed, 30), ds, split);
  const auto align = train_stage1(mc, toy_train(Family::kAlignment, 30), ds, split);
  const auto pcfg = model_for_family(mc, Family::kProposed);
  const auto acfg = model_for_family(mc, Family::kAlignment);
  EvalOptions eo;
  eo.seed = 3;
  eo.elbo_samples = 16;
  std::size_t above_poe = 0;
  for (std::size_t m = 0; m < 2; ++m) {
    const auto c = elbo_vs_T(prop.checkpoint.params, pcfg, ds, split.test, m, 8, &align.checkpoint.params, &acfg, eo);
    const double t1 = c.points.front(), t8 = c.points.back();
    o.check(t8 > t1, "m" + std::to_string(m) + " T1 " + num(t1, 6) + " T8 " + num(t8, 6));
    if (t8 > *c.poe_baseline) ++above_poe;
    o.detail << "poe " << num(*c.poe_baseline, 6) << "; ";
  }
  o.check(2 * above_poe >= 2, std::to_string(above_poe) + "/2 above poe");
  return o;
}

Outcome criterion6() {
  Outcome o;
  const auto data = toy_data();
  const auto& ds = data.dataset;
  const auto split = split_indices(ds.size(), 7);
  auto mc = toy_model(ds);
  mc.decoder = DecoderKind::kLinear;
  auto tc = toy_train(Family::kProposed, 30);
  tc.freeze_decoder = true;
  const auto pcfg = model_for_family(mc, Family::kProposed);
  const auto oracle = oracle_decoder(pcfg, data.oracle);
  const auto prop = train_stage1(mc, tc, ds, split, &oracle);
  o.check(split.test.size() >= 500, std::to_string(split.test.size()) + " held-out items");
  EvalOptions eo;
  eo.seed = 3;
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<double> med;
    double amortized = 0.0;
    for (int T : {1, 2, 4, 8}) {
      const auto g = amortization_gap(prop.checkpoint.params, pcfg, ds, data.oracle, split.test, m, T, eo);
      amortized = g.median_amortized;
      med.push_back(g.median_refined);
    }
    int inversions = 0;
    double prev = amortized;
    for (double v : med) {
      if (v > prev) ++inversions;
      prev = v;
    }
    std::ostringstream s;
    s << "m" << m << " median KL T0 " << num(amortized);
    for (std::size_t k = 0; k < med.size(); ++k) s << " T" << (1 << k) << " " << num(med[k]);
    o.check(med.back() < amortized && inversions <= 1, s.str() + " inversions " + std::to_string(inversions));
  }
  return o;
}

// ---------------------------------------------------------------------------
// 7, 8. asymmetric bit-split toy, three seeds

struct SeedMetrics {
  std::map<Family, double> fd_rich_to_poor, probe_rich, coh_poor_to_rich;
};

SeedMetrics run_bitsplit_seed(std::uint64_t seed) {
  BitSplitSpec bs;
  bs.shared_bits = 2;
  bs.private_bits = {6, 2};  // modality 0 carries the private information
  bs.repeat = 2;
  bs.flip_prob = 0.05;
  bs.samples = 4000;
  bs.seed = seed;
  const auto data = gen_bitsplit(bs);
  const auto& ds = data.dataset;
  const auto split = split_indices(ds.size(), seed);
  ModelConfig mc;
  mc.modalities = ds.modalities;
  mc.latent_dim = 8;
  mc.hidden = 64;
  mc.refiner_hidden = 64;
  mc.beta = {1.0, 1.0};
  TrainConfig tc;
  tc.lr = 2e-3;
  tc.epochs = 15;
  tc.seed = seed;
  tc.steps = 8;
  RidgeClassifier clf0;
  clf0.fit(ds.data[0].gather_rows(split.train), ds.labels_at(split.train), ds.num_classes, 1e-3);

  SeedMetrics out;
  for (Family f : {Family::kMixture, Family::kAlignment, Family::kProposed}) {
    tc.family = f;
    const auto s1 = train_stage1(mc, tc, ds, split);
    Checkpoint ck = s1.checkpoint;
    if (f != Family::kMixture) ck = train_stage2(mc, tc, s1.checkpoint, ds, split).checkpoint;
    const auto cfg = model_for_family(mc, f);
    Rng rng(99);
    out.fd_rich_to_poor[f] = cross_modal_frechet(ck.params, cfg, f, ds, split.test, 0, 1, rng);
    const auto ztr = unimodal_posterior(ck.params, cfg, f, 0, ds.data[0].gather_rows(split.train)).mean;
    const auto zte = unimodal_posterior(ck.params, cfg, f, 0, ds.data[0].gather_rows(split.test)).mean;
    out.probe_rich[f] =
        linear_probe(ztr, ds.labels_at(split.train), zte, ds.labels_at(split.test), ds.num_classes, 1e-3);
    out.coh_poor_to_rich[f] = cross_coherence(ck.params, cfg, f, ds, split.test, 1, 0, clf0);
  }
  return out;
}

const std::vector<SeedMetrics>& bitsplit_runs() {
  static const std::vector<SeedMetrics> runs = [] {
    std::vector<SeedMetrics> r;
    for (std::uint64_t s : {1, 2, 3}) r.push_back(run_bitsplit_seed(s));
    return r;
  }();
  return runs;
}

Outcome criterion7() {
  Outcome o;
  int wins = 0;
  for (std::size_t k = 0; k < bitsplit_runs().size(); ++k) {
    const auto& fd = bitsplit_runs()[k].fd_rich_to_poor;
    const double p = fd.at(Family::kProposed), a = fd.at(Family::kAlignment), m = fd.at(Family::kMixture);
    const bool ok = p < a && a < m;
    wins += ok;
    o.detail << "seed " << k + 1 << " fd " << num(p) << " < " << num(a) << " < " << num(m) << (ok ? "" : " (no)") << "; ";
  }
  o.check(wins >= 2, std::to_string(wins) + "/3 seeds ordered");
  return o;
}

Outcome criterion8() {
  Outcome o;
  int probe_wins = 0, coh_wins = 0;
  for (std::size_t k = 0; k < bitsplit_runs().size(); ++k) {
    const auto& r = bitsplit_runs()[k];
    const double pp = r.probe_rich.at(Family::kProposed), pa = r.probe_rich.at(Family::kAlignment);
    const double cp = r.coh_poor_to_rich.at(Family::kProposed), cm = r.coh_poor_to_rich.at(Family::kMixture);
    probe_wins += pp >= pa;
    coh_wins += cp > cm;
    o.detail << "seed " << k + 1 << " probe " << num(pp, 3) << " vs " << num(pa, 3) << " coherence " << num(cp, 3)
             << " vs " << num(cm, 3) << "; ";
  }
  o.check(probe_wins >= 2, "probe " + std::to_string(probe_wins) + "/3");
  o.check(coh_wins >= 2, "coherence " + std::to_string(coh_wins) + "/3");
  return o;
}

// ---------------------------------------------------------------------------
// 9. reproducibility

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.all().size() != b.all().size()) return false;
  for (const auto& [name, t] : a.all()) {
    const auto& u = b.get(name);
    if (t.shape() != u.shape()) return false;
    if (std::memcmp(t.values().data(), u.values().data(), t.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

Outcome criterion9() {
  Outcome o;
  const auto base = fs::temp_directory_path() / ("miai_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(base);
  std::istringstream text(
      "experiment.name = repro\n"
      "experiment.seed = 11\n"
      "dataset.kind = bitsplit\n"
      "dataset.samples = 600\n"
      "dataset.shared_bits = 2\n"
      "dataset.private_bits = 3, 1\n"
      "model.families = mixture, alignment, proposed\n"
      "model.latent_dim = 4\n"
      "model.hidden = 16\n"
      "model.refiner_hidden = 16\n"
      "model.steps = 3\n"
      "train.epochs = 3\n"
      "train.shards = 2\n"
      "eval.t_max = 4\n"
      "eval.elbo_samples = 4\n");
  auto cfg = parse_config(text, "repro.cfg");
  std::ostringstream log;
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* run : {"a", "b"}) {
    cfg.out_dir = (base / run).string();
    cmd_gen_data(cfg, log);
    cmd_train(cfg, log, run[0] == 'a' ? 1 : 2);
    cmd_eval(cfg, log);
    trees.push_back(tree_bytes(base / run));
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : trees[0]) {
    auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != bytes) {
      ++differing;
      o.detail << "differs: " << name << "; ";
    }
  }
  const bool complete = trees[0].count("manifest.txt") && trees[0].count("metrics.csv") &&
                        trees[0].count("proposed/stage2.ckpt") && trees[0].count("elbo_curves.csv");
  o.check(differing == 0 && complete && trees[0].size() == trees[1].size(),
          std::to_string(trees[0].size()) + " files bit-identical across runs");

  // checkpoint round trip
  const auto ckpt_path = base / "a" / "proposed" / "stage2.ckpt";
  const auto loaded = load_checkpoint(ckpt_path.string(), cfg.digest());
  const auto again = base / "resaved.ckpt";
  save_checkpoint(loaded.checkpoint, again.string());
  const auto reloaded = load_checkpoint(again.string());
  o.check(slurp(ckpt_path) == slurp(again) && loaded.warnings.empty() &&
              same_params(loaded.checkpoint.params, reloaded.checkpoint.params) &&
              loaded.checkpoint.rng_state == reloaded.checkpoint.rng_state,
          "checkpoint round trip");
  fs::remove_all(base);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
      auto o = fn();
      pass = o.pass;
      detail = o.detail.str();
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s (%.1fs) %s\n", id, pass ? "PASS" : "FAIL", secs, detail.c_str());
    std::fflush(stdout);
    failed += !pass;
  }
  return failed == 0 ? 0 : 1;
}

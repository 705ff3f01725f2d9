#include "miai/gaussian.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

#include "miai/error.hpp"

namespace miai {

namespace {

void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": dimension mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

double clamp_log_std(double v) { return std::clamp(v, kLogStdMin, kLogStdMax); }

}  // namespace

DiagGaussian::DiagGaussian(std::vector<double> m, std::vector<double> s)
    : mean(std::move(m)), log_std(std::move(s)) {
  require_same_dim(mean.size(), log_std.size(), "DiagGaussian");
}

DiagGaussian DiagGaussian::standard(std::size_t dim) {
  return DiagGaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0));
}

double DiagGaussian::log_pdf(std::span<const double> z) const {
  require_same_dim(z.size(), dim(), "log_pdf");
  double lp = 0.0;
  for (std::size_t i = 0; i < dim(); ++i) {
    const double u = (z[i] - mean[i]) * std::exp(-log_std[i]);
    lp += -0.5 * u * u - log_std[i] - 0.5 * std::log(2.0 * std::numbers::pi);
  }
  return lp;
}

double kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  require_same_dim(q.dim(), p.dim(), "kl_diag");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double ratio = std::exp(2.0 * (q.log_std[i] - p.log_std[i]));
    const double d = q.mean[i] - p.mean[i];
    kl += p.log_std[i] - q.log_std[i] + 0.5 * (ratio + d * d * std::exp(-2.0 * p.log_std[i])) - 0.5;
  }
  return kl;
}

Var kl_diag(Graph& g, const GaussianVars& q, const GaussianVars& p) {
  require_same_dim(q.mean.cols(), p.mean.cols(), "kl_diag");
  // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2, summed over columns.
  Var inv_var_p = g.exp(g.scale(p.log_std, -2.0));
  Var var_q = g.exp(g.scale(q.log_std, 2.0));
  Var diff = g.square(q.mean - p.mean);
  Var quad = g.scale((var_q + diff) * inv_var_p, 0.5);
  Var per = (p.log_std - q.log_std) + quad;
  Var total = g.sum(per, 1);
  return g.add(total, g.scalar(-0.5 * static_cast<double>(q.mean.cols())));
}

Var kl_standard(Graph& g, const GaussianVars& q) {
  // 0.5 * sum(mu^2 + sigma^2 - 1) - sum(log sigma)
  Var var_q = g.exp(g.scale(q.log_std, 2.0));
  Var per = g.scale(g.square(q.mean) + var_q, 0.5) - q.log_std;
  return g.add(g.sum(per, 1), g.scalar(-0.5 * static_cast<double>(q.mean.cols())));
}

std::vector<double> sample_reparam(const DiagGaussian& d, std::span<const double> noise) {
  require_same_dim(noise.size(), d.dim(), "sample_reparam");
  std::vector<double> z(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) z[i] = d.mean[i] + std::exp(d.log_std[i]) * noise[i];
  return z;
}

Var sample_reparam(Graph& g, const GaussianVars& d, Var noise) {
  if (!d.mean.value().same_shape(noise.value())) {
    throw ShapeError("sample_reparam: noise shape " + noise.value().shape_string() +
                     " != " + d.mean.value().shape_string());
  }
  return d.mean + g.exp(d.log_std) * noise;
}

Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = n01(rng);
  return t;
}

DiagGaussian poe(std::span<const DiagGaussian> experts, bool include_standard_prior) {
  if (experts.empty()) throw ShapeError("poe: empty expert list");
  const auto d = experts.front().dim();
  for (const auto& e : experts) require_same_dim(e.dim(), d, "poe");

  std::vector<std::size_t> order(experts.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (experts[a].mean != experts[b].mean) return experts[a].mean < experts[b].mean;
    return experts[a].log_std < experts[b].log_std;
  });

  DiagGaussian out{std::vector<double>(d), std::vector<double>(d)};
  for (std::size_t i = 0; i < d; ++i) {
    double precision = include_standard_prior ? 1.0 : 0.0;
    double weighted = 0.0;
    for (auto k : order) {
      const double pk = std::exp(-2.0 * experts[k].log_std[i]);
      precision += pk;
      weighted += experts[k].mean[i] * pk;
    }
    out.mean[i] = weighted / precision;
    out.log_std[i] = clamp_log_std(-0.5 * std::log(precision));
  }
  return out;
}

GaussianVars poe(Graph& g, std::span<const GaussianVars> experts, bool include_standard_prior) {
  if (experts.empty()) throw ShapeError("poe: empty expert list");
  Var precision{};
  Var weighted{};
  for (const auto& e : experts) {
    Var pk = g.exp(g.scale(e.log_std, -2.0));
    Var wk = e.mean * pk;
    precision = precision.valid() ? precision + pk : pk;
    weighted = weighted.valid() ? weighted + wk : wk;
  }
  if (include_standard_prior) precision = g.add(precision, g.scalar(1.0));
  Var log_precision = g.log(precision);
  GaussianVars out;
  out.mean = weighted * g.exp(g.neg(log_precision));
  out.log_std = g.clamp(g.scale(log_precision, -0.5), kLogStdMin, kLogStdMax);
  return out;
}

std::vector<SubsetMask> nonempty_subsets(std::size_t num_modalities) {
  if (num_modalities == 0 || num_modalities > 16) {
    throw ConfigError("number of modalities must be in [1, 16]");
  }
  std::vector<SubsetMask> out;
  const SubsetMask full = (SubsetMask{1} << num_modalities) - 1;
  for (SubsetMask s = 1; s <= full; ++s) out.push_back(s);
  return out;
}

std::vector<double> uniform_subset_weights(std::size_t num_modalities) {
  const auto n = nonempty_subsets(num_modalities).size();
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

std::vector<double> moe_subset_weights(std::size_t num_modalities) {
  const auto subsets = nonempty_subsets(num_modalities);
  std::vector<double> w(subsets.size(), 0.0);
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    if (std::popcount(subsets[i]) == 1) w[i] = 1.0 / static_cast<double>(num_modalities);
  }
  return w;
}

void validate_subset_weights(std::span<const double> weights, std::size_t num_modalities) {
  const auto n = nonempty_subsets(num_modalities).size();
  if (weights.size() != n) {
    throw ConfigError("subset weights: expected " + std::to_string(n) + " entries, got " +
                      std::to_string(weights.size()));
  }
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("subset weights must be finite and >= 0");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-12) throw ConfigError("subset weights must sum to 1");
}

void MixturePosterior::validate() const {
  if (components.empty()) throw Error("mixture has no components");
  double s = 0.0;
  for (const auto& c : components) {
    if (!(c.weight >= 0.0)) throw Error("mixture weight negative");
    s += c.weight;
  }
  if (std::abs(s - 1.0) > 1e-12) throw Error("mixture weights do not sum to 1");
}

double MixturePosterior::pdf(std::span<const double> z) const {
  double p = 0.0;
  for (const auto& c : components) p += c.weight * std::exp(c.dist.log_pdf(z));
  return p;
}

MixturePosterior mopoe(std::span<const DiagGaussian> unimodal, std::span<const double> weights) {
  validate_subset_weights(weights, unimodal.size());
  const auto subsets = nonempty_subsets(unimodal.size());
  MixturePosterior m;
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    if (weights[s] == 0.0) continue;
    std::vector<DiagGaussian> members;
    for (std::size_t k = 0; k < unimodal.size(); ++k) {
      if (subsets[s] & (SubsetMask{1} << k)) members.push_back(unimodal[k]);
    }
    m.components.push_back({weights[s], subsets[s], poe(members, true)});
  }
  return m;
}

std::pair<std::vector<double>, std::size_t> mixture_sample(const MixturePosterior& m, Rng& rng) {
  if (m.components.empty()) throw Error("mixture has no components");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double u = u01(rng);
  double acc = 0.0;
  std::size_t pick = m.components.size() - 1;
  for (std::size_t i = 0; i < m.components.size(); ++i) {
    acc += m.components[i].weight;
    if (u < acc) {
      pick = i;
      break;
    }
  }
  // Never land on a zero-weight tail component through roundoff.
  while (m.components[pick].weight == 0.0 && pick > 0) --pick;
  const auto& d = m.components[pick].dist;
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> noise(d.dim());
  for (auto& v : noise) v = n01(rng);
  return {sample_reparam(d, noise), pick};
}

}  // namespace miai

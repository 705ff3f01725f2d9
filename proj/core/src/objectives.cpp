#include "miai/objectives.hpp"

#include <cmath>
#include <map>

#include "miai/error.hpp"

namespace miai {

ElboBreakdown summarize(const ElboVars& e) {
  auto mean_of = [](Var v) {
    const auto& t = v.value();
    double s = 0.0;
    for (double x : t.data()) s += x;
    return s / static_cast<double>(t.size());
  };
  ElboBreakdown b;
  b.reconstruction = mean_of(e.reconstruction);
  b.kl = mean_of(e.kl);
  b.total = b.reconstruction - b.kl;
  for (auto v : e.per_modality) b.per_modality.push_back(v.valid() ? mean_of(v) : 0.0);
  return b;
}

std::vector<Var> bind_batch(Graph& g, const Batch& batch) {
  std::vector<Var> out;
  for (const auto& t : batch.x) out.push_back(t.empty() ? Var{} : g.constant(t));
  return out;
}

ElboVars elbo(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
              const GaussianVars& q, SubsetMask recon_subset, Var noise) {
  Graph& g = pv.graph();
  if (q.mean.cols() != cfg.latent_dim) {
    throw ShapeError("elbo: posterior dimension " + std::to_string(q.mean.cols()) +
                     " != latent " + std::to_string(cfg.latent_dim));
  }
  ElboVars e;
  Var z = sample_reparam(g, q, noise);
  e.reconstruction = decode_log_lik(pv, cfg, z, x, recon_subset, e.per_modality);
  e.kl = kl_standard(g, q);
  e.total = e.reconstruction - e.kl;
  return e;
}

GaussianVars poe_posterior(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                           SubsetMask subset) {
  std::vector<GaussianVars> experts;
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    if (!(subset & (SubsetMask{1} << m))) continue;
    if (m >= x.size() || !x[m].valid()) {
      throw Error("modality " + std::to_string(m) + " absent from batch");
    }
    experts.push_back(encode(pv, cfg, m, x[m], EncoderKind::kPhi));
  }
  return poe(pv.graph(), experts, true);
}

Var mopoe_elbo(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
               std::span<const double> weights, Rng& rng) {
  const auto M = cfg.num_modalities();
  validate_subset_weights(weights, M);
  Graph& g = pv.graph();
  const auto subsets = nonempty_subsets(M);
  const auto all = full_subset(M);
  // Unimodal experts are shared by all subset terms.
  std::vector<GaussianVars> experts;
  for (std::size_t m = 0; m < M; ++m) {
    if (m >= x.size() || !x[m].valid()) throw Error("modality " + std::to_string(m) + " absent from batch");
    experts.push_back(encode(pv, cfg, m, x[m], EncoderKind::kPhi));
  }
  const auto rows = x[0].rows();
  Var total{};
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    if (weights[s] == 0.0) continue;
    std::vector<GaussianVars> members;
    for (std::size_t m = 0; m < M; ++m) {
      if (subsets[s] & (SubsetMask{1} << m)) members.push_back(experts[m]);
    }
    GaussianVars q = poe(g, members, true);
    Var noise = g.constant(standard_normal(rows, cfg.latent_dim, rng));
    Var term = g.scale(elbo(pv, cfg, x, q, all, noise).total, weights[s]);
    total = total.valid() ? total + term : term;
  }
  return total;
}

void validate_modality_weights(std::span<const double> pi, std::size_t num_modalities) {
  if (pi.size() != num_modalities) {
    throw ConfigError("modality weights: expected " + std::to_string(num_modalities) + " entries");
  }
  double s = 0.0;
  for (double p : pi) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("modality weights must lie in [0, 1]");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-12) throw ConfigError("modality weights must sum to 1");
}

Var alignment_objective(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                        std::span<const double> pi, Rng& rng) {
  const auto M = cfg.num_modalities();
  validate_modality_weights(pi, M);
  Graph& g = pv.graph();
  const auto all = full_subset(M);
  GaussianVars q = poe_posterior(pv, cfg, x, all);
  Var noise = g.constant(standard_normal(x[0].rows(), cfg.latent_dim, rng));
  Var value = elbo(pv, cfg, x, q, all, noise).total;
  for (std::size_t m = 0; m < M; ++m) {
    if (pi[m] == 0.0) continue;
    GaussianVars lam = encode(pv, cfg, m, x[m], EncoderKind::kLambda);
    value = value - g.scale(kl_diag(g, q, lam), pi[m]);
  }
  return value;
}

ElboVars refinement_loss(const ParamVars& pv, const ModelConfig& cfg, std::size_t m,
                         std::span<const Var> x, const GaussianVars& q_t, Var noise) {
  if (m >= cfg.num_modalities()) throw Error("unknown modality index " + std::to_string(m));
  for (std::size_t k = 0; k < cfg.num_modalities(); ++k) {
    if (k >= x.size() || !x[k].valid()) {
      throw Error("refinement_loss: modality " + std::to_string(k) + " missing; all modalities are required");
    }
  }
  return elbo(pv, cfg, x, q_t, full_subset(cfg.num_modalities()), noise);
}

Var alignment_kl_loss(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                      std::span<const GaussianBatch> refined) {
  const auto M = cfg.num_modalities();
  if (refined.size() != M) {
    throw Error("alignment_kl_loss: expected " + std::to_string(M) + " refined posteriors, got " +
                std::to_string(refined.size()));
  }
  Graph& g = pv.graph();
  Var total{};
  for (std::size_t m = 0; m < M; ++m) {
    if (m >= x.size() || !x[m].valid()) throw Error("modality " + std::to_string(m) + " absent from batch");
    GaussianVars teacher{g.constant(refined[m].mean), g.constant(refined[m].log_std)};
    GaussianVars lam = encode(pv, cfg, m, x[m], EncoderKind::kLambda);
    Var term = kl_diag(g, teacher, lam);
    total = total.valid() ? total + term : term;
  }
  return total;
}

std::vector<double> elbo_estimate(const ModelParams& params, const ModelConfig& cfg,
                                  const Batch& batch, const GaussianBatch& q,
                                  SubsetMask recon_subset, int samples, Rng& rng) {
  if (samples < 1) throw Error("elbo_estimate needs at least one sample");
  Graph g;
  ParamVars pv(g, params, {});
  auto x = bind_batch(g, batch);
  GaussianVars qv{g.constant(q.mean), g.constant(q.log_std)};
  const auto rows = q.size();
  std::vector<double> recon(rows, 0.0);
  for (int k = 0; k < samples; ++k) {
    Var noise = g.constant(standard_normal(rows, cfg.latent_dim, rng));
    Var ll = decode_log_lik(pv, cfg, sample_reparam(g, qv, noise), x, recon_subset);
    for (std::size_t i = 0; i < rows; ++i) recon[i] += ll.value()[i];
  }
  const auto& kl = kl_standard(g, qv).value();
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i] = recon[i] / samples - kl[i];
  return out;
}

// ---------------------------------------------------------------------------

void DiscreteJoint::validate() const {
  if (alphabet.empty()) throw Error("joint has no modalities");
  std::size_t cells = 1;
  for (auto a : alphabet) {
    if (a == 0) throw Error("joint alphabet of size 0");
    cells *= a;
  }
  if (cells != prob.size()) throw Error("joint table size does not match alphabets");
  double s = 0.0;
  for (double p : prob) {
    if (!(p >= 0.0)) throw Error("joint table has a negative entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-12) throw Error("joint table is not normalized");
}

double DiscreteJoint::marginal_entropy(SubsetMask subset) const {
  const auto M = num_modalities();
  // Marginal index is the mixed-radix number formed by the kept modalities.
  std::vector<std::size_t> stride(M, 0);
  std::size_t marginal_cells = 1;
  for (std::size_t m = M; m-- > 0;) {
    if (subset & (SubsetMask{1} << m)) {
      stride[m] = marginal_cells;
      marginal_cells *= alphabet[m];
    }
  }
  if (marginal_cells == 1) return 0.0;
  std::vector<double> marginal(marginal_cells, 0.0);
  std::vector<std::size_t> digit(M, 0);
  for (std::size_t cell = 0; cell < prob.size(); ++cell) {
    std::size_t idx = 0;
    for (std::size_t m = 0; m < M; ++m) idx += digit[m] * stride[m];
    marginal[idx] += prob[cell];
    for (std::size_t m = M; m-- > 0;) {
      if (++digit[m] < alphabet[m]) break;
      digit[m] = 0;
    }
  }
  double h = 0.0;
  for (double p : marginal) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double DiscreteJoint::conditional_entropy_of_rest(SubsetMask subset) const {
  const auto all = full_subset(num_modalities());
  if ((subset & all) == all) return 0.0;
  return marginal_entropy(all) - marginal_entropy(subset);
}

double delta_gap(const DiscreteJoint& joint, std::span<const double> weights) {
  joint.validate();
  validate_subset_weights(weights, joint.num_modalities());
  const auto subsets = nonempty_subsets(joint.num_modalities());
  double delta = 0.0;
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    if (weights[s] == 0.0) continue;
    delta += weights[s] * joint.conditional_entropy_of_rest(subsets[s]);
  }
  return delta;
}

}  // namespace miai

#pragma once

#include <span>
#include <vector>

#include "miai/model.hpp"

namespace miai {

/// Per-item ELBO terms on a graph, each [B, 1]. total = reconstruction - kl.
struct ElboVars {
  Var reconstruction;
  Var kl;
  Var total;
  std::vector<Var> per_modality;  // weighted log-likelihood terms; invalid when not reconstructed
};

/// Batch-mean ELBO terms in nats.
struct ElboBreakdown {
  double reconstruction = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::vector<double> per_modality;
};

ElboBreakdown summarize(const ElboVars& e);

/// Constant data leaves for a batch; missing modalities map to invalid Vars.
std::vector<Var> bind_batch(Graph& g, const Batch& batch);

/// Single-sample multimodal ELBO: E_q[log p(X_recon | z)] - KL[q || N(0, I)].
ElboVars elbo(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
              const GaussianVars& q, SubsetMask recon_subset, Var noise);

/// Subset-weighted PoE lower bound; every subset term reconstructs all
/// modalities. Fresh noise is drawn per positive-weight subset in mask order.
/// Returns the per-item value [B, 1].
Var mopoe_elbo(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
               std::span<const double> weights, Rng& rng);

/// ELBO of the PoE full-modality posterior minus sum_m pi_m KL[q(z|X) || q_lambda_m(z|x_m)].
/// Returns the per-item value [B, 1].
Var alignment_objective(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                        std::span<const double> pi, Rng& rng);
void validate_modality_weights(std::span<const double> pi, std::size_t num_modalities);
/// The PoE of every phi encoder with the standard prior.
GaussianVars poe_posterior(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                           SubsetMask subset);

/// ELBO at a unimodal trajectory state with reconstruction over all modalities.
ElboVars refinement_loss(const ParamVars& pv, const ModelConfig& cfg, std::size_t m,
                         std::span<const Var> x, const GaussianVars& q_t, Var noise);

/// sum_m KL[refined_m || q_lambda_m(z | x_m)] with the refined statistics held
/// constant; gradients reach only the lambda encoders. Returns [B, 1].
Var alignment_kl_loss(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                      std::span<const GaussianBatch> refined);

/// K-sample ELBO estimate per item with closed-form KL, on plain tensors.
std::vector<double> elbo_estimate(const ModelParams& params, const ModelConfig& cfg,
                                  const Batch& batch, const GaussianBatch& q,
                                  SubsetMask recon_subset, int samples, Rng& rng);

// ---------------------------------------------------------------------------
// Information gap of subset-subsampled bounds on discrete joints.

/// Joint probability table over M discrete modalities. Modality 0 is the most
/// significant index.
struct DiscreteJoint {
  std::vector<std::size_t> alphabet;
  std::vector<double> prob;

  std::size_t num_modalities() const noexcept { return alphabet.size(); }
  void validate() const;
  /// Entropy in nats of the marginal over the modalities in the mask.
  double marginal_entropy(SubsetMask subset) const;
  /// H(X_{complement} | X_subset).
  double conditional_entropy_of_rest(SubsetMask subset) const;
};

/// sum_S w_S H(X_{not S} | X_S) over nonempty subsets, in nats.
double delta_gap(const DiscreteJoint& joint, std::span<const double> weights);

}  // namespace miai

#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "miai/objectives.hpp"

namespace miai {

/// One point of a refinement trajectory for a batch of items.
struct RefinementState {
  Tensor mean;
  Tensor log_std;
  int step = 0;

  GaussianBatch posterior() const { return {mean, log_std}; }
};

/// States t = 0..T and the ELBO evaluated at each state before its update.
struct Trajectory {
  std::size_t modality = 0;
  std::vector<RefinementState> states;
  std::vector<ElboBreakdown> elbo;
  /// Per-item ELBO terms, indexed [t][item].
  std::vector<std::vector<double>> item_total;
  std::vector<std::vector<double>> item_recon;
  std::vector<std::vector<double>> item_kl;
};

/// One gated update of the refiner:
///   h_x    = ELU(W_x x_m + b_x)                  (per-modality input map)
///   h_grad = ELU(W_grad [mu, logstd, LN(g_mu), LN(g_logstd)] + b_grad)
///   h      = [h_x, h_grad]
///   cand   = tanh(W h + b),  gate = sigmoid(W_gate h + b_gate)
///   new    = gate * old + (1 - gate) * cand
/// The gradient inputs are constants: nothing differentiates through them.
GaussianVars refine_step(const ParamVars& pv, const ModelConfig& cfg, std::size_t m, Var x_m,
                         const GaussianVars& state, const Tensor& grad_mean, const Tensor& grad_log_std);

RefinementState refine_step(const ModelParams& params, const ModelConfig& cfg, std::size_t m,
                            const Tensor& x_m, const RefinementState& state, const Tensor& grad_mean,
                            const Tensor& grad_log_std);

/// Initial state: the phi_m encoder output, or learned constants when configured.
GaussianVars initial_state(const ParamVars& pv, const ModelConfig& cfg, std::size_t m, Var x_m);

/// The unrolled T-step loop on a graph. elbos[t] is evaluated at states[t]
/// with fresh noise; its gradient with respect to states[t] drives step t.
struct UnrolledRefinement {
  std::vector<GaussianVars> states;
  std::vector<ElboVars> elbos;
};

UnrolledRefinement unroll_refinement(const ParamVars& pv, const ModelConfig& cfg, std::size_t m,
                                     std::span<const Var> x, int steps, Rng& rng);

struct RefineResult {
  GaussianBatch posterior;
  Trajectory trajectory;
};

/// Refine q(z | x_m) for T steps using the all-modality ELBO.
RefineResult refine(const ModelParams& params, const ModelConfig& cfg, std::size_t m,
                    const Batch& batch, int steps, Rng& rng);

/// Per-modality loss -(1/T) sum_{t=1..T} ELBO_t averaged over the batch, then
/// averaged over modalities. With T = 0 the ELBO at the initial state is used.
Var refinement_training_loss(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                             int steps, Rng& rng);

/// CSV rows "modality,item,t,elbo,recon,kl" (header included when requested).
void write_trajectory_csv(std::ostream& os, const Trajectory& traj, std::size_t item_offset,
                          bool header);

}  // namespace miai

#include "miai/refiner.hpp"

#include <ostream>

#include "miai/error.hpp"

namespace miai {

namespace {

Var linear(const ParamVars& pv, const std::string& prefix, Var x) {
  Graph& g = pv.graph();
  return g.add(g.matmul(x, pv[prefix + ".w"]), pv[prefix + ".b"]);
}

void require_finite_grad(const Tensor& t, const char* what, std::size_t m) {
  if (!t.all_finite()) {
    throw NumericError(std::string("refine_step: non-finite ") + what + " for modality " +
                       std::to_string(m));
  }
}

}  // namespace

GaussianVars refine_step(const ParamVars& pv, const ModelConfig& cfg, std::size_t m, Var x_m,
                         const GaussianVars& state, const Tensor& grad_mean, const Tensor& grad_log_std) {
  if (!cfg.with_refiner) throw Error("model has no refiner parameters");
  require_finite_grad(grad_mean, "mean gradient", m);
  require_finite_grad(grad_log_std, "log-std gradient", m);
  Graph& g = pv.graph();

  Var h_x = g.elu(linear(pv, "ref.x." + std::to_string(m), x_m));
  Var gm = g.layer_norm(g.constant(grad_mean));
  Var gs = g.layer_norm(g.constant(grad_log_std));
  Var h_grad = g.elu(linear(pv, "ref.grad", g.concat({state.mean, state.log_std, gm, gs})));
  Var h = g.concat({h_x, h_grad});

  Var cand_mean = g.tanh(linear(pv, "ref.mu", h));
  Var cand_log_std = g.tanh(linear(pv, "ref.logstd", h));
  Var gate_mean = g.sigmoid(linear(pv, "ref.gate_mu", h));
  Var gate_log_std = g.sigmoid(linear(pv, "ref.gate_logstd", h));

  Var one = g.scalar(1.0);
  GaussianVars next;
  next.mean = gate_mean * state.mean + (one - gate_mean) * cand_mean;
  next.log_std = gate_log_std * state.log_std + (one - gate_log_std) * cand_log_std;
  return next;
}

RefinementState refine_step(const ModelParams& params, const ModelConfig& cfg, std::size_t m,
                            const Tensor& x_m, const RefinementState& state, const Tensor& grad_mean,
                            const Tensor& grad_log_std) {
  Graph g;
  ParamVars pv(g, params, {});
  GaussianVars s{g.constant(state.mean), g.constant(state.log_std)};
  auto next = refine_step(pv, cfg, m, g.constant(x_m), s, grad_mean, grad_log_std);
  return {next.mean.value(), next.log_std.value(), state.step + 1};
}

GaussianVars initial_state(const ParamVars& pv, const ModelConfig& cfg, std::size_t m, Var x_m) {
  if (!cfg.learned_init) return encode(pv, cfg, m, x_m, EncoderKind::kPhi);
  Graph& g = pv.graph();
  Var zeros = g.constant(Tensor({x_m.rows(), cfg.latent_dim}));
  return {zeros + pv["ref.init.mu"], zeros + pv["ref.init.logstd"]};
}

UnrolledRefinement unroll_refinement(const ParamVars& pv, const ModelConfig& cfg, std::size_t m,
                                     std::span<const Var> x, int steps, Rng& rng) {
  if (steps < 0) throw Error("refinement needs T >= 0");
  if (m >= cfg.num_modalities()) throw Error("unknown modality index " + std::to_string(m));
  for (std::size_t k = 0; k < cfg.num_modalities(); ++k) {
    if (k >= x.size() || !x[k].valid()) {
      throw Error("refine: modality " + std::to_string(k) + " missing; refinement needs all modalities");
    }
  }
  Graph& g = pv.graph();
  const auto rows = x[m].rows();
  UnrolledRefinement u;
  u.states.push_back(initial_state(pv, cfg, m, x[m]));
  for (int t = 0;; ++t) {
    const auto& state = u.states.back();
    Var noise = g.constant(standard_normal(rows, cfg.latent_dim, rng));
    u.elbos.push_back(refinement_loss(pv, cfg, m, x, state, noise));
    if (t == steps) break;
    // Per-item gradients: rows are independent, so differentiate the batch sum.
    const Var targets[] = {state.mean, state.log_std};
    auto grads = g.gradient(g.sum(u.elbos.back().total), targets);
    u.states.push_back(refine_step(pv, cfg, m, x[m], state, grads[0], grads[1]));
  }
  return u;
}

RefineResult refine(const ModelParams& params, const ModelConfig& cfg, std::size_t m, const Batch& batch,
                    int steps, Rng& rng) {
  Graph g;
  ParamVars pv(g, params, {});
  auto x = bind_batch(g, batch);
  auto u = unroll_refinement(pv, cfg, m, x, steps, rng);
  RefineResult r;
  r.trajectory.modality = m;
  for (std::size_t t = 0; t < u.states.size(); ++t) {
    r.trajectory.states.push_back(
        {u.states[t].mean.value(), u.states[t].log_std.value(), static_cast<int>(t)});
    r.trajectory.elbo.push_back(summarize(u.elbos[t]));
    r.trajectory.item_total.push_back(u.elbos[t].total.value().values());
    r.trajectory.item_recon.push_back(u.elbos[t].reconstruction.value().values());
    r.trajectory.item_kl.push_back(u.elbos[t].kl.value().values());
  }
  r.posterior = r.trajectory.states.back().posterior();
  return r;
}

Var refinement_training_loss(const ParamVars& pv, const ModelConfig& cfg, std::span<const Var> x,
                             int steps, Rng& rng) {
  Graph& g = pv.graph();
  const auto M = cfg.num_modalities();
  Var total{};
  for (std::size_t m = 0; m < M; ++m) {
    auto u = unroll_refinement(pv, cfg, m, x, steps, rng);
    Var acc{};
    if (steps == 0) {
      acc = g.mean(u.elbos[0].total);
    } else {
      for (int t = 1; t <= steps; ++t) {
        Var e = g.mean(u.elbos[static_cast<std::size_t>(t)].total);
        acc = acc.valid() ? acc + e : e;
      }
      acc = g.scale(acc, 1.0 / steps);
    }
    total = total.valid() ? total + acc : acc;
  }
  return g.scale(total, -1.0 / static_cast<double>(M));
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj, std::size_t item_offset, bool header) {
  if (header) os << "modality,item,t,elbo,recon,kl\n";
  const auto old_precision = os.precision(17);
  for (std::size_t t = 0; t < traj.item_total.size(); ++t) {
    for (std::size_t i = 0; i < traj.item_total[t].size(); ++i) {
      os << traj.modality << ',' << (item_offset + i) << ',' << t << ',' << traj.item_total[t][i] << ','
         << traj.item_recon[t][i] << ',' << traj.item_kl[t][i] << '\n';
    }
  }
  os.precision(old_precision);
}

}  // namespace miai

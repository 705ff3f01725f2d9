#include "miai/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <thread>

#include "miai/error.hpp"

namespace miai {

const char* family_name(Family f) noexcept {
  switch (f) {
    case Family::kMixture: return "mixture";
    case Family::kAlignment: return "alignment";
    case Family::kProposed: return "proposed";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  if (s == "mixture") return Family::kMixture;
  if (s == "alignment") return Family::kAlignment;
  if (s == "proposed") return Family::kProposed;
  throw ConfigError("model.family: unknown family '" + s + "' (expected mixture, alignment or proposed)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("training.lr must be > 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("training.gamma must be in (0, 1]");
  if (batch < 1) throw ConfigError("training.batch must be >= 1");
  if (epochs < 1) throw ConfigError("training.epochs must be >= 1");
  if (!(clip_norm > 0.0)) throw ConfigError("training.clip_norm must be > 0");
  if (steps < 0) throw ConfigError("model.T must be >= 0");
  if (shards < 1) throw ConfigError("training.shards must be >= 1");
}

ModelConfig model_for_family(ModelConfig base, Family family) {
  base.with_lambda = family != Family::kMixture;
  base.with_refiner = family == Family::kProposed;
  return base;
}

// ---------------------------------------------------------------------------

bool adam_step(OptimizerState& opt, ModelParams& params, const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      ++opt.skipped;
      return false;
    }
    if (!g.same_shape(params.get(name))) throw ShapeError("gradient shape mismatch for '" + name + "'");
  }
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (const auto& [name, g] : grads) {
    auto& p = params.get_mut(name);
    auto& m = opt.first_moment.try_emplace(name, Tensor::zeros_like(g)).first->second;
    auto& v = opt.second_moment.try_emplace(name, Tensor::zeros_like(g)).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
      v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= opt.lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
  return true;
}

double schedule_epoch(OptimizerState& opt) {
  ++opt.epoch;
  opt.lr = opt.base_lr * std::pow(opt.gamma, static_cast<double>(opt.epoch));
  return opt.lr;
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads)
      for (auto& v : g.values()) v *= s;
  }
  return norm;
}

void TrainReport::write_csv(std::ostream& os) const {
  os << "epoch,split,metric,value\n";
  const auto old = os.precision(17);
  for (const auto& r : rows) os << r.epoch << ',' << r.split << ',' << r.metric << ',' << r.value << '\n';
  os.precision(old);
}

// ---------------------------------------------------------------------------

Var stage1_loss(const ParamVars& pv, const ModelConfig& cfg, const TrainConfig& tc, std::span<const Var> x,
                Rng& rng) {
  Graph& g = pv.graph();
  const auto M = cfg.num_modalities();
  switch (tc.family) {
    case Family::kProposed:
      return refinement_training_loss(pv, cfg, x, tc.steps, rng);
    case Family::kMixture: {
      const auto w = tc.omega.empty() ? uniform_subset_weights(M) : tc.omega;
      return g.neg(g.mean(mopoe_elbo(pv, cfg, x, w, rng)));
    }
    case Family::kAlignment: {
      const auto pi = tc.pi.empty() ? std::vector<double>(M, 1.0 / static_cast<double>(M)) : tc.pi;
      return g.neg(g.mean(alignment_objective(pv, cfg, x, pi, rng)));
    }
  }
  throw Error("unknown family");
}

std::vector<GaussianBatch> alignment_teachers(const ModelParams& params, const ModelConfig& cfg,
                                              const TrainConfig& tc, const Batch& batch, Rng& rng) {
  const auto M = cfg.num_modalities();
  std::vector<GaussianBatch> out;
  if (tc.family == Family::kProposed) {
    for (std::size_t m = 0; m < M; ++m) out.push_back(refine(params, cfg, m, batch, tc.steps, rng).posterior);
    return out;
  }
  if (tc.family != Family::kAlignment) throw Error("stage 2 applies to the alignment and proposed families only");
  Graph g;
  ParamVars pv(g, params, {});
  auto x = bind_batch(g, batch);
  auto q = poe_posterior(pv, cfg, x, full_subset(M));
  out.assign(M, GaussianBatch{q.mean.value(), q.log_std.value()});
  return out;
}

namespace {

using LossFn = std::function<Var(const ParamVars&, std::span<const Var>, std::span<const std::size_t>, Rng&)>;

struct StepResult {
  bool ok = false;
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
};

StepResult sharded_step(const ModelParams& params, const ParamVars::Filter& trainable, const LossFn& loss_fn,
                        const Dataset& ds, std::span<const std::size_t> idx, std::size_t shards,
                        std::size_t threads, std::uint64_t step_seed, bool with_grads) {
  shards = std::min(shards, idx.size());
  std::vector<StepResult> parts(shards);
  auto run = [&](std::size_t s) {
    const auto begin = idx.size() * s / shards;
    const auto end = idx.size() * (s + 1) / shards;
    const auto sub = idx.subspan(begin, end - begin);
    auto& out = parts[s];
    try {
      Rng rng(step_seed + 0x9e3779b97f4a7c15ULL * (s + 1));
      Graph g;
      ParamVars pv(g, params, with_grads ? trainable : ParamVars::Filter{});
      const auto batch = ds.batch(sub);
      auto x = bind_batch(g, batch);
      Var loss = loss_fn(pv, x, sub, rng);
      out.loss = loss.value()[0];
      if (with_grads) out.grads = pv.collect(g.backward(loss));
      out.ok = std::isfinite(out.loss);
    } catch (const NumericError&) {
      out.ok = false;
    }
  };
  if (threads > 1 && shards > 1) {
    for (std::size_t base = 0; base < shards; base += threads) {
      std::vector<std::thread> pool;
      for (std::size_t s = base; s < std::min(shards, base + threads); ++s) pool.emplace_back(run, s);
      for (auto& t : pool) t.join();
    }
  } else {
    for (std::size_t s = 0; s < shards; ++s) run(s);
  }

  StepResult total;
  total.ok = true;
  for (std::size_t s = 0; s < shards; ++s) {
    if (!parts[s].ok) return StepResult{};
    const double w = static_cast<double>(idx.size() * (s + 1) / shards - idx.size() * s / shards) /
                     static_cast<double>(idx.size());
    total.loss += w * parts[s].loss;
    for (auto& [name, g] : parts[s].grads) {
      auto it = total.grads.find(name);
      if (it == total.grads.end()) {
        for (auto& v : g.values()) v *= w;
        total.grads.emplace(name, std::move(g));
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += w * g[i];
      }
    }
  }
  return total;
}

double evaluate_loss(const ModelParams& params, const LossFn& loss_fn, const Dataset& ds,
                     std::span<const std::size_t> idx, std::size_t batch, std::uint64_t seed) {
  double acc = 0.0;
  for (std::size_t begin = 0; begin < idx.size(); begin += batch) {
    const auto sub = idx.subspan(begin, std::min(batch, idx.size() - begin));
    auto r = sharded_step(params, {}, loss_fn, ds, sub, 1, 1, seed + begin, false);
    if (!r.ok) return std::numeric_limits<double>::infinity();
    acc += r.loss * static_cast<double>(sub.size());
  }
  return acc / static_cast<double>(idx.size());
}

struct LoopOutcome {
  ModelParams best;
  TrainReport report;
  std::string rng_state;
};

LoopOutcome run_loop(ModelParams params, const ParamVars::Filter& trainable, const LossFn& loss_fn,
                     const TrainConfig& tc, std::size_t epochs, const Dataset& ds, const Split& split,
                     Rng& rng, const std::string& metric) {
  if (split.train.empty() || split.validation.empty()) throw Error("training needs non-empty train and validation splits");
  const auto start = std::chrono::steady_clock::now();
  OptimizerState opt(tc.lr, tc.gamma);
  LoopOutcome out;
  out.report.seed = tc.seed;
  const std::uint64_t val_seed = tc.seed ^ 0x5eed5eed5eed5eedULL;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = split.train;

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t counted = 0, ok_steps = 0, steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += tc.batch) {
      const auto sub = std::span<const std::size_t>(order).subspan(begin, std::min(tc.batch, order.size() - begin));
      const auto step_seed = rng();
      ++steps;
      auto r = sharded_step(params, trainable, loss_fn, ds, sub, tc.shards, tc.threads, step_seed, true);
      if (!r.ok) {
        ++opt.skipped;
        continue;
      }
      clip_global_norm(r.grads, tc.clip_norm);
      if (adam_step(opt, params, r.grads)) {
        ++ok_steps;
        loss_sum += r.loss * static_cast<double>(sub.size());
        counted += sub.size();
      }
    }
    if (ok_steps == 0) {
      throw DivergenceError("training diverged: no finite loss in epoch " + std::to_string(epoch) + " (" +
                            std::to_string(steps) + " steps skipped)");
    }
    const double train_loss = loss_sum / static_cast<double>(counted);
    const double val = evaluate_loss(params, loss_fn, ds, split.validation, tc.batch, val_seed);
    out.report.train_loss.push_back(train_loss);
    out.report.validation_metric.push_back(val);
    out.report.rows.push_back({epoch, "train", metric, train_loss});
    out.report.rows.push_back({epoch, "validation", metric, val});
    out.report.rows.push_back({epoch, "train", "lr", opt.lr});
    if (val < best) {
      best = val;
      out.best = params;
      out.report.selected_epoch = epoch;
    }
    schedule_epoch(opt);
  }
  if (out.report.selected_epoch == 0) {
    throw DivergenceError("no epoch produced a finite validation " + metric);
  }
  out.report.skipped_steps = opt.skipped;
  out.report.rows.push_back({out.report.selected_epoch, "validation", "selected_epoch",
                             static_cast<double>(out.report.selected_epoch)});
  out.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.rng_state = rng_state_string(rng);
  return out;
}

}  // namespace

ModelParams oracle_decoder(const ModelConfig& cfg, const LinearGaussianOracle& oracle) {
  if (cfg.decoder != DecoderKind::kLinear) throw ConfigError("oracle decoder needs model.decoder = linear");
  if (oracle.loadings().size() != cfg.num_modalities()) throw ConfigError("oracle and model modality counts differ");
  ModelParams out;
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    const Tensor& a = oracle.loadings()[m];
    if (a.rows() != cfg.modalities[m].dim || a.cols() != cfg.latent_dim) {
      throw ConfigError("oracle loading " + std::to_string(m) + " does not match the model shape");
    }
    Tensor w({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) w.at(j, i) = a.at(i, j);
    out.set("dec.head." + std::to_string(m) + ".w", std::move(w));
    out.set("dec.head." + std::to_string(m) + ".b", Tensor({1, a.rows()}));
  }
  return out;
}

TrainResult train_stage1(const ModelConfig& model, const TrainConfig& tc, const Dataset& ds, const Split& split,
                         const ModelParams* overrides) {
  tc.validate();
  const auto cfg = model_for_family(model, tc.family);
  cfg.validate();
  if (cfg.num_modalities() != ds.num_modalities()) throw ConfigError("model and dataset modality counts differ");
  Rng rng(tc.seed);
  auto params = init_params(cfg, rng);
  if (overrides != nullptr) {
    for (const auto& [name, t] : overrides->all()) {
      if (!params.contains(name) || !params.get(name).same_shape(t)) {
        throw ConfigError("initial tensor '" + name + "' does not match the model");
      }
      params.set(name, t);
    }
  }

  const bool all_lambda = tc.family == Family::kAlignment;
  const bool freeze_dec = tc.freeze_decoder;
  ParamVars::Filter trainable = [all_lambda, freeze_dec](const std::string& n) {
    if (freeze_dec && param_names::is_decoder(n)) return false;
    return all_lambda || !param_names::is_lambda(n);
  };
  LossFn loss_fn = [&cfg, &tc](const ParamVars& pv, std::span<const Var> x, std::span<const std::size_t>,
                               Rng& r) { return stage1_loss(pv, cfg, tc, x, r); };

  auto loop = run_loop(std::move(params), trainable, loss_fn, tc, tc.epochs, ds, split, rng, "loss");
  TrainResult result;
  result.report = std::move(loop.report);
  result.report.stage = std::string("stage1:") + family_name(tc.family);
  result.checkpoint.stage = result.report.stage;
  result.checkpoint.config_digest = tc.config_digest;
  result.checkpoint.rng_state = loop.rng_state;
  result.checkpoint.params = std::move(loop.best);
  return result;
}

TrainResult train_stage2(const ModelConfig& model, const TrainConfig& tc, const Checkpoint& stage1,
                         const Dataset& ds, const Split& split) {
  tc.validate();
  if (tc.family == Family::kMixture) throw ConfigError("the mixture family has no second stage");
  const auto cfg = model_for_family(model, tc.family);
  if (tc.family == Family::kProposed && !stage1.params.contains("ref.grad.w")) {
    throw Error("stage-1 checkpoint has no refiner parameters; cannot run proposed stage 2");
  }
  Rng rng(tc.seed ^ 0x2a2a2a2a2a2a2a2aULL);
  ModelParams params = stage1.params;
  clone_phi_into_lambda(params);

  // The teacher does not depend on lambda, so one pass over the data suffices.
  const auto n = ds.size();
  std::vector<GaussianBatch> teacher_rows(cfg.num_modalities(),
                                          GaussianBatch{Tensor({n, cfg.latent_dim}), Tensor({n, cfg.latent_dim})});
  {
    Rng teacher_rng(tc.seed ^ 0x7eac7eac7eac7eacULL);
    std::vector<std::size_t> needed = split.train;
    needed.insert(needed.end(), split.validation.begin(), split.validation.end());
    std::sort(needed.begin(), needed.end());
    for (std::size_t begin = 0; begin < needed.size(); begin += tc.batch) {
      const auto sub = std::span<const std::size_t>(needed).subspan(begin, std::min(tc.batch, needed.size() - begin));
      const auto teachers = alignment_teachers(params, cfg, tc, ds.batch(sub), teacher_rng);
      for (std::size_t m = 0; m < teachers.size(); ++m) {
        for (std::size_t i = 0; i < sub.size(); ++i) {
          for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
            teacher_rows[m].mean.at(sub[i], j) = teachers[m].mean.at(i, j);
            teacher_rows[m].log_std.at(sub[i], j) = teachers[m].log_std.at(i, j);
          }
        }
      }
    }
  }

  auto trainable = [](const std::string& name) { return param_names::is_lambda(name); };
  LossFn loss_fn = [&cfg, &teacher_rows](const ParamVars& pv, std::span<const Var> x,
                                         std::span<const std::size_t> idx, Rng&) {
    std::vector<GaussianBatch> teachers;
    for (const auto& t : teacher_rows) teachers.push_back({t.mean.gather_rows(idx), t.log_std.gather_rows(idx)});
    Graph& g = pv.graph();
    return g.mean(alignment_kl_loss(pv, cfg, x, teachers));
  };

  const auto epochs = tc.stage2_epochs == 0 ? tc.epochs : tc.stage2_epochs;
  auto loop = run_loop(std::move(params), trainable, loss_fn, tc, epochs, ds, split, rng, "alignment_kl");
  TrainResult result;
  result.report = std::move(loop.report);
  result.report.stage = std::string("stage2:") + family_name(tc.family);
  result.checkpoint.stage = result.report.stage;
  result.checkpoint.config_digest = tc.config_digest;
  result.checkpoint.rng_state = loop.rng_state;
  result.checkpoint.params = std::move(loop.best);
  return result;
}

}  // namespace miai

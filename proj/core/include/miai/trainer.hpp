#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "miai/datasets.hpp"
#include "miai/refiner.hpp"

namespace miai {

enum class Family { kMixture, kAlignment, kProposed };

const char* family_name(Family f) noexcept;
Family parse_family(const std::string& s);

struct TrainConfig {
  Family family = Family::kProposed;
  double lr = 2e-4;
  double gamma = 0.98;
  std::size_t batch = 64;
  std::size_t epochs = 20;
  /// Stage-2 epochs; 0 means "same as stage 1".
  std::size_t stage2_epochs = 0;
  double clip_norm = 10.0;
  int steps = 8;
  /// MoPoE subset weights; empty means uniform.
  std::vector<double> omega;
  /// Alignment weights pi_m; empty means uniform.
  std::vector<double> pi;
  std::uint64_t seed = 0;
  /// Batches are split into this many fixed shards whose gradients are summed
  /// in shard order; the thread count never changes the result.
  std::size_t shards = 1;
  std::size_t threads = 1;
  /// Keep dec.* at its initial value during stage 1.
  bool freeze_decoder = false;
  std::uint64_t config_digest = 0;

  void validate() const;
};

/// Model layout implied by a family: which encoders / refiner exist.
ModelConfig model_for_family(ModelConfig base, Family family);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct OptimizerState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::size_t step = 0;
  double base_lr = 2e-4;
  double gamma = 0.98;
  std::size_t epoch = 0;
  double lr = 2e-4;
  std::size_t skipped = 0;

  OptimizerState() = default;
  OptimizerState(double base, double decay) : base_lr(base), gamma(decay), lr(base) {}
};

/// Bias-corrected Adam update at the current scheduled lr. Returns false and
/// counts a skip when any gradient is non-finite.
bool adam_step(OptimizerState& opt, ModelParams& params, const std::map<std::string, Tensor>& grads);

/// lr <- base * gamma^(epoch + 1); advances the epoch counter.
double schedule_epoch(OptimizerState& opt);

/// Scale gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

struct TrainReport {
  struct Row {
    std::size_t epoch = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
  };
  std::string stage;
  std::vector<Row> rows;
  std::vector<double> train_loss;
  std::vector<double> validation_metric;
  /// 1-based epoch whose parameters were kept.
  std::size_t selected_epoch = 0;
  std::size_t skipped_steps = 0;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  void write_csv(std::ostream& os) const;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainReport report;
};

/// Stage-1 objective on one batch (scalar node): refinement loss for the
/// proposed family, -MoPoE bound for mixture, -alignment objective for alignment.
Var stage1_loss(const ParamVars& pv, const ModelConfig& cfg, const TrainConfig& tc,
                std::span<const Var> x, Rng& rng);

/// Teacher posteriors for stage 2: refined q(z_T | x_m) for the proposed
/// family, PoE(X) copied to every modality for alignment.
std::vector<GaussianBatch> alignment_teachers(const ModelParams& params, const ModelConfig& cfg,
                                              const TrainConfig& tc, const Batch& batch, Rng& rng);

/// `overrides` replaces randomly initialized tensors of the same name and shape.
TrainResult train_stage1(const ModelConfig& model, const TrainConfig& tc, const Dataset& ds,
                         const Split& split, const ModelParams* overrides = nullptr);

/// Linear decoder heads set to the generating loadings of a linear-Gaussian
/// oracle (dec.head.m.w = A_m^T, zero bias).
ModelParams oracle_decoder(const ModelConfig& cfg, const LinearGaussianOracle& oracle);

/// Trains only lambda.* on sum_m KL[teacher_m || q_lambda_m]; everything else
/// stays bit-identical. Keeps the epoch with minimal validation KL.
TrainResult train_stage2(const ModelConfig& model, const TrainConfig& tc, const Checkpoint& stage1,
                         const Dataset& ds, const Split& split);

}  // namespace miai

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "miai/trainer.hpp"

namespace miai {

/// Mean and covariance of a sample set.
struct GaussianFit {
  std::vector<double> mean;
  Tensor cov;  // [D, D], symmetric
};

/// Unbiased covariance of the rows of `samples`, plus shrinkage * I.
GaussianFit fit_gaussian(const Tensor& samples, double shrinkage = 1e-6);

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with matrix
/// square roots from symmetric eigendecompositions (negative eigenvalues
/// clipped to 0).
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

/// Mean over rows of <a_i, b_i> / (|a_i| |b_i|); zero-norm rows contribute 0.
double cosine_similarity(const Tensor& a, const Tensor& b);

/// One-vs-all ridge regression on [features, 1] solved by normal equations.
class RidgeClassifier {
 public:
  void fit(const Tensor& features, std::span<const int> labels, std::size_t classes, double ridge);
  std::vector<int> predict(const Tensor& features) const;
  /// Raw one-vs-all scores, [N, classes].
  Tensor scores(const Tensor& features) const;
  double accuracy(const Tensor& features, std::span<const int> labels) const;
  std::size_t classes() const noexcept { return classes_; }
  std::size_t input_dim() const noexcept { return input_dim_; }

 private:
  Tensor weights_;  // [input_dim + 1, classes]
  std::size_t classes_ = 0;
  std::size_t input_dim_ = 0;
};

double linear_probe(const Tensor& train_latents, std::span<const int> train_labels, const Tensor& test_latents,
                    std::span<const int> test_labels, std::size_t classes, double ridge);

/// Unimodal inference used for downstream metrics: PoE({phi_m}, prior) for the
/// mixture family, the lambda_m encoder otherwise.
GaussianBatch unimodal_posterior(const ModelParams& params, const ModelConfig& cfg, Family family,
                                 std::size_t m, const Tensor& x_m);

struct ElboCurve {
  std::size_t modality = 0;
  /// points[t - 1] is the mean held-out ELBO recorded at refinement step t
  /// (before its update), t = 1..T_max; step 1 sees the amortized encoder.
  std::vector<double> points;
  /// ELBO of the alignment-source PoE(X) posterior under its own model.
  std::optional<double> poe_baseline;
};

struct EvalOptions {
  int elbo_samples = 16;
  std::uint64_t seed = 0;
  std::size_t batch = 256;
};

ElboCurve elbo_vs_T(const ModelParams& proposed, const ModelConfig& proposed_cfg, const Dataset& ds,
                    std::span<const std::size_t> idx, std::size_t m, int t_max,
                    const ModelParams* alignment, const ModelConfig* alignment_cfg, const EvalOptions& opt);

/// Mean ELBO of the PoE full-modality posterior.
double poe_elbo(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                std::span<const std::size_t> idx, const EvalOptions& opt);

struct GapResult {
  std::vector<double> amortized;  // per item KL[q_0 || p(z|X)]
  std::vector<double> refined;    // per item KL[q_T || p(z|X)]
  double median_amortized = 0.0;
  double median_refined = 0.0;
};

GapResult amortization_gap(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                           const LinearGaussianOracle& oracle, std::span<const std::size_t> idx,
                           std::size_t m, int steps, const EvalOptions& opt);

double median(std::vector<double> v);

/// Decode modality n from latents inferred from modality m. With sample=true
/// z is drawn from the unimodal posterior, otherwise its mean is used.
Tensor cross_generate(const ModelParams& params, const ModelConfig& cfg, Family family, const Dataset& ds,
                      std::span<const std::size_t> idx, std::size_t m, std::size_t n, bool sample, Rng& rng);

double cross_coherence(const ModelParams& params, const ModelConfig& cfg, Family family, const Dataset& ds,
                       std::span<const std::size_t> idx, std::size_t m, std::size_t n,
                       const RidgeClassifier& classifier);

enum class FeatureSpace { kRaw, kClassifierScores };

/// Frechet distance between generated modality-n vectors (from modality m) and
/// real modality-n vectors of the same items.
double cross_modal_frechet(const ModelParams& params, const ModelConfig& cfg, Family family, const Dataset& ds,
                           std::span<const std::size_t> idx, std::size_t m, std::size_t n, Rng& rng,
                           FeatureSpace space = FeatureSpace::kRaw, const RidgeClassifier* classifier = nullptr);

// ---------------------------------------------------------------------------

enum class Direction { kHigher, kLower };
const char* direction_name(Direction d) noexcept;
/// Registered direction for a metric name (by prefix).
Direction metric_direction(const std::string& metric);

struct MetricRow {
  std::string experiment;
  std::string family;
  std::string metric;
  Direction direction = Direction::kHigher;
  double value = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kMetricsHeader = "experiment,family,metric,direction,value,seed";
void write_metrics_csv(std::ostream& os, std::span<const MetricRow> rows);

}  // namespace miai

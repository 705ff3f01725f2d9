#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "miai/autodiff.hpp"

namespace miai {

using Rng = std::mt19937_64;

/// Range every produced log-standard-deviation is clamped into.
inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 10.0;

/// Diagonal Gaussian over the latent space.
struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> log_std;

  DiagGaussian() = default;
  DiagGaussian(std::vector<double> m, std::vector<double> s);
  static DiagGaussian standard(std::size_t dim);

  std::size_t dim() const noexcept { return mean.size(); }
  double log_pdf(std::span<const double> z) const;

  friend bool operator==(const DiagGaussian&, const DiagGaussian&) = default;
};

/// Batch of diagonal Gaussians living on a graph: rows are items.
struct GaussianVars {
  Var mean;
  Var log_std;
};

/// Closed-form KL[q || p] in nats.
double kl_diag(const DiagGaussian& q, const DiagGaussian& p);
/// Per-row KL[q || p] as a [rows, 1] node.
Var kl_diag(Graph& g, const GaussianVars& q, const GaussianVars& p);
/// Per-row KL[q || N(0, I)] as a [rows, 1] node.
Var kl_standard(Graph& g, const GaussianVars& q);

/// z = mean + exp(log_std) * noise.
std::vector<double> sample_reparam(const DiagGaussian& d, std::span<const double> noise);
Var sample_reparam(Graph& g, const GaussianVars& d, Var noise);

/// Standard-normal noise tensor of the given extents.
Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng);

/// Precision-additive fusion of experts, optionally with a N(0, I) prior
/// factor. Experts are summed in a canonical content order so the result is
/// bitwise independent of the order they are passed in.
DiagGaussian poe(std::span<const DiagGaussian> experts, bool include_standard_prior);
/// Graph version; experts are fused in the order given.
GaussianVars poe(Graph& g, std::span<const GaussianVars> experts, bool include_standard_prior);

/// Bit mask over modalities; bit m set means modality m is in the subset.
using SubsetMask = std::uint32_t;

/// Nonempty subsets of {0..num_modalities-1} in increasing mask order.
std::vector<SubsetMask> nonempty_subsets(std::size_t num_modalities);
/// 1 / (2^M - 1) for every nonempty subset.
std::vector<double> uniform_subset_weights(std::size_t num_modalities);
/// Weight 1/M on each singleton subset, 0 elsewhere (mixture of experts).
std::vector<double> moe_subset_weights(std::size_t num_modalities);
/// Throws ConfigError unless weights are a distribution over the 2^M - 1 subsets.
void validate_subset_weights(std::span<const double> weights, std::size_t num_modalities);

struct MixtureComponent {
  double weight = 0.0;
  SubsetMask subset = 0;
  DiagGaussian dist;
};

/// Weighted mixture of diagonal Gaussians.
struct MixturePosterior {
  std::vector<MixtureComponent> components;

  void validate() const;
  double pdf(std::span<const double> z) const;
};

/// One PoE component (with prior) per subset of positive weight; weights are
/// indexed like nonempty_subsets().
MixturePosterior mopoe(std::span<const DiagGaussian> unimodal, std::span<const double> weights);

/// Draw a component by weight, then a reparameterized sample from it.
std::pair<std::vector<double>, std::size_t> mixture_sample(const MixturePosterior& m, Rng& rng);

}  // namespace miai

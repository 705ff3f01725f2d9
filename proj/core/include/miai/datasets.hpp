#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miai/model.hpp"
#include "miai/objectives.hpp"

namespace miai {

/// Multimodal dataset: one [N, dim_m] tensor per modality plus optional labels.
struct Dataset {
  std::string kind;
  std::vector<ModalitySpec> modalities;
  std::vector<Tensor> data;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return data.empty() ? 0 : data.front().rows(); }
  std::size_t num_modalities() const { return modalities.size(); }
  Batch batch(std::span<const std::size_t> idx) const;
  std::vector<int> labels_at(std::span<const std::size_t> idx) const;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// Deterministic 80/10/10 assignment by hashing (index, seed).
Split split_indices(std::size_t n, std::uint64_t seed);

/// Full-covariance Gaussian used by the analytic oracle.
struct FullGaussian {
  std::vector<double> mean;
  Tensor cov;  // [d, d]
};

/// KL[q || p] for diagonal q and full-covariance p, in nats.
double kl_diag_to_full(const DiagGaussian& q, const FullGaussian& p);

struct LinearGaussianSpec {
  std::size_t latent_dim = 8;
  std::vector<std::size_t> dims = {8, 8};
  std::vector<double> noise_std = {0.5, 0.5};
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  /// Loading entries are N(0, loading_scale^2 / latent_dim).
  double loading_scale = 1.0;

  void validate() const;
};

/// z ~ N(0, I), x_m = A_m z + tau_m * eps. Exact posteriors and marginals.
class LinearGaussianOracle {
 public:
  LinearGaussianOracle() = default;
  LinearGaussianOracle(std::vector<Tensor> loadings, std::vector<double> noise_std);

  std::size_t latent_dim() const { return loadings_.front().cols(); }
  const std::vector<Tensor>& loadings() const { return loadings_; }
  const std::vector<double>& noise_std() const { return noise_std_; }

  /// p(z | X_S) for one item; x[m] is the observation of modality m.
  FullGaussian posterior(std::span<const std::vector<double>> x, SubsetMask subset) const;
  /// log p(X_S) for one item.
  double log_marginal(std::span<const std::vector<double>> x, SubsetMask subset) const;
  /// Posterior for row i of a dataset.
  FullGaussian posterior(const Dataset& ds, std::size_t i, SubsetMask subset) const;
  double log_marginal(const Dataset& ds, std::size_t i, SubsetMask subset) const;

 private:
  std::vector<Tensor> loadings_;  // [dim_m, d]
  std::vector<double> noise_std_;
};

struct LinearGaussianData {
  Dataset dataset;
  LinearGaussianOracle oracle;
};

LinearGaussianData gen_linear_gaussian(const LinearGaussianSpec& spec);

/// Maximum table bits M * shared + sum(private) for a brute-forceable joint.
inline constexpr std::size_t kMaxJointBits = 20;

struct BitSplitSpec {
  std::size_t shared_bits = 2;
  std::vector<std::size_t> private_bits = {1, 1};
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  /// Each bit is written `repeat` times; every written copy flips with flip_prob.
  std::size_t repeat = 1;
  double flip_prob = 0.0;

  std::size_t table_bits() const;
  void validate() const;
};

struct BitSplitData {
  Dataset dataset;
  DiscreteJoint joint;
  /// Clean symbol of each modality per sample (shared bits high, private low).
  std::vector<std::vector<std::size_t>> symbols;
};

/// Shared bits broadcast to every modality, private bits appended per modality.
/// Labels are the shared-bit value.
BitSplitData gen_bitsplit(const BitSplitSpec& spec);

/// IDX image + label files -> {image: bernoulli in [0,1], label: one-hot K=10}.
Dataset load_idx(const std::string& image_path, const std::string& label_path);

/// Dataset cache in the checkpoint container format.
void save_dataset(const Dataset& ds, const std::optional<LinearGaussianOracle>& oracle,
                  const std::string& path);
struct LoadedDataset {
  Dataset dataset;
  std::optional<LinearGaussianOracle> oracle;
};
LoadedDataset load_dataset(const std::string& path);

}  // namespace miai

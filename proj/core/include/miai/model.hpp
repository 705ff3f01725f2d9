#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "miai/autodiff.hpp"
#include "miai/gaussian.hpp"

namespace miai {

enum class Likelihood { kBernoulli, kGaussian, kCategorical };

const char* likelihood_name(Likelihood l) noexcept;

/// One observed modality x_m.
struct ModalitySpec {
  std::string name;
  std::size_t dim = 1;
  Likelihood likelihood = Likelihood::kGaussian;
  double sigma = 1.0;       // gaussian observation std
  std::size_t classes = 0;  // categorical: equals dim

  void validate() const;
};

enum class DecoderKind { kMlp, kLinear };

/// Which unimodal encoder family to evaluate.
enum class EncoderKind { kPhi, kLambda };

struct ModelConfig {
  std::vector<ModalitySpec> modalities;
  std::size_t latent_dim = 16;
  std::size_t hidden = 256;
  std::size_t refiner_hidden = 128;
  DecoderKind decoder = DecoderKind::kMlp;
  /// Per-modality reconstruction weight; empty means 1/dim_m.
  std::vector<double> beta;
  bool with_lambda = true;
  bool with_refiner = false;
  /// Refiner starts from learned constants instead of the phi encoder.
  bool learned_init = false;

  std::size_t num_modalities() const noexcept { return modalities.size(); }
  double beta_of(std::size_t m) const;
  void validate() const;
};

/// Named parameter tensors, iterated in name order.
class ModelParams {
 public:
  void set(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Tensor>& all() const noexcept { return tensors_; }
  std::size_t size() const noexcept { return tensors_.size(); }

  /// FNV-1a over names, shapes and raw payload bytes of tensors whose name
  /// satisfies the filter (all tensors when the filter is empty).
  std::uint64_t digest(const std::function<bool(const std::string&)>& filter = {}) const;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.tensors_ == b.tensors_;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

namespace param_names {
std::string encoder_prefix(EncoderKind kind, std::size_t m);
inline bool is_lambda(const std::string& n) { return n.rfind("lambda.", 0) == 0; }
inline bool is_refiner(const std::string& n) { return n.rfind("ref.", 0) == 0; }
inline bool is_decoder(const std::string& n) { return n.rfind("dec.", 0) == 0; }
inline bool is_phi(const std::string& n) { return n.rfind("phi.", 0) == 0; }
}  // namespace param_names

/// Randomly initialized parameters for every network the config asks for.
ModelParams init_params(const ModelConfig& cfg, Rng& rng);

/// Copy every phi.m.* tensor onto lambda.m.*.
void clone_phi_into_lambda(ModelParams& params);

/// Parameters bound as leaves of one graph.
class ParamVars {
 public:
  using Filter = std::function<bool(const std::string&)>;
  /// Tensors passing `trainable` become differentiable leaves, the rest constants.
  ParamVars(Graph& g, const ModelParams& params, const Filter& trainable);

  Var operator[](const std::string& name) const;
  const std::map<std::string, Var>& all() const noexcept { return vars_; }
  Graph& graph() const noexcept { return *graph_; }

  /// Collect gradients for the differentiable leaves by name.
  std::map<std::string, Tensor> collect(const Gradients& grads) const;

 private:
  Graph* graph_;
  std::map<std::string, Var> vars_;
};

/// Observed data for one batch; one [B, dim_m] tensor per modality. An empty
/// tensor marks a missing modality.
struct Batch {
  std::vector<Tensor> x;
  std::size_t size() const;
  bool has(std::size_t m) const { return m < x.size() && !x[m].empty(); }
};

/// Batch of diagonal Gaussians as plain tensors.
struct GaussianBatch {
  Tensor mean;
  Tensor log_std;
  std::size_t size() const { return mean.rows(); }
  DiagGaussian item(std::size_t i) const;
};

/// Unimodal encoder q(z | x_m) for phi (inference) or lambda (alignment).
GaussianVars encode(const ParamVars& pv, const ModelConfig& cfg, std::size_t m, Var x,
                    EncoderKind kind = EncoderKind::kPhi);
GaussianBatch encode(const ModelParams& params, const ModelConfig& cfg, std::size_t m,
                     const Tensor& x, EncoderKind kind = EncoderKind::kPhi);

/// Raw decoder outputs per modality: logits (bernoulli, categorical) or means.
std::vector<Var> decode(const ParamVars& pv, const ModelConfig& cfg, Var z);

/// Per-item log p(x_m | z) for one modality, [B, 1].
Var modality_log_lik(Graph& g, const ModalitySpec& spec, Var output, Var x);

/// Per-item sum over the subset of beta_m * log p(x_m | z), [B, 1].
Var decode_log_lik(const ParamVars& pv, const ModelConfig& cfg, Var z, std::span<const Var> x,
                   SubsetMask subset);
/// Same, also returning the per-modality weighted terms (empty Var when absent).
Var decode_log_lik(const ParamVars& pv, const ModelConfig& cfg, Var z, std::span<const Var> x,
                   SubsetMask subset, std::vector<Var>& per_modality);

/// Mean of p(x_n | z) for every modality: probabilities or means.
std::vector<Tensor> decode_mean(const ModelParams& params, const ModelConfig& cfg, const Tensor& z);

SubsetMask full_subset(std::size_t num_modalities);

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Layout (little-endian): magic "MIAI", u32 version, then records until EOF:
//   u32 name length, name bytes, u32 rank, u64 extent per dimension,
//   f64 payload in row-major order.
// Records whose name starts with "meta." carry the stage tag, config digest
// and RNG state as byte tensors; "meta.count" comes first and holds the
// number of records that follow it.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string stage;
  std::uint64_t config_digest = 0;
  std::string rng_state;
  ModelParams params;
};

/// Serialize an Rng state to / from text.
std::string rng_state_string(const Rng& rng);
Rng rng_from_state(const std::string& state);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

struct LoadResult {
  Checkpoint checkpoint;
  std::vector<std::string> warnings;
};

/// Load and validate a checkpoint. A digest different from `expected_digest`
/// is reported as a warning, not an error.
LoadResult load_checkpoint(const std::string& path,
                           std::optional<std::uint64_t> expected_digest = std::nullopt);

/// FNV-1a 64 over arbitrary bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace miai

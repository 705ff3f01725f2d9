#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "miai/evaluation.hpp"

namespace miai {

enum class DatasetKind { kLinearGaussian, kBitSplit, kIdx };

const char* dataset_kind_name(DatasetKind k) noexcept;

/// Everything one experiment run needs. Parsed from flat `section.key = value`
/// lines; see README for the grammar and defaults.
struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;

  DatasetKind dataset = DatasetKind::kLinearGaussian;
  /// Explicit dataset seed; derived from the root seed when absent.
  std::optional<std::uint64_t> dataset_seed;
  LinearGaussianSpec linear;
  BitSplitSpec bits;
  std::string idx_images;
  std::string idx_labels;

  std::vector<Family> families = {Family::kProposed};
  ModelConfig model;  // modalities come from the dataset
  bool oracle_decoder = false;

  TrainConfig train;

  int elbo_samples = 16;
  int t_max = 8;
  std::vector<int> gap_steps = {1, 2, 4, 8};
  double ridge = 1e-3;
  FeatureSpace fid_features = FeatureSpace::kRaw;

  std::string out_dir = "miai_out";

  bool has_family(Family f) const;
  /// Deterministic per-component seed split from the root seed.
  std::uint64_t component_seed(const std::string& component) const;
  std::uint64_t effective_dataset_seed() const;
  /// Canonical key = value listing of every effective field, in fixed order.
  std::string canonical() const;
  std::uint64_t digest() const;
  void validate() const;
};

/// Parse config text. Errors name the offending key and line.
ExperimentConfig parse_config(std::istream& in, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);

}  // namespace miai

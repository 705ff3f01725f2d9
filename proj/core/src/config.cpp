#include "miai/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "miai/error.hpp"

namespace miai {

const char* dataset_kind_name(DatasetKind k) noexcept {
  switch (k) {
    case DatasetKind::kLinearGaussian: return "linear_gaussian";
    case DatasetKind::kBitSplit: return "bitsplit";
    case DatasetKind::kIdx: return "idx";
  }
  return "?";
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& key, const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(key + ": empty list entry in '" + v + "'");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_uint(key, v)); }

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  if (used != v.size() || !std::isfinite(out)) throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(key, v)) out.push_back(to_double(key, s));
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(key, v)) out.push_back(to_size(key, s));
  return out;
}

double positive(const std::string& key, double v) {
  if (!(v > 0.0)) throw ConfigError(key + " must be > 0");
  return v;
}

std::size_t at_least_one(const std::string& key, std::size_t v) {
  if (v < 1) throw ConfigError(key + " must be >= 1");
  return v;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"experiment.name",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v.empty() || v.find_first_of(", \t") != std::string::npos) {
           throw ConfigError(k + ": names must be non-empty without commas or spaces");
         }
         c.name = v;
       }},
      {"experiment.seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = to_uint(k, v); }},

      {"dataset.kind",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v == "linear_gaussian") c.dataset = DatasetKind::kLinearGaussian;
         else if (v == "bitsplit") c.dataset = DatasetKind::kBitSplit;
         else if (v == "idx") c.dataset = DatasetKind::kIdx;
         else throw ConfigError(k + ": unknown dataset kind '" + v + "' (linear_gaussian, bitsplit, idx)");
       }},
      {"dataset.seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.dataset_seed = to_uint(k, v); }},
      {"dataset.samples",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.linear.samples = c.bits.samples = at_least_one(k, to_size(k, v));
       }},
      {"dataset.latent_dim",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.linear.latent_dim = at_least_one(k, to_size(k, v)); }},
      {"dataset.dims", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.linear.dims = to_sizes(k, v); }},
      {"dataset.noise_std",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.linear.noise_std = to_doubles(k, v); }},
      {"dataset.loading_scale",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.linear.loading_scale = positive(k, to_double(k, v)); }},
      {"dataset.shared_bits", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bits.shared_bits = to_size(k, v); }},
      {"dataset.private_bits",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bits.private_bits = to_sizes(k, v); }},
      {"dataset.repeat",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bits.repeat = at_least_one(k, to_size(k, v)); }},
      {"dataset.flip_prob", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bits.flip_prob = to_double(k, v); }},
      {"dataset.images", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.idx_images = v; }},
      {"dataset.labels", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.idx_labels = v; }},

      {"model.families",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.families.clear();
         for (const auto& s : split_list(k, v)) {
           Family f{};
           try {
             f = parse_family(s);
           } catch (const Error&) {
             throw ConfigError(k + ": unknown family '" + s + "' (mixture, alignment, proposed)");
           }
           if (c.has_family(f)) throw ConfigError(k + ": family '" + s + "' listed twice");
           c.families.push_back(f);
         }
       }},
      {"model.latent_dim",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.latent_dim = at_least_one(k, to_size(k, v)); }},
      {"model.hidden",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.hidden = at_least_one(k, to_size(k, v)); }},
      {"model.refiner_hidden",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.model.refiner_hidden = at_least_one(k, to_size(k, v));
       }},
      {"model.decoder",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v == "mlp") c.model.decoder = DecoderKind::kMlp;
         else if (v == "linear") c.model.decoder = DecoderKind::kLinear;
         else throw ConfigError(k + ": expected mlp or linear, got '" + v + "'");
       }},
      {"model.beta", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.beta = to_doubles(k, v); }},
      {"model.steps",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         const int t = to_int(k, v);
         if (t < 0) throw ConfigError(k + " must be >= 0");
         c.train.steps = t;
       }},
      {"model.omega", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.omega = to_doubles(k, v); }},
      {"model.pi", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.pi = to_doubles(k, v); }},
      {"model.learned_init",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.learned_init = to_bool(k, v); }},
      {"model.oracle_decoder",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.oracle_decoder = to_bool(k, v); }},

      {"train.lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.lr = positive(k, to_double(k, v)); }},
      {"train.gamma",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.gamma = positive(k, to_double(k, v)); }},
      {"train.batch",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.batch = at_least_one(k, to_size(k, v)); }},
      {"train.epochs",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.epochs = at_least_one(k, to_size(k, v)); }},
      {"train.stage2_epochs",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.stage2_epochs = to_size(k, v); }},
      {"train.clip_norm",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.clip_norm = positive(k, to_double(k, v)); }},
      {"train.shards",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.shards = at_least_one(k, to_size(k, v)); }},

      {"eval.elbo_samples",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.elbo_samples = to_int(k, v);
         if (c.elbo_samples < 1) throw ConfigError(k + " must be >= 1");
       }},
      {"eval.t_max",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.t_max = to_int(k, v);
         if (c.t_max < 1) throw ConfigError(k + " must be >= 1");
       }},
      {"eval.gap_steps",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.gap_steps.clear();
         for (const auto& s : split_list(k, v)) {
           const int t = to_int(k, s);
           if (t < 0) throw ConfigError(k + " entries must be >= 0");
           c.gap_steps.push_back(t);
         }
       }},
      {"eval.ridge",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.ridge = to_double(k, v);
         if (c.ridge < 0.0) throw ConfigError(k + " must be >= 0");
       }},
      {"eval.fid_features",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v == "raw") c.fid_features = FeatureSpace::kRaw;
         else if (v == "probe") c.fid_features = FeatureSpace::kClassifierScores;
         else throw ConfigError(k + ": expected raw or probe, got '" + v + "'");
       }},

      {"output.dir",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v.empty()) throw ConfigError(k + " must not be empty");
         c.out_dir = v;
       }},
  };
  return table;
}

// Keys that only make sense for one dataset kind or family.
const std::map<std::string, DatasetKind>& dataset_keys() {
  static const std::map<std::string, DatasetKind> t = {
      {"dataset.latent_dim", DatasetKind::kLinearGaussian}, {"dataset.dims", DatasetKind::kLinearGaussian},
      {"dataset.noise_std", DatasetKind::kLinearGaussian},  {"dataset.loading_scale", DatasetKind::kLinearGaussian},
      {"dataset.shared_bits", DatasetKind::kBitSplit},      {"dataset.private_bits", DatasetKind::kBitSplit},
      {"dataset.repeat", DatasetKind::kBitSplit},           {"dataset.flip_prob", DatasetKind::kBitSplit},
      {"dataset.images", DatasetKind::kIdx},                {"dataset.labels", DatasetKind::kIdx},
  };
  return t;
}

const std::map<std::string, Family>& family_keys() {
  static const std::map<std::string, Family> t = {
      {"model.steps", Family::kProposed},
      {"model.refiner_hidden", Family::kProposed},
      {"model.learned_init", Family::kProposed},
      {"model.omega", Family::kMixture},
      {"model.pi", Family::kAlignment},
  };
  return t;
}

std::size_t dataset_modalities(const ExperimentConfig& c) {
  switch (c.dataset) {
    case DatasetKind::kLinearGaussian: return c.linear.dims.size();
    case DatasetKind::kBitSplit: return c.bits.private_bits.size();
    case DatasetKind::kIdx: return 2;
  }
  return 0;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

bool ExperimentConfig::has_family(Family f) const {
  for (auto x : families) {
    if (x == f) return true;
  }
  return false;
}

std::uint64_t ExperimentConfig::component_seed(const std::string& component) const {
  // splitmix64 finalizer over (root seed, component name hash)
  std::uint64_t z = seed ^ fnv1a64(component);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t ExperimentConfig::effective_dataset_seed() const {
  return dataset_seed ? *dataset_seed : component_seed("dataset");
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "experiment.name = " << name << '\n' << "experiment.seed = " << seed << '\n';
  os << "dataset.kind = " << dataset_kind_name(dataset) << '\n';
  os << "dataset.seed = " << effective_dataset_seed() << '\n';
  switch (dataset) {
    case DatasetKind::kLinearGaussian:
      os << "dataset.samples = " << linear.samples << '\n'
         << "dataset.latent_dim = " << linear.latent_dim << '\n'
         << "dataset.dims = " << join(linear.dims) << '\n'
         << "dataset.noise_std = " << join(linear.noise_std) << '\n'
         << "dataset.loading_scale = " << linear.loading_scale << '\n';
      break;
    case DatasetKind::kBitSplit:
      os << "dataset.samples = " << bits.samples << '\n'
         << "dataset.shared_bits = " << bits.shared_bits << '\n'
         << "dataset.private_bits = " << join(bits.private_bits) << '\n'
         << "dataset.repeat = " << bits.repeat << '\n'
         << "dataset.flip_prob = " << bits.flip_prob << '\n';
      break;
    case DatasetKind::kIdx:
      os << "dataset.images = " << idx_images << '\n' << "dataset.labels = " << idx_labels << '\n';
      break;
  }
  std::vector<std::string> fam;
  for (auto f : families) fam.emplace_back(family_name(f));
  os << "model.families = " << join(fam) << '\n'
     << "model.latent_dim = " << model.latent_dim << '\n'
     << "model.hidden = " << model.hidden << '\n'
     << "model.refiner_hidden = " << model.refiner_hidden << '\n'
     << "model.decoder = " << (model.decoder == DecoderKind::kMlp ? "mlp" : "linear") << '\n'
     << "model.beta = " << (model.beta.empty() ? "1/dim" : join(model.beta)) << '\n'
     << "model.steps = " << train.steps << '\n'
     << "model.omega = " << (train.omega.empty() ? "uniform" : join(train.omega)) << '\n'
     << "model.pi = " << (train.pi.empty() ? "uniform" : join(train.pi)) << '\n'
     << "model.learned_init = " << (model.learned_init ? "true" : "false") << '\n'
     << "model.oracle_decoder = " << (oracle_decoder ? "true" : "false") << '\n';
  os << "train.lr = " << train.lr << '\n'
     << "train.gamma = " << train.gamma << '\n'
     << "train.batch = " << train.batch << '\n'
     << "train.epochs = " << train.epochs << '\n'
     << "train.stage2_epochs = " << (train.stage2_epochs ? train.stage2_epochs : train.epochs) << '\n'
     << "train.clip_norm = " << train.clip_norm << '\n'
     << "train.shards = " << train.shards << '\n';
  os << "eval.elbo_samples = " << elbo_samples << '\n'
     << "eval.t_max = " << t_max << '\n'
     << "eval.gap_steps = " << join(gap_steps) << '\n'
     << "eval.ridge = " << ridge << '\n'
     << "eval.fid_features = " << (fid_features == FeatureSpace::kRaw ? "raw" : "probe") << '\n';
  return os.str();
}

std::uint64_t ExperimentConfig::digest() const { return fnv1a64(canonical()); }

void ExperimentConfig::validate() const {
  if (families.empty()) throw ConfigError("model.families must name at least one family");
  switch (dataset) {
    case DatasetKind::kLinearGaussian: linear.validate(); break;
    case DatasetKind::kBitSplit: bits.validate(); break;
    case DatasetKind::kIdx:
      if (idx_images.empty()) throw ConfigError("dataset.images is required for dataset.kind = idx");
      if (idx_labels.empty()) throw ConfigError("dataset.labels is required for dataset.kind = idx");
      break;
  }
  const auto m = dataset_modalities(*this);
  if (!model.beta.empty() && model.beta.size() != m) {
    throw ConfigError("model.beta needs " + std::to_string(m) + " entries, one per modality");
  }
  for (double b : model.beta) {
    if (!(b > 0.0)) throw ConfigError("model.beta entries must be > 0");
  }
  if (!train.omega.empty()) {
    try {
      validate_subset_weights(train.omega, m);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model.omega: ") + e.what());
    }
  }
  if (!train.pi.empty()) {
    try {
      validate_modality_weights(train.pi, m);
    } catch (const Error& e) {
      throw ConfigError(std::string("model.pi: ") + e.what());
    }
  }
  if (oracle_decoder) {
    if (dataset != DatasetKind::kLinearGaussian) throw ConfigError("model.oracle_decoder needs dataset.kind = linear_gaussian");
    if (model.decoder != DecoderKind::kLinear) throw ConfigError("model.oracle_decoder needs model.decoder = linear");
    if (model.latent_dim != linear.latent_dim) {
      throw ConfigError("model.oracle_decoder needs model.latent_dim equal to dataset.latent_dim");
    }
  }
  for (int t : gap_steps) {
    if (t < 0) throw ConfigError("eval.gap_steps entries must be >= 0");
  }
}

ExperimentConfig parse_config(std::istream& in, const std::string& source) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'section.key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' set twice");
    try {
      it->second(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  for (const auto& key : seen) {
    if (auto d = dataset_keys().find(key); d != dataset_keys().end() && d->second != cfg.dataset) {
      throw ConfigError(key + " only applies to dataset.kind = " + dataset_kind_name(d->second));
    }
    if (auto f = family_keys().find(key); f != family_keys().end() && !cfg.has_family(f->second)) {
      throw ConfigError(key + " only applies to family " + family_name(f->second));
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return parse_config(in, path);
}

}  // namespace miai

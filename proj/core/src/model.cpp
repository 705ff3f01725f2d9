#include "miai/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "miai/error.hpp"

namespace miai {

const char* likelihood_name(Likelihood l) noexcept {
  switch (l) {
    case Likelihood::kBernoulli: return "bernoulli";
    case Likelihood::kGaussian: return "gaussian";
    case Likelihood::kCategorical: return "categorical";
  }
  return "?";
}

void ModalitySpec::validate() const {
  if (dim < 1) throw ConfigError("modality '" + name + "': dim must be >= 1");
  if (likelihood == Likelihood::kGaussian && !(sigma > 0.0)) {
    throw ConfigError("modality '" + name + "': gaussian sigma must be > 0");
  }
  if (likelihood == Likelihood::kCategorical && (classes < 2 || classes != dim)) {
    throw ConfigError("modality '" + name + "': categorical needs classes >= 2 equal to dim");
  }
}

double ModelConfig::beta_of(std::size_t m) const {
  if (beta.empty()) return 1.0 / static_cast<double>(modalities.at(m).dim);
  return beta.at(m);
}

void ModelConfig::validate() const {
  if (modalities.empty()) throw ConfigError("model needs at least one modality");
  for (const auto& s : modalities) s.validate();
  if (latent_dim < 1) throw ConfigError("model.latent_dim must be >= 1");
  if (hidden < 1) throw ConfigError("model.hidden must be >= 1");
  if (with_refiner && refiner_hidden < 1) throw ConfigError("model.refiner_hidden must be >= 1");
  if (!beta.empty()) {
    if (beta.size() != modalities.size()) throw ConfigError("model.beta needs one entry per modality");
    for (double b : beta) {
      if (!(b > 0.0) || !std::isfinite(b)) throw ConfigError("model.beta entries must be > 0");
    }
  }
}

// ---------------------------------------------------------------------------

void ModelParams::set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

const Tensor& ModelParams::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ModelParams::get_mut(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* kDigits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return s;
}

std::uint64_t ModelParams::digest(const std::function<bool(const std::string&)>& filter) const {
  std::uint64_t h = fnv1a64("");
  for (const auto& [name, t] : tensors_) {
    if (filter && !filter(name)) continue;
    h = fnv1a64(name, h);
    for (auto e : t.shape()) h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&e), sizeof e), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data().data()),
                                 t.size() * sizeof(double)),
                h);
  }
  return h;
}

// ---------------------------------------------------------------------------

namespace param_names {
std::string encoder_prefix(EncoderKind kind, std::size_t m) {
  return std::string(kind == EncoderKind::kPhi ? "phi." : "lambda.") + std::to_string(m) + ".";
}
}  // namespace param_names

namespace {

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double k = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-k, k);
  Tensor t({in, out});
  for (auto& v : t.values()) v = u(rng);
  return t;
}

void add_linear(ModelParams& p, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  p.set(prefix + ".w", glorot(in, out, rng));
  p.set(prefix + ".b", Tensor({1, out}));
}

void add_encoder(ModelParams& p, const ModelConfig& cfg, EncoderKind kind, std::size_t m, Rng& rng) {
  const auto pre = param_names::encoder_prefix(kind, m);
  add_linear(p, pre + "fc1", cfg.modalities[m].dim, cfg.hidden, rng);
  add_linear(p, pre + "fc2", cfg.hidden, cfg.hidden, rng);
  add_linear(p, pre + "mu", cfg.hidden, cfg.latent_dim, rng);
  add_linear(p, pre + "logstd", cfg.hidden, cfg.latent_dim, rng);
}

Var linear(const ParamVars& pv, const std::string& prefix, Var x) {
  Graph& g = pv.graph();
  return g.add(g.matmul(x, pv[prefix + ".w"]), pv[prefix + ".b"]);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  const auto d = cfg.latent_dim;
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) add_encoder(p, cfg, EncoderKind::kPhi, m, rng);
  if (cfg.with_lambda) {
    for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
      add_encoder(p, cfg, EncoderKind::kLambda, m, rng);
    }
  }
  if (cfg.decoder == DecoderKind::kMlp) {
    add_linear(p, "dec.fc1", d, cfg.hidden, rng);
    add_linear(p, "dec.fc2", cfg.hidden, cfg.hidden, rng);
  }
  const auto head_in = cfg.decoder == DecoderKind::kMlp ? cfg.hidden : d;
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    add_linear(p, "dec.head." + std::to_string(m), head_in, cfg.modalities[m].dim, rng);
  }
  if (cfg.with_refiner) {
    const auto hr = cfg.refiner_hidden;
    for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
      add_linear(p, "ref.x." + std::to_string(m), cfg.modalities[m].dim, hr, rng);
    }
    add_linear(p, "ref.grad", 4 * d, hr, rng);
    add_linear(p, "ref.mu", 2 * hr, d, rng);
    add_linear(p, "ref.logstd", 2 * hr, d, rng);
    add_linear(p, "ref.gate_mu", 2 * hr, d, rng);
    add_linear(p, "ref.gate_logstd", 2 * hr, d, rng);
    if (cfg.learned_init) {
      p.set("ref.init.mu", Tensor({1, d}));
      p.set("ref.init.logstd", Tensor({1, d}));
    }
  }
  return p;
}

void clone_phi_into_lambda(ModelParams& params) {
  std::vector<std::pair<std::string, Tensor>> copies;
  for (const auto& [name, t] : params.all()) {
    if (param_names::is_phi(name)) copies.emplace_back("lambda." + name.substr(4), t);
  }
  for (auto& [name, t] : copies) params.set(name, std::move(t));
}

// ---------------------------------------------------------------------------

ParamVars::ParamVars(Graph& g, const ModelParams& params, const Filter& trainable) : graph_(&g) {
  for (const auto& [name, t] : params.all()) {
    vars_[name] = (trainable && trainable(name)) ? g.variable(t, name) : g.constant(t, name);
  }
}

Var ParamVars::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw Error("parameter '" + name + "' not present in model");
  return it->second;
}

std::map<std::string, Tensor> ParamVars::collect(const Gradients& grads) const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : vars_) {
    if (graph_->is_differentiable_leaf(v)) {
      out[name] = grads.has(v) ? grads.of(v) : Tensor::zeros_like(v.value());
    }
  }
  return out;
}

std::size_t Batch::size() const {
  for (const auto& t : x) {
    if (!t.empty()) return t.rows();
  }
  return 0;
}

DiagGaussian GaussianBatch::item(std::size_t i) const {
  const auto r = mean.row_at(i);
  const auto s = log_std.row_at(i);
  return DiagGaussian(r.values(), s.values());
}

SubsetMask full_subset(std::size_t num_modalities) {
  return (SubsetMask{1} << num_modalities) - 1;
}

GaussianVars encode(const ParamVars& pv, const ModelConfig& cfg, std::size_t m, Var x, EncoderKind kind) {
  if (m >= cfg.num_modalities()) throw Error("unknown modality index " + std::to_string(m));
  if (x.cols() != cfg.modalities[m].dim) {
    throw ShapeError("encode: modality " + std::to_string(m) + " expects dim " +
                     std::to_string(cfg.modalities[m].dim) + ", got " + std::to_string(x.cols()));
  }
  Graph& g = pv.graph();
  const auto pre = param_names::encoder_prefix(kind, m);
  Var h = g.elu(linear(pv, pre + "fc1", x));
  h = g.elu(linear(pv, pre + "fc2", h));
  GaussianVars out;
  out.mean = linear(pv, pre + "mu", h);
  out.log_std = g.clamp(linear(pv, pre + "logstd", h), kLogStdMin, kLogStdMax);
  return out;
}

GaussianBatch encode(const ModelParams& params, const ModelConfig& cfg, std::size_t m, const Tensor& x,
                     EncoderKind kind) {
  Graph g;
  ParamVars pv(g, params, {});
  auto q = encode(pv, cfg, m, g.constant(x), kind);
  return {q.mean.value(), q.log_std.value()};
}

std::vector<Var> decode(const ParamVars& pv, const ModelConfig& cfg, Var z) {
  Graph& g = pv.graph();
  if (z.cols() != cfg.latent_dim) throw ShapeError("decode: latent has wrong dimension");
  Var h = z;
  if (cfg.decoder == DecoderKind::kMlp) {
    h = g.elu(linear(pv, "dec.fc1", z));
    h = g.elu(linear(pv, "dec.fc2", h));
  }
  std::vector<Var> out;
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    out.push_back(linear(pv, "dec.head." + std::to_string(m), h));
  }
  return out;
}

Var modality_log_lik(Graph& g, const ModalitySpec& spec, Var output, Var x) {
  if (!output.value().same_shape(x.value())) {
    throw ShapeError("modality '" + spec.name + "': data shape " + x.value().shape_string() +
                     " != decoder output " + output.value().shape_string());
  }
  switch (spec.likelihood) {
    case Likelihood::kBernoulli:
      // x * l - softplus(l)
      return g.sum(x * output - g.softplus(output), 1);
    case Likelihood::kGaussian: {
      const double inv2s2 = 1.0 / (2.0 * spec.sigma * spec.sigma);
      const double norm = static_cast<double>(spec.dim) *
                          (0.5 * std::log(2.0 * std::numbers::pi) + std::log(spec.sigma));
      Var sq = g.sum(g.square(x - output), 1);
      return g.add(g.scale(sq, -inv2s2), g.scalar(-norm));
    }
    case Likelihood::kCategorical:
      return g.sum(x * g.log_softmax(output), 1);
  }
  throw Error("unknown likelihood");
}

Var decode_log_lik(const ParamVars& pv, const ModelConfig& cfg, Var z, std::span<const Var> x,
                   SubsetMask subset, std::vector<Var>& per_modality) {
  Graph& g = pv.graph();
  const auto outputs = decode(pv, cfg, z);
  per_modality.assign(cfg.num_modalities(), Var{});
  Var total{};
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    if (!(subset & (SubsetMask{1} << m))) continue;
    if (m >= x.size() || !x[m].valid()) {
      throw Error("decode_log_lik: modality " + std::to_string(m) + " absent from batch");
    }
    Var term = g.scale(modality_log_lik(g, cfg.modalities[m], outputs[m], x[m]), cfg.beta_of(m));
    per_modality[m] = term;
    total = total.valid() ? total + term : term;
  }
  if (!total.valid()) throw Error("decode_log_lik: empty modality subset");
  return total;
}

Var decode_log_lik(const ParamVars& pv, const ModelConfig& cfg, Var z, std::span<const Var> x,
                   SubsetMask subset) {
  std::vector<Var> unused;
  return decode_log_lik(pv, cfg, z, x, subset, unused);
}

std::vector<Tensor> decode_mean(const ModelParams& params, const ModelConfig& cfg, const Tensor& z) {
  Graph g;
  ParamVars pv(g, params, {});
  auto outs = decode(pv, cfg, g.constant(z));
  std::vector<Tensor> result;
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    switch (cfg.modalities[m].likelihood) {
      case Likelihood::kBernoulli:
        result.push_back(g.sigmoid(outs[m]).value());
        break;
      case Likelihood::kGaussian:
        result.push_back(outs[m].value());
        break;
      case Likelihood::kCategorical:
        result.push_back(g.exp(g.log_softmax(outs[m])).value());
        break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

std::string rng_state_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw IoError("malformed RNG state");
  return rng;
}

namespace {

constexpr char kMagic[4] = {'M', 'I', 'A', 'I'};
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

Tensor bytes_tensor(std::string_view s) {
  Tensor t({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

std::string tensor_bytes(const Tensor& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (!(v >= 0 && v <= 255) || v != std::floor(v)) throw IoError("meta record holds a non-byte value");
    s[i] = static_cast<char>(static_cast<unsigned char>(v));
  }
  return s;
}

void put_record(std::string& out, const std::string& name, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  for (double v : t.data()) put_f64(out, v);
}

class Reader {
 public:
  Reader(std::ifstream& in, std::uint64_t size, std::string path)
      : in_(in), size_(size), path_(std::move(path)) {}

  std::uint64_t offset() const { return offset_; }
  std::uint64_t remaining() const { return size_ - offset_; }
  bool at_end() const { return offset_ == size_; }

  void read(char* dst, std::uint64_t n, const char* what) {
    if (n > remaining()) {
      throw IoError(path_ + ": truncated " + what + " at offset " + std::to_string(offset_) +
                    " (need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                    " left)");
    }
    in_.read(dst, static_cast<std::streamsize>(n));
    if (!in_) throw IoError(path_ + ": read failure at offset " + std::to_string(offset_));
    offset_ += n;
  }

  template <typename T>
  T le(const char* what) {
    unsigned char buf[sizeof(T)];
    read(reinterpret_cast<char*>(buf), sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
  }

 private:
  std::ifstream& in_;
  std::uint64_t size_;
  std::uint64_t offset_ = 0;
  std::string path_;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::size_t count = 3 + ckpt.params.size();
  put_record(out, "meta.count", Tensor({1}, {static_cast<double>(count)}));
  put_record(out, "meta.stage", bytes_tensor(ckpt.stage));
  put_record(out, "meta.config_digest", bytes_tensor(hex64(ckpt.config_digest)));
  put_record(out, "meta.rng_state", bytes_tensor(ckpt.rng_state));
  for (const auto& [name, t] : ckpt.params.all()) put_record(out, name, t);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failure on '" + path + "'");
}

LoadResult load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_digest) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open '" + path + "'");
  const auto size = static_cast<std::uint64_t>(f.tellg());
  f.seekg(0);
  Reader r(f, size, path);

  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": bad magic bytes, not a MIAI file");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  }

  LoadResult result;
  std::optional<std::uint64_t> declared;
  std::uint64_t seen = 0;
  bool have_digest = false;
  while (!r.at_end()) {
    const auto record_offset = r.offset();
    const auto name_len = r.le<std::uint32_t>("record name length");
    if (name_len == 0 || name_len > kMaxNameLength) {
      throw IoError(path + ": invalid record name length at offset " + std::to_string(record_offset));
    }
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "record name");
    const auto rank = r.le<std::uint32_t>("record rank");
    if (rank > kMaxRank) throw IoError(path + ": record '" + name + "' has rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
      e = r.le<std::uint64_t>("record extent");
      if (e != 0 && count > r.remaining() / e) {
        throw IoError(path + ": truncated payload for '" + name + "' at offset " +
                      std::to_string(r.offset()));
      }
      count *= e;
    }
    if (count > r.remaining() / sizeof(double)) {
      throw IoError(path + ": truncated payload for '" + name + "' at offset " +
                    std::to_string(r.offset()) + " (need " + std::to_string(count * 8) + " bytes, " +
                    std::to_string(r.remaining()) + " left)");
    }
    std::vector<double> data(count);
    for (auto& v : data) v = std::bit_cast<double>(r.le<std::uint64_t>("payload"));
    Tensor t(std::move(shape), std::move(data));

    if (seen == 0) {
      if (name != "meta.count" || t.size() != 1) throw IoError(path + ": first record must be meta.count");
      declared = static_cast<std::uint64_t>(t[0]);
    } else if (name == "meta.stage") {
      result.checkpoint.stage = tensor_bytes(t);
    } else if (name == "meta.config_digest") {
      result.checkpoint.config_digest = std::stoull(tensor_bytes(t), nullptr, 16);
      have_digest = true;
    } else if (name == "meta.rng_state") {
      result.checkpoint.rng_state = tensor_bytes(t);
    } else {
      if (result.checkpoint.params.contains(name)) throw IoError(path + ": duplicate record '" + name + "'");
      result.checkpoint.params.set(name, std::move(t));
    }
    ++seen;
  }
  if (!declared || seen - 1 != *declared) {
    throw IoError(path + ": truncated at offset " + std::to_string(r.offset()) + ": expected " +
                  std::to_string(declared.value_or(0)) + " records after meta.count, found " +
                  std::to_string(seen == 0 ? 0 : seen - 1));
  }
  if (expected_digest && have_digest && *expected_digest != result.checkpoint.config_digest) {
    result.warnings.push_back("config digest mismatch: checkpoint " +
                              hex64(result.checkpoint.config_digest) + ", expected " +
                              hex64(*expected_digest));
  }
  return result;
}

}  // namespace miai

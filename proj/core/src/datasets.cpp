#include "miai/datasets.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <numbers>

#include "miai/error.hpp"

namespace miai {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

MatrixXd to_eigen(const Tensor& t) {
  MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at(i, j);
  return m;
}

Tensor from_eigen(const MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

}  // namespace

Batch Dataset::batch(std::span<const std::size_t> idx) const {
  Batch b;
  for (const auto& t : data) b.x.push_back(t.gather_rows(idx));
  return b;
}

std::vector<int> Dataset::labels_at(std::span<const std::size_t> idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels.at(i));
  return out;
}

Split split_indices(std::size_t n, std::uint64_t seed) {
  Split s;
  for (std::size_t i = 0; i < n; ++i) {
    const auto bucket = splitmix64(static_cast<std::uint64_t>(i) ^ splitmix64(seed)) % 10;
    if (bucket < 8) {
      s.train.push_back(i);
    } else if (bucket == 8) {
      s.validation.push_back(i);
    } else {
      s.test.push_back(i);
    }
  }
  return s;
}

double kl_diag_to_full(const DiagGaussian& q, const FullGaussian& p) {
  const auto d = static_cast<Eigen::Index>(q.dim());
  if (p.mean.size() != q.dim() || p.cov.rows() != q.dim()) throw ShapeError("kl_diag_to_full: dimension mismatch");
  const MatrixXd cov = to_eigen(p.cov);
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericError("kl_diag_to_full: covariance not positive definite");
  const MatrixXd prec = llt.solve(MatrixXd::Identity(d, d));
  double logdet_p = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) logdet_p += 2.0 * std::log(llt.matrixL()(i, i));
  double trace = 0.0, logdet_q = 0.0, quad = 0.0;
  VectorXd diff(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const auto k = static_cast<std::size_t>(i);
    trace += prec(i, i) * std::exp(2.0 * q.log_std[k]);
    logdet_q += 2.0 * q.log_std[k];
    diff(i) = p.mean[k] - q.mean[k];
  }
  quad = diff.dot(prec * diff);
  return 0.5 * (trace + quad - static_cast<double>(d) + logdet_p - logdet_q);
}

// ---------------------------------------------------------------------------

void LinearGaussianSpec::validate() const {
  if (latent_dim < 1) throw ConfigError("dataset.latent_dim must be >= 1");
  if (dims.empty()) throw ConfigError("dataset.dims needs at least one modality");
  if (dims.size() != noise_std.size()) throw ConfigError("dataset.noise_std needs one entry per modality");
  for (auto d : dims) {
    if (d < 1) throw ConfigError("dataset.dims entries must be >= 1");
  }
  for (double t : noise_std) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("dataset.noise_std entries must be > 0");
  }
  if (samples < 1) throw ConfigError("dataset.samples must be >= 1");
}

LinearGaussianOracle::LinearGaussianOracle(std::vector<Tensor> loadings, std::vector<double> noise_std)
    : loadings_(std::move(loadings)), noise_std_(std::move(noise_std)) {
  if (loadings_.empty() || loadings_.size() != noise_std_.size()) {
    throw ShapeError("oracle needs one loading matrix and noise std per modality");
  }
}

FullGaussian LinearGaussianOracle::posterior(std::span<const std::vector<double>> x, SubsetMask subset) const {
  const auto d = static_cast<Eigen::Index>(latent_dim());
  MatrixXd precision = MatrixXd::Identity(d, d);
  VectorXd rhs = VectorXd::Zero(d);
  for (std::size_t m = 0; m < loadings_.size(); ++m) {
    if (!(subset & (SubsetMask{1} << m))) continue;
    const MatrixXd a = to_eigen(loadings_[m]);
    const double inv_var = 1.0 / (noise_std_[m] * noise_std_[m]);
    if (x[m].size() != static_cast<std::size_t>(a.rows())) throw ShapeError("oracle: observation size mismatch");
    const VectorXd xm = Eigen::Map<const VectorXd>(x[m].data(), a.rows());
    precision += inv_var * a.transpose() * a;
    rhs += inv_var * a.transpose() * xm;
  }
  Eigen::LLT<MatrixXd> llt(precision);
  const MatrixXd cov = llt.solve(MatrixXd::Identity(d, d));
  const VectorXd mean = llt.solve(rhs);
  FullGaussian out;
  out.mean.assign(mean.data(), mean.data() + d);
  out.cov = from_eigen(0.5 * (cov + cov.transpose()));
  return out;
}

double LinearGaussianOracle::log_marginal(std::span<const std::vector<double>> x, SubsetMask subset) const {
  std::vector<std::size_t> members;
  Eigen::Index n = 0;
  for (std::size_t m = 0; m < loadings_.size(); ++m) {
    if (subset & (SubsetMask{1} << m)) {
      members.push_back(m);
      n += static_cast<Eigen::Index>(loadings_[m].rows());
    }
  }
  const auto d = static_cast<Eigen::Index>(latent_dim());
  MatrixXd a(n, d);
  VectorXd xs(n);
  VectorXd noise(n);
  Eigen::Index off = 0;
  for (auto m : members) {
    const auto r = static_cast<Eigen::Index>(loadings_[m].rows());
    a.block(off, 0, r, d) = to_eigen(loadings_[m]);
    for (Eigen::Index i = 0; i < r; ++i) {
      xs(off + i) = x[m][static_cast<std::size_t>(i)];
      noise(off + i) = noise_std_[m] * noise_std_[m];
    }
    off += r;
  }
  MatrixXd cov = a * a.transpose();
  cov.diagonal() += noise;
  Eigen::LLT<MatrixXd> llt(cov);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double quad = xs.dot(llt.solve(xs));
  return -0.5 * (quad + logdet + static_cast<double>(n) * std::log(2.0 * std::numbers::pi));
}

namespace {
std::vector<std::vector<double>> item_rows(const Dataset& ds, std::size_t i) {
  std::vector<std::vector<double>> x;
  for (const auto& t : ds.data) x.push_back(t.row_at(i).values());
  return x;
}
}  // namespace

FullGaussian LinearGaussianOracle::posterior(const Dataset& ds, std::size_t i, SubsetMask subset) const {
  const auto x = item_rows(ds, i);
  return posterior(x, subset);
}

double LinearGaussianOracle::log_marginal(const Dataset& ds, std::size_t i, SubsetMask subset) const {
  const auto x = item_rows(ds, i);
  return log_marginal(x, subset);
}

LinearGaussianData gen_linear_gaussian(const LinearGaussianSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto d = spec.latent_dim;
  const double scale = spec.loading_scale / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> loadings;
  for (auto dim : spec.dims) {
    Tensor a({dim, d});
    for (auto& v : a.values()) v = scale * n01(rng);
    loadings.push_back(std::move(a));
  }
  LinearGaussianData out;
  out.dataset.kind = "linear_gaussian";
  for (std::size_t m = 0; m < spec.dims.size(); ++m) {
    ModalitySpec s;
    s.name = "x" + std::to_string(m);
    s.dim = spec.dims[m];
    s.likelihood = Likelihood::kGaussian;
    s.sigma = spec.noise_std[m];
    out.dataset.modalities.push_back(s);
    out.dataset.data.emplace_back(std::vector<std::size_t>{spec.samples, spec.dims[m]});
  }
  std::vector<double> z(d);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    for (auto& v : z) v = n01(rng);
    for (std::size_t m = 0; m < spec.dims.size(); ++m) {
      const auto& a = loadings[m];
      for (std::size_t r = 0; r < spec.dims[m]; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += a.at(r, c) * z[c];
        out.dataset.data[m].at(i, r) = s + spec.noise_std[m] * n01(rng);
      }
    }
  }
  out.oracle = LinearGaussianOracle(std::move(loadings), spec.noise_std);
  return out;
}

// ---------------------------------------------------------------------------

std::size_t BitSplitSpec::table_bits() const {
  std::size_t bits = private_bits.size() * shared_bits;
  for (auto p : private_bits) bits += p;
  return bits;
}

void BitSplitSpec::validate() const {
  if (private_bits.empty()) throw ConfigError("dataset.private_bits needs at least one modality");
  if (table_bits() > kMaxJointBits) {
    throw ConfigError("bit budget exceeded: joint table needs " + std::to_string(table_bits()) +
                      " bits, limit is " + std::to_string(kMaxJointBits));
  }
  for (auto p : private_bits) {
    if (shared_bits + p == 0) throw ConfigError("every bit-split modality needs at least one bit");
  }
  if (samples < 1) throw ConfigError("dataset.samples must be >= 1");
  if (repeat < 1) throw ConfigError("dataset.repeat must be >= 1");
  if (!(flip_prob >= 0.0 && flip_prob < 0.5)) throw ConfigError("dataset.flip_prob must be in [0, 0.5)");
}

BitSplitData gen_bitsplit(const BitSplitSpec& spec) {
  spec.validate();
  const auto M = spec.private_bits.size();
  BitSplitData out;
  out.dataset.kind = "bitsplit";
  out.dataset.num_classes = std::size_t{1} << spec.shared_bits;
  for (std::size_t m = 0; m < M; ++m) {
    const auto bits = spec.shared_bits + spec.private_bits[m];
    ModalitySpec s;
    s.name = "b" + std::to_string(m);
    s.dim = bits * spec.repeat;
    s.likelihood = Likelihood::kBernoulli;
    out.dataset.modalities.push_back(s);
    out.dataset.data.emplace_back(std::vector<std::size_t>{spec.samples, s.dim});
    out.joint.alphabet.push_back(std::size_t{1} << bits);
  }

  // Exact joint: uniform over all consistent symbol tuples.
  std::size_t cells = 1;
  for (auto a : out.joint.alphabet) cells *= a;
  out.joint.prob.assign(cells, 0.0);
  std::size_t free_bits = spec.shared_bits;
  for (auto p : spec.private_bits) free_bits += p;
  const double mass = std::ldexp(1.0, -static_cast<int>(free_bits));
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::size_t rest = cell;
    bool consistent = true;
    std::size_t shared = 0;
    for (std::size_t m = M; m-- > 0;) {
      const auto sym = rest % out.joint.alphabet[m];
      rest /= out.joint.alphabet[m];
      const auto sh = sym >> spec.private_bits[m];
      if (m == M - 1) {
        shared = sh;
      } else if (sh != shared) {
        consistent = false;
      }
    }
    if (consistent) out.joint.prob[cell] = mass;
  }

  Rng rng(spec.seed);
  std::uniform_int_distribution<std::uint64_t> bit(0, 1);
  std::bernoulli_distribution flip(spec.flip_prob);
  out.symbols.assign(spec.samples, std::vector<std::size_t>(M));
  for (std::size_t i = 0; i < spec.samples; ++i) {
    std::size_t shared = 0;
    for (std::size_t b = 0; b < spec.shared_bits; ++b) shared = (shared << 1) | bit(rng);
    out.dataset.labels.push_back(static_cast<int>(shared));
    for (std::size_t m = 0; m < M; ++m) {
      std::size_t priv = 0;
      for (std::size_t b = 0; b < spec.private_bits[m]; ++b) priv = (priv << 1) | bit(rng);
      const auto bits = spec.shared_bits + spec.private_bits[m];
      const auto sym = (shared << spec.private_bits[m]) | priv;
      out.symbols[i][m] = sym;
      for (std::size_t b = 0; b < bits; ++b) {
        const double v = static_cast<double>((sym >> (bits - 1 - b)) & 1U);
        for (std::size_t r = 0; r < spec.repeat; ++r) {
          const bool f = spec.flip_prob > 0.0 && flip(rng);
          out.dataset.data[m].at(i, b * spec.repeat + r) = f ? 1.0 - v : v;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::ifstream& f, const std::string& path, const char* what) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw IoError(path + ": truncated header reading " + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::uint64_t file_size(std::ifstream& f) {
  const auto pos = f.tellg();
  f.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(f.tellg());
  f.seekg(pos);
  return size;
}

}  // namespace

Dataset load_idx(const std::string& image_path, const std::string& label_path) {
  constexpr std::size_t kClasses = 10;
  std::ifstream fi(image_path, std::ios::binary);
  if (!fi) throw IoError("cannot open '" + image_path + "'");
  std::ifstream fl(label_path, std::ios::binary);
  if (!fl) throw IoError("cannot open '" + label_path + "'");

  if (read_be32(fi, image_path, "magic") != 0x00000803) throw IoError(image_path + ": bad IDX image magic");
  const auto n_images = read_be32(fi, image_path, "count");
  const auto rows = read_be32(fi, image_path, "rows");
  const auto cols = read_be32(fi, image_path, "cols");
  if (read_be32(fl, label_path, "magic") != 0x00000801) throw IoError(label_path + ": bad IDX label magic");
  const auto n_labels = read_be32(fl, label_path, "count");
  if (n_images != n_labels) {
    throw IoError("IDX count mismatch: " + std::to_string(n_images) + " images vs " +
                  std::to_string(n_labels) + " labels");
  }
  const std::uint64_t pixels = std::uint64_t{rows} * cols;
  if (pixels == 0) throw IoError(image_path + ": zero-sized images");
  if (file_size(fi) < 16 + pixels * n_images) throw IoError(image_path + ": truncated image payload");
  if (file_size(fl) < 8 + std::uint64_t{n_labels}) throw IoError(label_path + ": truncated label payload");

  Dataset ds;
  ds.kind = "idx";
  ds.num_classes = kClasses;
  ModalitySpec image{"image", static_cast<std::size_t>(pixels), Likelihood::kBernoulli, 1.0, 0};
  ModalitySpec label{"label", kClasses, Likelihood::kCategorical, 1.0, kClasses};
  ds.modalities = {image, label};
  Tensor img({n_images, static_cast<std::size_t>(pixels)});
  Tensor lab({n_labels, kClasses});
  std::vector<unsigned char> buf(static_cast<std::size_t>(pixels));
  for (std::uint32_t i = 0; i < n_images; ++i) {
    fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    if (!fi) throw IoError(image_path + ": truncated image payload");
    for (std::size_t p = 0; p < buf.size(); ++p) img.at(i, p) = buf[p] / 255.0;
    char c;
    fl.read(&c, 1);
    if (!fl) throw IoError(label_path + ": truncated label payload");
    const auto y = static_cast<unsigned char>(c);
    if (y >= kClasses) throw IoError(label_path + ": label " + std::to_string(y) + " out of range");
    lab.at(i, y) = 1.0;
    ds.labels.push_back(y);
  }
  ds.data = {std::move(img), std::move(lab)};
  return ds;
}

// ---------------------------------------------------------------------------

namespace {
Tensor string_tensor(const std::string& s) {
  Tensor t({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}
std::string tensor_string(const Tensor& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) s[i] = static_cast<char>(static_cast<unsigned char>(t[i]));
  return s;
}
std::string idx_name(const char* prefix, std::size_t m) { return std::string(prefix) + std::to_string(m); }
}  // namespace

void save_dataset(const Dataset& ds, const std::optional<LinearGaussianOracle>& oracle, const std::string& path) {
  Checkpoint c;
  c.stage = "dataset:" + ds.kind;
  for (std::size_t m = 0; m < ds.num_modalities(); ++m) {
    const auto& s = ds.modalities[m];
    c.params.set(idx_name("modality.name.", m), string_tensor(s.name.empty() ? "?" : s.name));
    c.params.set(idx_name("modality.spec.", m),
                 Tensor({4}, {static_cast<double>(s.dim), static_cast<double>(static_cast<int>(s.likelihood)),
                              s.sigma, static_cast<double>(s.classes)}));
    c.params.set(idx_name("data.", m), ds.data[m]);
  }
  if (!ds.labels.empty()) {
    Tensor lab({ds.labels.size()});
    for (std::size_t i = 0; i < ds.labels.size(); ++i) lab[i] = ds.labels[i];
    c.params.set("labels", lab);
    c.params.set("num_classes", Tensor({1}, {static_cast<double>(ds.num_classes)}));
  }
  if (oracle) {
    for (std::size_t m = 0; m < oracle->loadings().size(); ++m) {
      c.params.set(idx_name("oracle.loading.", m), oracle->loadings()[m]);
    }
    c.params.set("oracle.noise_std", Tensor({oracle->noise_std().size()}, oracle->noise_std()));
  }
  save_checkpoint(c, path);
}

LoadedDataset load_dataset(const std::string& path) {
  auto loaded = load_checkpoint(path).checkpoint;
  if (loaded.stage.rfind("dataset:", 0) != 0) throw IoError(path + ": not a dataset file");
  LoadedDataset out;
  out.dataset.kind = loaded.stage.substr(8);
  const auto& p = loaded.params;
  for (std::size_t m = 0; p.contains(idx_name("data.", m)); ++m) {
    const auto& spec = p.get(idx_name("modality.spec.", m));
    ModalitySpec s;
    s.name = tensor_string(p.get(idx_name("modality.name.", m)));
    s.dim = static_cast<std::size_t>(spec[0]);
    s.likelihood = static_cast<Likelihood>(static_cast<int>(spec[1]));
    s.sigma = spec[2];
    s.classes = static_cast<std::size_t>(spec[3]);
    out.dataset.modalities.push_back(s);
    out.dataset.data.push_back(p.get(idx_name("data.", m)));
  }
  if (p.contains("labels")) {
    for (double v : p.get("labels").data()) out.dataset.labels.push_back(static_cast<int>(v));
    out.dataset.num_classes = static_cast<std::size_t>(p.get("num_classes")[0]);
  }
  if (p.contains("oracle.noise_std")) {
    std::vector<Tensor> loadings;
    for (std::size_t m = 0; p.contains(idx_name("oracle.loading.", m)); ++m) {
      loadings.push_back(p.get(idx_name("oracle.loading.", m)));
    }
    out.oracle = LinearGaussianOracle(std::move(loadings), p.get("oracle.noise_std").values());
  }
  return out;
}

}  // namespace miai

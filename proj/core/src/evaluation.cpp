#include "miai/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <ostream>

#include "miai/error.hpp"

namespace miai {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd to_eigen(const Tensor& t) {
  MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at(i, j);
  return m;
}

MatrixXd sqrt_psd(const MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (a + a.transpose()));
  VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

GaussianFit fit_gaussian(const Tensor& samples, double shrinkage) {
  const auto n = samples.rows();
  const auto d = samples.cols();
  if (n < 2) throw Error("fit_gaussian needs at least two samples");
  GaussianFit f;
  f.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) f.mean[j] += samples.at(i, j);
  for (auto& v : f.mean) v /= static_cast<double>(n);
  f.cov = Tensor({d, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = samples.at(i, a) - f.mean[a];
      for (std::size_t b = a; b < d; ++b) f.cov.at(a, b) += da * (samples.at(i, b) - f.mean[b]);
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      const double v = f.cov.at(a, b) / static_cast<double>(n - 1);
      f.cov.at(a, b) = v;
      f.cov.at(b, a) = v;
    }
    f.cov.at(a, a) += shrinkage;
  }
  return f;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
    throw ShapeError("frechet_distance: dimension mismatch");
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const MatrixXd sa = to_eigen(a.cov);
  const MatrixXd sb = to_eigen(b.cov);
  const MatrixXd root_a = sqrt_psd(sa);
  const MatrixXd cross = sqrt_psd(root_a * sb * root_a);
  return mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("cosine_similarity: unpaired inputs " + a.shape_string() + " vs " + b.shape_string());
  if (a.rows() == 0) throw Error("cosine_similarity on empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      dot += a.at(i, j) * b.at(i, j);
      na += a.at(i, j) * a.at(i, j);
      nb += b.at(i, j) * b.at(i, j);
    }
    if (na > 0.0 && nb > 0.0) acc += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return acc / static_cast<double>(a.rows());
}

// ---------------------------------------------------------------------------

void RidgeClassifier::fit(const Tensor& features, std::span<const int> labels, std::size_t classes, double ridge) {
  const auto n = features.rows();
  const auto d = features.cols();
  if (labels.size() != n) throw ShapeError("ridge: label count does not match feature rows");
  if (classes < 2) throw Error("ridge: need at least two classes");
  if (ridge < 0.0) throw ConfigError("ridge penalty must be >= 0");
  const auto D = static_cast<Eigen::Index>(d + 1);
  MatrixXd a(static_cast<Eigen::Index>(n), D);
  MatrixXd y = MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(classes));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = features.at(i, j);
    a(static_cast<Eigen::Index>(i), D - 1) = 1.0;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw Error("ridge: label out of range");
    y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  MatrixXd normal = a.transpose() * a;
  for (Eigen::Index j = 0; j + 1 < D; ++j) normal(j, j) += ridge;
  Eigen::FullPivLU<MatrixXd> lu(normal);
  if (ridge == 0.0 && lu.rank() < D) {
    throw NumericError("ridge: normal matrix is singular (rank " + std::to_string(lu.rank()) + " < " +
                       std::to_string(D) + "); use a ridge penalty > 0");
  }
  const MatrixXd w = lu.solve(a.transpose() * y);
  weights_ = Tensor({d + 1, classes});
  for (std::size_t i = 0; i <= d; ++i)
    for (std::size_t c = 0; c < classes; ++c) weights_.at(i, c) = w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  classes_ = classes;
  input_dim_ = d;
}

Tensor RidgeClassifier::scores(const Tensor& features) const {
  if (features.cols() != input_dim_) throw ShapeError("ridge: feature dimension mismatch");
  Tensor s({features.rows(), classes_});
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t c = 0; c < classes_; ++c) {
      double v = weights_.at(input_dim_, c);
      for (std::size_t j = 0; j < input_dim_; ++j) v += features.at(i, j) * weights_.at(j, c);
      s.at(i, c) = v;
    }
  }
  return s;
}

std::vector<int> RidgeClassifier::predict(const Tensor& features) const {
  const auto s = scores(features);
  std::vector<int> out(features.rows());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes_; ++c) {
      if (s.at(i, c) > s.at(i, best)) best = c;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

double RidgeClassifier::accuracy(const Tensor& features, std::span<const int> labels) const {
  const auto pred = predict(features);
  if (pred.size() != labels.size()) throw ShapeError("accuracy: label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double linear_probe(const Tensor& train_latents, std::span<const int> train_labels, const Tensor& test_latents,
                    std::span<const int> test_labels, std::size_t classes, double ridge) {
  RidgeClassifier clf;
  clf.fit(train_latents, train_labels, classes, ridge);
  return clf.accuracy(test_latents, test_labels);
}

// ---------------------------------------------------------------------------

GaussianBatch unimodal_posterior(const ModelParams& params, const ModelConfig& cfg, Family family, std::size_t m,
                                 const Tensor& x_m) {
  if (family == Family::kMixture) {
    Graph g;
    ParamVars pv(g, params, {});
    GaussianVars e = encode(pv, cfg, m, g.constant(x_m), EncoderKind::kPhi);
    GaussianVars q = poe(g, std::span<const GaussianVars>(&e, 1), true);
    return {q.mean.value(), q.log_std.value()};
  }
  if (!params.contains(param_names::encoder_prefix(EncoderKind::kLambda, m) + "fc1.w")) {
    throw Error("model has no lambda encoder for modality " + std::to_string(m));
  }
  return encode(params, cfg, m, x_m, EncoderKind::kLambda);
}

namespace {
template <typename F>
void for_batches(std::span<const std::size_t> idx, std::size_t batch, F f) {
  for (std::size_t begin = 0; begin < idx.size(); begin += batch) {
    f(idx.subspan(begin, std::min(batch, idx.size() - begin)), begin);
  }
}
}  // namespace

double poe_elbo(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                std::span<const std::size_t> idx, const EvalOptions& opt) {
  Rng rng(opt.seed ^ 0x9b0eULL);
  double acc = 0.0;
  const auto all = full_subset(cfg.num_modalities());
  for_batches(idx, opt.batch, [&](std::span<const std::size_t> sub, std::size_t) {
    const auto batch = ds.batch(sub);
    Graph g;
    ParamVars pv(g, params, {});
    auto x = bind_batch(g, batch);
    auto q = poe_posterior(pv, cfg, x, all);
    const auto vals = elbo_estimate(params, cfg, batch, {q.mean.value(), q.log_std.value()}, all, opt.elbo_samples, rng);
    for (double v : vals) acc += v;
  });
  return acc / static_cast<double>(idx.size());
}

ElboCurve elbo_vs_T(const ModelParams& proposed, const ModelConfig& proposed_cfg, const Dataset& ds,
                    std::span<const std::size_t> idx, std::size_t m, int t_max, const ModelParams* alignment,
                    const ModelConfig* alignment_cfg, const EvalOptions& opt) {
  if (!proposed_cfg.with_refiner) throw Error("elbo_vs_T needs a proposed-family model");
  if (t_max < 1) throw Error("elbo_vs_T needs T_max >= 1");
  ElboCurve curve;
  curve.modality = m;
  curve.points.assign(static_cast<std::size_t>(t_max), 0.0);
  Rng refine_rng(opt.seed ^ (0x1000ULL + m));
  Rng eval_rng(opt.seed ^ (0x2000ULL + m));
  const auto all = full_subset(proposed_cfg.num_modalities());
  for_batches(idx, opt.batch, [&](std::span<const std::size_t> sub, std::size_t) {
    const auto batch = ds.batch(sub);
    // step t is evaluated at the state it starts from, so T_max steps need T_max - 1 updates
    const auto r = refine(proposed, proposed_cfg, m, batch, t_max - 1, refine_rng);
    for (std::size_t t = 0; t < r.trajectory.states.size(); ++t) {
      const auto vals = elbo_estimate(proposed, proposed_cfg, batch, r.trajectory.states[t].posterior(), all,
                                      opt.elbo_samples, eval_rng);
      for (double v : vals) curve.points[t] += v;
    }
  });
  for (auto& p : curve.points) p /= static_cast<double>(idx.size());
  if (alignment != nullptr && alignment_cfg != nullptr) {
    curve.poe_baseline = poe_elbo(*alignment, *alignment_cfg, ds, idx, opt);
  }
  return curve;
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty sequence");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

GapResult amortization_gap(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                           const LinearGaussianOracle& oracle, std::span<const std::size_t> idx, std::size_t m,
                           int steps, const EvalOptions& opt) {
  if (ds.kind != "linear_gaussian") throw Error("amortization_gap needs the analytic linear-Gaussian dataset");
  GapResult out;
  Rng rng(opt.seed ^ (0x3000ULL + m));
  const auto all = full_subset(cfg.num_modalities());
  for_batches(idx, opt.batch, [&](std::span<const std::size_t> sub, std::size_t) {
    const auto batch = ds.batch(sub);
    const auto r = refine(params, cfg, m, batch, steps, rng);
    const auto q0 = r.trajectory.states.front().posterior();
    for (std::size_t i = 0; i < sub.size(); ++i) {
      const auto exact = oracle.posterior(ds, sub[i], all);
      out.amortized.push_back(kl_diag_to_full(q0.item(i), exact));
      out.refined.push_back(kl_diag_to_full(r.posterior.item(i), exact));
    }
  });
  out.median_amortized = median(out.amortized);
  out.median_refined = median(out.refined);
  return out;
}

Tensor cross_generate(const ModelParams& params, const ModelConfig& cfg, Family family, const Dataset& ds,
                      std::span<const std::size_t> idx, std::size_t m, std::size_t n, bool sample, Rng& rng) {
  if (n >= cfg.num_modalities()) throw Error("unknown target modality");
  const auto x_m = ds.data.at(m).gather_rows(idx);
  const auto q = unimodal_posterior(params, cfg, family, m, x_m);
  Tensor z = q.mean;
  if (sample) {
    const auto eps = standard_normal(z.rows(), z.cols(), rng);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(q.log_std[i]) * eps[i];
  }
  return decode_mean(params, cfg, z)[n];
}

double cross_coherence(const ModelParams& params, const ModelConfig& cfg, Family family, const Dataset& ds,
                       std::span<const std::size_t> idx, std::size_t m, std::size_t n,
                       const RidgeClassifier& classifier) {
  if (ds.labels.empty()) throw Error("cross_coherence needs labelled data");
  if (classifier.input_dim() != cfg.modalities.at(n).dim) {
    throw Error("cross_coherence: classifier input does not match target modality " + std::to_string(n));
  }
  Rng unused(0);
  const auto generated = cross_generate(params, cfg, family, ds, idx, m, n, false, unused);
  return classifier.accuracy(generated, ds.labels_at(idx));
}

double cross_modal_frechet(const ModelParams& params, const ModelConfig& cfg, Family family, const Dataset& ds,
                           std::span<const std::size_t> idx, std::size_t m, std::size_t n, Rng& rng,
                           FeatureSpace space, const RidgeClassifier* classifier) {
  Tensor generated = cross_generate(params, cfg, family, ds, idx, m, n, true, rng);
  Tensor real = ds.data.at(n).gather_rows(idx);
  if (space == FeatureSpace::kClassifierScores) {
    if (classifier == nullptr) throw Error("classifier feature space needs a classifier");
    generated = classifier->scores(generated);
    real = classifier->scores(real);
  }
  return frechet_distance(fit_gaussian(generated), fit_gaussian(real));
}

// ---------------------------------------------------------------------------

const char* direction_name(Direction d) noexcept { return d == Direction::kHigher ? "higher" : "lower"; }

Direction metric_direction(const std::string& metric) {
  static const std::pair<const char*, Direction> kRegistry[] = {
      {"fid", Direction::kLower},          {"gap_", Direction::kLower},
      {"alignment_kl", Direction::kLower}, {"accuracy", Direction::kHigher},
      {"probe", Direction::kHigher},       {"coherence", Direction::kHigher},
      {"cosine", Direction::kHigher},      {"elbo", Direction::kHigher},
      {"poe_baseline", Direction::kHigher},
  };
  for (const auto& [prefix, dir] : kRegistry) {
    if (metric.rfind(prefix, 0) == 0) return dir;
  }
  throw Error("metric '" + metric + "' has no registered direction");
}

void write_metrics_csv(std::ostream& os, std::span<const MetricRow> rows) {
  os << kMetricsHeader << '\n';
  const auto old = os.precision(17);
  for (const auto& r : rows) {
    os << r.experiment << ',' << r.family << ',' << r.metric << ',' << direction_name(r.direction) << ','
       << r.value << ',' << r.seed << '\n';
  }
  os.precision(old);
}

}  // namespace miai

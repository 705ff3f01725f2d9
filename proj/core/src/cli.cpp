#include "miai/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "miai/error.hpp"

namespace miai {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const DivergenceError*>(&e) != nullptr) return kExitDivergence;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return kExitIo;
  if (dynamic_cast<const fs::filesystem_error*>(&e) != nullptr) return kExitIo;
  return kExitFailure;
}

std::string RunPaths::dataset() const { return (fs::path(root) / "dataset.bin").string(); }
std::string RunPaths::manifest() const { return (fs::path(root) / "manifest.txt").string(); }
std::string RunPaths::metrics() const { return (fs::path(root) / "metrics.csv").string(); }
std::string RunPaths::skipped() const { return (fs::path(root) / "metrics_skipped.csv").string(); }
std::string RunPaths::curves() const { return (fs::path(root) / "elbo_curves.csv").string(); }
std::string RunPaths::checkpoint(Family f, int stage) const {
  return (fs::path(root) / family_name(f) / ("stage" + std::to_string(stage) + ".ckpt")).string();
}
std::string RunPaths::train_report(Family f, int stage) const {
  return (fs::path(root) / family_name(f) / ("stage" + std::to_string(stage) + "_report.csv")).string();
}

RunPaths run_paths(const ExperimentConfig& cfg) { return RunPaths{cfg.out_dir}; }

std::size_t thread_cap() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MIAI_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("MIAI_THREADS must be a positive integer");
    cap = std::min(cap, static_cast<std::size_t>(v));
  }
  return cap;
}

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  ensure_dir(fs::path(path).parent_path().empty() ? fs::path(".") : fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

void close_checked(std::ofstream& out, const std::string& path) {
  out.close();
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

LoadedDataset require_dataset(const ExperimentConfig& cfg) {
  const auto path = run_paths(cfg).dataset();
  if (!fs::exists(path)) throw IoError("dataset not found: '" + path + "' (run gen-data first)");
  return load_dataset(path);
}

ModelConfig model_config(const ExperimentConfig& cfg, const Dataset& ds) {
  ModelConfig mc = cfg.model;
  mc.modalities = ds.modalities;
  return mc;
}

TrainConfig train_config(const ExperimentConfig& cfg, Family f, std::size_t threads) {
  TrainConfig tc = cfg.train;
  tc.family = f;
  tc.seed = cfg.component_seed(std::string("train:") + family_name(f));
  tc.threads = std::max<std::size_t>(1, threads);
  tc.config_digest = cfg.digest();
  tc.freeze_decoder = cfg.oracle_decoder;
  return tc;
}

Split run_split(const ExperimentConfig& cfg, const Dataset& ds) {
  return split_indices(ds.size(), cfg.component_seed("split"));
}

void write_report(const TrainReport& r, const std::string& path) {
  auto out = open_out(path);
  r.write_csv(out);
  close_checked(out, path);
}

}  // namespace

std::string cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto path = run_paths(cfg).dataset();
  const auto seed = cfg.effective_dataset_seed();
  std::optional<LinearGaussianOracle> oracle;
  Dataset ds;
  switch (cfg.dataset) {
    case DatasetKind::kLinearGaussian: {
      auto spec = cfg.linear;
      spec.seed = seed;
      auto data = gen_linear_gaussian(spec);
      ds = std::move(data.dataset);
      oracle = std::move(data.oracle);
      break;
    }
    case DatasetKind::kBitSplit: {
      auto spec = cfg.bits;
      spec.seed = seed;
      ds = gen_bitsplit(spec).dataset;
      break;
    }
    case DatasetKind::kIdx:
      ds = load_idx(cfg.idx_images, cfg.idx_labels);
      break;
  }
  ensure_dir(fs::path(cfg.out_dir));
  save_dataset(ds, oracle, path);
  log << "gen-data: " << ds.size() << " samples, " << ds.num_modalities() << " modalities -> " << path << '\n';
  return path;
}

std::string cmd_train(const ExperimentConfig& cfg, std::ostream& log, std::size_t threads) {
  cfg.validate();
  const auto paths = run_paths(cfg);
  const auto loaded = require_dataset(cfg);
  const auto& ds = loaded.dataset;
  const auto split = run_split(cfg, ds);
  const auto mc = model_config(cfg, ds);

  std::ostringstream manifest;
  manifest << "miai_version = " << kVersion << '\n'
           << "checkpoint_format = " << kCheckpointVersion << '\n'
           << "experiment = " << cfg.name << '\n'
           << "config_digest = " << hex64(cfg.digest()) << '\n'
           << "seed = " << cfg.seed << '\n'
           << "dataset = " << file_digest(paths.dataset()) << '\n';

  for (Family f : cfg.families) {
    const auto tc = train_config(cfg, f, threads);
    ensure_dir(fs::path(paths.checkpoint(f, 1)).parent_path());
    std::optional<ModelParams> overrides;
    if (cfg.oracle_decoder) {
      if (!loaded.oracle) throw ConfigError("model.oracle_decoder: dataset file carries no analytic oracle");
      overrides = oracle_decoder(model_for_family(mc, f), *loaded.oracle);
    }
    log << "train: " << family_name(f) << " stage 1 (" << tc.epochs << " epochs)\n";
    auto s1 = train_stage1(mc, tc, ds, split, overrides ? &*overrides : nullptr);
    log << "  selected epoch " << s1.report.selected_epoch << ", skipped steps " << s1.report.skipped_steps << ", "
        << std::fixed << std::setprecision(1) << s1.report.wall_seconds << "s\n"
        << std::defaultfloat;
    save_checkpoint(s1.checkpoint, paths.checkpoint(f, 1));
    write_report(s1.report, paths.train_report(f, 1));
    manifest << family_name(f) << ".stage1 = " << file_digest(paths.checkpoint(f, 1)) << '\n'
             << family_name(f) << ".stage1_report = " << file_digest(paths.train_report(f, 1)) << '\n';
    if (f == Family::kMixture) continue;
    log << "train: " << family_name(f) << " stage 2\n";
    auto s2 = train_stage2(mc, tc, s1.checkpoint, ds, split);
    log << "  selected epoch " << s2.report.selected_epoch << ", " << std::fixed << std::setprecision(1)
        << s2.report.wall_seconds << "s\n"
        << std::defaultfloat;
    save_checkpoint(s2.checkpoint, paths.checkpoint(f, 2));
    write_report(s2.report, paths.train_report(f, 2));
    manifest << family_name(f) << ".stage2 = " << file_digest(paths.checkpoint(f, 2)) << '\n'
             << family_name(f) << ".stage2_report = " << file_digest(paths.train_report(f, 2)) << '\n';
  }
  manifest << "manifest_digest = " << hex64(fnv1a64(manifest.str())) << '\n';
  auto out = open_out(paths.manifest());
  out << manifest.str();
  close_checked(out, paths.manifest());
  return paths.manifest();
}

// ---------------------------------------------------------------------------

namespace {

struct Skip {
  std::string family;
  std::string metric;
  std::string reason;
};

struct EvalSink {
  const ExperimentConfig& cfg;
  std::vector<MetricRow> rows;
  std::vector<Skip> skipped;

  void add(Family f, const std::string& metric, double value) {
    if (!std::isfinite(value)) {
      skip(f, metric, "non-finite value");
      return;
    }
    rows.push_back({cfg.name, family_name(f), metric, metric_direction(metric), value, cfg.seed});
  }
  void skip(Family f, const std::string& metric, const std::string& reason) {
    skipped.push_back({family_name(f), metric, reason});
  }
};

std::string mtag(std::size_t m) { return "m" + std::to_string(m); }

}  // namespace

std::vector<MetricRow> cmd_eval(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto paths = run_paths(cfg);
  const auto loaded = require_dataset(cfg);
  const auto& ds = loaded.dataset;
  const auto split = run_split(cfg, ds);
  const auto mc = model_config(cfg, ds);
  const auto M = ds.num_modalities();
  EvalSink sink{cfg, {}, {}};

  auto load_stage = [&](Family f, int stage) -> std::optional<Checkpoint> {
    const auto p = paths.checkpoint(f, stage);
    if (!fs::exists(p)) return std::nullopt;
    auto r = load_checkpoint(p, cfg.digest());
    for (const auto& w : r.warnings) log << "warning: " << w << '\n';
    return std::move(r.checkpoint);
  };

  // classifiers on real data of every modality, for coherence and probe features
  std::vector<std::optional<RidgeClassifier>> real_clf(M);
  if (!ds.labels.empty()) {
    for (std::size_t n = 0; n < M; ++n) {
      RidgeClassifier clf;
      clf.fit(ds.data[n].gather_rows(split.train), ds.labels_at(split.train), ds.num_classes, cfg.ridge);
      real_clf[n] = std::move(clf);
    }
  }

  std::ostringstream curve_csv;
  curve_csv << "experiment,family,modality,t,elbo\n";
  curve_csv.precision(17);

  std::optional<Checkpoint> alignment_stage1;
  if (cfg.has_family(Family::kAlignment)) alignment_stage1 = load_stage(Family::kAlignment, 1);

  EvalOptions eo;
  eo.elbo_samples = cfg.elbo_samples;

  for (Family f : cfg.families) {
    const auto fcfg = model_for_family(mc, f);
    const auto s1 = load_stage(f, 1);
    if (!s1) throw IoError("stage-1 checkpoint missing: '" + paths.checkpoint(f, 1) + "' (run train first)");
    log << "eval: " << family_name(f) << '\n';

    if (f == Family::kProposed) {
      eo.seed = cfg.component_seed("eval:elbo");
      for (std::size_t m = 0; m < M; ++m) {
        const auto curve = elbo_vs_T(s1->params, fcfg, ds, split.test, m, cfg.t_max, nullptr, nullptr, eo);
        for (std::size_t t = 0; t < curve.points.size(); ++t) {
          curve_csv << cfg.name << ',' << family_name(f) << ',' << m << ',' << t + 1 << ',' << curve.points[t] << '\n';
        }
        sink.add(f, "elbo_t1_" + mtag(m), curve.points.front());
        sink.add(f, "elbo_t" + std::to_string(cfg.t_max) + "_" + mtag(m), curve.points.back());
      }
      if (loaded.oracle) {
        eo.seed = cfg.component_seed("eval:gap");
        for (std::size_t m = 0; m < M; ++m) {
          bool first = true;
          for (int T : cfg.gap_steps) {
            const auto gap = amortization_gap(s1->params, fcfg, ds, *loaded.oracle, split.test, m, T, eo);
            if (first) sink.add(f, "gap_amortized_" + mtag(m), gap.median_amortized);
            first = false;
            sink.add(f, "gap_refined_T" + std::to_string(T) + "_" + mtag(m), gap.median_refined);
          }
        }
      } else {
        sink.skip(f, "gap_*", "dataset has no analytic posterior");
      }
    }
    if (f == Family::kAlignment) {
      eo.seed = cfg.component_seed("eval:elbo");
      sink.add(f, "poe_baseline_elbo", poe_elbo(s1->params, fcfg, ds, split.test, eo));
    }

    // unimodal-inference metrics; alignment and proposed use the lambda encoders
    std::optional<Checkpoint> uni = f == Family::kMixture ? s1 : load_stage(f, 2);
    if (!uni) {
      for (const char* name : {"probe_accuracy", "cosine", "fid", "coherence"}) {
        sink.skip(f, std::string(name) + "_*", "no stage-2 checkpoint (lambda encoders untrained)");
      }
      continue;
    }
    std::vector<Tensor> test_means(M);
    for (std::size_t m = 0; m < M; ++m) {
      test_means[m] = unimodal_posterior(uni->params, fcfg, f, m, ds.data[m].gather_rows(split.test)).mean;
    }
    if (!ds.labels.empty()) {
      for (std::size_t m = 0; m < M; ++m) {
        const auto train_means = unimodal_posterior(uni->params, fcfg, f, m, ds.data[m].gather_rows(split.train)).mean;
        sink.add(f, "probe_accuracy_" + mtag(m),
                 linear_probe(train_means, ds.labels_at(split.train), test_means[m], ds.labels_at(split.test),
                              ds.num_classes, cfg.ridge));
      }
    } else {
      sink.skip(f, "probe_accuracy_*", "dataset has no labels");
    }
    for (std::size_t a = 0; a < M; ++a) {
      for (std::size_t b = a + 1; b < M; ++b) {
        sink.add(f, "cosine_" + mtag(a) + "_" + mtag(b), cosine_similarity(test_means[a], test_means[b]));
      }
    }
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t n = 0; n < M; ++n) {
        if (m == n) continue;
        const auto dir = mtag(m) + "_to_" + mtag(n);
        Rng rng(cfg.component_seed("eval:fid:" + std::string(family_name(f)) + ":" + dir));
        if (cfg.fid_features == FeatureSpace::kClassifierScores && !real_clf[n]) {
          sink.skip(f, "fid_" + dir, "probe features need labels");
        } else {
          sink.add(f, "fid_" + dir,
                   cross_modal_frechet(uni->params, fcfg, f, ds, split.test, m, n, rng, cfg.fid_features,
                                       real_clf[n] ? &*real_clf[n] : nullptr));
        }
        if (real_clf[n]) {
          sink.add(f, "coherence_" + dir, cross_coherence(uni->params, fcfg, f, ds, split.test, m, n, *real_clf[n]));
        } else {
          sink.skip(f, "coherence_" + dir, "dataset has no labels");
        }
      }
    }
  }

  auto out = open_out(paths.metrics());
  write_metrics_csv(out, sink.rows);
  close_checked(out, paths.metrics());

  auto sk = open_out(paths.skipped());
  sk << "experiment,family,metric,reason\n";
  for (const auto& s : sink.skipped) {
    sk << cfg.name << ',' << s.family << ',' << s.metric << ',' << s.reason << '\n';
    log << "skipped: " << s.family << ' ' << s.metric << ": " << s.reason << '\n';
  }
  close_checked(sk, paths.skipped());

  if (cfg.has_family(Family::kProposed)) {
    auto cv = open_out(paths.curves());
    cv << curve_csv.str();
    close_checked(cv, paths.curves());
  }
  log << "eval: " << sink.rows.size() << " metric rows -> " << paths.metrics() << '\n';
  return sink.rows;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string format_value(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

int family_rank(const std::string& f) {
  if (f == "mixture") return 0;
  if (f == "alignment") return 1;
  if (f == "proposed") return 2;
  return 3;
}

}  // namespace

std::vector<MetricRow> parse_metrics_csv(std::istream& in, std::size_t& malformed) {
  std::vector<MetricRow> rows;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line == kMetricsHeader) continue;
    }
    const auto cells = split_csv_line(line);
    if (cells.size() != 6 || cells[0].empty() || cells[1].empty() || cells[2].empty()) {
      ++malformed;
      continue;
    }
    MetricRow r;
    r.experiment = cells[0];
    r.family = cells[1];
    r.metric = cells[2];
    if (cells[3] == "higher") r.direction = Direction::kHigher;
    else if (cells[3] == "lower") r.direction = Direction::kLower;
    else {
      ++malformed;
      continue;
    }
    try {
      std::size_t used = 0;
      r.value = std::stod(cells[4], &used);
      if (used != cells[4].size() || !std::isfinite(r.value)) throw std::invalid_argument("value");
      used = 0;
      r.seed = std::stoull(cells[5], &used);
      if (used != cells[5].size() || cells[5].front() == '-') throw std::invalid_argument("seed");
    } catch (const std::exception&) {
      ++malformed;
      continue;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricRow> dedup_metrics(std::span<const MetricRow> rows, std::size_t& duplicates) {
  std::set<std::tuple<std::string, std::string, std::string, std::uint64_t>> seen;
  std::vector<MetricRow> out;
  for (const auto& r : rows) {
    if (seen.insert({r.experiment, r.family, r.metric, r.seed}).second) {
      out.push_back(r);
    } else {
      ++duplicates;
    }
  }
  return out;
}

std::string format_report_table(std::span<const MetricRow> rows) {
  std::vector<std::string> families;
  for (const auto& r : rows) {
    if (std::find(families.begin(), families.end(), r.family) == families.end()) families.push_back(r.family);
  }
  std::stable_sort(families.begin(), families.end(),
                   [](const std::string& a, const std::string& b) { return family_rank(a) < family_rank(b); });

  struct Cell {
    double sum = 0.0;
    std::size_t n = 0;
  };
  struct Line {
    Direction direction = Direction::kHigher;
    std::map<std::string, Cell> cells;
  };
  std::map<std::pair<std::string, std::string>, Line> lines;  // (metric, experiment) keeps metrics grouped
  for (const auto& r : rows) {
    auto& line = lines[{r.metric, r.experiment}];
    line.direction = r.direction;
    auto& c = line.cells[r.family];
    c.sum += r.value;
    c.n += 1;
  }

  std::vector<std::vector<std::string>> table;
  table.push_back({"experiment", "metric", "dir"});
  for (const auto& f : families) table.front().push_back(f);
  for (const auto& [key, line] : lines) {
    std::optional<double> best;
    for (const auto& [f, c] : line.cells) {
      const double mean = c.sum / static_cast<double>(c.n);
      if (!best || (line.direction == Direction::kHigher ? mean > *best : mean < *best)) best = mean;
    }
    std::vector<std::string> row = {key.second, key.first, direction_name(line.direction)};
    for (const auto& f : families) {
      auto it = line.cells.find(f);
      if (it == line.cells.end()) {
        row.emplace_back("-");
        continue;
      }
      const double mean = it->second.sum / static_cast<double>(it->second.n);
      std::string cell = format_value(mean);
      if (it->second.n > 1) cell += " (n=" + std::to_string(it->second.n) + ")";
      if (line.cells.size() > 1 && mean == *best) cell += " *";
      row.push_back(cell);
    }
    table.push_back(std::move(row));
  }

  std::vector<std::size_t> width(table.front().size(), 0);
  for (const auto& row : table)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream os;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t i = 0; i < table[r].size(); ++i) {
      os << (i ? "  " : "") << std::left << std::setw(static_cast<int>(width[i])) << table[r][i];
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return os.str();
}

ReportSummary cmd_report(std::span<const std::string> metrics_csvs, const std::string& out_dir, std::ostream& log) {
  if (metrics_csvs.empty()) throw ConfigError("report needs at least one metrics CSV");
  ReportSummary summary;
  std::vector<MetricRow> all;
  // (experiment, family, modality) -> t -> elbo
  std::map<std::tuple<std::string, std::string, std::string>, std::map<int, double>> curves;
  std::map<std::string, double> baselines;
  for (const auto& path : metrics_csvs) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read metrics CSV '" + path + "'");
    auto rows = parse_metrics_csv(in, summary.malformed);
    all.insert(all.end(), rows.begin(), rows.end());
    const auto curve_path = fs::path(path).parent_path() / "elbo_curves.csv";
    std::ifstream cin(curve_path);
    if (!cin) continue;
    std::string line;
    std::getline(cin, line);
    while (std::getline(cin, line)) {
      const auto c = split_csv_line(line);
      try {
        if (c.size() != 5) throw std::invalid_argument("cells");
        curves[{c[0], c[1], c[2]}][std::stoi(c[3])] = std::stod(c[4]);
      } catch (const std::exception&) {
        ++summary.malformed;
      }
    }
  }
  const auto rows = dedup_metrics(all, summary.duplicates);
  for (const auto& r : rows) {
    if (r.metric == "poe_baseline_elbo") baselines[r.experiment] = r.value;
  }
  summary.rows = rows.size();
  summary.table = format_report_table(rows);

  ensure_dir(out_dir);
  const auto report_path = (fs::path(out_dir) / "report.txt").string();
  auto out = open_out(report_path);
  out << summary.table;
  if (summary.malformed > 0) out << "warning: " << summary.malformed << " malformed rows skipped\n";
  close_checked(out, report_path);

  const auto curve_dir = fs::path(out_dir) / "curves";
  for (const auto& [key, points] : curves) {
    const auto& [exp, fam, mod] = key;
    const auto path = (curve_dir / (exp + "_" + fam + "_m" + mod + ".dat")).string();
    auto cf = open_out(path);
    cf << "# t elbo\n" << std::setprecision(17);
    for (const auto& [t, v] : points) cf << t << ' ' << v << '\n';
    close_checked(cf, path);
    summary.curve_files.push_back(path);
    if (auto b = baselines.find(exp); b != baselines.end()) {
      const auto bpath = (curve_dir / (exp + "_poe_baseline.dat")).string();
      if (std::find(summary.curve_files.begin(), summary.curve_files.end(), bpath) == summary.curve_files.end()) {
        auto bf = open_out(bpath);
        bf << "# t elbo\n" << std::setprecision(17);
        for (const auto& [t, v] : points) bf << t << ' ' << b->second << '\n';
        close_checked(bf, bpath);
        summary.curve_files.push_back(bpath);
      }
    }
  }
  log << summary.table;
  if (summary.malformed > 0) log << "warning: " << summary.malformed << " malformed rows skipped\n";
  if (summary.duplicates > 0) log << "note: " << summary.duplicates << " duplicate rows dropped\n";
  return summary;
}

}  // namespace miai

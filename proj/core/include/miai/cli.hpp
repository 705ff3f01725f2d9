#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miai/config.hpp"

namespace miai {

inline constexpr const char* kVersion = "0.1.0";

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitIo = 4;

/// Exit code for an exception escaping a subcommand.
int exit_code_for(const std::exception& e) noexcept;

/// Output layout under the configured directory.
struct RunPaths {
  std::string root;
  std::string dataset() const;
  std::string manifest() const;
  std::string metrics() const;
  std::string skipped() const;
  std::string curves() const;
  std::string checkpoint(Family f, int stage) const;
  std::string train_report(Family f, int stage) const;
};

RunPaths run_paths(const ExperimentConfig& cfg);

/// Thread cap from MIAI_THREADS (falls back to the hardware count).
std::size_t thread_cap();

/// Writes the dataset cache. Returns its path.
std::string cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log);

/// Stage 1 for every configured family, stage 2 where it applies, and the
/// run manifest. Returns the manifest path.
std::string cmd_train(const ExperimentConfig& cfg, std::ostream& log, std::size_t threads = 1);

/// One MetricRow per computable (family, metric); the rest are listed with a
/// reason in the skipped file. Returns the rows written.
std::vector<MetricRow> cmd_eval(const ExperimentConfig& cfg, std::ostream& log);

struct ReportSummary {
  std::string table;
  std::size_t rows = 0;
  std::size_t malformed = 0;
  std::size_t duplicates = 0;
  std::vector<std::string> curve_files;
};

/// Builds the comparison table from metrics CSVs (plus the ELBO curve CSV next
/// to each one, when present) and writes report.txt and curve data to out_dir.
ReportSummary cmd_report(std::span<const std::string> metrics_csvs, const std::string& out_dir, std::ostream& log);

/// Parses one metrics CSV body. Malformed rows are counted, not returned.
std::vector<MetricRow> parse_metrics_csv(std::istream& in, std::size_t& malformed);

/// Text table: one line per (experiment, metric), one column per family; the
/// best value per line is marked with '*'.
std::string format_report_table(std::span<const MetricRow> rows);

/// Drops rows repeating an (experiment, family, metric, seed) key; keeps the first.
std::vector<MetricRow> dedup_metrics(std::span<const MetricRow> rows, std::size_t& duplicates);

}  // namespace miai

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repdrop/repmetrics.hpp"

namespace repdrop {

// shard_results.csv: shard,train_rep2,gen_rep2 (fractions)
struct ShardRow {
  int shard = 0;
  double train_rep2 = 0.0;
  double gen_rep2 = 0.0;
};

// sweep_results.csv: p,rep2,ppl (rep2 as a fraction)
struct SweepRow {
  double p = 0.0;
  double rep2 = 0.0;
  double ppl = 0.0;
};

void write_shard_results(const std::vector<ShardRow>& rows, const std::filesystem::path& path);
std::vector<ShardRow> read_shard_results(const std::filesystem::path& path);
void write_sweep_results(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
std::vector<SweepRow> read_sweep_results(const std::filesystem::path& path);

// Training-data rep-2 against generated rep-2, with the Spearman coefficient
// in the title when there are at least two points.
std::string render_scatter_svg(const std::vector<ShardRow>& rows);
// rep-2 (left axis) and PPL (right axis) against the dropout rate.
std::string render_sweep_svg(const std::vector<SweepRow>& rows);

// Multi-row Table-2 style CSV, rows sorted by name.
std::string metrics_table_csv(std::vector<MetricsReport> reports);

struct ReportResult {
  std::vector<std::string> warnings;
  std::vector<std::filesystem::path> written;
  nlohmann::json summary;
};

// Reads <dir>/shard_results.csv, <dir>/sweep_results.csv and every
// <dir>/*/metrics.json; writes summary.json, results.csv, shard_scatter.svg and
// sweep_curve.svg into <dir>/report. Missing inputs produce warnings.
ReportResult build_report(const std::filesystem::path& dir);

}  // namespace repdrop

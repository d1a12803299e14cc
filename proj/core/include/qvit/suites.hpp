#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qvit/model.hpp"
#include "qvit/run_config.hpp"

namespace qvit {

struct SuiteCell {
  std::string column;           // e.g. "2-2"
  std::vector<double> top1;     // one per seed
  double mean = 0.0;
  double stddev = 0.0;          // sample standard deviation, 0 for one seed
};

struct SuiteRow {
  std::string name;
  std::vector<SuiteCell> cells;
};

struct SuiteReport {
  std::string kind;  // "ablation" or "sensitivity"
  std::vector<SuiteRow> rows;

  const SuiteCell& cell(const std::string& row, const std::string& column) const;
  std::string to_json() const;
  // row,column,mean,std,seed values...
  std::string to_csv() const;
};

struct SuiteOptions {
  std::vector<std::pair<int, int>> bits;  // (W, A) columns
  int seeds = 3;
  std::string out_dir;
  // Called with a one-line status message per cell.
  std::function<void(const std::string&)> progress;
};

inline const std::vector<std::string> kAblationRows = {"Baseline", "+IRM", "+DGD", "+IRM+DGD"};

/// Student configuration for one ablation row.
RunConfig ablation_variant(const RunConfig& base, const std::string& row, int w_bits, int a_bits);

/// Trains every (row, bits, seed) cell, seeds base.train.seed + i. Each cell
/// writes checkpoint.qvit, log.jsonl and result.json under
/// out_dir/cells/<row>_<W>-<A>_s<seed>/; cells with a result.json are not
/// retrained. The report is written to out_dir/ablation.{json,csv}.
SuiteReport ablation_suite(const RunConfig& base, QViT& teacher, const DataSplits& data,
                           const SuiteOptions& opts);

/// Rows: all-quantized, one row per model part kept in float, all-float.
SuiteReport sensitivity_suite(const RunConfig& base, QViT& teacher, const DataSplits& data,
                              const SuiteOptions& opts);

std::string cell_directory(const std::string& out_dir, const std::string& row, int w_bits,
                           int a_bits, std::uint64_t seed);

}  // namespace qvit

#include "qvit/suites.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json_io.hpp"
#include "qvit/checkpoint.hpp"
#include "qvit/train.hpp"

namespace qvit {
namespace fs = std::filesystem;

namespace {

std::string bits_label(int w, int a) { return std::to_string(w) + "-" + std::to_string(a); }

std::string slug(const std::string& row) {
  std::string out;
  for (char c : row) {
    if (c == '+') {
      if (!out.empty()) out += '_';
    } else {
      out += c;
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

void finish_cell(SuiteCell& cell) {
  double s = 0.0;
  for (double v : cell.top1) s += v;
  cell.mean = cell.top1.empty() ? 0.0 : s / cell.top1.size();
  double ss = 0.0;
  for (double v : cell.top1) ss += (v - cell.mean) * (v - cell.mean);
  cell.stddev = cell.top1.size() > 1 ? std::sqrt(ss / (cell.top1.size() - 1)) : 0.0;
}

// Trains one cell or reads its stored result.
double run_cell(const RunConfig& cfg, QViT& teacher, const DataSplits& data, const fs::path& dir,
                const SuiteOptions& opts, const std::string& label) {
  const fs::path result = dir / "result.json";
  if (fs::exists(result)) {
    std::ifstream in(result);
    const auto j = json_io::Json::parse(in);
    const double top1 = j.at("top1").get<double>();
    if (opts.progress) opts.progress(label + ": reused top1=" + std::to_string(top1));
    return top1;
  }
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(cfg));
  QViT student(cfg.model, cfg.train.seed);
  const TrainResult r =
      train_student(student, teacher, data, cfg.train, cfg.distill, (dir / "log.jsonl").string());
  save_checkpoint(student, (dir / "checkpoint.qvit").string(), r.steps);
  json_io::Json j;
  j["top1"] = r.final_eval().top1;
  j["top5"] = r.final_eval().top5;
  j["steps"] = r.steps;
  // Written last: its presence marks the cell complete.
  write_text(result, j.dump(2));
  if (opts.progress) opts.progress(label + ": top1=" + std::to_string(r.final_eval().top1));
  return r.final_eval().top1;
}

template <typename VariantFn>
SuiteReport run_suite(const std::string& kind, const std::vector<std::string>& rows,
                      const RunConfig& base, QViT& teacher, const DataSplits& data,
                      const SuiteOptions& opts, VariantFn&& variant) {
  if (opts.bits.empty()) throw ConfigError(kind + ": the bits list is empty");
  if (opts.seeds < 1) throw ConfigError(kind + ": seeds must be >= 1");
  if (opts.out_dir.empty()) throw ConfigError(kind + ": out_dir is empty");
  SuiteReport report;
  report.kind = kind;
  for (const auto& row : rows) {
    SuiteRow r;
    r.name = row;
    for (const auto& [w, a] : opts.bits) {
      SuiteCell cell;
      cell.column = bits_label(w, a);
      for (int s = 0; s < opts.seeds; ++s) {
        RunConfig cfg = variant(base, row, w, a);
        cfg.train.seed = base.train.seed + static_cast<std::uint64_t>(s);
        const fs::path dir = cell_directory(opts.out_dir, row, w, a, cfg.train.seed);
        cell.top1.push_back(run_cell(cfg, teacher, data, dir, opts,
                                     row + " " + cell.column + " seed " +
                                         std::to_string(cfg.train.seed)));
      }
      finish_cell(cell);
      r.cells.push_back(std::move(cell));
    }
    report.rows.push_back(std::move(r));
  }
  fs::create_directories(opts.out_dir);
  write_text(fs::path(opts.out_dir) / (kind + ".json"), report.to_json());
  write_text(fs::path(opts.out_dir) / (kind + ".csv"), report.to_csv());
  return report;
}

}  // namespace

std::string cell_directory(const std::string& out_dir, const std::string& row, int w_bits,
                           int a_bits, std::uint64_t seed) {
  return (fs::path(out_dir) / "cells" /
          (slug(row) + "_" + bits_label(w_bits, a_bits) + "_s" + std::to_string(seed)))
      .string();
}

const SuiteCell& SuiteReport::cell(const std::string& row, const std::string& column) const {
  for (const auto& r : rows)
    if (r.name == row)
      for (const auto& c : r.cells)
        if (c.column == column) return c;
  throw IndexError("no suite cell " + row + " / " + column);
}

std::string SuiteReport::to_json() const {
  json_io::Json root;
  root["kind"] = kind;
  json_io::Json arr = json_io::Json::array();
  for (const auto& r : rows) {
    json_io::Json jr;
    jr["name"] = r.name;
    json_io::Json cells = json_io::Json::array();
    for (const auto& c : r.cells) {
      json_io::Json jc;
      jc["bits"] = c.column;
      jc["mean_top1"] = c.mean;
      jc["std_top1"] = c.stddev;
      jc["top1"] = c.top1;
      cells.push_back(std::move(jc));
    }
    jr["cells"] = std::move(cells);
    arr.push_back(std::move(jr));
  }
  root["rows"] = std::move(arr);
  return root.dump(2);
}

std::string SuiteReport::to_csv() const {
  std::ostringstream out;
  out << "row,bits,mean_top1,std_top1,top1_per_seed\n";
  for (const auto& r : rows) {
    for (const auto& c : r.cells) {
      out << r.name << ',' << c.column << ',' << c.mean << ',' << c.stddev << ',';
      for (std::size_t i = 0; i < c.top1.size(); ++i) out << (i ? ";" : "") << c.top1[i];
      out << '\n';
    }
  }
  return out.str();
}

RunConfig ablation_variant(const RunConfig& base, const std::string& row, int w_bits,
                           int a_bits) {
  RunConfig cfg = base;
  cfg.model.w_bits = w_bits;
  cfg.model.a_bits = a_bits;
  const bool irm = row == "+IRM" || row == "+IRM+DGD";
  const bool dgd = row == "+DGD" || row == "+IRM+DGD";
  if (!irm && !dgd && row != "Baseline") throw ConfigError("unknown ablation row '" + row + "'");
  cfg.model.irm_enabled = irm;
  const float lambda = base.distill.lambda_dgd > 0.0f ? base.distill.lambda_dgd : 1.0f;
  cfg.distill.lambda_dgd = dgd ? lambda : 0.0f;
  return cfg;
}

SuiteReport ablation_suite(const RunConfig& base, QViT& teacher, const DataSplits& data,
                           const SuiteOptions& opts) {
  return run_suite("ablation", kAblationRows, base, teacher, data, opts, ablation_variant);
}

SuiteReport sensitivity_suite(const RunConfig& base, QViT& teacher, const DataSplits& data,
                              const SuiteOptions& opts) {
  std::vector<std::string> rows = {"all-quantized"};
  for (auto p : kAllModelParts) rows.push_back("float-" + to_string(p));
  rows.push_back("all-float");
  auto variant = [](const RunConfig& b, const std::string& row, int w, int a) {
    RunConfig cfg = b;
    cfg.model.w_bits = w;
    cfg.model.a_bits = a;
    for (auto p : kAllModelParts) {
      const bool keep_float = row == "all-float" || row == "float-" + to_string(p);
      cfg.model = set_module_precision(cfg.model, to_string(p), keep_float);
    }
    return cfg;
  };
  return run_suite("sensitivity", rows, base, teacher, data, opts, variant);
}

}  // namespace qvit

#include "commands.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "qvit/checkpoint.hpp"
#include "qvit/diagnostics.hpp"
#include "qvit/gemm.hpp"
#include "qvit/run_config.hpp"
#include "qvit/suites.hpp"
#include "qvit/train.hpp"

namespace qvit::cli {
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

struct Manifest {
  std::string command;
  std::vector<std::string> files;
  Json extra = Json::object();

  void write(const fs::path& dir) const {
    Json j;
    j["command"] = command;
    j["files"] = files;
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream(dir / "manifest.json", std::ios::trunc) << j.dump(2) << '\n';
  }
};

void write_file(const fs::path& dir, const std::string& name, const std::string& text,
                Manifest& manifest) {
  std::ofstream out(dir / name, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + (dir / name).string() + "'");
  out << text;
  manifest.files.push_back(name);
}

bool parse_switch(const std::string& v, const char* flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw ConfigError(std::string(flag) + " must be 'on' or 'off', got '" + v + "'");
}

std::vector<std::pair<int, int>> parse_bits_list(const std::string& text) {
  std::vector<std::pair<int, int>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_bits(item));
  }
  if (out.empty()) throw ConfigError("--bits list is empty");
  return out;
}

struct Common {
  std::string config;
  std::string out;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "Run configuration (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--out", c.out, "Output directory (default: output_dir from the config)");
  cmd->add_option("--epochs", c.epochs, "Override train.epochs");
  cmd->add_option("--seed", c.seed, "Override train.seed");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.epochs) cfg.train.epochs = *c.epochs;
  if (c.seed) cfg.train.seed = *c.seed;
  cfg.validate();
  return cfg;
}

std::unique_ptr<QViT> load_teacher(const std::string& path, const ModelConfig& student) {
  if (path.empty()) throw ConfigError("no teacher checkpoint (--teacher or distill.teacher_checkpoint)");
  if (!fs::exists(path)) throw ConfigError("teacher checkpoint '" + path + "' does not exist");
  auto teacher = model_from_checkpoint(load_checkpoint(path));
  if (!teacher->config().same_architecture(student)) {
    throw ConfigError("teacher architecture does not match the student configuration");
  }
  return teacher;
}

int cmd_train_teacher(const Common& c, std::ostream& out) {
  RunConfig cfg = resolve(c);
  cfg.model.w_bits = cfg.model.a_bits = kPassthroughBits;
  cfg.model.irm_enabled = false;
  const DataSplits data = load_data(cfg.data);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  Manifest manifest{"train-teacher"};
  write_file(dir, "config.json", to_json(cfg), manifest);
  TrainConfig tc = cfg.train;
  if (!c.epochs && tc.teacher_epochs > 0) tc.epochs = tc.teacher_epochs;
  QViT model(cfg.model, cfg.train.seed);
  const TrainResult r = train_teacher(model, data, tc, (dir / "log.jsonl").string());
  manifest.files.push_back("log.jsonl");
  save_checkpoint(model, (dir / "checkpoint.qvit").string(), r.steps);
  manifest.files.push_back("checkpoint.qvit");
  manifest.extra["top1"] = r.final_eval().top1;
  manifest.extra["top5"] = r.final_eval().top5;
  manifest.write(dir);
  out << "teacher top1=" << r.final_eval().top1 << " top5=" << r.final_eval().top5
      << " checkpoint=" << (dir / "checkpoint.qvit").string() << '\n';
  return kOk;
}

struct StudentFlags {
  std::string teacher, bits, irm, dgd;
};

int cmd_train_student(const Common& c, const StudentFlags& f, std::ostream& out) {
  RunConfig cfg = resolve(c);
  if (!f.bits.empty()) std::tie(cfg.model.w_bits, cfg.model.a_bits) = parse_bits(f.bits);
  if (!cfg.model.quantized()) throw ConfigError("student needs --bits below 32-32");
  if (!f.irm.empty()) cfg.model.irm_enabled = parse_switch(f.irm, "--irm");
  if (!f.dgd.empty()) {
    const bool on = parse_switch(f.dgd, "--dgd");
    cfg.distill.lambda_dgd = on ? (cfg.distill.lambda_dgd > 0.0f ? cfg.distill.lambda_dgd : 1.0f)
                                : 0.0f;
  }
  if (!f.teacher.empty()) cfg.distill.teacher_checkpoint = f.teacher;
  cfg.validate();
  auto teacher = load_teacher(cfg.distill.teacher_checkpoint, cfg.model);
  const DataSplits data = load_data(cfg.data);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  Manifest manifest{"train-student"};
  write_file(dir, "config.json", to_json(cfg), manifest);
  QViT student(cfg.model, cfg.train.seed);
  const TrainResult r =
      train_student(student, *teacher, data, cfg.train, cfg.distill, (dir / "log.jsonl").string());
  manifest.files.push_back("log.jsonl");
  save_checkpoint(student, (dir / "checkpoint.qvit").string(), r.steps);
  manifest.files.push_back("checkpoint.qvit");
  manifest.extra["top1"] = r.final_eval().top1;
  manifest.extra["top5"] = r.final_eval().top5;
  manifest.write(dir);
  out << "student " << cfg.model.w_bits << "-" << cfg.model.a_bits
      << " irm=" << (cfg.model.irm_enabled ? "on" : "off")
      << " lambda_dgd=" << cfg.distill.lambda_dgd << " top1=" << r.final_eval().top1
      << " top5=" << r.final_eval().top5 << '\n';
  return kOk;
}

struct AnalyzeFlags {
  std::string kind, checkpoint, data, out = "analysis";
  int batch = 64;
};

int cmd_analyze(const AnalyzeFlags& f, std::ostream& out) {
  if (f.kind != "entropy" && f.kind != "hist" && f.kind != "attn-dist") {
    throw ConfigError("unknown analysis kind '" + f.kind + "' (expected entropy, hist or attn-dist)");
  }
  if (f.batch < 1) throw ConfigError("--batch must be >= 1");
  if (!fs::exists(f.checkpoint)) throw ConfigError("checkpoint '" + f.checkpoint + "' does not exist");
  RunConfig cfg = f.data.empty() ? RunConfig{} : load_run_config(f.data);
  auto model = model_from_checkpoint(load_checkpoint(f.checkpoint));
  const DataSplits data = load_data(cfg.data);
  const ChannelStats stats = channel_stats(data.train);
  std::vector<std::size_t> idx(std::min<std::size_t>(static_cast<std::size_t>(f.batch), data.test.n));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor images = normalize_and_augment(data.test, idx, stats, false, 0);

  const fs::path dir = f.out;
  fs::create_directories(dir);
  Manifest manifest{"analyze " + f.kind};
  if (f.kind == "entropy") {
    const EntropyReport report = entropy_report(*model, images);
    write_file(dir, "entropy.json", report.to_json() + "\n", manifest);
    out << "entropy entries=" << report.entries.size() << '\n';
  } else if (f.kind == "hist") {
    for (const auto& h : activation_histograms(*model, images)) {
      write_file(dir, "hist_" + h.tag + ".csv", h.to_csv(), manifest);
    }
    out << "histograms=" << manifest.files.size() << '\n';
  } else {
    NoGradGuard no_grad;
    const auto fwd = model->forward(images, false, true);
    const AttentionDistanceMatrix m = attention_distance(fwd.telemetry);
    write_file(dir, "attention_distance.csv", m.to_csv(), manifest);
    out << m.to_csv();
  }
  manifest.write(dir);
  return kOk;
}

struct SuiteFlags {
  std::string teacher, bits;
  int seeds = 3;
};

int cmd_suite(const std::string& kind, const Common& c, const SuiteFlags& f, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  SuiteOptions opts;
  opts.bits = parse_bits_list(f.bits);
  opts.seeds = f.seeds;
  if (opts.seeds < 1) throw ConfigError("--seeds must be >= 1");
  opts.out_dir = cfg.output_dir;
  opts.progress = [&](const std::string& msg) { out << msg << std::endl; };
  auto teacher = load_teacher(f.teacher.empty() ? cfg.distill.teacher_checkpoint : f.teacher,
                              cfg.model);
  const DataSplits data = load_data(cfg.data);
  const SuiteReport report = kind == "ablate" ? ablation_suite(cfg, *teacher, data, opts)
                                              : sensitivity_suite(cfg, *teacher, data, opts);
  Manifest manifest{kind};
  manifest.files = {report.kind + ".json", report.kind + ".csv", "cells/"};
  manifest.write(cfg.output_dir);
  out << report.to_csv();
  return kOk;
}

int cmd_stats(const std::string& arch, const std::string& bits, std::ostream& out) {
  ModelConfig cfg;
  if (arch == "deit-s" || arch == "deit-b" || arch == "tiny") {
    cfg = preset_config(arch);
  } else if (fs::exists(arch)) {
    std::ifstream in(arch);
    std::stringstream text;
    text << in.rdbuf();
    const auto j = Json::parse(text.str(), nullptr, false);
    if (j.is_discarded()) throw ConfigError("'" + arch + "' is not valid JSON");
    cfg = j.contains("model") ? parse_run_config(text.str()).model : parse_model_config(text.str());
  } else {
    throw ConfigError("unknown architecture '" + arch + "' (deit-s, deit-b, tiny or a config file)");
  }
  std::tie(cfg.w_bits, cfg.a_bits) = parse_bits(bits);
  const ModelStats st = model_stats(cfg);
  Json j;
  j["arch"] = arch;
  j["bits"] = bits;
  j["params"] = st.params;
  j["size_mb"] = st.size_mb;
  j["macs"] = st.macs;
  j["bops"] = st.bops;
  out << j.dump(2) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantization-aware training laboratory for vision transformers", "qvit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Intra-op threads (default: QVIT_THREADS or 1)");

  Common teacher_opts;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train the float teacher");
  add_common(teacher_cmd, teacher_opts);

  Common student_opts;
  StudentFlags student_flags;
  auto* student_cmd = app.add_subcommand("train-student", "Quantization-aware training of a student");
  add_common(student_cmd, student_opts);
  student_cmd->add_option("--teacher", student_flags.teacher, "Teacher checkpoint");
  student_cmd->add_option("--bits", student_flags.bits, "Weight-activation bits, e.g. 2-2");
  student_cmd->add_option("--irm", student_flags.irm, "on|off");
  student_cmd->add_option("--dgd", student_flags.dgd, "on|off");

  AnalyzeFlags analyze_flags;
  auto* analyze_cmd = app.add_subcommand("analyze", "Entropy, histogram or attention-distance reports");
  analyze_cmd->add_option("kind", analyze_flags.kind, "entropy | hist | attn-dist")->required();
  analyze_cmd->add_option("--checkpoint", analyze_flags.checkpoint, "Model checkpoint")->required();
  analyze_cmd->add_option("--data", analyze_flags.data, "Run configuration whose data section is used");
  analyze_cmd->add_option("--out", analyze_flags.out, "Output directory");
  analyze_cmd->add_option("--batch", analyze_flags.batch, "Evaluation samples");

  Common ablate_opts, sens_opts;
  SuiteFlags ablate_flags, sens_flags;
  ablate_flags.bits = "2-2,4-4";
  sens_flags.bits = "2-2";
  sens_flags.seeds = 1;
  auto* ablate_cmd = app.add_subcommand("ablate", "Baseline / +IRM / +DGD / +IRM+DGD table");
  add_common(ablate_cmd, ablate_opts);
  ablate_cmd->add_option("--teacher", ablate_flags.teacher, "Teacher checkpoint");
  ablate_cmd->add_option("--bits", ablate_flags.bits, "Comma-separated W-A list");
  ablate_cmd->add_option("--seeds", ablate_flags.seeds, "Seeds per cell");
  auto* sens_cmd = app.add_subcommand("sensitivity", "Keep one model part in float at a time");
  add_common(sens_cmd, sens_opts);
  sens_cmd->add_option("--teacher", sens_flags.teacher, "Teacher checkpoint");
  sens_cmd->add_option("--bits", sens_flags.bits, "Comma-separated W-A list");
  sens_cmd->add_option("--seeds", sens_flags.seeds, "Seeds per cell");

  std::string stats_arch = "deit-s", stats_bits = "32-32";
  auto* stats_cmd = app.add_subcommand("stats", "Parameter count, size and BOPs");
  stats_cmd->add_option("--arch", stats_arch, "deit-s | deit-b | tiny | config file");
  stats_cmd->add_option("--bits", stats_bits, "Weight-activation bits, e.g. 4-4");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  if (!argv.empty()) argv.pop_back();  // program name
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    if (threads > 0) kernels::set_thread_count(threads);
    if (*teacher_cmd) return cmd_train_teacher(teacher_opts, out);
    if (*student_cmd) return cmd_train_student(student_opts, student_flags, out);
    if (*analyze_cmd) return cmd_analyze(analyze_flags, out);
    if (*ablate_cmd) return cmd_suite("ablate", ablate_opts, ablate_flags, out);
    if (*sens_cmd) return cmd_suite("sensitivity", sens_opts, sens_flags, out);
    if (*stats_cmd) return cmd_stats(stats_arch, stats_bits, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace qvit::cli

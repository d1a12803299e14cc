#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qvit/data.hpp"
#include "qvit/distill.hpp"
#include "qvit/model.hpp"
#include "qvit/optim.hpp"

namespace qvit {

struct TrainConfig {
  int epochs = 15;
  // Epochs for train-teacher; 0 uses `epochs`.
  int teacher_epochs = 0;
  int batch_size = 32;
  double base_lr = 2e-4;
  double weight_decay = 0.0;
  OptimizerKind optimizer = OptimizerKind::Lamb;
  std::uint64_t seed = 0;
  // Max global gradient norm; 0 disables clipping.
  double grad_clip = 0.0;
  bool augment = true;
  int eval_batch_size = 256;

  // Throws ConfigError.
  void validate() const;
};

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t samples = 0;
};

// Fraction of rows whose label is among the min(k, C) largest logits. Ties
// are resolved toward the smaller class index.
double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k);

EvalResult evaluate(QViT& model, const Dataset& ds, const ChannelStats& stats,
                    int batch_size = 256);

struct EntropySummary {
  double q_nats = 0.0;  // mean over layers and heads of the discrete entropy of Q_a(q)
  double k_nats = 0.0;
  bool available = false;
};

struct EpochLog {
  int epoch = 0;  // 0 = evaluation before any update
  double lr = 0.0;
  double loss = 0.0;
  double dist_loss = 0.0;
  double dgd_loss = 0.0;
  double train_top1 = 0.0;
  EvalResult eval;
  EntropySummary entropy;

  // One JSON object, fixed key order, no timestamps.
  std::string to_json_line() const;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::int64_t steps = 0;
  const EvalResult& final_eval() const { return epochs.back().eval; }
};

/// Plain cross-entropy training of a float model.
TrainResult train_teacher(QViT& model, const DataSplits& data, const TrainConfig& cfg,
                          const std::string& log_path = {});

/// Quantization-aware training against a float teacher. The student's float
/// weights are copied from the teacher first; quantizers start fresh.
/// Throws ConfigError when the float architectures differ.
TrainResult train_student(QViT& student, QViT& teacher, const DataSplits& data,
                          const TrainConfig& cfg, const DistillationConfig& dcfg,
                          const std::string& log_path = {});

// Mean discrete entropy of the quantized q and k over a fixed batch.
EntropySummary entropy_summary(QViT& model, const Tensor& images);

}  // namespace qvit

#include "qvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "qvit/diagnostics.hpp"
#include "qvit/ops.hpp"

namespace qvit {
namespace {

constexpr std::size_t kEntropyBatch = 64;

class LogWriter {
 public:
  explicit LogWriter(const std::string& path) {
    if (!path.empty()) {
      out_.open(path, std::ios::trunc);
      if (!out_) throw std::runtime_error("cannot write training log '" + path + "'");
    }
  }
  void write(const EpochLog& e) {
    if (out_.is_open()) {
      out_ << e.to_json_line() << '\n';
      out_.flush();
    }
  }

 private:
  std::ofstream out_;
};

Tensor fixed_batch(const Dataset& ds, const ChannelStats& stats, std::size_t count) {
  std::vector<std::size_t> idx(std::min(count, ds.n));
  std::iota(idx.begin(), idx.end(), 0);
  return normalize_and_augment(ds, idx, stats, false, 0);
}

Optimizer make_optimizer(QViT& model, const TrainConfig& cfg) {
  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.weight_decay = cfg.weight_decay;
  return Optimizer(model.parameters(), oc);
}

std::int64_t total_steps(const Dataset& train, const TrainConfig& cfg) {
  const std::int64_t per_epoch = static_cast<std::int64_t>(train.n / cfg.batch_size);
  return per_epoch * cfg.epochs;
}

void check_data(const QViT& model, const DataSplits& data) {
  const auto& c = model.config();
  for (const Dataset* ds : {&data.train, &data.test}) {
    ds->validate();
    if (ds->height != c.image_size || ds->width != c.image_size || ds->channels != c.channels) {
      throw ConfigError("dataset images are " + std::to_string(ds->height) + "x" +
                        std::to_string(ds->width) + "x" + std::to_string(ds->channels) +
                        " but the model expects " + std::to_string(c.image_size) + "x" +
                        std::to_string(c.image_size) + "x" + std::to_string(c.channels));
    }
    if (ds->classes > c.classes) {
      throw ConfigError("dataset has " + std::to_string(ds->classes) +
                        " classes but the model only " + std::to_string(c.classes));
    }
  }
}

// Shared epoch loop; `step_fn` returns (total, dist, dgd) and the logits.
struct StepOutput {
  Tensor loss;
  Tensor logits;
  double dist = 0.0;
  double dgd = 0.0;
};

template <typename StepFn>
TrainResult run_training(QViT& model, const DataSplits& data, const TrainConfig& cfg,
                         const std::string& log_path, StepFn&& step_fn) {
  const ChannelStats stats = channel_stats(data.train);
  const Tensor entropy_images = fixed_batch(data.test, stats, kEntropyBatch);
  LogWriter log(log_path);
  TrainResult result;

  EpochLog first;
  first.epoch = 0;
  first.lr = cfg.base_lr;
  first.eval = evaluate(model, data.test, stats, cfg.eval_batch_size);
  first.entropy = entropy_summary(model, entropy_images);
  log.write(first);
  result.epochs.push_back(first);

  Optimizer opt = make_optimizer(model, cfg);
  const BatchIterator it(data.train, static_cast<std::size_t>(cfg.batch_size), cfg.seed, true);
  const std::int64_t total = total_steps(data.train, cfg);
  const auto params = model.parameters();
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(cfg.base_lr, step, total);
    double loss_sum = 0.0, dist_sum = 0.0, dgd_sum = 0.0, correct = 0.0;
    std::size_t seen = 0, batches = 0;
    const auto plan = it.batches(static_cast<std::uint64_t>(epoch - 1));
    for (std::size_t b = 0; b < plan.size(); ++b) {
      const auto& idx = plan[b];
      const std::uint64_t aug_seed =
          derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)), b);
      const Tensor images = normalize_and_augment(data.train, idx, stats, cfg.augment, aug_seed);
      const std::vector<int> labels = gather_labels(data.train, idx);
      StepOutput out = step_fn(images, labels);
      GradientMap grads = backward(out.loss);
      if (cfg.grad_clip > 0.0) clip_grad_norm(grads, params, cfg.grad_clip);
      opt.step(grads, cosine_lr(cfg.base_lr, step, total));
      model.clamp_parameters();
      ++step;
      loss_sum += out.loss.item();
      dist_sum += out.dist;
      dgd_sum += out.dgd;
      correct += topk_accuracy(out.logits, labels, 1) * static_cast<double>(labels.size());
      seen += labels.size();
      ++batches;
    }
    if (batches) {
      rec.loss = loss_sum / batches;
      rec.dist_loss = dist_sum / batches;
      rec.dgd_loss = dgd_sum / batches;
      rec.train_top1 = correct / static_cast<double>(seen);
    }
    rec.eval = evaluate(model, data.test, stats, cfg.eval_batch_size);
    rec.entropy = entropy_summary(model, entropy_images);
    log.write(rec);
    result.epochs.push_back(rec);
  }
  result.steps = step;
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (teacher_epochs < 0) throw ConfigError("train.teacher_epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("train.eval_batch_size must be >= 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train.base_lr must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0 (0 disables)");
}

double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("topk_accuracy: logits must be [B, C] with one label per row");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (b == 0) return 0.0;
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 1)), c);
  const auto v = logits.data();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw IndexError("label out of range");
    const float target = v[i * c + y];
    // Rank of the label: classes scoring higher, or equal with a smaller index.
    std::size_t rank = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const float s = v[i * c + j];
      if (s > target || (s == target && j < static_cast<std::size_t>(y))) ++rank;
    }
    if (rank < kk) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

EvalResult evaluate(QViT& model, const Dataset& ds, const ChannelStats& stats, int batch_size) {
  NoGradGuard no_grad;
  const BatchIterator it(ds, static_cast<std::size_t>(batch_size), 0, false);
  double top1 = 0.0, top5 = 0.0;
  EvalResult r;
  for (const auto& idx : it.batches(0)) {
    const Tensor images = normalize_and_augment(ds, idx, stats, false, 0);
    const Tensor logits = model.forward(images, false, false).logits;
    const auto labels = gather_labels(ds, idx);
    top1 += topk_accuracy(logits, labels, 1) * static_cast<double>(idx.size());
    top5 += topk_accuracy(logits, labels, 5) * static_cast<double>(idx.size());
    r.samples += idx.size();
  }
  if (r.samples) {
    r.top1 = top1 / static_cast<double>(r.samples);
    r.top5 = top5 / static_cast<double>(r.samples);
  }
  return r;
}

EntropySummary entropy_summary(QViT& model, const Tensor& images) {
  NoGradGuard no_grad;
  const auto out = model.forward(images, false, true);
  EntropySummary s;
  double q = 0.0, k = 0.0;
  std::size_t count = 0;
  for (const auto& layer : out.telemetry.layers) {
    if (layer.q_codes.codes.empty() || layer.k_codes.codes.empty()) return s;
    const std::size_t b = layer.q_codes.shape[0], h = layer.q_codes.shape[1];
    const std::size_t slice = layer.q_codes.shape[2] * layer.q_codes.shape[3];
    for (std::size_t hh = 0; hh < h; ++hh) {
      std::vector<std::int32_t> qc, kc;
      for (std::size_t bb = 0; bb < b; ++bb) {
        const std::size_t off = (bb * h + hh) * slice;
        qc.insert(qc.end(), layer.q_codes.codes.begin() + off,
                  layer.q_codes.codes.begin() + off + slice);
        kc.insert(kc.end(), layer.k_codes.codes.begin() + off,
                  layer.k_codes.codes.begin() + off + slice);
      }
      q += discrete_entropy(qc);
      k += discrete_entropy(kc);
      ++count;
    }
  }
  if (count) {
    s.q_nats = q / count;
    s.k_nats = k / count;
    s.available = true;
  }
  return s;
}

std::string EpochLog::to_json_line() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\":%d,\"lr\":%.9g,\"loss\":%.9g,\"dist_loss\":%.9g,\"dgd_loss\":%.9g,"
                "\"train_top1\":%.6f,\"top1\":%.6f,\"top5\":%.6f,\"eval_samples\":%zu",
                epoch, lr, loss, dist_loss, dgd_loss, train_top1, eval.top1, eval.top5,
                eval.samples);
  std::string line = buf;
  if (entropy.available) {
    std::snprintf(buf, sizeof buf, ",\"entropy_q_nats\":%.6f,\"entropy_k_nats\":%.6f",
                  entropy.q_nats, entropy.k_nats);
    line += buf;
  }
  line += "}";
  return line;
}

TrainResult train_teacher(QViT& model, const DataSplits& data, const TrainConfig& cfg,
                          const std::string& log_path) {
  cfg.validate();
  check_data(model, data);
  return run_training(model, data, cfg, log_path,
                      [&](const Tensor& images, const std::vector<int>& labels) {
                        StepOutput out;
                        out.logits = model.forward(images, true, false).logits;
                        out.loss = cross_entropy(out.logits, labels);
                        out.dist = out.loss.item();
                        return out;
                      });
}

TrainResult train_student(QViT& student, QViT& teacher, const DataSplits& data,
                          const TrainConfig& cfg, const DistillationConfig& dcfg,
                          const std::string& log_path) {
  cfg.validate();
  dcfg.validate();
  if (!student.config().same_architecture(teacher.config())) {
    throw ConfigError("student and teacher architectures differ");
  }
  check_data(student, data);
  student.copy_float_weights_from(teacher);

  // Calibrate quantizers on one un-augmented training batch.
  {
    const ChannelStats stats = channel_stats(data.train);
    NoGradGuard no_grad;
    student.forward(fixed_batch(data.train, stats, static_cast<std::size_t>(cfg.batch_size)), true,
                    false);
  }
  const bool use_dgd = dcfg.lambda_dgd > 0.0f;
  return run_training(student, data, cfg, log_path,
                      [&](const Tensor& images, const std::vector<int>& labels) {
                        const TeacherOutputs t = teacher_outputs(teacher, images);
                        auto fwd = student.forward(images, true, use_dgd);
                        const LossTerms terms =
                            total_loss(fwd.logits, labels, t, fwd.telemetry, dcfg);
                        StepOutput out;
                        out.loss = terms.total;
                        out.logits = fwd.logits;
                        out.dist = terms.dist;
                        out.dgd = terms.dgd;
                        return out;
                      });
}

}  // namespace qvit

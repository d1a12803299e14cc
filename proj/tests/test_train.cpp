#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "qvit/checkpoint.hpp"
#include "qvit/ops.hpp"
#include "qvit/optim.hpp"
#include "qvit/train.hpp"
#include "support/helpers.hpp"

using namespace qvit;
using namespace qvit::testing;
namespace fs = std::filesystem;

namespace {

GradientMap grads_of(const Tensor& loss) { return backward(loss); }

ModelConfig mini_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.channels = 1;
  c.depth = 1;
  c.heads = 2;
  c.embed_dim = 16;
  c.mlp_ratio = 2;
  c.classes = 4;
  return c;
}

DataSplits mini_data(std::uint64_t seed = 0) {
  DataSpec spec;
  spec.synthetic.image_size = 16;
  spec.synthetic.per_class = 16;
  spec.synthetic.seed = seed;
  spec.test_per_class = 8;
  return load_data(spec);
}

TrainConfig mini_train(int epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.base_lr = 1e-3;
  t.seed = 5;
  return t;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("qvit_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

}  // namespace

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  for (auto kind : {OptimizerKind::Lamb, OptimizerKind::Adam}) {
    Tensor w = random_tensor({3, 4}, 1, -1, 1, true);
    const auto before = w.to_vector();
    Optimizer opt({{"w", w}}, {.kind = kind});
    for (int i = 0; i < 5; ++i) opt.step(grads_of(mul_scalar(sum(w), 0.0f)), 0.1);
    EXPECT_EQ(w.to_vector(), before);
    EXPECT_EQ(opt.steps(), 5);
  }
}

TEST(Optimizer, ZeroNormsFallBackToAdam) {
  Tensor a = Tensor::zeros({4}, true), b = Tensor::zeros({4}, true);
  const Tensor g = Tensor::from({4}, {0.5f, -1.0f, 2.0f, 0.0f});
  Optimizer lamb({{"a", a}}, {.kind = OptimizerKind::Lamb});
  Optimizer adam({{"b", b}}, {.kind = OptimizerKind::Adam});
  lamb.step(grads_of(sum(mul(a, g))), 0.01);
  adam.step(grads_of(sum(mul(b, g))), 0.01);
  EXPECT_EQ(a.to_vector(), b.to_vector());
  EXPECT_EQ(lamb.last_trust_ratios().at("a"), 1.0);
}

TEST(Optimizer, LambConvergesOnQuadratic) {
  Tensor w = Tensor::from({1}, {1.0f}, true);
  Optimizer opt({{"w", w}}, {});
  for (int i = 0; i < 200; ++i) opt.step(grads_of(sum(square(w))), 0.1);
  EXPECT_LT(std::abs(w.item()), 1e-2);
}

TEST(Optimizer, AdamStepApproachesLearningRate) {
  Tensor w = Tensor::from({2}, {0.0f, 0.0f}, true);
  const Tensor g = Tensor::from({2}, {3.0f, -0.2f});
  Optimizer opt({{"w", w}}, {.kind = OptimizerKind::Adam});
  std::vector<float> prev = w.to_vector();
  for (int i = 0; i < 100; ++i) {
    opt.step(grads_of(sum(mul(w, g))), 0.01);
    const auto now = w.to_vector();
    if (i == 99) {
      EXPECT_NEAR(now[0] - prev[0], -0.01, 1e-5);
      EXPECT_NEAR(now[1] - prev[1], 0.01, 1e-5);
    }
    prev = now;
  }
}

TEST(Optimizer, UnitTrustLambMatchesAdam) {
  Tensor a = random_tensor({5}, 2, -1, 1, true), b = a.clone(true);
  const Tensor t = random_tensor({5}, 3);
  Optimizer lamb({{"a", a}}, {.kind = OptimizerKind::Lamb, .force_unit_trust = true});
  Optimizer adam({{"b", b}}, {.kind = OptimizerKind::Adam});
  for (int i = 0; i < 10; ++i) {
    lamb.step(grads_of(sum(square(sub(a, t)))), 0.05);
    adam.step(grads_of(sum(square(sub(b, t)))), 0.05);
  }
  EXPECT_EQ(a.to_vector(), b.to_vector());
}

TEST(Optimizer, TrustRatioIsClamped) {
  // Large weights, tiny update: raw ratio far above the clamp.
  Tensor w = Tensor::full({4}, 1000.0f, true);
  Optimizer opt({{"w", w}}, {});
  opt.step(grads_of(sum(w)), 1e-3);
  EXPECT_EQ(opt.last_trust_ratios().at("w"), 10.0);
}

TEST(Optimizer, NonFiniteGradientAbortsBeforeUpdate) {
  Tensor a = Tensor::from({2}, {1.0f, 2.0f}, true), b = Tensor::from({1}, {3.0f}, true);
  Optimizer opt({{"a", a}, {"bad", b}}, {});
  const float inf = std::numeric_limits<float>::infinity();
  GradientMap g = grads_of(add(sum(a), sum(mul(b, Tensor::from({1}, {1.0f})))));
  // Poison b's gradient.
  const_cast<Tensor*>(g.find(b))->mutable_data()[0] = inf;
  try {
    opt.step(g, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
  EXPECT_EQ(a.to_vector(), (std::vector<float>{1.0f, 2.0f}));
  EXPECT_EQ(opt.steps(), 0);
}

TEST(Optimizer, ParametersWithoutGradientStayConstant) {
  Tensor used = Tensor::from({2}, {1.0f, 2.0f}, true);
  Tensor unused = Tensor::from({2}, {5.0f, 6.0f}, true);
  Optimizer opt({{"used", used}, {"unused", unused}}, {});
  for (int i = 0; i < 3; ++i) opt.step(grads_of(sum(square(used))), 0.1);
  EXPECT_EQ(unused.to_vector(), (std::vector<float>{5.0f, 6.0f}));
  EXPECT_NE(used.to_vector(), (std::vector<float>{1.0f, 2.0f}));
}

TEST(Optimizer, ClipAndSchedule) {
  Tensor w = Tensor::from({2}, {0.0f, 0.0f}, true);
  GradientMap g = grads_of(sum(mul(w, Tensor::from({2}, {3.0f, 4.0f}))));
  const std::vector<NamedTensor> params{{"w", w}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, params, 1.0), 5.0);
  EXPECT_NEAR(g.at(w)[0], 0.6, 1e-6);
  EXPECT_NEAR(g.at(w)[1], 0.8, 1e-6);

  EXPECT_DOUBLE_EQ(cosine_lr(2e-4, 0, 100), 2e-4);
  EXPECT_NEAR(cosine_lr(2e-4, 50, 100), 1e-4, 1e-12);
  EXPECT_NEAR(cosine_lr(2e-4, 100, 100), 0.0, 1e-15);
  EXPECT_EQ(optimizer_from_string(to_string(OptimizerKind::Adam)), OptimizerKind::Adam);
  EXPECT_THROW(optimizer_from_string("sgd"), ConfigError);
}

TEST(TopK, Examples) {
  const int labels[] = {0, 1, 2};
  const Tensor onehot = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(topk_accuracy(onehot, labels, 1), 1.0);
  EXPECT_EQ(topk_accuracy(onehot, labels, 5), 1.0);

  const int two[] = {1, 0};
  const Tensor wrong = Tensor::from({2, 2}, {5, 0, 0, 5});
  EXPECT_EQ(topk_accuracy(wrong, two, 1), 0.0);
  EXPECT_EQ(topk_accuracy(wrong, two, 5), 1.0);

  // Ties go to the smaller index.
  const int tie[] = {1};
  EXPECT_EQ(topk_accuracy(Tensor::from({1, 2}, {1, 1}), tie, 1), 0.0);

  std::mt19937_64 rng(7);
  std::normal_distribution<float> n;
  std::uniform_int_distribution<int> cls(0, 9);
  std::vector<float> v(20000 * 10);
  for (auto& x : v) x = n(rng);
  std::vector<int> y(20000);
  for (auto& x : y) x = cls(rng);
  EXPECT_NEAR(topk_accuracy(Tensor::from({20000, 10}, v), y, 1), 0.1, 0.03);
  EXPECT_NEAR(topk_accuracy(Tensor::from({20000, 10}, v), y, 5), 0.5, 0.03);
}

TEST(Evaluate, CountsEverySample) {
  const DataSplits data = mini_data();
  QViT m(mini_config(), 8);
  const auto r = evaluate(m, data.test, channel_stats(data.train), 5);
  EXPECT_EQ(r.samples, data.test.n);
  EXPECT_GE(r.top5, r.top1);
  EXPECT_EQ(r.top5, 1.0);  // 4 classes
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  QViT m(quantized(small_config(), 4, 4, true), 9);
  randomize_model(m, 10);
  const Tensor img = random_tensor({3, 8, 8, 2}, 11);
  m.forward(img, true, false);
  const Checkpoint ck = snapshot(m, 42);
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.step, 42);
  EXPECT_EQ(back.config, m.config());
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  auto copy = model_from_checkpoint(back);
  EXPECT_EQ(copy->forward(img, false, false).logits.to_vector(),
            m.forward(img, false, false).logits.to_vector());
  auto qa = m.quantizers();
  auto qb = copy->quantizers();
  for (std::size_t i = 0; i < qa.size(); ++i)
    EXPECT_EQ(qa[i].quantizer->state(), qb[i].quantizer->state()) << qa[i].name;
}

TEST(Checkpoint, FileRoundTrip) {
  TempDir dir;
  QViT m(small_config(), 12);
  save_checkpoint(m, (dir / "m.qvit").string(), 3);
  const Checkpoint ck = load_checkpoint((dir / "m.qvit").string());
  EXPECT_EQ(ck.step, 3);
  QViT other(small_config(), 13);
  apply_checkpoint(other, ck);
  const Tensor img = random_tensor({1, 8, 8, 2}, 14);
  EXPECT_EQ(other.forward(img, false, false).logits.to_vector(),
            m.forward(img, false, false).logits.to_vector());
  QViT different(quantized(small_config(), 4, 4), 15);
  EXPECT_THROW(apply_checkpoint(different, ck), ConfigError);
  EXPECT_ANY_THROW(load_checkpoint((dir / "missing.qvit").string()));
}

TEST(Checkpoint, CorruptionIsDetected) {
  QViT m(small_config(), 16);
  const std::string bytes = serialize_checkpoint(snapshot(m));

  std::string flipped = bytes;
  flipped[bytes.size() - 3] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(flipped), IntegrityError);

  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 10)), IntegrityError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 10)), IntegrityError);

  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), FormatError);

  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(version), UnsupportedVersionError);

  EXPECT_EQ(fnv1a64("", 0), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cULL);
}

TEST(TrainTeacher, ZeroEpochsGivesEvaluationOnly) {
  const DataSplits data = mini_data();
  QViT m(mini_config(), 17);
  const auto before = serialize_checkpoint(snapshot(m));
  const auto r = train_teacher(m, data, mini_train(0));
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_EQ(r.epochs[0].epoch, 0);
  EXPECT_EQ(r.steps, 0);
  EXPECT_EQ(serialize_checkpoint(snapshot(m)), before);
}

TEST(TrainTeacher, RejectsMismatchedData) {
  const DataSplits data = mini_data();
  ModelConfig c = mini_config();
  c.image_size = 32;
  QViT m(c, 18);
  EXPECT_THROW(train_teacher(m, data, mini_train(1)), ConfigError);
  TrainConfig bad = mini_train(1);
  bad.base_lr = 0.0;
  QViT ok(mini_config(), 18);
  EXPECT_THROW(train_teacher(ok, data, bad), ConfigError);
}

TEST(TrainStudent, LogsBothLossComponents) {
  const DataSplits data = mini_data();
  QViT teacher(mini_config(), 19);
  train_teacher(teacher, data, mini_train(1));
  QViT student(quantized(mini_config(), 4, 4, true), 20);
  DistillationConfig d;
  d.lambda_dgd = 0.1f;
  const auto r = train_student(student, teacher, data, mini_train(1), d);
  ASSERT_EQ(r.epochs.size(), 2u);
  const auto& e = r.epochs[1];
  EXPECT_TRUE(std::isfinite(e.loss));
  EXPECT_GT(e.dist_loss, 0.0);
  EXPECT_GT(e.dgd_loss, 0.0);
  EXPECT_NEAR(e.loss, e.dist_loss + 0.1 * e.dgd_loss, 1e-5 * e.loss);
  EXPECT_TRUE(e.entropy.available);
  EXPECT_NE(e.to_json_line().find("\"dgd_loss\""), std::string::npos);
}

TEST(TrainStudent, ZeroEpochsCopiesTeacherWeights) {
  const DataSplits data = mini_data();
  QViT teacher(mini_config(), 21);
  randomize_model(teacher, 22);
  QViT student(quantized(mini_config(), 2, 2), 23);
  const auto r = train_student(student, teacher, data, mini_train(0), {});
  EXPECT_EQ(r.epochs.size(), 1u);
  for (const auto& p : student.parameters()) {
    if (is_scale_param(p.name)) continue;
    for (const auto& q : teacher.parameters())
      if (q.name == p.name) EXPECT_EQ(p.tensor.to_vector(), q.tensor.to_vector()) << p.name;
  }
  // Quantizers were calibrated fresh, not copied.
  for (const auto& nq : student.quantizers())
    if (!nq.quantizer->passthrough()) EXPECT_TRUE(nq.quantizer->state().initialized) << nq.name;
}

TEST(TrainStudent, RejectsArchitectureMismatch) {
  const DataSplits data = mini_data();
  QViT teacher(mini_config(), 24);
  ModelConfig other = quantized(mini_config(), 4, 4);
  other.embed_dim = 32;
  QViT student(other, 25);
  EXPECT_THROW(train_student(student, teacher, data, mini_train(1), {}), ConfigError);
}

TEST(Training, SameSeedGivesIdenticalLogAndCheckpoint) {
  TempDir dir;
  const DataSplits data = mini_data();
  QViT teacher(mini_config(), 26);
  train_teacher(teacher, data, mini_train(1));
  for (int run = 0; run < 2; ++run) {
    QViT student(quantized(mini_config(), 2, 2, true), 27);
    DistillationConfig d;
    d.lambda_dgd = 0.05f;
    train_student(student, teacher, data, mini_train(2), d,
                  (dir / ("log" + std::to_string(run))).string());
    save_checkpoint(student, (dir / ("ck" + std::to_string(run))).string());
  }
  EXPECT_EQ(read_file(dir / "log0"), read_file(dir / "log1"));
  EXPECT_EQ(read_file(dir / "ck0"), read_file(dir / "ck1"));
  EXPECT_FALSE(read_file(dir / "log0").empty());
}

TEST(Training, PassthroughQuantizersReduceToFloatTraining) {
  // The quantized model with every quantizer in passthrough follows the
  // float model step for step.
  ModelConfig q = quantized(mini_config(), 2, 2);
  q.first_last_bits = kPassthroughBits;
  for (auto p : kAllModelParts) q = set_module_precision(q, to_string(p), true);
  QViT a(q, 28), b(mini_config(), 28);
  const DataSplits data = mini_data();
  const ChannelStats stats = channel_stats(data.train);
  Optimizer oa(a.parameters(), {}), ob(b.parameters(), {});
  const BatchIterator it(data.train, 16, 1, true);
  const auto plan = it.batches(0);
  for (int step = 0; step < 10; ++step) {
    const auto& idx = plan[std::size_t(step) % plan.size()];
    const Tensor img = normalize_and_augment(data.train, idx, stats, true, std::uint64_t(step));
    const auto labels = gather_labels(data.train, idx);
    const Tensor la = cross_entropy(a.forward(img, true, false).logits, labels);
    const Tensor lb = cross_entropy(b.forward(img, true, false).logits, labels);
    EXPECT_NEAR(la.item(), lb.item(), 1e-5) << step;
    oa.step(backward(la), 1e-3);
    ob.step(backward(lb), 1e-3);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.weight_decay = -1;
  EXPECT_THROW(t.validate(), ConfigError);
}

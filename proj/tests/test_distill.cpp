#include <gtest/gtest.h>

#include <cmath>

#include "qvit/distill.hpp"
#include "qvit/gradcheck.hpp"
#include "qvit/ops.hpp"
#include "support/helpers.hpp"

using namespace qvit;
using namespace qvit::testing;

namespace {

double oracle_similarity_frobenius(const std::vector<std::vector<double>>& a,
                                   const std::vector<std::vector<double>>& b) {
  auto gram = [](const std::vector<std::vector<double>>& x) {
    std::vector<std::vector<double>> g(x.size(), std::vector<double>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
      double n = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        for (std::size_t c = 0; c < x[i].size(); ++c) g[i][j] += x[i][c] * x[j][c];
        n += g[i][j] * g[i][j];
      }
      for (auto& v : g[i]) v /= std::sqrt(n);
    }
    return g;
  };
  const auto ga = gram(a), gb = gram(b);
  double s = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i)
    for (std::size_t j = 0; j < ga.size(); ++j) s += (ga[i][j] - gb[i][j]) * (ga[i][j] - gb[i][j]);
  return std::sqrt(s);
}

}  // namespace

TEST(HardLabel, Examples) {
  EXPECT_EQ(hard_label(Tensor::from({1, 2}, {0.1f, 0.9f})), (std::vector<int>{1}));
  EXPECT_EQ(hard_label(Tensor::from({1, 2}, {5.0f, 5.0f})), (std::vector<int>{0}));
  EXPECT_EQ(hard_label(Tensor::from({3, 3}, {0, 0, 1, 1, 0, 0, 0, 1, 0})),
            (std::vector<int>{2, 0, 1}));
}

TEST(DistLoss, Examples) {
  const int y0[] = {0}, y1[] = {1};
  const Tensor uniform = Tensor::from({1, 2}, {0.3f, 0.3f});
  EXPECT_NEAR(dist_loss(uniform, y0, Tensor::from({1, 2}, {0, 9})).item(), std::log(2.0), 1e-6);

  const Tensor z = Tensor::from({1, 3}, {0.2f, -1.0f, 2.0f});
  EXPECT_NEAR(dist_loss(z, y1, Tensor::from({1, 3}, {0, 5, 1})).item(),
              cross_entropy(z, y1).item(), 1e-6);

  const Tensor zq = Tensor::from({1, 2}, {0.0f, float(std::log(3.0))});
  const double expect = 0.5 * std::log(4.0) + 0.5 * std::log(4.0 / 3.0);
  EXPECT_NEAR(dist_loss(zq, y0, Tensor::from({1, 2}, {0, 1})).item(), expect, 1e-6);
  EXPECT_NEAR(expect, 0.8370, 1e-4);
}

TEST(DistLoss, GradientReachesStudentOnly) {
  const int y[] = {0, 2};
  const Tensor zq = random_tensor({2, 3}, 1, -1, 1, true);
  const Tensor zt = random_tensor({2, 3}, 2, -1, 1, true);
  const auto g = backward(dist_loss(zq, y, zt));
  EXPECT_NE(g.find(zq), nullptr);
  EXPECT_EQ(g.find(zt), nullptr);
  const int bad[] = {0, 3};
  EXPECT_THROW(dist_loss(zq, bad, zt), IndexError);
}

TEST(SimilarityMatrix, Examples) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(similarity_matrix(eye, false).to_vector(), eye.to_vector());
  EXPECT_EQ(similarity_matrix(eye, true).to_vector(), eye.to_vector());

  const Tensor ones = Tensor::full({2, 2}, 1.0f);
  EXPECT_EQ(similarity_matrix(ones, false).to_vector(), (std::vector<float>{2, 2, 2, 2}));
  for (float v : similarity_matrix(ones, true).to_vector()) EXPECT_NEAR(v, 1.0 / std::sqrt(2.0), 1e-7);

  const Tensor act = gaussian_tensor({5, 4}, 3);
  const Tensor raw = similarity_matrix(act, false);
  const Tensor rot = similarity_matrix(matmul(act, random_rotation(4, 4)), false);
  for (std::size_t i = 0; i < raw.numel(); ++i) EXPECT_NEAR(raw[i], rot[i], 1e-5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_FLOAT_EQ(raw[i * 5 + j], raw[j * 5 + i]);

  const Tensor norm = similarity_matrix(act, true);
  for (std::size_t i = 0; i < 5; ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < 5; ++j) n += norm[i * 5 + j] * norm[i * 5 + j];
    EXPECT_NEAR(n, 1.0, 1e-5);
  }
}

TEST(SimilarityMatrix, ZeroRowsStayZero) {
  const Tensor act = Tensor::from({2, 2}, {0, 0, 1, 2});
  const Tensor g = similarity_matrix(act, true);
  EXPECT_EQ(g[0], 0.0f);
  EXPECT_EQ(g[1], 0.0f);
  EXPECT_EQ(g[2], 0.0f);
  EXPECT_FLOAT_EQ(g[3], 1.0f);
}

TEST(DgdLoss, Examples) {
  const Tensor eye = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
  auto same = dgd_pair(eye, eye, eye, eye);
  EXPECT_EQ(dgd_loss(same.student, same.teacher, {}).item(), 0.0f);

  // Difference of the matrices I and [[0,1],[1,0]] has Frobenius norm 2.
  const Tensor g = sub(Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 2}, {0, 1, 1, 0}));
  EXPECT_FLOAT_EQ(frobenius_norm_last2(g).item(), 2.0f);

  // Student rows [1,1],[1,1] against the identity, q term only.
  const Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0f);
  auto p = dgd_pair(ones, eye, eye, eye);
  const double expect = oracle_similarity_frobenius({{1, 1}, {1, 1}}, {{1, 0}, {0, 1}});
  EXPECT_NEAR(dgd_loss(p.student, p.teacher, {}).item(), expect, 1e-6);
  EXPECT_NEAR(expect, std::sqrt(4.0 - 2.0 * std::sqrt(2.0)), 1e-12);

  // Unnormalized: ||I - [[2,2],[2,2]]||_F = sqrt(1 + 4 + 4 + 1).
  DistillationConfig raw;
  raw.use_normalized = false;
  EXPECT_NEAR(dgd_loss(p.student, p.teacher, raw).item(), std::sqrt(10.0), 1e-6);
}

TEST(DgdLoss, MatchesOracleOnRandomBatches) {
  const Tensor sq = gaussian_tensor({3, 2, 4, 5}, 5), sk = gaussian_tensor({3, 2, 4, 5}, 6);
  const Tensor tq = gaussian_tensor({3, 2, 4, 5}, 7), tk = gaussian_tensor({3, 2, 4, 5}, 8);
  auto p = dgd_pair(sq, sk, tq, tk);
  auto slice = [](const Tensor& x, std::size_t b, std::size_t h) {
    std::vector<std::vector<double>> m(4, std::vector<double>(5));
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 5; ++c) m[t][c] = x[((b * 2 + h) * 4 + t) * 5 + c];
    return m;
  };
  double expect = 0.0;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      expect += oracle_similarity_frobenius(slice(tq, b, h), slice(sq, b, h)) +
                oracle_similarity_frobenius(slice(tk, b, h), slice(sk, b, h));
  EXPECT_NEAR(dgd_loss(p.student, p.teacher, {}).item(), expect / 3.0, 1e-5);
}

TEST(DgdLoss, PropertiesOnRandomInstances) {
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Shape shape{2, 2, 5, 4};
    const Tensor sq = gaussian_tensor(shape, 100 + i), sk = gaussian_tensor(shape, 200 + i);
    const Tensor tq = gaussian_tensor(shape, 300 + i), tk = gaussian_tensor(shape, 400 + i);
    auto base = dgd_pair(sq, sk, tq, tk);
    const float loss = dgd_loss(base.student, base.teacher, {}).item();
    EXPECT_GT(loss, 0.0f);

    auto equal = dgd_pair(tq, tk, tq, tk);
    EXPECT_EQ(dgd_loss(equal.student, equal.teacher, {}).item(), 0.0f);

    const Tensor r = random_rotation(4, 500 + i);
    auto rotated = dgd_pair(matmul(sq, r), sk, tq, tk);
    EXPECT_NEAR(dgd_loss(rotated.student, rotated.teacher, {}).item(), loss, 1e-4 * loss);
    auto rotated_k = dgd_pair(sq, matmul(sk, r), tq, tk);
    EXPECT_NEAR(dgd_loss(rotated_k.student, rotated_k.teacher, {}).item(), loss, 1e-4 * loss);

    const float c = 0.1f + 0.05f * float(i);
    auto scaled = dgd_pair(mul_scalar(sq, c), mul_scalar(sk, 2.0f), tq, tk);
    EXPECT_NEAR(dgd_loss(scaled.student, scaled.teacher, {}).item(), loss, 1e-4 * loss);
  }
}

TEST(DgdLoss, Contracts) {
  const Tensor x = gaussian_tensor({1, 1, 2, 2}, 9);
  Telemetry empty;
  TeacherOutputs t;
  t.q = {x};
  t.k = {x};
  EXPECT_THROW(dgd_loss(empty, t, {}), ContractError);
  Telemetry missing;
  missing.layers.emplace_back();
  EXPECT_THROW(dgd_loss(missing, t, {}), ContractError);
}

TEST(TotalLoss, Composition) {
  const Shape shape{2, 2, 3, 4};
  const Tensor sq = gaussian_tensor(shape, 10), sk = gaussian_tensor(shape, 11);
  auto p = dgd_pair(sq, sk, gaussian_tensor(shape, 12), gaussian_tensor(shape, 13));
  p.teacher.logits = random_tensor({2, 3}, 14);
  const Tensor zq = random_tensor({2, 3}, 15);
  const int y[] = {2, 0};

  DistillationConfig zero;
  zero.lambda_dgd = 0.0f;
  const auto only = total_loss(zq, y, p.teacher, p.student, zero);
  EXPECT_EQ(only.total.item(), dist_loss(zq, y, p.teacher.logits).item());
  EXPECT_EQ(only.dgd, 0.0f);

  DistillationConfig half;
  half.lambda_dgd = 0.5f;
  const auto both = total_loss(zq, y, p.teacher, p.student, half);
  EXPECT_NEAR(both.total.item(), both.dist + 0.5f * both.dgd, 1e-6);
  EXPECT_GT(both.dgd, 0.0f);

  DistillationConfig bad;
  bad.lambda_dgd = -1.0f;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TotalLoss, VanishesForPerfectStudent) {
  const Shape shape{1, 1, 3, 2};
  const Tensor q = gaussian_tensor(shape, 16), k = gaussian_tensor(shape, 17);
  auto p = dgd_pair(q, k, q, k);
  p.teacher.logits = Tensor::from({1, 3}, {0, 40, 0});
  const int y[] = {1};
  const auto t = total_loss(Tensor::from({1, 3}, {0, 40, 0}), y, p.teacher, p.student, {});
  EXPECT_NEAR(t.total.item(), 0.0, 1e-6);
}

TEST(TeacherOutputs, DetachedAndShapedLikeStudentTelemetry) {
  QViT teacher(small_config(), 18);
  QViT student(quantized(small_config(), 4, 4, true), 19);
  const Tensor img = random_tensor({3, 8, 8, 2}, 20);
  const TeacherOutputs t = teacher_outputs(teacher, img);
  const auto s = student.forward(img, true, true);
  ASSERT_EQ(t.q.size(), s.telemetry.layers.size());
  for (std::size_t l = 0; l < t.q.size(); ++l) {
    EXPECT_EQ(t.q[l].shape(), s.telemetry.layers[l].q.shape());
    EXPECT_EQ(t.k[l].shape(), s.telemetry.layers[l].k.shape());
    EXPECT_FALSE(t.q[l].requires_grad());
  }
  EXPECT_FALSE(t.logits.requires_grad());
  EXPECT_EQ(t.logits.shape(), (Shape{3, 3}));
}

TEST(TotalLoss, SurrogateGradientsMatchFiniteDifferences) {
  QuantModeGuard surrogate(QuantMode::Surrogate);
  QViT teacher(small_config(), 21);
  randomize_model(teacher, 22, 0.15f);
  QViT student(quantized(small_config(), 4, 4, true), 23);
  randomize_model(student, 24, 0.15f);
  const Tensor img = random_tensor({2, 8, 8, 2}, 25);
  const int y[] = {0, 2};
  const TeacherOutputs t = teacher_outputs(teacher, img);
  calibrate_off_kinks(student, img);
  DistillationConfig cfg;
  cfg.lambda_dgd = 0.5f;
  std::vector<Tensor> weights, irm;
  for (const auto& p : student.parameters()) {
    if (is_scale_param(p.name)) continue;
    (p.name.find("irm.") != std::string::npos ? irm : weights).push_back(p.tensor);
  }
  auto loss = [&] {
    const auto o = student.forward(img, false, true);
    return total_loss(o.logits, y, t, o.telemetry, cfg).total;
  };
  EXPECT_LT(projected_rel_error(joint_grad_check(loss, weights, 1e-3f, 26, 8)), 1e-2);
  EXPECT_LT(projected_rel_error(joint_grad_check(loss, irm, 1e-3f, 27, 8)), 1e-2);
}

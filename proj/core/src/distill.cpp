#include "qvit/distill.hpp"

#include <cmath>

#include "qvit/ops.hpp"

namespace qvit {

void DistillationConfig::validate() const {
  if (!(lambda_dgd >= 0.0f) || !std::isfinite(lambda_dgd)) {
    throw ConfigError("lambda_dgd must be a finite non-negative number");
  }
}

TeacherOutputs teacher_outputs(QViT& teacher, const Tensor& images) {
  NoGradGuard no_grad;
  auto out = teacher.forward(images, false, true);
  TeacherOutputs t;
  t.logits = out.logits.detach();
  for (auto& layer : out.telemetry.layers) {
    t.q.push_back(layer.raw_q.detach());
    t.k.push_back(layer.raw_k.detach());
  }
  return t;
}

std::vector<int> hard_label(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) == 0) {
    throw DimensionError("hard_label expects [B, C] with C >= 1");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  const auto v = logits.data();
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (v[i * c + j] > v[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Tensor dist_loss(const Tensor& student_logits, std::span<const int> labels,
                 const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("dist_loss: student " + shape_str(student_logits.shape()) +
                         " vs teacher " + shape_str(teacher_logits.shape()));
  }
  const std::vector<int> yt = hard_label(teacher_logits);
  return mul_scalar(add(cross_entropy(student_logits, labels), cross_entropy(student_logits, yt)),
                    0.5f);
}

Tensor similarity_matrix(const Tensor& act, bool normalized) {
  if (act.rank() < 2) throw DimensionError("similarity_matrix expects [..., T, d]");
  const Tensor g = matmul_nt(act, act);
  return normalized ? l2_normalize_lastdim(g) : g;
}

Tensor dgd_loss(const Telemetry& student, const TeacherOutputs& teacher,
                const DistillationConfig& cfg) {
  if (student.layers.empty() || student.layers.size() != teacher.q.size() ||
      teacher.q.size() != teacher.k.size()) {
    throw ContractError("dgd_loss: student telemetry and teacher activations must cover every layer");
  }
  Tensor total;
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    const auto& s = student.layers[l];
    if (!s.q.defined() || !s.k.defined()) {
      throw ContractError("dgd_loss: telemetry missing q/k for layer " + std::to_string(l));
    }
    const std::pair<const Tensor*, const Tensor*> pairs[] = {{&s.q, &teacher.q[l]},
                                                             {&s.k, &teacher.k[l]}};
    for (auto [stud, teach] : pairs) {
      if (stud->shape() != teach->shape() || stud->rank() != 4) {
        throw ContractError("dgd_loss: shape mismatch at layer " + std::to_string(l));
      }
      // [B, H] Frobenius norms -> sum over heads, mean over batch.
      const Tensor diff = sub(similarity_matrix(*teach, cfg.use_normalized),
                              similarity_matrix(*stud, cfg.use_normalized));
      const Tensor norms = frobenius_norm_last2(diff);
      const Tensor term =
          mul_scalar(sum(norms), 1.0f / static_cast<float>(stud->dim(0)));
      total = total.defined() ? add(total, term) : term;
    }
  }
  return total;
}

LossTerms total_loss(const Tensor& student_logits, std::span<const int> labels,
                     const TeacherOutputs& teacher, const Telemetry& student,
                     const DistillationConfig& cfg) {
  cfg.validate();
  LossTerms out;
  const Tensor dist = dist_loss(student_logits, labels, teacher.logits);
  out.dist = dist.item();
  if (cfg.lambda_dgd == 0.0f) {
    out.total = dist;
    return out;
  }
  const Tensor dgd = dgd_loss(student, teacher, cfg);
  out.dgd = dgd.item();
  out.total = add(dist, mul_scalar(dgd, cfg.lambda_dgd));
  return out;
}

}  // namespace qvit

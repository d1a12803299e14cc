#pragma once

#include <span>
#include <string>
#include <vector>

#include "qvit/model.hpp"
#include "qvit/tensor.hpp"

namespace qvit {

struct DistillationConfig {
  float lambda_dgd = 1.0f;
  bool use_normalized = true;
  std::string teacher_checkpoint;

  // Throws ConfigError.
  void validate() const;
};

// Detached teacher activations: logits [B, C] and the float q, k of every
// layer, [B, H, T, d] each.
struct TeacherOutputs {
  Tensor logits;
  std::vector<Tensor> q;
  std::vector<Tensor> k;
};

TeacherOutputs teacher_outputs(QViT& teacher, const Tensor& images);

// Row argmax, ties to the smallest index.
std::vector<int> hard_label(const Tensor& logits);

// 0.5 * CE(z_q, y) + 0.5 * CE(z_q, argmax z_t). Gradient reaches z_q only.
Tensor dist_loss(const Tensor& student_logits, std::span<const int> labels,
                 const Tensor& teacher_logits);

/// act[..., T, d] -> act act^T, optionally with every row scaled to unit l2
/// norm (all-zero rows stay zero).
Tensor similarity_matrix(const Tensor& act, bool normalized = true);

/// Sum over layers and heads, mean over the batch, of
/// ||G_T - G_S||_F for q plus the same for k.
Tensor dgd_loss(const Telemetry& student, const TeacherOutputs& teacher,
                const DistillationConfig& cfg);

struct LossTerms {
  Tensor total;
  float dist = 0.0f;
  float dgd = 0.0f;
};

// dist_loss + lambda_dgd * dgd_loss. The DGD term is skipped when
// lambda_dgd is 0.
LossTerms total_loss(const Tensor& student_logits, std::span<const int> labels,
                     const TeacherOutputs& teacher, const Telemetry& student,
                     const DistillationConfig& cfg);

}  // namespace qvit

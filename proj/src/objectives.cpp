#include "germtl/objectives.hpp"

#include "germtl/diagnostics.hpp"
#include "germtl/errors.hpp"
#include "germtl/tokenizer.hpp"

namespace germtl {

const Tensor& LossBundle::task(Task t) const {
  switch (t) {
    case Task::Toxic:
      return l_toxic;
    case Task::Engaging:
      return l_engage;
    case Task::FactClaiming:
      return l_fact;
  }
  return l_multi;
}

Tensor task_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw DimensionError("task_loss: expected [batch x 2] logits, got " +
                         shape_str(logits.shape()));
  }
  if (labels.empty()) throw DimensionError("task_loss: empty batch");
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("task_loss: label " + std::to_string(y) + " is not 0/1");
  }
  return cross_entropy(logits, labels);
}

Tensor multi_loss(const Tensor& l_toxic, const Tensor& l_engage, const Tensor& l_fact) {
  const std::array<Tensor, 3> parts{l_toxic, l_engage, l_fact};
  return mean_of(parts);
}

LossBundle mtl_losses(const std::array<TaskOutput, 3>& outputs,
                      const std::array<std::span<const int>, 3>& labels) {
  LossBundle b;
  b.l_toxic = task_loss(outputs[0].logits, labels[0]);
  b.l_engage = task_loss(outputs[1].logits, labels[1]);
  b.l_fact = task_loss(outputs[2].logits, labels[2]);
  b.l_multi = multi_loss(b.l_toxic, b.l_engage, b.l_fact);
  return b;
}

Tensor mlm_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 3) {
    throw DimensionError("mlm_loss: expected [batch x seq x vocab], got " +
                         shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0) * logits.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("mlm_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " positions");
  }
  bool any = false;
  for (int y : labels) any |= y != kIgnoreLabel;
  if (!any) warn("mlm_loss: batch has no masked positions; loss defined as 0");
  return cross_entropy_ignore(reshape(logits, {rows, logits.dim(2)}), labels, kIgnoreLabel);
}

}  // namespace germtl

#pragma once

#include <array>
#include <span>

#include "germtl/model.hpp"
#include "germtl/tensor.hpp"

namespace germtl {

// Per-task losses and their equal-weight mean, all in one graph.
struct LossBundle {
  Tensor l_toxic;
  Tensor l_engage;
  Tensor l_fact;
  Tensor l_multi;

  const Tensor& task(Task t) const;
};

// Mean two-class cross-entropy from logits [batch × 2]; labels must be 0 or 1.
Tensor task_loss(const Tensor& logits, std::span<const int> labels);

// (l_toxic + l_engage + l_fact) / 3
Tensor multi_loss(const Tensor& l_toxic, const Tensor& l_engage, const Tensor& l_fact);

// labels[task_index(t)] holds the gold labels for task t.
LossBundle mtl_losses(const std::array<TaskOutput, 3>& outputs,
                      const std::array<std::span<const int>, 3>& labels);

// Mean cross-entropy over positions whose label is not kIgnoreLabel.
// A batch with no such position yields 0 and a warning.
Tensor mlm_loss(const Tensor& logits, std::span<const int> labels);

}  // namespace germtl

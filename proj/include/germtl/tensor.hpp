#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle onto a graph node. Operations build new
// nodes that remember their inputs; backward() walks the graph in reverse
// topological order. Leaf gradients accumulate across backward() calls until
// zero_grad() is called, which is what gradient accumulation relies on.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace germtl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Values drawn from N(0, stddev^2), resampled outside two standard deviations.
  static Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng,
                                 bool requires_grad = true);
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; intended for leaves (parameters, optimizer updates).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool has_grad() const;
  // Empty span when no gradient has been allocated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy of shape, data and requires_grad; the copy is a fresh leaf.
  Tensor clone() const;
  // Node identity, used to compare parameter sets.
  const void* identity() const { return node_.get(); }
  const std::string& op_name() const;

  void backward() const;

  struct Node;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Tensor::Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// ---- operations ------------------------------------------------------------

// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x[..., n] + bias[n], broadcast over leading dimensions.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// (t0 + t1 + ... ) / count for scalar tensors.
Tensor mean_of(std::span<const Tensor> scalars);

// Softmax over the last dimension, stabilized by subtracting the row max.
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);
// Tanh approximation of GELU.
Tensor gelu(const Tensor& x);
// Inverted dropout with a fixed seeded mask. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::uint64_t seed);

// Row gather from a 2-D tensor; backward scatter-adds.
Tensor gather_rows(const Tensor& table, std::span<const int> rows);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// As cross_entropy, skipping rows whose target equals ignore_index. Returns
// a zero scalar when every row is ignored.
Tensor cross_entropy_ignore(const Tensor& logits, std::span<const int> targets,
                            int ignore_index);

// Scaled dot-product self-attention for a batch of sequences laid out as
// [batch*seq, d_model]. key_mask[b*seq + j] == 0 removes key j from every
// query of sequence b. When probs_out is non-null it receives the attention
// weights laid out as [batch, heads, seq, seq].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const std::uint8_t> key_mask, std::size_t batch,
                            std::size_t seq, std::size_t heads,
                            std::vector<double>* probs_out = nullptr);

// ---- gradient checking -----------------------------------------------------

// Central-difference estimate of d f / d x, one coordinate at a time.
// f is re-evaluated with x's data perturbed in place; x is restored.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h);

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, floor). The floor sits above central-difference
// round-off at h = 1e-5, so gradients that are exactly zero compare cleanly.
double relative_error(double analytic, double numeric, double floor = 1e-5);

// Compares backward() of loss_fn against finite differences on every input
// (or on max_coords randomly sampled coordinates per input when nonzero).
// loss_fn must rebuild its graph from the inputs on each call.
GradCheckReport grad_check(const std::string& op_name, const std::function<Tensor()>& loss_fn,
                           std::span<Tensor> inputs, double tolerance, double h = 1e-5,
                           std::size_t max_coords = 0, std::uint64_t coord_seed = 0);

}  // namespace germtl

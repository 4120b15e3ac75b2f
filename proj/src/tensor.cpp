#include "germtl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_set>
#include <utility>

#include <Eigen/Core>

#include "germtl/errors.hpp"

namespace germtl {

using Node = Tensor::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad, std::string op) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor " + shape_str(shape) + " given " + std::to_string(data.size()) +
                         " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->op = std::move(op);
  return n;
}

// Creates the output node; parents and backward are only attached when some
// input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                   std::vector<NodePtr> parents, std::function<void(Node&)> backward) {
  bool rg = std::any_of(parents.begin(), parents.end(),
                        [](const NodePtr& p) { return p->requires_grad; });
  auto n = make_node(std::move(shape), std::move(data), rg, std::move(op));
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(n);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

ConstMap view(const double* p, std::size_t rows, std::size_t cols) {
  return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
Map view(double* p, std::size_t rows, std::size_t cols) {
  return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

// c[m×n] += a[m×k] · b[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  view(c, m, n).noalias() += view(a, m, k) * view(b, k, n);
}

// c[m×k] += a[m×n] · b[k×n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  view(c, m, k).noalias() += view(a, m, n) * view(b, k, n).transpose();
}

// c[k×n] += a[m×k]^T · b[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  view(c, k, n).noalias() += view(a, m, k).transpose() * view(b, m, n);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return Tensor(make_node(std::move(shape), std::move(d), requires_grad, "leaf"));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad, "leaf"));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::truncated_normal(Shape shape, double stddev, std::mt19937_64& rng,
                                bool requires_grad) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> d(shape_numel(shape));
  for (double& x : d) {
    double z;
    do {
      z = nd(rng);
    } while (std::abs(z) > 2.0);
    x = z * stddev;
  }
  return from(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<double> d(shape_numel(shape));
  for (double& x : d) x = ud(rng);
  return from(std::move(shape), std::move(d), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(make_node(node_->shape, node_->data, node_->requires_grad, "leaf"));
}

const std::string& Tensor::op_name() const { return node_->op; }

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw DimensionError("backward: loss must be scalar, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) throw std::invalid_argument("backward: loss does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; leaves accumulate.
  for (Node* n : order) {
    if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      for (auto& p : n->parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      n->backward(*n);
    }
  }
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                     [m, k, n](Node& o) {
                       Node& pa = *o.parents[0];
                       Node& pb = *o.parents[1];
                       if (pa.requires_grad)
                         gemm_nt(o.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
                       if (pb.requires_grad)
                         gemm_tn(pa.data.data(), o.grad.data(), pb.grad.data(), m, k, n);
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto d = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  return make_result({c, r}, std::move(out), "transpose", {a.node()}, [r, c](Node& o) {
    Node& p = *o.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += o.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x.node()}, [](Node& o) {
    Node& p = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node& o) {
    for (auto& p : o.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += o.grad[i];
      if (pb.requires_grad) pb.grad[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += o.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += o.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_result(x.shape(), std::move(out), "scale", {x.node()}, [factor](Node& o) {
    Node& p = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t n = bias.dim(0);
  if (x.rank() == 0 || x.shape().back() != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(bias.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  return make_result(x.shape(), std::move(out), "add_bias", {x.node(), bias.node()},
                     [n](Node& o) {
                       Node& px = *o.parents[0];
                       Node& pb = *o.parents[1];
                       for (std::size_t i = 0; i < o.grad.size(); ++i) {
                         if (px.requires_grad) px.grad[i] += o.grad[i];
                         if (pb.requires_grad) pb.grad[i % n] += o.grad[i];
                       }
                     });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, "sum", {x.node()}, [](Node& o) {
    Node& p = *o.parents[0];
    for (double& g : p.grad) g += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s / n}, "mean", {x.node()}, [n](Node& o) {
    Node& p = *o.parents[0];
    for (double& g : p.grad) g += o.grad[0] / n;
  });
}

Tensor mean_of(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw DimensionError("mean_of: no operands");
  std::vector<NodePtr> parents;
  double s = 0.0;
  for (const Tensor& t : scalars) {
    require_defined(t, "mean_of");
    if (t.numel() != 1) throw DimensionError("mean_of: operand " + shape_str(t.shape()));
    s += t.data()[0];
    parents.push_back(t.node());
  }
  const double n = static_cast<double>(scalars.size());
  return make_result({}, {s / n}, "mean_of", std::move(parents), [n](Node& o) {
    for (auto& p : o.parents)
      if (p->requires_grad) p->grad[0] += o.grad[0] / n;
  });
}

// ---- nonlinearities --------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require_defined(x, "softmax_rows");
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax_rows: empty last dimension " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = d.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make_result(x.shape(), std::move(out), "softmax_rows", {x.node()},
                     [n, rows](Node& o) {
                       Node& p = *o.parents[0];
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = o.data.data() + r * n;
                         const double* gy = o.grad.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
                         for (std::size_t j = 0; j < n; ++j) p.grad[r * n + j] += y[j] * (gy[j] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  require_rank(gamma, 1, "layer_norm");
  require_rank(beta, 1, "layer_norm");
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("layer_norm: empty normalized dimension in " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  if (gamma.dim(0) != d || beta.dim(0) != d) {
    throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + " beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto xd = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = g[j] * h + b[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x.node(), gamma.node(), beta.node()},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& o) {
        Node& px = *o.parents[0];
        Node& pg = *o.parents[1];
        Node& pb = *o.parents[2];
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gy = o.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (pg.requires_grad) pg.grad[j] += gy[j] * h[j];
            if (pb.requires_grad) pb.grad[j] += gy[j];
            dxhat[j] = gy[j] * pg.data[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * h[j];
          }
          if (!px.requires_grad) continue;
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j)
            px.grad[r * d + j] += inv_std[r] * (dxhat[j] - m1 - h[j] * m2);
        }
      });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = d[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), "gelu", {x.node()}, [](Node& o) {
    Node& p = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double v = p.data[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      p.grad[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor dropout(const Tensor& x, double p, std::uint64_t seed) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keep(rng) ? s : 0.0;
    out[i] = x.data()[i] * mask[i];
  }
  return make_result(x.shape(), std::move(out), "dropout", {x.node()},
                     [mask = std::move(mask)](Node& o) {
                       Node& px = *o.parents[0];
                       for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i] * mask[i];
                     });
}

// ---- indexing --------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> rows) {
  require_rank(table, 2, "gather_rows");
  const std::size_t n_rows = table.dim(0), d = table.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * d);
  auto t = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n_rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " outside [0, " +
                       std::to_string(n_rows) + ")");
    }
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape out_shape{idx.size(), d};
  return make_result(std::move(out_shape), std::move(out), "gather_rows", {table.node()},
                     [d, idx = std::move(idx)](Node& o) {
                       Node& p = *o.parents[0];
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         const std::size_t base = static_cast<std::size_t>(idx[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) p.grad[base + j] += o.grad[i * d + j];
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding_lookup");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(table.dim(0)));
    }
  }
  return gather_rows(table, ids);
}

// ---- losses ----------------------------------------------------------------

namespace {

Tensor cross_entropy_impl(const Tensor& logits, std::span<const int> targets,
                          std::optional<int> ignore_index, const char* op) {
  require_rank(logits, 2, op);
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (m == 0) throw DimensionError(std::string(op) + ": empty batch");
  if (targets.size() != m) {
    throw DimensionError(std::string(op) + ": " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t active = 0;
  for (int t : tgt) {
    if (ignore_index && t == *ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw IndexError(std::string(op) + ": target " + std::to_string(t) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    ++active;
  }
  if (active == 0) {
    return make_result({}, {0.0}, op, {logits.node()}, [](Node&) {});
  }
  // Softmax probabilities are kept for the backward pass.
  std::vector<double> probs(m * c, 0.0);
  double total = 0.0;
  auto d = logits.data();
  for (std::size_t r = 0; r < m; ++r) {
    if (ignore_index && tgt[r] == *ignore_index) continue;
    const double* row = d.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[tgt[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
  }
  const double n = static_cast<double>(active);
  return make_result({}, {total / n}, op, {logits.node()},
                     [c, n, ignore_index, tgt = std::move(tgt), probs = std::move(probs)](Node& o) {
                       Node& p = *o.parents[0];
                       const double g = o.grad[0] / n;
                       for (std::size_t r = 0; r < tgt.size(); ++r) {
                         if (ignore_index && tgt[r] == *ignore_index) continue;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double onehot = static_cast<int>(j) == tgt[r] ? 1.0 : 0.0;
                           p.grad[r * c + j] += g * (probs[r * c + j] - onehot);
                         }
                       }
                     });
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  return cross_entropy_impl(logits, targets, std::nullopt, "cross_entropy");
}

Tensor cross_entropy_ignore(const Tensor& logits, std::span<const int> targets,
                            int ignore_index) {
  return cross_entropy_impl(logits, targets, ignore_index, "cross_entropy_ignore");
}

// ---- attention -------------------------------------------------------------

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const std::uint8_t> key_mask, std::size_t batch,
                            std::size_t seq, std::size_t heads, std::vector<double>* probs_out) {
  require_rank(q, 2, "multi_head_attention");
  require_same_shape(q, k, "multi_head_attention");
  require_same_shape(q, v, "multi_head_attention");
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * seq) {
    throw DimensionError("multi_head_attention: " + shape_str(q.shape()) + " is not " +
                         std::to_string(batch) + "x" + std::to_string(seq) + " rows");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("multi_head_attention: d_model " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  if (key_mask.size() != batch * seq) {
    throw DimensionError("multi_head_attention: key mask has " +
                         std::to_string(key_mask.size()) + " entries");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> out(batch * seq * d, 0.0);
  auto qd = q.data(), kd = k.data(), vd = v.data();

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + ((b * heads + h) * seq) * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qd.data() + (b * seq + i) * d + h * dh;
        double* row = P + i * seq;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[b * seq + j]) continue;
          const double* kj = kd.data() + (b * seq + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          row[j] = s * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[b * seq + j]) continue;
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* oi = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[b * seq + j]) continue;
          row[j] /= z;
          const double* vj = vd.data() + (b * seq + j) * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += row[j] * vj[t];
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;

  return make_result(
      {batch * seq, d}, std::move(out), "multi_head_attention", {q.node(), k.node(), v.node()},
      [batch, seq, heads, d, dh, inv_sqrt, probs = std::move(probs)](Node& o) {
        Node& pq = *o.parents[0];
        Node& pk = *o.parents[1];
        Node& pv = *o.parents[2];
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = probs.data() + ((b * heads + h) * seq) * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* row = P + i * seq;
              const double* go = o.grad.data() + (b * seq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                dp[j] = 0.0;
                if (row[j] == 0.0) continue;
                const double* vj = pv.data.data() + (b * seq + j) * d + h * dh;
                for (std::size_t t = 0; t < dh; ++t) dp[j] += go[t] * vj[t];
                dot += row[j] * dp[j];
                if (pv.requires_grad) {
                  double* gv = pv.grad.data() + (b * seq + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gv[t] += row[j] * go[t];
                }
              }
              const double* qi = pq.data.data() + (b * seq + i) * d + h * dh;
              for (std::size_t j = 0; j < seq; ++j) {
                if (row[j] == 0.0) continue;
                const double ds = row[j] * (dp[j] - dot) * inv_sqrt;
                const double* kj = pk.data.data() + (b * seq + j) * d + h * dh;
                if (pq.requires_grad) {
                  double* gq = pq.grad.data() + (b * seq + i) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gq[t] += ds * kj[t];
                }
                if (pk.requires_grad) {
                  double* gk = pk.grad.data() + (b * seq + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gk[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---- gradient checking -----------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
  require_defined(x, "finite_diff_grad");
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  std::vector<double> g(x.numel());
  auto d = x.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double orig = d[i];
    d[i] = orig + h;
    const double fp = f(x);
    d[i] = orig - h;
    const double fm = f(x);
    d[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(g));
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::string& op_name, const std::function<Tensor()>& loss_fn,
                           std::span<Tensor> inputs, double tolerance, double h,
                           std::size_t max_coords, std::uint64_t coord_seed) {
  for (Tensor& t : inputs) t.zero_grad();
  Tensor loss = loss_fn();
  loss.backward();

  std::mt19937_64 rng(coord_seed);
  GradCheckReport report{op_name, 0.0, tolerance, false};
  for (Tensor& x : inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.numel(), 0.0);
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    auto d = x.mutable_data();
    for (std::size_t i : coords) {
      const double orig = d[i];
      d[i] = orig + h;
      const double fp = loss_fn().item();
      d[i] = orig - h;
      const double fm = loss_fn().item();
      d[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic[i], numeric));
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace germtl

#include "relweave/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "relweave/rng.hpp"

namespace relweave::ad {

using detail::Node;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

std::size_t product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
}

void check_finite(const std::vector<double>& v, const char* op) {
  if (!Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size())).allFinite())
    throw NonFiniteError(std::string("non-finite value produced by ") + op);
}

void ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

// Builds the result node. Parents that do not require gradients are dropped
// from the graph; if none do, no backward closure is kept.
Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, const char* op, Forward f, Derivative df) {
  const auto& av = a.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), op, {pa}, [pa, df](Node& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * df(pa->value[i], self.value[i]);
  });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(shape, std::vector<double>(product(shape), 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (product(shape) != values.size())
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
  check_finite(values, "leaf");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw DimensionError("at(r, c) on non-matrix");
  return node_->value.at(r * dim(1) + c);
}

void Tensor::zero_grad() {
  if (!node_->requires_grad) return;
  node_->grad.assign(node_->value.size(), 0.0);
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  std::vector<double> out(m * n);
  RowMap(out.data(), m, n).noalias() = ConstRowMap(a.node()->value.data(), m, k) * ConstRowMap(b.node()->value.data(), k, n);
  auto pa = a.node(), pb = b.node();
  return make_result({m, n}, std::move(out), "matmul", {pa, pb}, [pa, pb, m, k, n](Node& self) {
    const ConstRowMap G(self.grad.data(), m, n);
    if (pa->requires_grad) {
      ensure_grad(*pa);
      RowMap(pa->grad.data(), m, k).noalias() += G * ConstRowMap(pb->value.data(), k, n).transpose();
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      RowMap(pb->grad.data(), k, n).noalias() += ConstRowMap(pa->value.data(), m, k).transpose() * G;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& av = a.node()->value;
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto pa = a.node();
  return make_result({n, m}, std::move(out), "transpose", {pa}, [pa, m, n](Node& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (product(shape) != a.numel())
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  auto pa = a.node();
  return make_result(std::move(shape), pa->value, "reshape", {pa}, [pa](Node& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto &av = a.node()->value, &bv = b.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), "add", {pa, pb}, [pa, pb](Node& self) {
    for (Node* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      ensure_grad(*p);
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto &av = a.node()->value, &bv = b.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), "mul", {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      ensure_grad(*pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_bias");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n)
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs " +
                         shape_string(a.shape()));
  const auto &av = a.node()->value, &bv = bias.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  auto pa = a.node(), pb = bias.node();
  return make_result(a.shape(), std::move(out), "add_bias", {pa, pb}, [pa, pb, m, n](Node& self) {
    if (pa->requires_grad) {
      ensure_grad(*pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation used by BERT-style encoders.
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  return unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(std::max(x, kLogFloor)); },
               [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

Tensor sum(const Tensor& a) {
  const auto& av = a.node()->value;
  double s = 0.0;
  for (double x : av) s += x;
  auto pa = a.node();
  return make_result({1}, {s}, "sum", {pa}, [pa](Node& self) {
    ensure_grad(*pa);
    for (double& g : pa->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto& av = a.node()->value;
  double s = 0.0;
  for (double x : av) s += x;
  const double inv = 1.0 / static_cast<double>(av.size());
  auto pa = a.node();
  return make_result({1}, {s * inv}, "mean", {pa}, [pa, inv](Node& self) {
    ensure_grad(*pa);
    for (double& g : pa->grad) g += self.grad[0] * inv;
  });
}

Tensor sum_rows(const Tensor& a) {
  require_rank(a, 2, "sum_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& av = a.node()->value;
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += av[i * n + j];
  auto pa = a.node();
  return make_result({m}, std::move(out), "sum_rows", {pa}, [pa, m, n](Node& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[i];
  });
}

namespace {

// Shared by softmax and masked_softmax. mask may be empty (no masking).
Tensor softmax_impl(const Tensor& a, std::span<const std::uint8_t> mask, const char* op) {
  if (a.rank() > 2) throw DimensionError(std::string(op) + ": rank must be 1 or 2");
  const std::size_t n = a.shape().back();
  const std::size_t m = a.numel() / n;
  if (!mask.empty() && mask.size() != n)
    throw DimensionError(std::string(op) + ": mask length does not match columns");
  const auto& av = a.node()->value;
  std::vector<double> out(av.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = av.data() + i * n;
    double* y = out.data() + i * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (mask.empty() || mask[j]) mx = std::max(mx, x[j]);
    if (mx == -INFINITY) throw DimensionError(std::string(op) + ": every column masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.empty() && !mask[j]) continue;
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), op, {pa}, [pa, m, n](Node& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& a) { return softmax_impl(a, {}, "softmax"); }

Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> key_mask) {
  return softmax_impl(a, key_mask, "masked_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n)
    throw DimensionError("layer_norm: gain/bias length must equal " + std::to_string(n));
  const auto& xv = x.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  std::vector<double> out(xv.size());
  // Normalized activations and inverse stddev per row, kept for backward.
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mu) * is;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_result(
      x.shape(), std::move(out), "layer_norm", {px, pg, pb},
      [px, pg, pb, xhat, inv_std, m, n](Node& self) {
        const double* G = self.grad.data();
        if (pg->requires_grad) {
          ensure_grad(*pg);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pg->grad[j] += G[i * n + j] * (*xhat)[i * n + j];
        }
        if (pb->requires_grad) {
          ensure_grad(*pb);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pb->grad[j] += G[i * n + j];
        }
        if (px->requires_grad) {
          ensure_grad(*px);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = G[i * n + j] * pg->value[j];
              sum_g += gh;
              sum_gx += gh * (*xhat)[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = G[i * n + j] * pg->value[j];
              px->grad[i * n + j] +=
                  (*inv_std)[i] * (gh - inv_n * sum_g - (*xhat)[i * n + j] * inv_n * sum_gx);
            }
          }
        }
      });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_rank(table, 2, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: no rows requested");
  const std::size_t v = table.dim(0), h = table.dim(1);
  const auto& tv = table.node()->value;
  std::vector<double> out(rows.size() * h);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= v)
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " out of " +
                           std::to_string(v));
    std::copy_n(tv.data() + rows[r] * h, h, out.data() + r * h);
  }
  auto pt = table.node();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), h}, std::move(out), "gather_rows", {pt},
                     [pt, idx = std::move(idx), h](Node& self) {
                       ensure_grad(*pt);
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < h; ++j)
                           pt->grad[idx[r] * h + j] += self.grad[r * h + j];
                     });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw DimensionError("pick: no indices");
  const auto& av = a.node()->value;
  std::vector<double> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= av.size()) throw DimensionError("pick: index out of range");
    out[i] = av[flat_indices[i]];
  }
  auto pa = a.node();
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  const std::size_t n = idx.size();
  return make_result({n}, std::move(out), "pick", {pa},
                     [pa, idx = std::move(idx)](Node& self) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < idx.size(); ++i) pa->grad[idx[i]] += self.grad[i];
                     });
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() > 2)
    throw DimensionError("concat_lastdim: ranks must match and be 1 or 2");
  if (a.rank() == 1) return stack({a, b});
  if (a.dim(0) != b.dim(0)) throw DimensionError("concat_lastdim: row counts differ");
  return concat_cols({a, b});
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].node()->value;
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  auto captured = nodes;
  return make_result({m, total}, std::move(out), "concat_cols", std::move(nodes),
                     [captured, widths, m, total](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < captured.size(); ++k) {
                         Node& p = *captured[k];
                         if (p.requires_grad) {
                           ensure_grad(p);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               p.grad[i * widths[k] + j] += self.grad[i * total + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (count == 0 || begin + count > n) throw DimensionError("slice_cols: range out of bounds");
  const auto& av = a.node()->value;
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data() + i * n + begin, count, out.data() + i * count);
  auto pa = a.node();
  return make_result({m, count}, std::move(out), "slice_cols", {pa},
                     [pa, m, n, begin, count](Node& self) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < count; ++j)
                           pa->grad[i * n + begin + j] += self.grad[i * count + j];
                     });
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("stack: nothing to stack");
  std::vector<double> out;
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.node()->value.begin(), p.node()->value.end());
    nodes.push_back(p.node());
  }
  const std::size_t total = out.size();
  auto captured = nodes;
  return make_result({total}, std::move(out), "stack", std::move(nodes), [captured](Node& self) {
    std::size_t off = 0;
    for (const auto& p : captured) {
      if (p->requires_grad) {
        ensure_grad(*p);
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  for (double& m : *mask) m = uniform01(rng) >= p ? keep_scale : 0.0;
  const auto& av = a.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * (*mask)[i];
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), "dropout", {pa}, [pa, mask](Node& self) {
    ensure_grad(*pa);
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * (*mask)[i];
  });
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (loss.numel() != 1)
    throw DimensionError("backward requires a scalar loss, got " + shape_string(loss.shape()));
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  ensure_grad(*root);
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      ensure_grad(*n);
      n->backward_fn(*n);
    }
  }
  for (Node* n : order)
    if (!n->backward_fn) check_finite(n->grad, "backward");
}

}  // namespace relweave::ad

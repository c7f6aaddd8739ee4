// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor that remembers its parents and a closure
// propagating its gradient back to them. backward() walks the graph in
// reverse topological order. Leaf gradients accumulate until zero_grad().

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace relweave::ad {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  // Mutable access is only meant for leaves (optimizer updates, finite differences).
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }

  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const;

  void zero_grad();

  // Identity of the underlying storage; copies of a Tensor share it.
  const void* id() const { return node_.get(); }

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

std::string shape_string(const Shape& shape);

// ---- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// ---- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a[m x n] + bias[n] on every row.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
// Natural log; inputs below kLogFloor are clamped (and receive no gradient).
inline constexpr double kLogFloor = 1e-12;
Tensor log(const Tensor& a);

// ---- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum over the last axis of a 2-D tensor: [m x n] -> [m].
Tensor sum_rows(const Tensor& a);

// ---- normalization --------------------------------------------------------
// Softmax over the last axis (vector, or each row of a matrix).
Tensor softmax(const Tensor& a);
// Row-wise softmax over [m x n] where columns with key_mask == 0 get
// probability exactly zero. At least one column must be unmasked.
Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> key_mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-12);

// ---- indexing / structure -------------------------------------------------
// Rows of a 2-D table: [V x H] -> [len(rows) x H].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);
// Flat elements by index -> 1-D.
Tensor pick(const Tensor& a, std::span<const std::size_t> flat_indices);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
// Concatenate the flattened values of all inputs into one vector.
Tensor stack(const std::vector<Tensor>& parts);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng);

// Reverse pass from a scalar. Gradients accumulate into every reachable
// tensor that requires them.
void backward(const Tensor& loss);

}  // namespace relweave::ad

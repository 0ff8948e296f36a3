#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlmlab/common.hpp"

namespace mlmlab {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// A dense float64 tensor participating in a dynamically built reverse-mode
// graph. Copying a Tensor copies a handle to the shared node, not the data.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, double sigma, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;
  int64_t numel() const;
  bool requires_grad() const;

  double item() const;  // scalar tensors only
  std::span<const double> values() const;
  std::span<double> values_mut();  // leaves only; used by optimizers and fd checks

  // Gradient buffer of a requires_grad leaf. Allocated on demand, zero until
  // a backward pass reaches this tensor, and accumulated across passes.
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// --- primitive operations -------------------------------------------------
// Elementwise binaries accept either identical shapes or a right operand
// whose shape is a trailing suffix of the left one (broadcast over the
// leading axes). Shape mismatches throw with the operation name and shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor div_scalar(const Tensor& a, double s);

// Matrix product over the last two axes. Leading (batch) axes must match
// exactly, or one operand may be rank-2 and is then shared across the
// other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);               // swap the last two axes
Tensor permute(const Tensor& a, std::vector<int> axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop);

// Repeats `a` along a new leading axis of size n; gradient sums over it.
Tensor expand_leading(const Tensor& a, int64_t n);

// Row lookup into `table` [R, d]; output shape = id_shape + [d].
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids, Shape id_shape);

// out[..., t, s] = x[..., t, index[t*S + s]] with x [.., T, R], index [T, S].
Tensor gather_last(const Tensor& x, const std::vector<int64_t>& index, int64_t s_dim);

Tensor softmax_lastdim(const Tensor& a);
// Normalizes over the last axis (pre-affine). Rows use 1/sqrt(var + eps).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
Tensor gelu(const Tensor& a);  // exact erf form: x * Phi(x)
Tensor tanh_op(const Tensor& a);

// Mean cross-entropy of row-wise logits [N, V] against targets [N];
// rows whose target equals ignore_index carry no loss. Throws if every
// row is ignored.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     int64_t ignore_index = -1);

// Inverted dropout: at train time kept values are divided by (1 - rate) so
// inference needs no rescaling. rate == 0 or train == false is the identity.
Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng);

// Positions where keep[i] == 0 are replaced by `value` and pass no gradient.
Tensor masked_fill(const Tensor& a, const std::vector<uint8_t>& keep, double value);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);

// Runs reverse-mode accumulation from a scalar loss. Gradients of
// requires_grad leaves accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// Central-difference check of backward() against f. f must rebuild its graph
// from x's current values on every call. Returns the max elementwise
// relative error |a - g| / max(1, |a|, |g|).
double finite_difference_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double h);

double gelu_scalar(double x);

}  // namespace mlmlab

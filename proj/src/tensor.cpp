#include "mlmlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace mlmlab {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream ss;
  ss << "[";
  for (size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
  ss << "]";
  return ss.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
};

}  // namespace detail

using detail::Node;

namespace {

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->leaf = true;
  return n;
}

std::shared_ptr<Node> make_op(Shape shape, std::vector<double> value,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

void ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::runtime_error(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                           shape_str(b));
}

// Right operand may broadcast as a trailing suffix of the left shape.
// Returns the repeat count of b inside a.
int64_t suffix_repeats(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size()) shape_error(op, a, b);
  for (size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) shape_error(op, a, b);
  }
  const int64_t nb = shape_numel(b);
  return nb == 0 ? 0 : shape_numel(a) / nb;
}

// C (+)= A[M,K] * B[K,N]
void mm(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// DA += G[M,N] * B[K,N]^T
void mm_bt(const double* G, const double* B, double* DA, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* g = G + i * N;
    double* da = DA + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      double acc = 0.0;
      for (int64_t j = 0; j < N; ++j) acc += g[j] * b[j];
      da[k] += acc;
    }
  }
}

// DB += A[M,K]^T * G[M,N]
void mm_at(const double* A, const double* G, double* DB, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* g = G + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      double* db = DB + k * N;
      for (int64_t j = 0; j < N; ++j) db[j] += av * g[j];
    }
  }
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

}  // namespace

// --- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::runtime_error("from_data: " + shape_str(shape) + " does not match data size " +
                             std::to_string(data.size()));
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(Shape shape, double sigma, Rng& rng, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.normal(sigma);
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::runtime_error("undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim(int axis) const { return shape().at(axis); }
int64_t Tensor::numel() const { return static_cast<int64_t>(node_->value.size()); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

double Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("item: tensor is not scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

std::span<const double> Tensor::values() const { return {node_->value.data(), node_->value.size()}; }

std::span<double> Tensor::values_mut() {
  if (!node_->leaf) throw std::runtime_error("values_mut: only leaf tensors are mutable");
  return {node_->value.data(), node_->value.size()};
}

std::span<const double> Tensor::grad() const {
  ensure_grad(*node_);
  return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::grad_mut() {
  ensure_grad(*node_);
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

// --- elementwise ------------------------------------------------------------

namespace {

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                 const std::function<double(double, double)>& fwd, bool is_mul, bool negate_b) {
  const int64_t repeats = suffix_repeats(name, a.shape(), b.shape());
  (void)repeats;
  const auto av = a.values();
  const auto bv = b.values();
  const int64_t nb = static_cast<int64_t>(bv.size());
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i % nb]);
  return Tensor(make_op(a.shape(), std::move(out), {a.node(), b.node()}, [is_mul, negate_b, nb](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const int64_t n = static_cast<int64_t>(self.value.size());
    if (pa.requires_grad) {
      ensure_grad(pa);
      for (int64_t i = 0; i < n; ++i)
        pa.grad[i] += is_mul ? self.grad[i] * pb.value[i % nb] : self.grad[i];
    }
    if (pb.requires_grad) {
      ensure_grad(pb);
      for (int64_t i = 0; i < n; ++i) {
        const double g = is_mul ? self.grad[i] * pa.value[i] : (negate_b ? -self.grad[i] : self.grad[i]);
        pb.grad[i % nb] += g;
      }
    }
  }));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", a, b, [](double x, double y) { return x + y; }, false, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", a, b, [](double x, double y) { return x - y; }, false, true);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", a, b, [](double x, double y) { return x * y; }, true, false);
}

Tensor scale(const Tensor& a, double s) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  return Tensor(make_op(a.shape(), std::move(out), {a.node()}, [s](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += s * self.grad[i];
  }));
}

Tensor div_scalar(const Tensor& a, double s) {
  if (s == 0.0) throw std::runtime_error("div_scalar: division by zero");
  return scale(a, 1.0 / s);
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// --- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_error("matmul", sa, sb);
  const int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  const int64_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
  if (K != Kb) shape_error("matmul", sa, sb);

  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_a.empty()) {
    batch = batch_b;
  } else if (batch_b.empty()) {
    batch = batch_a;
  } else {
    shape_error("matmul", sa, sb);
  }
  const int64_t nbatch = shape_numel(batch);
  const bool a_shared = batch_a.empty() && !batch.empty();
  const bool b_shared = batch_b.empty() && !batch.empty();

  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<double> out(nbatch * M * N, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (int64_t t = 0; t < nbatch; ++t) {
    mm(A + (a_shared ? 0 : t * M * K), B + (b_shared ? 0 : t * K * N), out.data() + t * M * N, M, K, N);
  }

  return Tensor(make_op(std::move(out_shape), std::move(out), {a.node(), b.node()},
                        [M, K, N, nbatch, a_shared, b_shared](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* A = pa.value.data();
    const double* B = pb.value.data();
    if (pa.requires_grad) {
      ensure_grad(pa);
      for (int64_t t = 0; t < nbatch; ++t)
        mm_bt(self.grad.data() + t * M * N, B + (b_shared ? 0 : t * K * N),
              pa.grad.data() + (a_shared ? 0 : t * M * K), M, K, N);
    }
    if (pb.requires_grad) {
      ensure_grad(pb);
      for (int64_t t = 0; t < nbatch; ++t)
        mm_at(A + (a_shared ? 0 : t * M * K), self.grad.data() + t * M * N,
              pb.grad.data() + (b_shared ? 0 : t * K * N), M, K, N);
    }
  }));
}

// --- layout ops -------------------------------------------------------------

Tensor permute(const Tensor& a, std::vector<int> axes) {
  const Shape& sa = a.shape();
  const int r = static_cast<int>(sa.size());
  if (static_cast<int>(axes.size()) != r) throw std::runtime_error("permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    if (axes[i] < 0 || axes[i] >= r || seen[axes[i]]) throw std::runtime_error("permute: bad axes");
    seen[axes[i]] = true;
    out_shape[i] = sa[axes[i]];
  }
  const auto in_strides = row_major_strides(sa);
  std::vector<int64_t> stride_map(r);
  for (int i = 0; i < r; ++i) stride_map[i] = in_strides[axes[i]];

  const int64_t n = a.numel();
  const double* in = a.values().data();
  std::vector<double> out(n);
  {
    std::vector<int64_t> idx(r, 0);
    int64_t src = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
      out[lin] = in[src];
      for (int ax = r - 1; ax >= 0; --ax) {
        ++idx[ax];
        src += stride_map[ax];
        if (idx[ax] < out_shape[ax]) break;
        src -= out_shape[ax] * stride_map[ax];
        idx[ax] = 0;
      }
    }
  }
  Shape shape_copy = out_shape;
  return Tensor(make_op(std::move(shape_copy), std::move(out), {a.node()},
                        [out_shape, stride_map, r](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    std::vector<int64_t> idx(r, 0);
    int64_t src = 0;
    const int64_t n = static_cast<int64_t>(self.value.size());
    for (int64_t lin = 0; lin < n; ++lin) {
      p.grad[src] += self.grad[lin];
      for (int ax = r - 1; ax >= 0; --ax) {
        ++idx[ax];
        src += stride_map[ax];
        if (idx[ax] < out_shape[ax]) break;
        src -= out_shape[ax] * stride_map[ax];
        idx[ax] = 0;
      }
    }
  }));
}

Tensor transpose(const Tensor& a) {
  const int r = a.rank();
  if (r < 2) throw std::runtime_error("transpose: rank must be >= 2, got " + shape_str(a.shape()));
  std::vector<int> axes(r);
  for (int i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    shape_error("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tensor(make_op(std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
  }));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::runtime_error("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int r = static_cast<int>(s0.size());
  if (axis < 0 || axis >= r) throw std::runtime_error("concat: bad axis");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != r) shape_error("concat", s0, s);
    for (int i = 0; i < r; ++i)
      if (i != axis && s[i] != s0[i]) shape_error("concat", s0, s);
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < r; ++i) inner *= s0[i];

  std::vector<double> out(shape_numel(out_shape));
  std::vector<int64_t> axis_sizes;
  {
    int64_t col = 0;
    for (const auto& p : parts) {
      const int64_t na = p.dim(axis);
      axis_sizes.push_back(na);
      const double* src = p.values().data();
      for (int64_t o = 0; o < outer; ++o) {
        std::copy(src + o * na * inner, src + (o + 1) * na * inner,
                  out.data() + (o * axis_total + col) * inner);
      }
      col += na;
    }
  }
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return Tensor(make_op(std::move(out_shape), std::move(out), std::move(parents),
                        [outer, inner, axis_total, axis_sizes](Node& self) {
    int64_t col = 0;
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      const int64_t na = axis_sizes[k];
      if (p.requires_grad) {
        ensure_grad(p);
        for (int64_t o = 0; o < outer; ++o) {
          const double* g = self.grad.data() + (o * axis_total + col) * inner;
          double* dst = p.grad.data() + o * na * inner;
          for (int64_t i = 0; i < na * inner; ++i) dst[i] += g[i];
        }
      }
      col += na;
    }
  }));
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop) {
  const Shape& sa = a.shape();
  const int r = static_cast<int>(sa.size());
  if (axis < 0 || axis >= r) throw std::runtime_error("slice: bad axis");
  if (start < 0 || stop > sa[axis] || start >= stop)
    throw std::runtime_error("slice: bad range [" + std::to_string(start) + "," +
                             std::to_string(stop) + ") on " + shape_str(sa));
  Shape out_shape = sa;
  out_shape[axis] = stop - start;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sa[i];
  for (int i = axis + 1; i < r; ++i) inner *= sa[i];
  const int64_t na = sa[axis];
  const int64_t width = stop - start;

  std::vector<double> out(shape_numel(out_shape));
  const double* src = a.values().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + (o * na + start) * inner, src + (o * na + stop) * inner,
              out.data() + o * width * inner);

  return Tensor(make_op(std::move(out_shape), std::move(out), {a.node()},
                        [outer, inner, na, start, width](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (int64_t o = 0; o < outer; ++o) {
      const double* g = self.grad.data() + o * width * inner;
      double* dst = p.grad.data() + (o * na + start) * inner;
      for (int64_t i = 0; i < width * inner; ++i) dst[i] += g[i];
    }
  }));
}

Tensor expand_leading(const Tensor& a, int64_t n) {
  if (n <= 0) throw std::runtime_error("expand_leading: n must be positive");
  Shape out_shape;
  out_shape.push_back(n);
  for (int64_t d : a.shape()) out_shape.push_back(d);
  const int64_t m = a.numel();
  std::vector<double> out(n * m);
  for (int64_t t = 0; t < n; ++t)
    std::copy(a.values().begin(), a.values().end(), out.begin() + t * m);
  return Tensor(make_op(std::move(out_shape), std::move(out), {a.node()}, [n, m](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (int64_t t = 0; t < n; ++t) {
      const double* g = self.grad.data() + t * m;
      for (int64_t i = 0; i < m; ++i) p.grad[i] += g[i];
    }
  }));
}

// --- gathers ----------------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids, Shape id_shape) {
  if (table.rank() != 2) throw std::runtime_error("gather_rows: table must be rank 2");
  if (shape_numel(id_shape) != static_cast<int64_t>(ids.size()))
    throw std::runtime_error("gather_rows: id shape does not match id count");
  const int64_t rows = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= rows)
      throw std::runtime_error("gather_rows: id " + std::to_string(id) + " out of range [0," +
                               std::to_string(rows) + ")");
  Shape out_shape = id_shape;
  out_shape.push_back(d);
  std::vector<double> out(ids.size() * d);
  const double* src = table.values().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(src + ids[i] * d, src + (ids[i] + 1) * d, out.data() + i * d);
  return Tensor(make_op(std::move(out_shape), std::move(out), {table.node()}, [ids, d](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* g = self.grad.data() + i * d;
      double* dst = p.grad.data() + ids[i] * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  }));
}

Tensor gather_last(const Tensor& x, const std::vector<int64_t>& index, int64_t s_dim) {
  const Shape& sx = x.shape();
  if (sx.size() < 2) throw std::runtime_error("gather_last: rank must be >= 2");
  const int64_t R = sx[sx.size() - 1];
  const int64_t T = sx[sx.size() - 2];
  if (static_cast<int64_t>(index.size()) != T * s_dim)
    throw std::runtime_error("gather_last: index size does not match T*S");
  for (int64_t id : index)
    if (id < 0 || id >= R)
      throw std::runtime_error("gather_last: index " + std::to_string(id) + " out of range [0," +
                               std::to_string(R) + ")");
  const int64_t batch = x.numel() / (T * R);
  Shape out_shape(sx.begin(), sx.end() - 1);
  out_shape.push_back(s_dim);
  std::vector<double> out(batch * T * s_dim);
  const double* src = x.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < T; ++t) {
      const double* row = src + (b * T + t) * R;
      double* o = out.data() + (b * T + t) * s_dim;
      const int64_t* ix = index.data() + t * s_dim;
      for (int64_t s = 0; s < s_dim; ++s) o[s] = row[ix[s]];
    }
  return Tensor(make_op(std::move(out_shape), std::move(out), {x.node()},
                        [index, batch, T, R, s_dim](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t t = 0; t < T; ++t) {
        const double* g = self.grad.data() + (b * T + t) * s_dim;
        double* row = p.grad.data() + (b * T + t) * R;
        const int64_t* ix = index.data() + t * s_dim;
        for (int64_t s = 0; s < s_dim; ++s) row[ix[s]] += g[s];
      }
  }));
}

// --- nonlinearities ---------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
  const Shape& sa = a.shape();
  if (sa.empty()) throw std::runtime_error("softmax: rank must be >= 1");
  const int64_t C = sa.back();
  const int64_t rows = a.numel() / C;
  std::vector<double> out(a.numel());
  const double* in = a.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = in + r * C;
    double* y = out.data() + r * C;
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < C; ++i) m = std::max(m, x[i]);
    if (m == -std::numeric_limits<double>::infinity()) {
      // fully masked row: no probability mass, no gradient
      std::fill(y, y + C, 0.0);
      continue;
    }
    double s = 0.0;
    for (int64_t i = 0; i < C; ++i) {
      y[i] = std::exp(x[i] - m);
      s += y[i];
    }
    for (int64_t i = 0; i < C; ++i) y[i] /= s;
  }
  return Tensor(make_op(sa, std::move(out), {a.node()}, [C, rows](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * C;
      const double* g = self.grad.data() + r * C;
      double* dx = p.grad.data() + r * C;
      double dot = 0.0;
      for (int64_t i = 0; i < C; ++i) dot += g[i] * y[i];
      for (int64_t i = 0; i < C; ++i) dx[i] += y[i] * (g[i] - dot);
    }
  }));
}

Tensor layer_norm(const Tensor& a, double eps) {
  const Shape& sa = a.shape();
  if (sa.empty()) throw std::runtime_error("layer_norm: rank must be >= 1");
  const int64_t C = sa.back();
  const int64_t rows = a.numel() / C;
  std::vector<double> out(a.numel());
  std::vector<double> inv_std(rows);
  const double* in = a.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = in + r * C;
    double mu = 0.0;
    for (int64_t i = 0; i < C; ++i) mu += x[i];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (int64_t i = 0; i < C; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    double* y = out.data() + r * C;
    for (int64_t i = 0; i < C; ++i) y[i] = (x[i] - mu) * inv;
  }
  return Tensor(make_op(sa, std::move(out), {a.node()}, [C, rows, inv_std](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * C;
      const double* g = self.grad.data() + r * C;
      double* dx = p.grad.data() + r * C;
      double gm = 0.0, gym = 0.0;
      for (int64_t i = 0; i < C; ++i) {
        gm += g[i];
        gym += g[i] * y[i];
      }
      gm /= static_cast<double>(C);
      gym /= static_cast<double>(C);
      const double inv = inv_std[r];
      for (int64_t i = 0; i < C; ++i) dx[i] += inv * (g[i] - gm - y[i] * gym);
    }
  }));
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / M_SQRT2)); }

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out[i] = gelu_scalar(av[i]);
  return Tensor(make_op(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    for (size_t i = 0; i < self.value.size(); ++i) {
      const double x = p.value[i];
      const double phi = 0.5 * (1.0 + std::erf(x / M_SQRT2));
      const double dens = std::exp(-0.5 * x * x) * inv_sqrt_2pi;
      p.grad[i] += self.grad[i] * (phi + x * dens);
    }
  }));
}

Tensor tanh_op(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  return Tensor(make_op(a.shape(), std::move(out), {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.value.size(); ++i)
      p.grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  }));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets, int64_t ignore_index) {
  if (logits.rank() != 2) throw std::runtime_error("cross_entropy: logits must be rank 2");
  const int64_t N = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != N)
    throw std::runtime_error("cross_entropy: target count " + std::to_string(targets.size()) +
                             " does not match rows " + std::to_string(N));
  int64_t count = 0;
  for (int64_t t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= V) throw std::runtime_error("cross_entropy: target out of range");
    ++count;
  }
  if (count == 0) throw std::runtime_error("cross_entropy: no scored positions");

  const double* x = logits.values().data();
  double loss = 0.0;
  for (int64_t r = 0; r < N; ++r) {
    if (targets[r] == ignore_index) continue;
    const double* row = x + r * V;
    double m = row[0];
    for (int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
    loss += (m + std::log(s)) - row[targets[r]];
  }
  loss /= static_cast<double>(count);

  return Tensor(make_op({1}, {loss}, {logits.node()},
                        [targets, ignore_index, N, V, count](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    const double g = self.grad[0] / static_cast<double>(count);
    for (int64_t r = 0; r < N; ++r) {
      if (targets[r] == ignore_index) continue;
      const double* row = p.value.data() + r * V;
      double* dst = p.grad.data() + r * V;
      double m = row[0];
      for (int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
      double s = 0.0;
      for (int64_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
      for (int64_t j = 0; j < V; ++j) {
        const double prob = std::exp(row[j] - m) / s;
        dst[j] += g * (prob - (j == targets[r] ? 1.0 : 0.0));
      }
    }
  }));
}

Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::runtime_error("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<uint8_t> keep(a.numel());
  for (auto& k : keep) k = rng.bernoulli(1.0 - rate) ? 1 : 0;
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out[i] = keep[i] ? av[i] * keep_scale : 0.0;
  return Tensor(make_op(a.shape(), std::move(out), {a.node()}, [keep, keep_scale](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.value.size(); ++i)
      if (keep[i]) p.grad[i] += self.grad[i] * keep_scale;
  }));
}

Tensor masked_fill(const Tensor& a, const std::vector<uint8_t>& keep, double value) {
  if (static_cast<int64_t>(keep.size()) != a.numel())
    throw std::runtime_error("masked_fill: mask size " + std::to_string(keep.size()) +
                             " does not match tensor " + shape_str(a.shape()));
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out[i] = keep[i] ? av[i] : value;
  return Tensor(make_op(a.shape(), std::move(out), {a.node()}, [keep](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (size_t i = 0; i < self.value.size(); ++i)
      if (keep[i]) p.grad[i] += self.grad[i];
  }));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor(make_op({1}, {s}, {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    ensure_grad(p);
    for (auto& g : p.grad) g += self.grad[0];
  }));
}

Tensor mean(const Tensor& a) { return div_scalar(sum(a), static_cast<double>(a.numel())); }

// --- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::runtime_error("backward: undefined loss");
  Node* root = loss.node().get();
  if (shape_numel(root->shape) != 1)
    throw std::runtime_error("backward: loss must be scalar, got " + shape_str(root->shape));
  if (!root->requires_grad) return;

  // Post-order over requires_grad ancestors: parents precede children.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch space per pass; leaf gradients persist
  // and accumulate across passes.
  for (Node* n : order) {
    if (n->leaf) {
      ensure_grad(*n);
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

double finite_difference_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double h) {
  if (h < 1e-7 || h > 1e-3) throw UsageError("finite_difference_check: h must be in [1e-7, 1e-3]");
  if (!x.requires_grad()) throw std::runtime_error("finite_difference_check: x must require grad");
  x.zero_grad();
  Tensor loss = f(x);
  backward(loss);
  std::vector<double> analytic(x.grad().begin(), x.grad().end());

  auto xs = x.values_mut();
  double max_err = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double v = xs[i];
    xs[i] = v + h;
    const double lp = f(x).item();
    xs[i] = v - h;
    const double lm = f(x).item();
    xs[i] = v;
    const double numeric = (lp - lm) / (2.0 * h);
    const double g = analytic[i];
    const double err = std::abs(numeric - g) / std::max({1.0, std::abs(numeric), std::abs(g)});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace mlmlab

#include "privpool/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "privpool/parallel.hpp"

#include <cblas.h>
#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace privpool {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::vector<Real>& Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  return grad;
}

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

// Parallelism comes from parallel_for over samples; BLAS stays serial so
// results do not depend on its thread pool.
// Large tape buffers are freed and reallocated every step; keeping them on
// the heap avoids paying the page faults each time.
[[maybe_unused]] const bool kRuntimeSetup = [] {
  openblas_set_num_threads(1);
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
  return true;
}();

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) shape_error(op, "undefined operand");
  if (a.shape() != b.shape())
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Builds the result node. The node joins the tape only if a parent does.
Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool track = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

// Grad buffer of parent i, or nullptr when that parent is not tracked.
Real* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.ensure_grad().data();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// For every element of `shape`, the flat index of the element it reduces into.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& reduced) {
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) out_shape.push_back(reduced[i] ? 1 : shape[i]);
  const auto out_strides = strides_of(out_shape);
  const std::size_t n = numel(shape);
  std::vector<std::size_t> map(n);
  // Odometer over the input index; `o` tracks the output offset incrementally.
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t o = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      const std::size_t step = reduced[d] ? 0 : out_strides[d];
      if (++idx[d] < shape[d]) {
        o += step;
        break;
      }
      o -= step * (shape[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

struct ReductionPlan {
  Shape out_shape;
  std::vector<std::size_t> map;
  std::size_t out_size = 0;
  std::size_t group = 1;  // elements per output
};

ReductionPlan plan_reduction(const char* op, const Shape& shape,
                             const std::vector<std::size_t>& axes, bool keepdim) {
  std::vector<bool> reduced(shape.size(), false);
  for (auto a : axes) {
    if (a >= shape.size())
      shape_error(op, "axis " + std::to_string(a) + " out of range for " + shape_str(shape));
    if (reduced[a]) shape_error(op, "duplicate axis " + std::to_string(a));
    reduced[a] = true;
  }
  ReductionPlan plan;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) {
      plan.group *= shape[d];
      if (keepdim) plan.out_shape.push_back(1);
    } else {
      plan.out_shape.push_back(shape[d]);
    }
  }
  plan.out_size = numel(plan.out_shape);
  plan.map = reduction_map(shape, reduced);
  return plan;
}

template <typename F>
Tensor unary(const char* op, const Tensor& x, F&& fwd_deriv) {
  // fwd_deriv(v) -> pair<value, derivative>
  const auto xs = x.data();
  std::vector<Real> out(xs.size());
  std::vector<Real> deriv(x.requires_grad() ? xs.size() : 0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto [v, d] = fwd_deriv(xs[i]);
    out[i] = v;
    if (!deriv.empty()) deriv[i] = d;
  }
  return make_result(op, x.shape(), std::move(out), {x},
                     [deriv = std::move(deriv)](Node& self) {
                       Real* g = parent_grad(self, 0);
                       for (std::size_t i = 0; i < deriv.size(); ++i) g[i] += self.grad[i] * deriv[i];
                     });
}

}  // namespace

// Tensor ------------------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (numel(shape) != values.size())
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " needs " +
                                std::to_string(numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("Tensor::from: zero-sized dimension in " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::eye(std::size_t n) {
  std::vector<Real> v(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1;
  return from({n, n}, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("Tensor::dim: axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }

std::span<const Real> Tensor::data() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->data;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("Tensor: undefined");
  if (!node_->is_leaf()) throw std::logic_error("Tensor: in-place write to a tape node");
  return node_->data;
}

Real Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("Tensor::item: tensor has shape " + shape_str(shape()));
  return node_->data[0];
}

Real Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw std::invalid_argument("Tensor::at: rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (auto i : index) {
    if (i >= s[d]) throw std::out_of_range("Tensor::at: index out of range");
    flat = flat * s[d] + i;
    ++d;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_ || !node_->is_leaf()) throw std::logic_error("set_requires_grad: only leaves");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient recorded");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = shape();
  node->data = node_->data;
  return wrap(std::move(node));
}

Tensor Tensor::clone() const { return detach(); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

void Tensor::backward() const {
  if (!node_) throw std::logic_error("backward: undefined tensor");
  if (node_->data.size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(node_->shape));
  if (!node_->requires_grad) throw std::invalid_argument("backward: root is not on the tape");

  // Topological order, parents before children.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), Real(0));
  node_->ensure_grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf() && n->backward_fn) n->backward_fn(*n);
  }
}

// Elementwise -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Real* g = parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& xa = self.parents[0]->data;
    const auto& xb = self.parents[1]->data;
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * xb[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * xa[i];
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same("div", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_result("div", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& xa = self.parents[0]->data;
    const auto& xb = self.parents[1]->data;
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / xb[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] -= self.grad[i] * xa[i] / (xb[i] * xb[i]);
  });
}

Tensor scale(const Tensor& a, Real s) {
  return unary("scale", a, [s](Real v) { return std::pair{v * s, s}; });
}

Tensor add_scalar(const Tensor& a, Real s) {
  return unary("add_scalar", a, [s](Real v) { return std::pair{v + s, Real(1)}; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](Real v) { return v > 0 ? std::pair{v, Real(1)} : std::pair{Real(0), Real(0)}; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, [](Real v) {
    const Real s = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
    return std::pair{s, s * (Real(1) - s)};
  });
}

Tensor log(const Tensor& x) {
  for (Real v : x.data())
    if (!(v > 0)) throw std::domain_error("log: non-positive input");
  return unary("log", x, [](Real v) { return std::pair{std::log(v), Real(1) / v}; });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](Real v) {
    const Real e = std::exp(v);
    return std::pair{e, e};
  });
}

Tensor sqrt(const Tensor& x) {
  for (Real v : x.data())
    if (!(v > 0)) throw std::domain_error("sqrt: non-positive input");
  return unary("sqrt", x, [](Real v) {
    const Real r = std::sqrt(v);
    return std::pair{r, Real(0.5) / r};
  });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  return unary("clamp", x, [lo, hi](Real v) {
    if (v < lo) return std::pair{lo, Real(0)};
    if (v > hi) return std::pair{hi, Real(0)};
    return std::pair{v, Real(1)};
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || x.ndim() == 0 || x.shape().back() != bias.dim(0))
    shape_error("add_bias", "cannot add bias " + shape_str(bias.shape()) + " to " + shape_str(x.shape()));
  const std::size_t c = bias.dim(0);
  const auto xs = x.data(), bs = bias.data();
  std::vector<Real> out(xs.size());
  const std::size_t rows = xs.size() / c;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xs[r * c + j] + bs[j];
  return make_result("add_bias", x.shape(), std::move(out), {x, bias}, [c, rows](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
  });
}

// Linear algebra ----------------------------------------------------------------

namespace {

void blas_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, blasint m, blasint n, blasint k, const double* a, blasint lda,
               const double* b, blasint ldb, double beta, double* c, blasint ldc) {
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
}

[[maybe_unused]] void blas_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, blasint m, blasint n, blasint k, const float* a, blasint lda,
               const float* b, blasint ldb, float beta, float* c, blasint ldc) {
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}

// Row-major C = op(A)·op(B) + beta·C.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const Real* a, std::size_t lda,
          const Real* b, std::size_t ldb, Real beta, Real* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  auto bi = [](std::size_t v) { return static_cast<blasint>(v); };
  blas_gemm(trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, bi(m), bi(n), bi(k), a, bi(lda), b,
            bi(ldb), beta, c, bi(ldc));
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(false, false, m, n, k, a, k, b, n, 1, c, n);
}

// c[m,k] += g[m,n] * b[k,n]^T
void gemm_acc_bt(const Real* g, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(false, true, m, k, n, g, n, b, n, 1, c, k);
}

// c[k,n] += a[m,k]^T * g[m,n]
void gemm_acc_at(const Real* a, const Real* g, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm(true, false, k, n, m, a, k, g, n, 1, c, n);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n, 0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    if (Real* g = parent_grad(self, 0)) gemm_acc_bt(self.grad.data(), self.parents[1]->data.data(), g, m, k, n);
    if (Real* g = parent_grad(self, 1)) gemm_acc_at(self.parents[0]->data.data(), self.grad.data(), g, m, k, n);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    shape_error("bmm", "incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<Real> out(batch * m * n, 0);
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  parallel_for(batch, [&](std::size_t i) {
    gemm_acc(pa + i * m * k, pb + i * k * n, out.data() + i * m * n, m, k, n);
  });
  return make_result("bmm", {batch, m, n}, std::move(out), {a, b}, [batch, m, k, n](Node& self) {
    Real* ga = parent_grad(self, 0);
    Real* gb = parent_grad(self, 1);
    const Real* da = self.parents[0]->data.data();
    const Real* db = self.parents[1]->data.data();
    const Real* go = self.grad.data();
    parallel_for(batch, [&](std::size_t i) {
      if (ga) gemm_acc_bt(go + i * m * n, db + i * k * n, ga + i * m * k, m, k, n);
      if (gb) gemm_acc_at(da + i * m * k, go + i * m * n, gb + i * k * n, m, k, n);
    });
  });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() < 2) shape_error("transpose", "needs rank >= 2, got " + shape_str(a.shape()));
  Shape s = a.shape();
  const std::size_t r = s[s.size() - 2], c = s.back();
  std::swap(s[s.size() - 2], s.back());
  const std::size_t batch = a.size() / (r * c);
  const auto x = a.data();
  std::vector<Real> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  return make_result("transpose", std::move(s), std::move(out), {a}, [batch, r, c](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
  });
}

// Convolution & pooling ---------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
  if (x.ndim() != 4 || kernel.ndim() != 4)
    shape_error("conv2d", "expects x[N,H,W,C] and kernel[kh,kw,Cin,Cout], got " + shape_str(x.shape()) +
                              " and " + shape_str(kernel.shape()));
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t KH = kernel.dim(0), KW = kernel.dim(1), CO = kernel.dim(3);
  if (kernel.dim(2) != C)
    shape_error("conv2d", "channel mismatch: input " + shape_str(x.shape()) + " kernel " +
                              shape_str(kernel.shape()));
  if (stride == 0) shape_error("conv2d", "stride must be positive");
  if (H + 2 * pad < KH || W + 2 * pad < KW)
    shape_error("conv2d", "kernel larger than padded input " + shape_str(x.shape()));
  const std::size_t HO = (H + 2 * pad - KH) / stride + 1;
  const std::size_t WO = (W + 2 * pad - KW) / stride + 1;

  // im2col rows: one per output pixel, KH*KW*C taps each (zeros outside).
  const std::size_t P = HO * WO, KK = KH * KW * C;
  auto cols = std::make_shared<std::vector<Real>>(N * P * KK, Real(0));
  std::vector<Real> out(N * P * CO, 0);
  const Real* px = x.data().data();
  const Real* pk = kernel.data().data();
  parallel_for(N, [&](std::size_t n) {
    Real* cn = cols->data() + n * P * KK;
    for (std::size_t oh = 0; oh < HO; ++oh)
      for (std::size_t ow = 0; ow < WO; ++ow) {
        Real* row = cn + (oh * WO + ow) * KK;
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            std::copy_n(px + ((n * H + ih) * W + iw) * C, C, row + (kh * KW + kw) * C);
          }
        }
      }
  });
  gemm(false, false, N * P, CO, KK, cols->data(), KK, pk, CO, 0, out.data(), CO);

  return make_result(
      "conv2d", {N, HO, WO, CO}, std::move(out), {x, kernel},
      [=](Node& self) {
        Real* gx = parent_grad(self, 0);
        Real* gk = parent_grad(self, 1);
        const Real* kd = self.parents[1]->data.data();
        const Real* go = self.grad.data();
        // BLAS is serial, so one gemm over all samples is deterministic.
        if (gk) gemm(true, false, KK, CO, N * P, cols->data(), KK, go, CO, 1, gk, CO);
        if (!gx) return;
        std::vector<Real> gcols(N * P * KK);
        gemm(false, true, N * P, KK, CO, go, CO, kd, CO, 0, gcols.data(), KK);
        parallel_for(N, [&](std::size_t n) {
          const Real* gc = gcols.data() + n * P * KK;
          for (std::size_t oh = 0; oh < HO; ++oh)
            for (std::size_t ow = 0; ow < WO; ++ow) {
              const Real* row = gc + (oh * WO + ow) * KK;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(pad);
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(pad);
                  if (iw < 0 || iw >= static_cast<long>(W)) continue;
                  Real* gxi = gx + ((n * H + ih) * W + iw) * C;
                  const Real* r = row + (kh * KW + kw) * C;
                  for (std::size_t c = 0; c < C; ++c) gxi[c] += r[c];
                }
              }
            }
        });
      });
}

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (x.ndim() != 4) shape_error("maxpool2d", "expects [N,H,W,C], got " + shape_str(x.shape()));
  if (kernel == 0 || stride == 0) shape_error("maxpool2d", "kernel and stride must be positive");
  if (pad > kernel / 2) shape_error("maxpool2d", "padding exceeds half the kernel size");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (H + 2 * pad < kernel || W + 2 * pad < kernel)
    shape_error("maxpool2d", "kernel larger than padded input " + shape_str(x.shape()));
  const std::size_t HO = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t WO = (W + 2 * pad - kernel) / stride + 1;
  const Real* px = x.data().data();
  std::vector<Real> out(N * HO * WO * C);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < HO; ++oh)
      for (std::size_t ow = 0; ow < WO; ++ow)
        for (std::size_t c = 0; c < C; ++c) {
          Real best = -std::numeric_limits<Real>::infinity();
          std::size_t best_i = 0;
          for (std::size_t kh = 0; kh < kernel; ++kh) {
            const long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(pad);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t kw = 0; kw < kernel; ++kw) {
              const long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(pad);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              const std::size_t i = ((n * H + ih) * W + iw) * C + c;
              if (px[i] > best) {
                best = px[i];
                best_i = i;
              }
            }
          }
          const std::size_t o = ((n * HO + oh) * WO + ow) * C + c;
          out[o] = best;
          arg[o] = best_i;
        }
  return make_result("maxpool2d", {N, HO, WO, C}, std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

// Reductions --------------------------------------------------------------------

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  auto plan = plan_reduction("sum", x.shape(), axes, keepdim);
  std::vector<Real> out(plan.out_size, 0);
  const auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) out[plan.map[i]] += xs[i];
  if (plan.out_shape.empty()) plan.out_shape = {1};
  return make_result("sum", std::move(plan.out_shape), std::move(out), {x},
                     [map = std::move(plan.map)](Node& self) {
                       Real* g = parent_grad(self, 0);
                       for (std::size_t i = 0; i < map.size(); ++i) g[i] += self.grad[map[i]];
                     });
}

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  auto plan = plan_reduction("mean", x.shape(), axes, keepdim);
  std::vector<Real> out(plan.out_size, 0);
  const auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) out[plan.map[i]] += xs[i];
  const Real inv = Real(1) / static_cast<Real>(plan.group);
  for (auto& v : out) v *= inv;
  if (plan.out_shape.empty()) plan.out_shape = {1};
  return make_result("mean", std::move(plan.out_shape), std::move(out), {x},
                     [map = std::move(plan.map), inv](Node& self) {
                       Real* g = parent_grad(self, 0);
                       for (std::size_t i = 0; i < map.size(); ++i) g[i] += self.grad[map[i]] * inv;
                     });
}

Tensor max(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  auto plan = plan_reduction("max", x.shape(), axes, keepdim);
  std::vector<Real> out(plan.out_size, -std::numeric_limits<Real>::infinity());
  std::vector<std::size_t> arg(plan.out_size, 0);
  const auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t o = plan.map[i];
    if (xs[i] > out[o]) {
      out[o] = xs[i];
      arg[o] = i;
    }
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};
  return make_result("max", std::move(plan.out_shape), std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

Tensor sum_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.ndim());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes);
}

Tensor mean_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.ndim());
  std::iota(axes.begin(), axes.end(), 0);
  return mean(x, axes);
}

// Shape ops ---------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    shape_error("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<Real> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  const auto& in = x.shape();
  if (in.size() != shape.size())
    shape_error("broadcast", "rank mismatch " + shape_str(in) + " -> " + shape_str(shape));
  std::vector<bool> expanded(in.size(), false);
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (in[d] == shape[d]) continue;
    if (in[d] != 1) shape_error("broadcast", "cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
    expanded[d] = true;
  }
  auto map = reduction_map(shape, expanded);
  const auto xs = x.data();
  std::vector<Real> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xs[map[i]];
  return make_result("broadcast", std::move(shape), std::move(out), {x}, [map = std::move(map)](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) ok = false;
    if (!ok) shape_error("concat", "incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
  const std::size_t row = out_shape[axis] * inner;
  std::vector<Real> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(axis) * inner;
    const auto d = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.begin() + static_cast<long>(o * block), block, out.begin() + static_cast<long>(o * row + off));
    off += block;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [outer, row, offsets = std::move(offsets)](Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Real* g = parent_grad(self, k);
                         if (!g) continue;
                         const std::size_t block = self.parents[k]->data.size() / outer;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < block; ++i)
                             g[o * block + i] += self.grad[o * row + offsets[k] + i];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis])
    shape_error("slice", "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                             ") invalid on axis " + std::to_string(axis) + " of " + shape_str(s));
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
  const std::size_t row = s[axis] * inner, block = length * inner, off = start * inner;
  const auto d = x.data();
  std::vector<Real> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(d.begin() + static_cast<long>(o * row + off), block, out.begin() + static_cast<long>(o * block));
  return make_result("slice", std::move(out_shape), std::move(out), {x}, [=](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < block; ++i) g[o * row + off + i] += self.grad[o * block + i];
  });
}

// Classification ----------------------------------------------------------------

Tensor softmax(const Tensor& logits) {
  if (logits.ndim() == 0) shape_error("softmax", "empty shape");
  const std::size_t c = logits.shape().back();
  const std::size_t rows = logits.size() / c;
  const auto x = logits.data();
  std::vector<Real> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * c;
    Real* yr = out.data() + r * c;
    const Real m = *std::max_element(xr, xr + c);
    Real z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
  }
  return make_result("softmax", logits.shape(), out, {logits}, [rows, c, y = out](Node& self) {
    Real* g = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = y.data() + r * c;
      const Real* gr = self.grad.data() + r * c;
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.ndim() != 2) shape_error("cross_entropy", "expects logits [N,C], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n)
    shape_error("cross_entropy", std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      shape_error("cross_entropy", "label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
  const auto x = logits.data();
  std::vector<Real> prob(x.size());
  Real loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const Real* xr = x.data() + r * c;
    const Real m = *std::max_element(xr, xr + c);
    Real z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (prob[r * c + j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < c; ++j) prob[r * c + j] /= z;
    loss += m + std::log(z) - xr[labels[r]];
  }
  loss /= static_cast<Real>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result("cross_entropy", {1}, {loss}, {logits},
                     [n, c, prob = std::move(prob), ys = std::move(ys)](Node& self) {
                       Real* g = parent_grad(self, 0);
                       const Real s = self.grad[0] / static_cast<Real>(n);
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < c; ++j)
                           g[r * c + j] += s * (prob[r * c + j] - (static_cast<int>(j) == ys[r] ? Real(1) : Real(0)));
                     });
}

// Named dispatch ----------------------------------------------------------------

namespace {

std::vector<std::size_t> as_sizes(const std::vector<double>& p, std::size_t from = 0) {
  std::vector<std::size_t> out;
  for (std::size_t i = from; i < p.size(); ++i) {
    if (p[i] < 0) throw std::invalid_argument("forward_op: negative size parameter");
    out.push_back(static_cast<std::size_t>(p[i]));
  }
  return out;
}

void need_inputs(const std::string& name, const std::vector<Tensor>& in, std::size_t n) {
  if (in.size() != n)
    throw std::invalid_argument("forward_op " + name + ": expects " + std::to_string(n) + " inputs, got " +
                                std::to_string(in.size()));
}

}  // namespace

Tensor forward_op(const std::string& name, const std::vector<Tensor>& in, const std::vector<double>& params,
                  std::span<const int> labels) {
  const auto p = as_sizes(params);
  auto param = [&](std::size_t i) {
    if (i >= p.size()) throw std::invalid_argument("forward_op " + name + ": missing parameter");
    return p[i];
  };
  if (name == "add") return need_inputs(name, in, 2), add(in[0], in[1]);
  if (name == "sub") return need_inputs(name, in, 2), sub(in[0], in[1]);
  if (name == "mul") return need_inputs(name, in, 2), mul(in[0], in[1]);
  if (name == "div") return need_inputs(name, in, 2), div(in[0], in[1]);
  if (name == "matmul") return need_inputs(name, in, 2), matmul(in[0], in[1]);
  if (name == "bmm") return need_inputs(name, in, 2), bmm(in[0], in[1]);
  if (name == "conv2d") return need_inputs(name, in, 2), conv2d(in[0], in[1], param(0), param(1));
  if (name == "relu") return need_inputs(name, in, 1), relu(in[0]);
  if (name == "sigmoid") return need_inputs(name, in, 1), sigmoid(in[0]);
  if (name == "log") return need_inputs(name, in, 1), log(in[0]);
  if (name == "exp") return need_inputs(name, in, 1), exp(in[0]);
  if (name == "sqrt") return need_inputs(name, in, 1), sqrt(in[0]);
  if (name == "mean") return need_inputs(name, in, 1), mean(in[0], p);
  if (name == "sum") return need_inputs(name, in, 1), sum(in[0], p);
  if (name == "max") return need_inputs(name, in, 1), max(in[0], p);
  if (name == "maxpool2d") return need_inputs(name, in, 1), maxpool2d(in[0], param(0), param(1), param(2));
  if (name == "concat") return concat(in, param(0));
  if (name == "reshape") return need_inputs(name, in, 1), reshape(in[0], p);
  if (name == "broadcast") return need_inputs(name, in, 1), broadcast_to(in[0], p);
  if (name == "transpose") return need_inputs(name, in, 1), transpose(in[0]);
  if (name == "softmax") return need_inputs(name, in, 1), softmax(in[0]);
  if (name == "cross_entropy") return need_inputs(name, in, 1), cross_entropy(in[0], labels);
  throw std::invalid_argument("forward_op: unknown op '" + name + "'");
}

// Gradient check ----------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           const std::vector<Tensor>& inputs, double tolerance, double h, double floor) {
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, true));
  Tensor root = fn(leaves);
  root.backward();

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto analytic = leaves[k].has_grad() ? std::vector<Real>(leaves[k].grad().begin(), leaves[k].grad().end())
                                               : std::vector<Real>(leaves[k].size(), Real(0));
    double worst = 0;
    std::vector<Real> base(inputs[k].data().begin(), inputs[k].data().end());
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          if (j != k) {
            probe.push_back(inputs[j].detach());
            continue;
          }
          auto v = base;
          v[i] = static_cast<Real>(static_cast<double>(v[i]) + delta);
          probe.push_back(Tensor::from(inputs[k].shape(), std::move(v)));
        }
        return static_cast<double>(fn(probe).item());
      };
      const double numeric = (eval_at(h) - eval_at(-h)) / (2 * h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.pass = report.worst < tolerance;
  return report;
}

// Serialization -----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'T', 'N', 'S'};

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("PTNS: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_le<std::uint8_t>(os, sizeof(Real) == 4 ? 1 : 2);
  if (t.ndim() > 255) throw std::invalid_argument("PTNS: rank exceeds 255");
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (Real v : t.data()) put_le<Real>(os, v);
  if (!os) throw std::runtime_error("PTNS: write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("PTNS: bad magic");
  const auto dtype = get_le<std::uint8_t>(is);
  if (dtype != 1 && dtype != 2) throw std::runtime_error("PTNS: unknown dtype code " + std::to_string(dtype));
  const auto ndim = get_le<std::uint8_t>(is);
  Shape shape;
  for (std::size_t i = 0; i < ndim; ++i) shape.push_back(get_le<std::uint32_t>(is));
  std::vector<Real> values(numel(shape));
  for (auto& v : values)
    v = dtype == 1 ? static_cast<Real>(get_le<float>(is)) : static_cast<Real>(get_le<double>(is));
  return Tensor::from(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor(is);
}

}  // namespace privpool

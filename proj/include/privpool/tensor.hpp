#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace privpool {

#ifdef PRIVPOOL_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  std::vector<Real>& ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a shared node. Nodes created by ops are
/// immutable; only leaves may be modified in place (by the optimizer, between
/// steps) through `mutable_data()`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  /// n×n identity.
  static Tensor eye(std::size_t n);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t size() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();

  /// Same data, cut from the tape.
  Tensor detach() const;
  /// Independent copy of the data (no tape link).
  Tensor clone() const;

  /// Reverse sweep from this scalar; leaf grads accumulate across calls.
  void backward() const;

  const char* op_name() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise (identical shapes required).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Scalar ops.
Tensor scale(const Tensor& a, Real s);
Tensor add_scalar(const Tensor& a, Real s);

// Unary.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
/// Gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, Real lo, Real hi);

/// x[..., C] + b[C]
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// [m,k] x [k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,m,k] x [B,k,n]
Tensor bmm(const Tensor& a, const Tensor& b);
/// Swap the last two axes.
Tensor transpose(const Tensor& a);

/// NHWC cross-correlation with zero padding. kernel: [kh,kw,Cin,Cout].
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad);
/// NHWC max pooling; padded cells never win.
Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
/// Max reduction; ties go to the first element in row-major order.
Tensor max(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// Expands size-1 axes to `shape`; ranks must agree.
Tensor broadcast_to(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// x[..., start:start+length, ...] along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// Softmax over the last axis.
Tensor softmax(const Tensor& logits);
/// Mean negative log-likelihood of `labels` under softmax(logits[N,C]).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Generic named dispatch for the op set; `params` carries integer/real
/// arguments in the order the typed function takes them.
Tensor forward_op(const std::string& name, const std::vector<Tensor>& inputs,
                  const std::vector<double>& params = {}, std::span<const int> labels = {});

// Gradient checking -----------------------------------------------------------

struct GradCheckReport {
  std::vector<double> max_rel_error;  // per input
  double worst = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Compares backward() against central differences (f(x+h)-f(x-h))/2h for
/// every element of every input. Relative error is |a-n| / max(|a|,|n|,floor).
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           const std::vector<Tensor>& inputs, double tolerance, double h = 1e-5,
                           double floor = 1e-3);

// Serialization ---------------------------------------------------------------
// "PTNS", u8 dtype (1 = f32, 2 = f64), u8 ndim, u32 dims[ndim], raw LE data.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace privpool

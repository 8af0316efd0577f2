#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace watt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense float64 array that records the operations producing it so that
// gradients can be pulled back from a scalar loss.
//
// Copies are shallow: two Tensor handles may refer to the same storage.
// Use clone() for an independent leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view of the storage. Only meaningful on leaves; writing into a
  // tensor that already fed a graph invalidates that graph's saved values.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Reverse-mode sweep from this scalar. Gradients accumulate into every
  // reachable leaf with requires_grad.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const char* op_name() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording switch, per thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise binary ops. `b` must have the same shape as `a` or a shape equal
// to a trailing suffix of `a`'s shape; it is then repeated over the leading
// dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
// x*log(x) with the convention 0*log(0) = 0.
Tensor xlogx(const Tensor& a);
// Exact (erf-based) GELU.
Tensor gelu(const Tensor& a);

// [..., n, k] x [k, m] -> [..., n, m], or batched [b..., n, k] x [b..., k, m].
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& a, int axis, std::size_t start, std::size_t length);
// Rows of a [V, d] table picked by index -> [ids.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
Tensor l2_normalize(const Tensor& a, int axis);

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over `axis` with population variance; gamma and beta have shape
// [a.size(axis)].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis = -1,
                  double eps = kLayerNormEps);

}  // namespace watt

#include "watt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace watt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;
using BackwardFn = std::function<void(detail::Node&)>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_to_string(a) +
                              " and " + shape_to_string(b));
}

std::size_t normalize_axis(int axis, std::size_t dim, const char* op) {
  const int d = static_cast<int>(dim);
  const int a = axis < 0 ? axis + d : axis;
  if (a < 0 || a >= d) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(dim));
  }
  return static_cast<std::size_t>(a);
}

// outer x len x inner decomposition around one axis.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisLayout layout_of(const Shape& shape, std::size_t axis) {
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> inputs,
                   const char* op, BackwardFn fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Suffix broadcast check; returns how many times b repeats inside a.
std::size_t broadcast_repeats(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size()) shape_error(op, a, b);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) shape_error(op, a, b);
  }
  return numel(a) / std::max<std::size_t>(numel(b), 1);
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
  const std::size_t reps = broadcast_repeats(a.shape(), b.shape(), op);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t j = 0; j < nb; ++j) {
      const std::size_t i = r * nb + j;
      out[i] = fwd(av[i], bv[j]);
    }
  }
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, op,
                     [reps, nb, da, db](detail::Node& self) {
                       auto& an = *self.inputs[0];
                       auto& bn = *self.inputs[1];
                       const auto& g = self.grad;
                       if (an.requires_grad) {
                         auto& ga = an.grad_buffer();
                         for (std::size_t r = 0; r < reps; ++r)
                           for (std::size_t j = 0; j < nb; ++j) {
                             const std::size_t i = r * nb + j;
                             ga[i] += g[i] * da(an.data[i], bn.data[j], self.data[i]);
                           }
                       }
                       if (bn.requires_grad) {
                         auto& gb = bn.grad_buffer();
                         for (std::size_t r = 0; r < reps; ++r)
                           for (std::size_t j = 0; j < nb; ++j) {
                             const std::size_t i = r * nb + j;
                             gb[j] += g[i] * db(an.data[i], bn.data[j], self.data[i]);
                           }
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a.node()}, op, [deriv](detail::Node& self) {
    auto& an = *self.inputs[0];
    auto& ga = an.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(an.data[i], self.data[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = watt::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (watt::numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor::from: shape " + shape_to_string(shape) + " needs " +
                                std::to_string(watt::numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::size(int axis) const { return shape()[normalize_axis(axis, dim(), "size")]; }

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor of shape " + shape_to_string(shape()) + " is not a scalar");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != dim()) throw std::invalid_argument("at: index rank does not match " + shape_to_string(shape()));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= shape()[k]) throw std::out_of_range("at: index out of range for " + shape_to_string(shape()));
    flat = flat * shape()[k] + i;
    ++k;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad: only leaves can change requires_grad");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return !node_->backward; }

bool Tensor::has_grad() const { return !node_->data.empty() && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad: tensor has no populated gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) {
      n->grad_buffer();
      n->backward(*n);
    }
  }
  for (auto* n : order) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone() const { return from(shape(), node_->data, node_->requires_grad); }

const char* Tensor::op_name() const { return node_->op; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor xlogx(const Tensor& a) {
  return unary_op(
      a, "xlogx", [](double x) { return x == 0.0 ? 0.0 : x * std::log(x); },
      [](double x, double) {
        return std::log(std::max(x, std::numeric_limits<double>::min())) + 1.0;
      });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary_op(
      a, "gelu", [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  const std::size_t n = a.shape()[a.dim() - 2];
  const std::size_t m = b.shape().back();
  if (b.shape()[b.dim() - 2] != k) shape_error("matmul", a.shape(), b.shape());

  if (b.dim() == 2) {
    const std::size_t rows = a.numel() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(m);
    std::vector<double> out(rows * m);
    MutMap(out.data(), rows, m).noalias() = ConstMap(a.data().data(), rows, k) * ConstMap(b.data().data(), k, m);
    return make_result(std::move(out_shape), std::move(out), {a.node(), b.node()}, "matmul",
                       [rows, k, m](detail::Node& self) {
                         auto& an = *self.inputs[0];
                         auto& bn = *self.inputs[1];
                         ConstMap g(self.grad.data(), rows, m);
                         if (an.requires_grad) {
                           MutMap(an.grad_buffer().data(), rows, k).noalias() +=
                               g * ConstMap(bn.data.data(), k, m).transpose();
                         }
                         if (bn.requires_grad) {
                           MutMap(bn.grad_buffer().data(), k, m).noalias() +=
                               ConstMap(an.data.data(), rows, k).transpose() * g;
                         }
                       });
  }

  if (a.dim() != b.dim() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t batch = a.numel() / (n * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(m);
  std::vector<double> out(batch * n * m);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * n * m, n, m).noalias() =
        ConstMap(a.data().data() + i * n * k, n, k).lazyProduct(ConstMap(b.data().data() + i * k * m, k, m));
  }
  return make_result(std::move(out_shape), std::move(out), {a.node(), b.node()}, "matmul",
                     [batch, n, k, m](detail::Node& self) {
                       auto& an = *self.inputs[0];
                       auto& bn = *self.inputs[1];
                       for (std::size_t i = 0; i < batch; ++i) {
                         ConstMap g(self.grad.data() + i * n * m, n, m);
                         if (an.requires_grad) {
                           MutMap(an.grad_buffer().data() + i * n * k, n, k).noalias() +=
                               g.lazyProduct(ConstMap(bn.data.data() + i * k * m, k, m).transpose());
                         }
                         if (bn.requires_grad) {
                           MutMap(bn.grad_buffer().data() + i * k * m, k, m).noalias() +=
                               ConstMap(an.data.data() + i * n * k, n, k).transpose().lazyProduct(g);
                         }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.dim() < 2) throw std::invalid_argument("transpose: needs rank >= 2, got " + shape_to_string(a.shape()));
  const std::size_t r = a.shape()[a.dim() - 2];
  const std::size_t c = a.shape().back();
  const std::size_t batch = a.numel() / std::max<std::size_t>(r * c, 1);
  Shape out_shape = a.shape();
  std::swap(out_shape[a.dim() - 2], out_shape[a.dim() - 1]);
  std::vector<double> out(a.numel());
  const auto av = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
  return make_result(std::move(out_shape), std::move(out), {a.node()}, "transpose",
                     [batch, r, c](detail::Node& self) {
                       auto& ga = self.inputs[0]->grad_buffer();
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             ga[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a.node()}, "reshape", [](detail::Node& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, ref.size(), "concat");
  Shape out_shape = ref;
  out_shape[ax] = 0;
  std::vector<std::size_t> widths;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    if (p.dim() != ref.size()) shape_error("concat", ref, p.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != ax && p.shape()[i] != ref[i]) shape_error("concat", ref, p.shape());
    }
    out_shape[ax] += p.shape()[ax];
    widths.push_back(layout_of(p.shape(), ax).len * layout_of(p.shape(), ax).inner);
    inputs.push_back(p.node());
  }
  const std::size_t outer = layout_of(ref, ax).outer;
  std::size_t row = 0;
  for (auto w : widths) row += w;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * widths[p], widths[p], out.begin() + o * row + offset);
    offset += widths[p];
  }
  return make_result(std::move(out_shape), std::move(out), std::move(inputs), "concat",
                     [outer, row, widths](detail::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < widths.size(); ++p) {
                         auto& in = *self.inputs[p];
                         if (in.requires_grad) {
                           auto& g = in.grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < widths[p]; ++j)
                               g[o * widths[p] + j] += self.grad[o * row + off + j];
                         }
                         off += widths[p];
                       }
                     });
}

Tensor narrow(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.dim(), "narrow");
  if (start + length > a.shape()[ax]) {
    throw std::invalid_argument("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                ") exceeds axis of " + shape_to_string(a.shape()));
  }
  const AxisLayout l = layout_of(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  std::vector<double> out(l.outer * length * l.inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    std::copy_n(av.begin() + (o * l.len + start) * l.inner, length * l.inner, out.begin() + o * length * l.inner);
  return make_result(std::move(out_shape), std::move(out), {a.node()}, "narrow",
                     [l, start, length](detail::Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t o = 0; o < l.outer; ++o)
                         for (std::size_t j = 0; j < length * l.inner; ++j)
                           g[(o * l.len + start) * l.inner + j] += self.grad[o * length * l.inner + j];
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.dim() != 2) throw std::invalid_argument("gather_rows: table must be 2-D, got " + shape_to_string(table.shape()));
  const std::size_t rows = table.shape()[0];
  const std::size_t d = table.shape()[1];
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) + " >= " + std::to_string(rows));
    std::copy_n(tv.begin() + idx[i] * d, d, out.begin() + i * d);
  }
  return make_result({idx.size(), d}, std::move(out), {table.node()}, "gather_rows",
                     [idx, d](detail::Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                     });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.dim(), "sum");
  const AxisLayout l = layout_of(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(l.outer * l.inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < l.len; ++k)
      for (std::size_t i = 0; i < l.inner; ++i) out[o * l.inner + i] += av[(o * l.len + k) * l.inner + i];
  return make_result(std::move(out_shape), std::move(out), {a.node()}, "sum", [l](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t k = 0; k < l.len; ++k)
        for (std::size_t i = 0; i < l.inner; ++i) g[(o * l.len + k) * l.inner + i] += self.grad[o * l.inner + i];
  });
}

Tensor mean(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.dim(), "mean");
  if (a.shape()[ax] == 0) throw std::invalid_argument("mean: empty axis in " + shape_to_string(a.shape()));
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({}, {total}, {a.node()}, "sum_all", [](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.dim(), "softmax");
  const AxisLayout l = layout_of(a.shape(), ax);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, av[base + k * l.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) {
        const double e = std::exp(av[base + k * l.inner] - mx);
        out[base + k * l.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] /= total;
    }
  return make_result(a.shape(), std::move(out), {a.node()}, "softmax", [l](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.len * l.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < l.len; ++k) dot += self.grad[base + k * l.inner] * self.data[base + k * l.inner];
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t j = base + k * l.inner;
          g[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.dim(), "log_softmax");
  const AxisLayout l = layout_of(a.shape(), ax);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, av[base + k * l.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) total += std::exp(av[base + k * l.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] = av[base + k * l.inner] - lse;
    }
  return make_result(a.shape(), std::move(out), {a.node()}, "log_softmax", [l](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.len * l.inner + i;
        double gsum = 0.0;
        for (std::size_t k = 0; k < l.len; ++k) gsum += self.grad[base + k * l.inner];
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t j = base + k * l.inner;
          g[j] += self.grad[j] - std::exp(self.data[j]) * gsum;
        }
      }
  });
}

Tensor l2_normalize(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.dim(), "l2_normalize");
  const AxisLayout l = layout_of(a.shape(), ax);
  const auto av = a.data();
  std::vector<double> out(av.size());
  std::vector<double> norms(l.outer * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) ss += av[base + k * l.inner] * av[base + k * l.inner];
      const double nrm = std::max(std::sqrt(ss), std::numeric_limits<double>::min());
      norms[o * l.inner + i] = nrm;
      for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] = av[base + k * l.inner] / nrm;
    }
  return make_result(a.shape(), std::move(out), {a.node()}, "l2_normalize",
                     [l, norms = std::move(norms)](detail::Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t o = 0; o < l.outer; ++o)
                         for (std::size_t i = 0; i < l.inner; ++i) {
                           const std::size_t base = o * l.len * l.inner + i;
                           double dot = 0.0;
                           for (std::size_t k = 0; k < l.len; ++k)
                             dot += self.grad[base + k * l.inner] * self.data[base + k * l.inner];
                           const double inv = 1.0 / norms[o * l.inner + i];
                           for (std::size_t k = 0; k < l.len; ++k) {
                             const std::size_t j = base + k * l.inner;
                             g[j] += (self.grad[j] - self.data[j] * dot) * inv;
                           }
                         }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "layer_norm");
  const AxisLayout l = layout_of(x.shape(), ax);
  if (l.len < 1) throw std::invalid_argument("layer_norm: empty normalization axis");
  if (gamma.shape() != Shape{l.len}) shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{l.len}) shape_error("layer_norm", x.shape(), beta.shape());

  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(l.outer * l.inner);
  const double n = static_cast<double>(l.len);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mu = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) mu += xv[base + k * l.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) {
        const double d = xv[base + k * l.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * l.inner + i] = is;
      for (std::size_t k = 0; k < l.len; ++k) {
        const std::size_t j = base + k * l.inner;
        xhat[j] = (xv[j] - mu) * is;
        out[j] = xhat[j] * gv[k] + bv[k];
      }
    }
  return make_result(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()}, "layer_norm",
                     [l, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                       auto& xn = *self.inputs[0];
                       auto& gn = *self.inputs[1];
                       auto& bn = *self.inputs[2];
                       const auto& dy = self.grad;
                       if (gn.requires_grad || bn.requires_grad) {
                         auto& dg = gn.grad_buffer();
                         auto& db = bn.grad_buffer();
                         for (std::size_t o = 0; o < l.outer; ++o)
                           for (std::size_t k = 0; k < l.len; ++k)
                             for (std::size_t i = 0; i < l.inner; ++i) {
                               const std::size_t j = (o * l.len + k) * l.inner + i;
                               dg[k] += dy[j] * xhat[j];
                               db[k] += dy[j];
                             }
                         if (!gn.requires_grad) gn.grad.clear();
                         if (!bn.requires_grad) bn.grad.clear();
                       }
                       if (xn.requires_grad) {
                         auto& dx = xn.grad_buffer();
                         for (std::size_t o = 0; o < l.outer; ++o)
                           for (std::size_t i = 0; i < l.inner; ++i) {
                             const std::size_t base = o * l.len * l.inner + i;
                             double s1 = 0.0;
                             double s2 = 0.0;
                             for (std::size_t k = 0; k < l.len; ++k) {
                               const std::size_t j = base + k * l.inner;
                               const double dxh = dy[j] * gn.data[k];
                               s1 += dxh;
                               s2 += dxh * xhat[j];
                             }
                             const double is = inv_std[o * l.inner + i];
                             for (std::size_t k = 0; k < l.len; ++k) {
                               const std::size_t j = base + k * l.inner;
                               const double dxh = dy[j] * gn.data[k];
                               dx[j] += is / n * (n * dxh - s1 - xhat[j] * s2);
                             }
                           }
                       }
                     });
}

}  // namespace watt

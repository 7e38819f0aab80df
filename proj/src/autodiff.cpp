#include "trajdiv/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace trajdiv::ad {
namespace {

std::atomic<std::uint64_t> g_sequence{0};

std::uint64_t next_seq() { return g_sequence.fetch_add(1, std::memory_order_relaxed) + 1; }

// Index mapping for the limited broadcasting the elementwise ops accept.
struct Broadcast {
  enum class Kind { same, scalar_a, scalar_b, row_b } kind = Kind::same;
  Shape out_shape;
  std::size_t cols = 1;

  std::size_t ai(std::size_t i) const { return kind == Kind::scalar_a ? 0 : i; }
  std::size_t bi(std::size_t i) const {
    switch (kind) {
      case Kind::same:
      case Kind::scalar_a:
        return i;
      case Kind::scalar_b:
        return 0;
      case Kind::row_b:
        return i % cols;
    }
    return i;
  }
};

Broadcast broadcast(const char* op, const Tensor& a, const Tensor& b, bool allow_scalar_a) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out_shape = a.shape();
  } else if (b.size() == 1) {
    bc.kind = Broadcast::Kind::scalar_b;
    bc.out_shape = a.shape();
  } else if (allow_scalar_a && a.size() == 1) {
    bc.kind = Broadcast::Kind::scalar_a;
    bc.out_shape = b.shape();
  } else if (a.rank() == 2 && ((b.rank() == 1 && b.dim(0) == a.dim(1)) ||
                               (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == a.dim(1)))) {
    bc.kind = Broadcast::Kind::row_b;
    bc.out_shape = a.shape();
    bc.cols = a.dim(1);
  } else {
    throw ShapeError(std::string(op) + ": cannot combine shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  return bc;
}

void check_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename F, typename DF>
Var unary(const Var& a, const char* name, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_op(std::move(y), {a}, name, [a, df](Node& self) {
    const Tensor& x = a.value();
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = self.grad[i] * df(x[i], self.value[i]);
    accumulate_grad(a, std::move(g));
  });
}

// outer/inner extents around one axis of a shape.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad, std::string name) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->name = std::move(name);
  node_->seq = next_seq();
}

Tensor& Var::mutable_value() {
  if (!node_->is_leaf) throw std::logic_error("mutable_value() on a non-leaf Var");
  return node_->value;
}

void Var::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw std::logic_error("set_requires_grad() on a non-leaf Var");
  node_->requires_grad = flag;
}

Var make_op(Tensor value, const std::vector<Var>& inputs, const char* op_name,
            std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) {
    throw NumericalError(std::string(op_name) + ": non-finite value in forward result");
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->is_leaf = false;
  node->name = op_name;
  node->seq = next_seq();
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Var& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void accumulate_grad(const Var& v, const Tensor& g) {
  if (!v.requires_grad()) return;
  Node* n = v.node();
  if (n->grad.empty()) {
    n->grad = g;
  } else {
    n->grad.add_(g);
  }
}

void accumulate_grad(const Var& v, Tensor&& g) {
  if (!v.requires_grad()) return;
  Node* n = v.node();
  if (n->grad.empty()) {
    n->grad = std::move(g);
  } else {
    n->grad.add_(g);
  }
}

void backward(const Var& loss, BackwardOptions options) {
  if (!loss.defined()) throw std::invalid_argument("backward() on an undefined Var");
  if (loss.size() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (root->consumed) throw std::logic_error("backward(): computation record already consumed");
  if (!root->requires_grad) return;

  if (root->is_leaf) {
    accumulate_grad(loss, Tensor(root->value.shape(), options.upstream));
    return;
  }

  // Owning references: releasing one node's closure must not free another
  // node that is still to be visited.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{loss.node_ptr()};
  seen.insert(root);
  while (!stack.empty()) {
    std::shared_ptr<Node> n = std::move(stack.back());
    stack.pop_back();
    if (n->is_leaf) continue;
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  for (const auto& n : order) n->grad = Tensor();
  root->grad = Tensor(root->value.shape(), options.upstream);
  for (const auto& n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }

  if (!options.retain_graph) {
    for (const auto& n : order) {
      n->backward = nullptr;
      n->inputs.clear();
      n->grad = Tensor();
      n->consumed = true;
    }
  }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var parameter(Tensor value, std::string name) { return Var(std::move(value), true, std::move(name)); }

Var add(const Var& a, const Var& b) {
  const Broadcast bc = broadcast("add", a.value(), b.value(), true);
  Tensor out(bc.out_shape);
  const auto& x = a.value();
  const auto& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[bc.ai(i)] + y[bc.bi(i)];
  return make_op(std::move(out), {a, b}, "add", [a, b, bc](Node& self) {
    if (a.requires_grad()) {
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[bc.ai(i)] += self.grad[i];
      accumulate_grad(a, std::move(ga));
    }
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bc.bi(i)] += self.grad[i];
      accumulate_grad(b, std::move(gb));
    }
  });
}

Var sub(const Var& a, const Var& b) {
  const Broadcast bc = broadcast("sub", a.value(), b.value(), false);
  Tensor out(bc.out_shape);
  const auto& x = a.value();
  const auto& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[bc.bi(i)];
  return make_op(std::move(out), {a, b}, "sub", [a, b, bc](Node& self) {
    accumulate_grad(a, self.grad);
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bc.bi(i)] -= self.grad[i];
      accumulate_grad(b, std::move(gb));
    }
  });
}

Var mul(const Var& a, const Var& b) {
  const Broadcast bc = broadcast("mul", a.value(), b.value(), true);
  Tensor out(bc.out_shape);
  const auto& x = a.value();
  const auto& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[bc.ai(i)] * y[bc.bi(i)];
  return make_op(std::move(out), {a, b}, "mul", [a, b, bc](Node& self) {
    const auto& x = a.value();
    const auto& y = b.value();
    if (a.requires_grad()) {
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[bc.ai(i)] += self.grad[i] * y[bc.bi(i)];
      accumulate_grad(a, std::move(ga));
    }
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bc.bi(i)] += self.grad[i] * x[bc.ai(i)];
      accumulate_grad(b, std::move(gb));
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  out.scale_(factor);
  return make_op(std::move(out), {a}, "scale", [a, factor](Node& self) {
    Tensor g = self.grad;
    g.scale_(factor);
    accumulate_grad(a, std::move(g));
  });
}

Var add_scalar(const Var& a, double value) {
  Tensor out = a.value();
  for (double& v : out.data()) v += value;
  return make_op(std::move(out), {a}, "add_scalar", [a](Node& self) { accumulate_grad(a, self.grad); });
}

Var matmul(const Var& a, const Var& b) {
  check_matrix("matmul", a.value());
  check_matrix("matmul", b.value());
  if (a.value().cols() != b.value().rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.value().rows(), b.value().cols()});
  out.mat().noalias() = a.value().mat() * b.value().mat();
  return make_op(std::move(out), {a, b}, "matmul", [a, b](Node& self) {
    const auto g = self.grad.mat();
    if (a.requires_grad()) {
      Tensor ga(a.shape());
      ga.mat().noalias() = g * b.value().mat().transpose();
      accumulate_grad(a, std::move(ga));
    }
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      gb.mat().noalias() = a.value().mat().transpose() * g;
      accumulate_grad(b, std::move(gb));
    }
  });
}

Var transpose(const Var& a) {
  check_matrix("transpose", a.value());
  Tensor out({a.value().cols(), a.value().rows()});
  out.mat() = a.value().mat().transpose();
  return make_op(std::move(out), {a}, "transpose", [a](Node& self) {
    Tensor g(a.shape());
    g.mat() = self.grad.mat().transpose();
    accumulate_grad(a, std::move(g));
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, "reshape",
                 [a](Node& self) { accumulate_grad(a, self.grad.reshaped(a.shape())); });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t ext = p.shape()[axis];
    const auto& src = p.value();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(o * ext * os.inner), ext * os.inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * os.extent + offset) * os.inner));
    }
    offset += ext;
  }
  return make_op(std::move(out), parts, "concat", [parts, axis, os](Node& self) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t ext = p.shape()[axis];
      if (p.requires_grad()) {
        Tensor g(p.shape());
        for (std::size_t o = 0; o < os.outer; ++o) {
          std::copy_n(self.grad.data().begin() + static_cast<std::ptrdiff_t>((o * os.extent + offset) * os.inner),
                      ext * os.inner, g.data().begin() + static_cast<std::ptrdiff_t>(o * ext * os.inner));
        }
        accumulate_grad(p, std::move(g));
      }
      offset += ext;
    }
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in_shape = a.shape();
  if (axis >= in_shape.size()) throw ShapeError("slice: axis out of range for " + shape_str(in_shape));
  if (begin > end || end > in_shape[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(in_shape[axis]));
  }
  const AxisSplit is = split_axis(in_shape, axis);
  Shape out_shape = in_shape;
  out_shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(a.value().data().begin() + static_cast<std::ptrdiff_t>((o * is.extent + begin) * is.inner),
                ext * is.inner, out.data().begin() + static_cast<std::ptrdiff_t>(o * ext * is.inner));
  }
  return make_op(std::move(out), {a}, "slice", [a, is, begin, ext](Node& self) {
    Tensor g(a.shape());
    for (std::size_t o = 0; o < is.outer; ++o) {
      std::copy_n(self.grad.data().begin() + static_cast<std::ptrdiff_t>(o * ext * is.inner), ext * is.inner,
                  g.data().begin() + static_cast<std::ptrdiff_t>((o * is.extent + begin) * is.inner));
    }
    accumulate_grad(a, std::move(g));
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor::scalar(s), {a}, "sum",
                 [a](Node& self) { accumulate_grad(a, Tensor(a.shape(), self.grad.item())); });
}

Var mean(const Var& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var sum_axis(const Var& a, std::size_t axis) {
  const Shape& in_shape = a.shape();
  if (axis >= in_shape.size()) throw ShapeError("sum_axis: axis out of range for " + shape_str(in_shape));
  const AxisSplit s = split_axis(in_shape, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < in_shape.size(); ++i) {
    if (i != axis) out_shape.push_back(in_shape[i]);
  }
  Tensor out(out_shape);
  const auto& x = a.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.extent + k) * s.inner + i];
  return make_op(std::move(out), {a}, "sum_axis", [a, s](Node& self) {
    Tensor g(a.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.extent; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.extent + k) * s.inner + i] = self.grad[o * s.inner + i];
    accumulate_grad(a, std::move(g));
  });
}

Var mean_axis(const Var& a, std::size_t axis) {
  const std::size_t n = a.value().dim(axis);
  if (n == 0) throw ShapeError("mean_axis over an empty axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(n));
}

Var exp(const Var& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) {
      std::ostringstream os;
      os << "log: non-positive input " << v;
      throw NumericalError(os.str());
    }
  }
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw NumericalError("sqrt: negative input " + std::to_string(v));
  }
  return unary(
      a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var tanh(const Var& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var leaky_relu(const Var& a, double negative_slope) {
  return unary(
      a, "leaky_relu", [negative_slope](double x) { return x > 0 ? x : negative_slope * x; },
      [negative_slope](double x, double) { return x > 0 ? 1.0 : negative_slope; });
}

Var softplus(const Var& a) {
  return unary(
      a, "softplus", [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Var clamp(const Var& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var inverse(const Var& a, InverseOptions options) {
  check_matrix("inverse", a.value());
  const std::size_t n = a.value().rows();
  if (a.value().cols() != n) throw ShapeError("inverse: matrix is not square, " + shape_str(a.shape()));
  const auto m = a.value().mat();
  if (!a.value().all_finite()) throw NumericalError("inverse: matrix contains non-finite entries");
  Eigen::JacobiSVD<RowMatrix> svd(m);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(static_cast<Eigen::Index>(n) - 1);
  if (!(smin > 0.0) || smax / smin > options.max_condition) {
    std::ostringstream os;
    os << "inverse: matrix is singular or ill-conditioned (smallest singular value " << smin
       << ", condition number " << (smin > 0 ? smax / smin : INFINITY) << ", bound " << options.max_condition
       << ")";
    throw NumericalError(os.str());
  }
  Tensor out({n, n});
  out.mat() = Eigen::PartialPivLU<RowMatrix>(m).inverse();
  return make_op(std::move(out), {a}, "inverse", [a](Node& self) {
    const auto inv_t = self.value.mat().transpose();
    Tensor g(a.shape());
    g.mat().noalias() = -(inv_t * self.grad.mat() * inv_t);
    accumulate_grad(a, std::move(g));
  });
}

Var trace(const Var& a) {
  check_matrix("trace", a.value());
  const std::size_t n = a.value().rows();
  if (a.value().cols() != n) throw ShapeError("trace: matrix is not square, " + shape_str(a.shape()));
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) t += a.value().at(i, i);
  return make_op(Tensor::scalar(t), {a}, "trace", [a, n](Node& self) {
    Tensor g(a.shape());
    for (std::size_t i = 0; i < n; ++i) g.at(i, i) = self.grad.item();
    accumulate_grad(a, std::move(g));
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bias.shape() != Shape{ws[0]}) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_str(xs) + " w" + shape_str(ws) + " b" +
                     shape_str(bias.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  if (h + 2 * padding < k || w + 2 * padding < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t patch = cin * k * k;
  const std::size_t npos = ho * wo;

  // im2col per batch item, kept for the backward pass.
  auto cols = std::make_shared<std::vector<RowMatrix>>(batch, RowMatrix::Zero(patch, npos));
  const auto& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b) {
    RowMatrix& col = (*cols)[b];
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          const std::size_t row = (c * k + ki) * k + kj;
          for (std::size_t oi = 0; oi < ho; ++oi) {
            const long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(padding);
            if (ii < 0 || ii >= static_cast<long>(h)) continue;
            for (std::size_t oj = 0; oj < wo; ++oj) {
              const long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(padding);
              if (jj < 0 || jj >= static_cast<long>(w)) continue;
              col(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(oi * wo + oj)) =
                  xv[((b * cin + c) * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)];
            }
          }
        }
  }
  const Eigen::Map<const RowMatrix> wmat(weight.value().data().data(), static_cast<Eigen::Index>(cout),
                                         static_cast<Eigen::Index>(patch));
  Tensor out({batch, cout, ho, wo});
  for (std::size_t b = 0; b < batch; ++b) {
    Eigen::Map<RowMatrix> o(out.data().data() + b * cout * npos, static_cast<Eigen::Index>(cout),
                            static_cast<Eigen::Index>(npos));
    o.noalias() = wmat * (*cols)[b];
    for (std::size_t c = 0; c < cout; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias.value()[c];
  }
  return make_op(std::move(out), {x, weight, bias}, "conv2d",
                 [x, weight, bias, cols, stride, padding, batch, cin, h, w, cout, k, ho, wo, patch,
                  npos](Node& self) {
                   const Eigen::Map<const RowMatrix> wmat(weight.value().data().data(),
                                                          static_cast<Eigen::Index>(cout),
                                                          static_cast<Eigen::Index>(patch));
                   Tensor gw(weight.shape());
                   Eigen::Map<RowMatrix> gwmat(gw.data().data(), static_cast<Eigen::Index>(cout),
                                               static_cast<Eigen::Index>(patch));
                   Tensor gb(bias.shape());
                   Tensor gx(x.shape());
                   for (std::size_t b = 0; b < batch; ++b) {
                     const Eigen::Map<const RowMatrix> g(self.grad.data().data() + b * cout * npos,
                                                         static_cast<Eigen::Index>(cout),
                                                         static_cast<Eigen::Index>(npos));
                     if (weight.requires_grad()) gwmat.noalias() += g * (*cols)[b].transpose();
                     if (bias.requires_grad()) {
                       for (std::size_t c = 0; c < cout; ++c) gb[c] += g.row(static_cast<Eigen::Index>(c)).sum();
                     }
                     if (x.requires_grad()) {
                       const RowMatrix gcol = wmat.transpose() * g;
                       for (std::size_t c = 0; c < cin; ++c)
                         for (std::size_t ki = 0; ki < k; ++ki)
                           for (std::size_t kj = 0; kj < k; ++kj) {
                             const std::size_t row = (c * k + ki) * k + kj;
                             for (std::size_t oi = 0; oi < ho; ++oi) {
                               const long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(padding);
                               if (ii < 0 || ii >= static_cast<long>(h)) continue;
                               for (std::size_t oj = 0; oj < wo; ++oj) {
                                 const long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(padding);
                                 if (jj < 0 || jj >= static_cast<long>(w)) continue;
                                 gx[((b * cin + c) * h + static_cast<std::size_t>(ii)) * w +
                                    static_cast<std::size_t>(jj)] +=
                                     gcol(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(oi * wo + oj));
                               }
                             }
                           }
                     }
                   }
                   accumulate_grad(weight, std::move(gw));
                   accumulate_grad(bias, std::move(gb));
                   accumulate_grad(x, std::move(gx));
                 });
}

Var spatial_mean(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("spatial_mean: expected NCHW, got " + shape_str(s));
  const std::size_t nc = s[0] * s[1];
  const std::size_t hw = s[2] * s[3];
  if (hw == 0) throw ShapeError("spatial_mean: empty spatial extent");
  Tensor out({s[0], s[1]});
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += x.value()[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  return make_op(std::move(out), {x}, "spatial_mean", [x, nc, hw](Node& self) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] = self.grad[i] / static_cast<double>(hw);
    accumulate_grad(x, std::move(g));
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
  const Shape& s = x.shape();
  std::size_t features = 0, inner = 1;
  if (s.size() == 2) {
    features = s[1];
  } else if (s.size() == 4) {
    features = s[1];
    inner = s[2] * s[3];
  } else {
    throw ShapeError("batch_norm: expected BxF or BxCxHxW, got " + shape_str(s));
  }
  if (gamma.shape() != Shape{features} || beta.shape() != Shape{features}) {
    throw ShapeError("batch_norm: affine parameters must have shape [" + std::to_string(features) + "]");
  }
  if (state.running_mean.empty()) {
    state.running_mean = Tensor({features}, 0.0);
    state.running_var = Tensor({features}, 1.0);
  }
  const std::size_t batch = s[0];
  const std::size_t count = batch * inner;
  auto feature_of = [features, inner](std::size_t i) { return (i / inner) % features; };
  const auto& xv = x.value();

  Tensor mu({features}), var({features});
  if (training) {
    if (count == 0) throw ShapeError("batch_norm: empty batch");
    for (std::size_t i = 0; i < xv.size(); ++i) mu[feature_of(i)] += xv[i];
    mu.scale_(1.0 / static_cast<double>(count));
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = xv[i] - mu[feature_of(i)];
      var[feature_of(i)] += d * d;
    }
    var.scale_(1.0 / static_cast<double>(count));
    const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
    for (std::size_t f = 0; f < features; ++f) {
      state.running_mean[f] = (1.0 - state.momentum) * state.running_mean[f] + state.momentum * mu[f];
      state.running_var[f] = (1.0 - state.momentum) * state.running_var[f] + state.momentum * var[f] * unbias;
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }
  Tensor inv_std({features});
  for (std::size_t f = 0; f < features; ++f) inv_std[f] = 1.0 / std::sqrt(var[f] + state.eps);

  Tensor xhat(s), out(s);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t f = feature_of(i);
    xhat[i] = (xv[i] - mu[f]) * inv_std[f];
    out[i] = gamma.value()[f] * xhat[i] + beta.value()[f];
  }
  return make_op(std::move(out), {x, gamma, beta}, "batch_norm",
                 [x, gamma, beta, xhat = std::move(xhat), inv_std, training, features, count,
                  feature_of](Node& self) {
                   const Tensor& g = self.grad;
                   Tensor sum_g({features}), sum_gx({features});
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     sum_g[feature_of(i)] += g[i];
                     sum_gx[feature_of(i)] += g[i] * xhat[i];
                   }
                   accumulate_grad(gamma, sum_gx);
                   accumulate_grad(beta, sum_g);
                   if (!x.requires_grad()) return;
                   Tensor gx(x.shape());
                   const auto& gam = gamma.value();
                   if (training) {
                     const double m = static_cast<double>(count);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const std::size_t f = feature_of(i);
                       // sums of g*gamma and g*gamma*xhat per feature
                       gx[i] = gam[f] * inv_std[f] / m * (m * g[i] - sum_g[f] - xhat[i] * sum_gx[f]);
                     }
                   } else {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const std::size_t f = feature_of(i);
                       gx[i] = g[i] * gam[f] * inv_std[f];
                     }
                   }
                   accumulate_grad(x, std::move(gx));
                 });
}

}  // namespace trajdiv::ad

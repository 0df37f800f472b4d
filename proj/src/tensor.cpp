#include "mnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "mnet/error.hpp"
#include "mnet/serialize.hpp"

namespace mnet::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> as_mat(std::vector<T>& v, int rows, int cols) {
  return MatMap<T>(v.data(), rows, cols);
}
template <typename T>
ConstMatMap<T> as_mat(const std::vector<T>& v, int rows, int cols) {
  return ConstMatMap<T>(v.data(), rows, cols);
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeMismatch(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) throw ShapeMismatch(op + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

template <typename T>
void require_same(const std::string& op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
  if (&a.tape() != &b.tape()) throw ShapeMismatch(op + ": operands live on different tapes");
}

/// Convolution geometry: an input of H x W x C seen through K x K windows, stride S.
struct ConvGeom {
  int n = 0, h = 0, w = 0, c = 0;
  int k = 0, stride = 1, pad_lo = 0, pad_hi = 0;
  int ho = 0, wo = 0;

  int rows() const { return n * ho * wo; }
  int cols() const { return k * k * c; }
};

ConvGeom make_geom(const std::string& op, int n, int h, int w, int c, int k, int stride, int pad_lo, int pad_hi) {
  if (k < 1 || stride < 1) throw ShapeMismatch(op + ": kernel size and stride must be >= 1");
  if (pad_lo < 0 || pad_hi < 0) throw ShapeMismatch(op + ": negative padding");
  const int span_h = h + pad_lo + pad_hi - k;
  const int span_w = w + pad_lo + pad_hi - k;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0)
    throw ShapeMismatch(op + ": non-integral output size for input " + std::to_string(h) + "x" +
                        std::to_string(w) + ", kernel " + std::to_string(k) + ", stride " +
                        std::to_string(stride));
  ConvGeom g{n, h, w, c, k, stride, pad_lo, pad_hi, span_h / stride + 1, span_w / stride + 1};
  return g;
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t row_len = static_cast<std::size_t>(g.cols());
  for (int n = 0; n < g.n; ++n) {
    for (int oy = 0; oy < g.ho; ++oy) {
      for (int ox = 0; ox < g.wo; ++ox) {
        T* row = cols + (static_cast<std::size_t>(n * g.ho + oy) * g.wo + ox) * row_len;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad_lo + ky;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad_lo + kx;
            T* dst = row + static_cast<std::size_t>(ky * g.k + kx) * g.c;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill(dst, dst + g.c, T(0));
            } else {
              const T* src = x + ((static_cast<std::size_t>(n) * g.h + iy) * g.w + ix) * g.c;
              std::copy(src, src + g.c, dst);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t row_len = static_cast<std::size_t>(g.cols());
  for (int n = 0; n < g.n; ++n) {
    for (int oy = 0; oy < g.ho; ++oy) {
      for (int ox = 0; ox < g.wo; ++ox) {
        const T* row = cols + (static_cast<std::size_t>(n * g.ho + oy) * g.wo + ox) * row_len;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad_lo + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad_lo + kx;
            if (ix < 0 || ix >= g.w) continue;
            const T* src = row + static_cast<std::size_t>(ky * g.k + kx) * g.c;
            T* dst = x + ((static_cast<std::size_t>(n) * g.h + iy) * g.w + ix) * g.c;
            for (int c = 0; c < g.c; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dydx) {
  const auto& x = a.value();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const int ia = a.id();
  return a.tape().record(a.shape(), std::move(y), {a}, [ia, dydx](Tape<T>& t, int self) {
    const auto& gy = t.node(self).grad;
    const auto& yv = t.node(self).value;
    const auto& xv = t.node(ia).value;
    auto& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * dydx(xv[i], yv[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeMismatch("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------------------------
// Parameters

template <typename T>
Parameter<T>& ParameterSet<T>::add(const std::string& name, const Shape& shape) {
  if (contains(name)) throw InvalidSpec("duplicate parameter '" + name + "'");
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->shape = shape;
  p->value.assign(numel(shape), T(0));
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParameterSet<T>::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw InvalidSpec("no parameter named '" + name + "'");
}

template <typename T>
const Parameter<T>& ParameterSet<T>::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw InvalidSpec("no parameter named '" + name + "'");
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p->name == name; });
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p->grad.assign(p->value.size(), T(0));
}

// ---------------------------------------------------------------------------------------------
// Var / Tape

template <typename T>
const Shape& Var<T>::shape() const {
  return tape_->node(id_).shape;
}

template <typename T>
std::size_t Var<T>::size() const {
  return tape_->node(id_).value.size();
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return tape_->node(id_).value;
}

template <typename T>
std::span<const T> Var<T>::grad() const {
  return tape_->node(id_).grad;
}

template <typename T>
T Var<T>::item() const {
  const auto& v = tape_->node(id_).value;
  if (v.size() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
  return v[0];
}

template <typename T>
Var<T> Tape<T>::constant(Shape shape, std::vector<T> value) {
  if (numel(shape) != value.size())
    throw ShapeMismatch("constant: " + std::to_string(value.size()) + " values for shape " + shape_str(shape));
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Shape shape, T fill) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<T>(n, fill));
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.shape = p.shape;
  n.value = p.value;
  n.needs_grad = true;
  Parameter<T>* target = &p;
  n.backward = [target](Tape& t, int self) {
    const auto& g = t.node(self).grad;
    if (target->grad.size() != g.size()) target->grad.assign(g.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) target->grad[i] += g[i];
  };
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
std::vector<T>& Tape<T>::grad_of(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
Var<T> Tape<T>::record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  return record(std::move(shape), std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(Shape shape, std::vector<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ShapeMismatch("operand recorded on a different tape");
    n.needs_grad = n.needs_grad || node(in.id()).needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (&loss.tape() != this) throw ShapeMismatch("backward: loss lives on another tape");
  if (loss.size() != 1) throw ShapeMismatch("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  grad_of(loss.id())[0] += T(1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_error("matmul", a.shape(), b.shape());
  auto& t = a.tape();
  std::vector<T> y(static_cast<std::size_t>(m) * n);
  as_mat(y, m, n).noalias() = as_mat(t.node(a.id()).value, m, k) * as_mat(t.node(b.id()).value, k, n);
  const int ia = a.id(), ib = b.id();
  return t.record({m, n}, std::move(y), {a, b}, [ia, ib, m, k, n](Tape<T>& t, int self) {
    const auto gy = as_mat(t.node(self).grad, m, n);
    if (t.needs_grad(ia)) as_mat(t.grad_of(ia), m, k).noalias() += gy * as_mat(t.node(ib).value, k, n).transpose();
    if (t.needs_grad(ib)) as_mat(t.grad_of(ib), k, n).noalias() += as_mat(t.node(ia).value, m, k).transpose() * gy;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank("linear", x.shape(), 2);
  require_rank("linear", w.shape(), 2);
  const int n = x.dim(0), f = x.dim(1), o = w.dim(1);
  if (w.dim(0) != f) shape_error("linear", x.shape(), w.shape());
  if (b.shape() != Shape{o}) shape_error("linear bias", w.shape(), b.shape());
  auto& t = x.tape();
  std::vector<T> y(static_cast<std::size_t>(n) * o);
  auto ym = as_mat(y, n, o);
  ym.noalias() = as_mat(t.node(x.id()).value, n, f) * as_mat(t.node(w.id()).value, f, o);
  const auto& bv = t.node(b.id()).value;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < o; ++c) ym(r, c) += bv[static_cast<std::size_t>(c)];
  const int ix = x.id(), iw = w.id(), ib = b.id();
  return t.record({n, o}, std::move(y), {x, w, b}, [ix, iw, ib, n, f, o](Tape<T>& t, int self) {
    const auto gy = as_mat(t.node(self).grad, n, o);
    if (t.needs_grad(ix)) as_mat(t.grad_of(ix), n, f).noalias() += gy * as_mat(t.node(iw).value, f, o).transpose();
    if (t.needs_grad(iw)) as_mat(t.grad_of(iw), f, o).noalias() += as_mat(t.node(ix).value, n, f).transpose() * gy;
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < o; ++c) gb[static_cast<std::size_t>(c)] += gy(r, c);
    }
  });
}

// ---------------------------------------------------------------------------------------------
// Elementwise binary

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same("add", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    for (int id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto& gi = t.grad_of(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same("sub", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same("mul", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(ia).value;
    const auto& yv = t.node(ib).value;
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xv[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same("div", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& q = t.node(self).value;
    const auto& yv = t.node(ib).value;
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / yv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * q[i] / yv[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> add_bias(const Var<T>& a, const Var<T>& b) {
  const int c = a.shape().back();
  if (b.shape() != Shape{c}) shape_error("add_bias", a.shape(), b.shape());
  const auto& x = a.value();
  const auto& bv = b.value();
  std::vector<T> out(x.begin(), x.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % static_cast<std::size_t>(c)];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ia, ib, c](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % static_cast<std::size_t>(c)] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------------------------
// Pointwise

template <typename T>
Var<T> relu(const Var<T>& a) {
  const auto& x = a.value();
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    bits = (bits << 1) | (x[i] > T(0) ? 1u : 0u);
    if ((i & 63) == 63) {
      a.tape().mix_kink(bits);
      bits = 0;
    }
  }
  a.tape().mix_kink(bits);
  return unary(a, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  const auto& x = a.value();
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    bits = (bits << 1) | (x[i] >= T(0) ? 1u : 0u);
    if ((i & 63) == 63) {
      a.tape().mix_kink(bits);
      bits = 0;
    }
  }
  a.tape().mix_kink(bits);
  return unary(a, [](T v) { return std::abs(v); }, [](T v, T) { return v >= T(0) ? T(1) : T(-1); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a,
      [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(a, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(a, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary(a, [](T v) { return std::log(v); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> sin(const Var<T>& a) {
  return unary(a, [](T v) { return std::sin(v); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Var<T> cos(const Var<T>& a) {
  return unary(a, [](T v) { return std::cos(v); }, [](T x, T) { return -std::sin(x); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(a, [](T v) { return v * v; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> scaled_sigmoid(const Var<T>& z, T lambda, T alpha) {
  if (!(lambda > T(0))) throw InvalidSpec("scaled_sigmoid: lambda must be positive");
  // Rounding must not reach the closed bounds, so results are kept one ulp inside them.
  const T lo = std::nextafter(alpha, std::numeric_limits<T>::infinity());
  const T hi = std::max(lo, std::nextafter(alpha + lambda, -std::numeric_limits<T>::infinity()));
  auto sig = [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); };
  return unary(
      z, [=](T v) { return std::clamp(lambda * sig(v) + alpha, lo, hi); },
      [=](T v, T) {
        const T s = sig(v);
        return lambda * s * (T(1) - s);
      });
}

// ---------------------------------------------------------------------------------------------
// Reductions and reshaping

template <typename T>
Var<T> sum(const Var<T>& a) {
  const auto& x = a.value();
  T s = std::accumulate(x.begin(), x.end(), T(0));
  const int ia = a.id();
  return a.tape().record({1}, {s}, {a}, [ia](Tape<T>& t, int self) {
    const T g = t.node(self).grad[0];
    for (auto& v : t.grad_of(ia)) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Var<T> sum_cols(const Var<T>& a) {
  require_rank("sum_cols", a.shape(), 2);
  const int n = a.dim(0), f = a.dim(1);
  const auto& x = a.value();
  std::vector<T> out(static_cast<std::size_t>(n), T(0));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < f; ++c) out[static_cast<std::size_t>(r)] += x[static_cast<std::size_t>(r) * f + c];
  const int ia = a.id();
  return a.tape().record({n}, std::move(out), {a}, [ia, n, f](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad_of(ia);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < f; ++c) ga[static_cast<std::size_t>(r) * f + c] += g[static_cast<std::size_t>(r)];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  const auto& x = a.value();
  const int ia = a.id();
  return a.tape().record(std::move(shape), std::vector<T>(x.begin(), x.end()), {a}, [ia](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, int begin, int end) {
  require_rank("slice_cols", a.shape(), 2);
  const int n = a.dim(0), f = a.dim(1);
  if (begin < 0 || end > f || begin >= end)
    throw ShapeMismatch("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                        shape_str(a.shape()));
  const int w = end - begin;
  const auto& x = a.value();
  std::vector<T> out(static_cast<std::size_t>(n) * w);
  for (int r = 0; r < n; ++r)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r) * f + begin, w,
                out.begin() + static_cast<std::ptrdiff_t>(r) * w);
  const int ia = a.id();
  return a.tape().record({n, w}, std::move(out), {a}, [ia, n, f, w, begin](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad_of(ia);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < w; ++c)
        ga[static_cast<std::size_t>(r) * f + begin + c] += g[static_cast<std::size_t>(r) * w + c];
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no operands");
  const int n = parts.front().dim(0);
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    require_rank("concat_cols", p.shape(), 2);
    if (p.dim(0) != n) shape_error("concat_cols", parts.front().shape(), p.shape());
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(static_cast<std::size_t>(n) * total);
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].value();
    for (int r = 0; r < n; ++r)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r) * widths[k], widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r) * total + off);
    off += widths[k];
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().record({n, total}, std::move(out), parts, [ids, widths, n, total](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        auto& gk = t.grad_of(ids[k]);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < widths[k]; ++c)
            gk[static_cast<std::size_t>(r) * widths[k] + c] += g[static_cast<std::size_t>(r) * total + off + c];
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const int> idx) {
  require_rank("pick", x.shape(), 2);
  const int n = x.dim(0), m = x.dim(1);
  if (idx.size() != static_cast<std::size_t>(n)) throw ShapeMismatch("pick: one index per row required");
  std::vector<int> index(idx.begin(), idx.end());
  const auto& v = x.value();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    if (index[r] < 0 || index[r] >= m) throw ShapeMismatch("pick: index out of range");
    out[static_cast<std::size_t>(r)] = v[static_cast<std::size_t>(r) * m + index[r]];
  }
  const int ix = x.id();
  return x.tape().record({n}, std::move(out), {x}, [ix, index, m](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(ix);
    for (std::size_t r = 0; r < index.size(); ++r) gx[r * m + index[r]] += g[r];
  });
}

// ---------------------------------------------------------------------------------------------
// Convolutions

namespace {

template <typename T>
Var<T> conv2d_impl(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int pad_lo, int pad_hi) {
  require_rank("conv2d input", x.shape(), 4);
  require_rank("conv2d kernel", w.shape(), 4);
  const int k = w.dim(0);
  if (w.dim(1) != k || w.dim(2) != x.dim(3)) shape_error("conv2d", x.shape(), w.shape());
  const int out_c = w.dim(3);
  if (b && b->shape() != Shape{out_c}) shape_error("conv2d bias", w.shape(), b->shape());
  const ConvGeom g = make_geom("conv2d", x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, pad_lo, pad_hi);
  auto& t = x.tape();

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.rows()) * g.cols());
  im2col(t.node(x.id()).value.data(), g, cols->data());
  std::vector<T> y(static_cast<std::size_t>(g.rows()) * out_c);
  auto ym = as_mat(y, g.rows(), out_c);
  ym.noalias() = as_mat(*cols, g.rows(), g.cols()) * as_mat(t.node(w.id()).value, g.cols(), out_c);
  if (b) {
    const auto& bv = t.node(b->id()).value;
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < out_c; ++c) ym(r, c) += bv[static_cast<std::size_t>(c)];
  }

  const int ix = x.id(), iw = w.id(), ib = b ? b->id() : -1;
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return t.record({g.n, g.ho, g.wo, out_c}, std::move(y), inputs, [=](Tape<T>& t, int self) {
    const auto gy = as_mat(t.node(self).grad, g.rows(), out_c);
    if (t.needs_grad(iw))
      as_mat(t.grad_of(iw), g.cols(), out_c).noalias() += as_mat(*cols, g.rows(), g.cols()).transpose() * gy;
    if (ib >= 0 && t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < out_c; ++c) gb[static_cast<std::size_t>(c)] += gy(r, c);
    }
    if (t.needs_grad(ix)) {
      std::vector<T> dcols(static_cast<std::size_t>(g.rows()) * g.cols());
      as_mat(dcols, g.rows(), g.cols()).noalias() = gy * as_mat(t.node(iw).value, g.cols(), out_c).transpose();
      col2im(dcols.data(), g, t.grad_of(ix).data());
    }
  });
}

template <typename T>
Var<T> conv_transpose2d_impl(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int pad) {
  require_rank("conv_transpose2d input", x.shape(), 4);
  require_rank("conv_transpose2d kernel", w.shape(), 4);
  const int k = w.dim(0);
  const int in_c = x.dim(3);
  if (w.dim(1) != k || w.dim(3) != in_c) shape_error("conv_transpose2d", x.shape(), w.shape());
  const int out_c = w.dim(2);
  if (b && b->shape() != Shape{out_c}) shape_error("conv_transpose2d bias", w.shape(), b->shape());
  if (stride < 1 || k < 1) throw ShapeMismatch("conv_transpose2d: kernel size and stride must be >= 1");
  const int n = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int oh = (h - 1) * stride - 2 * pad + k;
  const int ow = (wd - 1) * stride - 2 * pad + k;
  if (oh < 1 || ow < 1) throw ShapeMismatch("conv_transpose2d: empty output");
  // Geometry of the forward convolution this operator is the adjoint of.
  const ConvGeom g = make_geom("conv_transpose2d", n, oh, ow, out_c, k, stride, pad, pad);
  if (g.ho != h || g.wo != wd) throw ShapeMismatch("conv_transpose2d: inconsistent geometry");
  auto& t = x.tape();

  std::vector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  as_mat(cols, g.rows(), g.cols()).noalias() =
      as_mat(t.node(x.id()).value, g.rows(), in_c) * as_mat(t.node(w.id()).value, g.cols(), in_c).transpose();
  std::vector<T> y(static_cast<std::size_t>(n) * oh * ow * out_c, T(0));
  col2im(cols.data(), g, y.data());
  if (b) {
    const auto& bv = t.node(b->id()).value;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % static_cast<std::size_t>(out_c)];
  }

  const int ix = x.id(), iw = w.id(), ib = b ? b->id() : -1;
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return t.record({n, oh, ow, out_c}, std::move(y), inputs, [=](Tape<T>& t, int self) {
    const auto& gy = t.node(self).grad;
    if (ib >= 0 && t.needs_grad(ib)) {
      auto& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % static_cast<std::size_t>(out_c)] += gy[i];
    }
    if (!t.needs_grad(ix) && !t.needs_grad(iw)) return;
    std::vector<T> dcols(static_cast<std::size_t>(g.rows()) * g.cols());
    im2col(gy.data(), g, dcols.data());
    const auto dc = as_mat(dcols, g.rows(), g.cols());
    if (t.needs_grad(ix))
      as_mat(t.grad_of(ix), g.rows(), in_c).noalias() += dc * as_mat(t.node(iw).value, g.cols(), in_c);
    if (t.needs_grad(iw))
      as_mat(t.grad_of(iw), g.cols(), in_c).noalias() += dc.transpose() * as_mat(t.node(ix).value, g.rows(), in_c);
  });
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  return conv2d_impl(x, w, &b, stride, pad, pad);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  return conv2d_impl<T>(x, w, nullptr, stride, pad, pad);
}

template <typename T>
Var<T> conv2d_asym(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad_lo, int pad_hi) {
  return conv2d_impl(x, w, &b, stride, pad_lo, pad_hi);
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  return conv_transpose2d_impl(x, w, &b, stride, pad);
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  return conv_transpose2d_impl<T>(x, w, nullptr, stride, pad);
}

// ---------------------------------------------------------------------------------------------
// Normalisation and softmax

template <typename T>
Var<T> l2_normalize_channels(const Var<T>& x, T eps) {
  require_rank("l2_normalize_channels", x.shape(), 4);
  const int n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  const auto& xv = x.value();
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c, T(0));
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch) {
        const T v = xv[(static_cast<std::size_t>(b) * hw + p) * c + ch];
        (*norms)[static_cast<std::size_t>(b) * c + ch] += v * v;
      }
  for (auto& v : *norms) v = std::sqrt(v);
  std::vector<T> y(xv.size());
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = (static_cast<std::size_t>(b) * hw + p) * c + ch;
        y[i] = xv[i] / ((*norms)[static_cast<std::size_t>(b) * c + ch] + eps);
      }
  const int ix = x.id();
  return x.tape().record(x.shape(), std::move(y), {x}, [ix, n, hw, c, eps, norms](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(ix).value;
    auto& gx = t.grad_of(ix);
    std::vector<T> dot(static_cast<std::size_t>(n) * c, T(0));
    for (int b = 0; b < n; ++b)
      for (int p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = (static_cast<std::size_t>(b) * hw + p) * c + ch;
          dot[static_cast<std::size_t>(b) * c + ch] += g[i] * xv[i];
        }
    for (int b = 0; b < n; ++b)
      for (int p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = (static_cast<std::size_t>(b) * hw + p) * c + ch;
          const std::size_t k = static_cast<std::size_t>(b) * c + ch;
          const T norm = (*norms)[k];
          const T r = norm + eps;
          T d = g[i] / r;
          if (norm > T(0)) d -= dot[k] * xv[i] / (r * r * norm);
          gx[i] += d;
        }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  require_rank("log_softmax", x.shape(), 2);
  const int n = x.dim(0), m = x.dim(1);
  const auto& v = x.value();
  std::vector<T> y(v.size());
  for (int r = 0; r < n; ++r) {
    const T* row = v.data() + static_cast<std::size_t>(r) * m;
    const T mx = *std::max_element(row, row + m);
    T s = T(0);
    for (int c = 0; c < m; ++c) s += std::exp(row[c] - mx);
    const T lse = mx + std::log(s);
    for (int c = 0; c < m; ++c) y[static_cast<std::size_t>(r) * m + c] = row[c] - lse;
  }
  const int ix = x.id();
  return x.tape().record(x.shape(), std::move(y), {x}, [ix, n, m](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& y = t.node(self).value;
    auto& gx = t.grad_of(ix);
    for (int r = 0; r < n; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * m;
      T gs = T(0);
      for (int c = 0; c < m; ++c) gs += g[o + c];
      for (int c = 0; c < m; ++c) gx[o + c] += g[o + c] - std::exp(y[o + c]) * gs;
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  require_rank("softmax", x.shape(), 2);
  const int n = x.dim(0), m = x.dim(1);
  const auto& v = x.value();
  std::vector<T> y(v.size());
  for (int r = 0; r < n; ++r) {
    const T* row = v.data() + static_cast<std::size_t>(r) * m;
    const T mx = *std::max_element(row, row + m);
    T s = T(0);
    for (int c = 0; c < m; ++c) {
      const T e = std::exp(row[c] - mx);
      y[static_cast<std::size_t>(r) * m + c] = e;
      s += e;
    }
    for (int c = 0; c < m; ++c) y[static_cast<std::size_t>(r) * m + c] /= s;
  }
  const int ix = x.id();
  return x.tape().record(x.shape(), std::move(y), {x}, [ix, n, m](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& y = t.node(self).value;
    auto& gx = t.grad_of(ix);
    for (int r = 0; r < n; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * m;
      T dot = T(0);
      for (int c = 0; c < m; ++c) dot += g[o + c] * y[o + c];
      for (int c = 0; c < m; ++c) gx[o + c] += y[o + c] * (g[o + c] - dot);
    }
  });
}

template <typename T>
Var<T> softmax2d(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() < 3 || (s.size() == 4 && s[3] != 1) || s.size() > 4)
    throw ShapeMismatch("softmax2d: expected [N,H,W] or [N,H,W,1], got " + shape_str(s));
  const int n = s[0];
  const int m = s[1] * s[2];
  return reshape(softmax(reshape(x, {n, m})), s);
}

// ---------------------------------------------------------------------------------------------
// LSTM

template <typename T>
LstmOutput<T> lstm_cell(const Var<T>& x, const Var<T>& h, const Var<T>& c, const LstmParams<T>& p) {
  require_rank("lstm_cell", x.shape(), 2);
  require_rank("lstm_cell", h.shape(), 2);
  const int units = h.dim(1);
  if (c.shape() != h.shape()) shape_error("lstm_cell state", h.shape(), c.shape());
  if (p.w_input.shape() != Shape{x.dim(1), 4 * units}) shape_error("lstm_cell w_input", x.shape(), p.w_input.shape());
  if (p.w_hidden.shape() != Shape{units, 4 * units}) shape_error("lstm_cell w_hidden", h.shape(), p.w_hidden.shape());
  const Var<T> z = add(linear(x, p.w_input, p.bias), matmul(h, p.w_hidden));
  const Var<T> i = sigmoid(slice_cols(z, 0, units));
  const Var<T> f = sigmoid(slice_cols(z, units, 2 * units));
  const Var<T> g = tanh(slice_cols(z, 2 * units, 3 * units));
  const Var<T> o = sigmoid(slice_cols(z, 3 * units, 4 * units));
  const Var<T> c_next = add(mul(f, c), mul(i, g));
  const Var<T> h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

// ---------------------------------------------------------------------------------------------
// Optimiser and init

template <typename T>
void RmsProp<T>::step(ParameterSet<T>& params) {
  if (mean_square_.size() != params.size()) {
    mean_square_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) mean_square_[i].assign(params[i].size(), T(0));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad.empty()) continue;
    if (p.grad.size() != p.value.size() || mean_square_[i].size() != p.value.size())
      throw ShapeMismatch("rmsprop: gradient shape mismatch for '" + p.name + "'");
    auto& v = mean_square_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double vk = decay * v[k] + (1.0 - decay) * g * g;
      v[k] = static_cast<T>(vk);
      p.value[k] = static_cast<T>(p.value[k] - lr * g / (std::sqrt(vk) + eps));
    }
  }
}

double standard_normal(std::mt19937_64& rng) {
  // Box-Muller on the raw 53-bit stream keeps draws identical across standard libraries.
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename T>
void init_gaussian(Parameter<T>& p, int fan_in, std::mt19937_64& rng, double gain) {
  const double std = gain / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  for (auto& v : p.value) v = static_cast<T>(std * standard_normal(rng));
}

// ---------------------------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&)>& f, ParameterSet<double>& params,
                           const GradCheckOptions& options) {
  params.zero_grad();
  std::uint64_t base_signature = 0;
  {
    Tape<double> tape;
    const Var<double> y = f(tape);
    base_signature = tape.kink_signature();
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = params[i].grad;
    if (g.empty()) g.assign(params[i].size(), 0.0);
    analytic.push_back(std::move(g));
  }

  auto evaluate = [&](std::uint64_t& signature) {
    Tape<double> tape;
    const double v = f(tape).item();
    signature = tape.kink_signature();
    return v;
  };

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      for (std::size_t k = 0; k < options.max_coords_per_param; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(rng() % (coords.size() - k));
        std::swap(coords[k], coords[j]);
      }
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t c : coords) {
      const double orig = p.value[c];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      p.value[c] = orig + options.h;
      const double f_plus = evaluate(sig_plus);
      p.value[c] = orig - options.h;
      const double f_minus = evaluate(sig_minus);
      p.value[c] = orig;
      if (options.skip_kinks && (sig_plus != base_signature || sig_minus != base_signature)) {
        ++report.skipped;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * options.h);
      const double a = analytic[i][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (!(rel <= report.max_rel_error)) {
        report.max_rel_error = rel;
        std::ostringstream os;
        os << p.name << "[" << c << "]: analytic " << a << ", numeric " << numeric;
        report.worst = os.str();
      }
    }
  }
  report.passed = report.checked > 0 && report.max_rel_error < options.tol;
  return report;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCheckpointMagic[4] = {'M', 'N', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<float>& params, const std::string& metadata) {
  ByteWriter w;
  for (char ch : kCheckpointMagic) w.put(ch);
  w.put(kCheckpointVersion);
  w.put_string(metadata);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    w.put_string(p.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.shape.size()));
    for (int d : p.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : p.value) w.put(v);
  }
  const std::uint32_t crc = crc32(w.bytes());
  w.put(crc);
  return std::move(w.bytes());
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                     const std::string& metadata) {
  write_file(path, encode_checkpoint(params, metadata));
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10) throw FormatError("checkpoint too short");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  ByteReader r(body);
  char magic[4];
  for (char& ch : magic) ch = r.get<char>();
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("bad checkpoint magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  if (crc32(body) != stored) throw FormatError("checkpoint checksum mismatch");
  Checkpoint ck;
  ck.metadata = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
    auto& p = ck.params.add(name, shape);
    for (auto& v : p.value) v = r.get<float>();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------------------------
// Instantiations

#define MNET_AD_INSTANTIATE(T)                                                                    \
  template struct Parameter<T>;                                                                   \
  template class ParameterSet<T>;                                                                 \
  template class Var<T>;                                                                          \
  template class Tape<T>;                                                                         \
  template class RmsProp<T>;                                                                      \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> div(const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale(const Var<T>&, T);                                                        \
  template Var<T> add_scalar(const Var<T>&, T);                                                   \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                         \
  template Var<T> relu(const Var<T>&);                                                            \
  template Var<T> abs(const Var<T>&);                                                             \
  template Var<T> sigmoid(const Var<T>&);                                                         \
  template Var<T> tanh(const Var<T>&);                                                            \
  template Var<T> exp(const Var<T>&);                                                             \
  template Var<T> log(const Var<T>&);                                                             \
  template Var<T> sin(const Var<T>&);                                                             \
  template Var<T> cos(const Var<T>&);                                                             \
  template Var<T> square(const Var<T>&);                                                          \
  template Var<T> scaled_sigmoid(const Var<T>&, T, T);                                            \
  template Var<T> sum(const Var<T>&);                                                             \
  template Var<T> mean(const Var<T>&);                                                            \
  template Var<T> sum_cols(const Var<T>&);                                                        \
  template Var<T> reshape(const Var<T>&, Shape);                                                  \
  template Var<T> slice_cols(const Var<T>&, int, int);                                            \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                        \
  template Var<T> pick(const Var<T>&, std::span<const int>);                                      \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                  \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, int, int);                                 \
  template Var<T> conv2d_asym(const Var<T>&, const Var<T>&, const Var<T>&, int, int, int);        \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);        \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, int, int);                       \
  template Var<T> l2_normalize_channels(const Var<T>&, T);                                        \
  template Var<T> log_softmax(const Var<T>&);                                                     \
  template Var<T> softmax(const Var<T>&);                                                         \
  template Var<T> softmax2d(const Var<T>&);                                                       \
  template LstmOutput<T> lstm_cell(const Var<T>&, const Var<T>&, const Var<T>&, const LstmParams<T>&); \
  template void init_gaussian(Parameter<T>&, int, std::mt19937_64&, double);

MNET_AD_INSTANTIATE(float)
MNET_AD_INSTANTIATE(double)

#undef MNET_AD_INSTANTIATE

}  // namespace mnet::ad

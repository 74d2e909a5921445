#pragma once

// Dense tensor with reverse-mode autodiff. Feature maps use N,C,H,W layout.
// Gradients accumulate additively; the caller zeroes them between steps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace aero {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

#define AERO_CHECK(cond, msg)                                 \
  do {                                                        \
    if (!(cond)) {                                            \
      std::ostringstream os_;                                 \
      os_ << msg;                                             \
      throw std::runtime_error(os_.str());                    \
    }                                                         \
  } while (0)

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily sized, same extent as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // reads this->grad, writes parents' grads

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    node_->shape = std::move(shape);
    node_->data.assign(numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    AERO_CHECK(numel(shape) == (int64_t)values.size(),
               "Tensor::from: shape " << shape_str(shape) << " holds " << numel(shape)
                                      << " values, got " << values.size());
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return (int)node_->shape.size(); }
  int dim(int i) const { return node_->shape[i]; }
  int64_t size() const { return (int64_t)node_->data.size(); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double& operator[](int64_t i) { return node_->data[(size_t)i]; }
  double operator[](int64_t i) const { return node_->data[(size_t)i]; }

  double value() const {
    AERO_CHECK(size() == 1, "Tensor::value: tensor " << shape_str(shape()) << " is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  // True when this tensor participates in gradient flow.
  bool tracked() const {
    return node_ && (node_->requires_grad || !node_->parents.empty());
  }

  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  std::shared_ptr<TensorNode> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Builds a fresh op result; backprop is attached only when an input is tracked.
inline Tensor make_result(Shape shape, const std::vector<Tensor>& inputs,
                          std::function<void(TensorNode&)> backprop) {
  Tensor out(std::move(shape));
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.tracked();
  if (any && backprop) {
    for (const Tensor& t : inputs) out.node()->parents.push_back(t.node());
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

inline void backward(const Tensor& loss) {
  AERO_CHECK(loss.size() == 1,
             "backward: loss must be scalar, got shape " << shape_str(loss.shape()));
  // Post-order DFS over parents, then replay in reverse.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* n;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get()});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next++].get();
      if (seen.insert(p).second) stack.push_back({p});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) n->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy-style, aligned at trailing dimensions)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  int na = (int)a.size(), nb = (int)b.size();
  int n = std::max(na, nb);
  out.resize(n);
  for (int i = 0; i < n; ++i) {
    int da = i < n - na ? 1 : a[i - (n - na)];
    int db = i < n - nb ? 1 : b[i - (n - nb)];
    AERO_CHECK(da == db || da == 1 || db == 1,
               "broadcast: incompatible shapes " << shape_str(a) << " and " << shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` embedded in broadcast result of rank `rank` (0 for broadcast dims).
inline std::vector<int64_t> broadcast_strides(const Shape& s, int rank) {
  std::vector<int64_t> st(rank, 0);
  int64_t acc = 1;
  int ns = (int)s.size();
  for (int i = ns - 1; i >= 0; --i) {
    st[rank - ns + i] = (s[i] == 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  int rank = (int)os.size();
  auto sa = broadcast_strides(a.shape(), rank);
  auto sb = broadcast_strides(b.shape(), rank);
  int64_t n = numel(os);
  auto an = a.node();
  auto bn = b.node();
  Tensor out = make_result(os, {a, b}, [an, bn, sa, sb, os, rank, bwd](TensorNode& self) {
    an->ensure_grad();
    bn->ensure_grad();
    std::vector<int> idx(rank, 0);
    int64_t ia = 0, ib = 0;
    int64_t n = numel(os);
    for (int64_t i = 0; i < n; ++i) {
      bwd(self.grad[i], self.data[i], an->data[ia], bn->data[ib], an->grad[ia], bn->grad[ib]);
      // increment multi-index
      for (int d = rank - 1; d >= 0; --d) {
        ++idx[d];
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < os[d]) break;
        idx[d] = 0;
        ia -= sa[d] * os[d];
        ib -= sb[d] * os[d];
      }
    }
  });
  {
    std::vector<int> idx(rank, 0);
    int64_t ia = 0, ib = 0;
    double* od = out.data();
    const double* ad = a.data();
    const double* bd = b.data();
    for (int64_t i = 0; i < n; ++i) {
      od[i] = fwd(ad[ia], bd[ib]);
      for (int d = rank - 1; d >= 0; --d) {
        ++idx[d];
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < os[d]) break;
        idx[d] = 0;
        ia -= sa[d] * os[d];
        ib -= sb[d] * os[d];
      }
    }
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd) {
  auto xn = x.node();
  Tensor out = make_result(x.shape(), {x}, [xn, bwd](TensorNode& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < self.data.size(); ++i)
      xn->grad[i] += bwd(self.grad[i], self.data[i], xn->data[i]);
  });
  const double* xd = x.data();
  double* od = out.data();
  for (int64_t i = 0; i < x.size(); ++i) od[i] = fwd(xd[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double, double& ga, double& gb) {
        ga += g;
        gb += g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double, double& ga, double& gb) {
        ga += g;
        gb -= g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x * y; },
      [](double g, double, double x, double y, double& ga, double& gb) {
        ga += g * y;
        gb += g * x;
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x / y; },
      [](double g, double, double x, double y, double& ga, double& gb) {
        ga += g / y;
        gb -= g * x / (y * y);
      });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return std::min(x, y); },
      [](double g, double, double x, double y, double& ga, double& gb) {
        (x <= y ? ga : gb) += g;
      });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return std::max(x, y); },
      [](double g, double, double x, double y, double& ga, double& gb) {
        (x >= y ? ga : gb) += g;
      });
}

inline Tensor neg(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return -v; }, [](double g, double, double) { return -g; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double g, double, double) { return c * g; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return v + c; }, [](double g, double, double) { return g; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); },
      [](double g, double y, double) { return g * y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::log(v); },
      [](double g, double, double v) { return g / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::sqrt(v); },
      [](double g, double y, double) { return g / (2.0 * y); });
}

inline Tensor atan(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::atan(v); },
      [](double g, double, double v) { return g / (1.0 + v * v); });
}

inline Tensor pow_scalar(const Tensor& x, double p) {
  return detail::unary(
      x, [p](double v) { return std::pow(v, p); },
      [p](double g, double, double v) { return g * p * std::pow(v, p - 1.0); });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double g, double y, double) { return g * y * (1.0 - y); });
}

// log(1 + exp(v)), overflow-safe; gradient is sigmoid(v).
inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double g, double, double v) {
        double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return g * s;
      });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double g, double, double v) { return v > 0 ? g : 0.0; });
}

inline Tensor silu(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) {
        double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return v * s;
      },
      [](double g, double, double v) {
        double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return g * (s + v * s * (1.0 - s));
      });
}

// Gradient passes through inside [lo, hi], zero outside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double g, double, double v) { return (v >= lo && v <= hi) ? g : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  auto xn = x.node();
  Tensor out = make_result({1}, {x}, [xn](TensorNode& self) {
    xn->ensure_grad();
    for (double& g : xn->grad) g += self.grad[0];
  });
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  out[0] = acc;
  return out;
}

inline Tensor mean(const Tensor& x) {
  int64_t n = x.size();
  AERO_CHECK(n > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / (double)n);
}

// ---------------------------------------------------------------------------
// Structure ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  AERO_CHECK(numel(shape) == x.size(), "reshape: " << shape_str(x.shape()) << " -> "
                                                   << shape_str(shape) << " changes element count");
  auto xn = x.node();
  Tensor out = make_result(std::move(shape), {x}, [xn](TensorNode& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
  out.values() = x.values();
  return out;
}

inline Tensor gather(const Tensor& x, std::vector<int64_t> idx) {
  for (int64_t i : idx)
    AERO_CHECK(i >= 0 && i < x.size(), "gather: index " << i << " out of range " << x.size());
  auto xn = x.node();
  auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
  Tensor out = make_result({(int)ids->size()}, {x}, [xn, ids](TensorNode& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < ids->size(); ++i) xn->grad[(*ids)[i]] += self.grad[i];
  });
  for (size_t i = 0; i < ids->size(); ++i) out[(int64_t)i] = x[(*ids)[i]];
  return out;
}

// Concatenation along the channel axis of N,C,H,W maps (or axis 1 of N,C).
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  AERO_CHECK(!parts.empty(), "concat: no inputs");
  Shape s0 = parts[0].shape();
  AERO_CHECK(s0.size() >= 2, "concat: need at least 2 dims, got " << shape_str(s0));
  int ctotal = 0;
  for (const Tensor& p : parts) {
    AERO_CHECK(p.ndim() == (int)s0.size(), "concat: rank mismatch " << shape_str(p.shape())
                                                                    << " vs " << shape_str(s0));
    for (int d = 0; d < p.ndim(); ++d)
      AERO_CHECK(d == 1 || p.dim(d) == s0[d], "concat: shape mismatch " << shape_str(p.shape())
                                                                        << " vs " << shape_str(s0));
    ctotal += p.dim(1);
  }
  Shape os = s0;
  os[1] = ctotal;
  int64_t inner = 1;
  for (size_t d = 2; d < s0.size(); ++d) inner *= s0[d];
  int n = s0[0];

  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  Tensor out = make_result(os, parts, [nodes, inner, n, ctotal](TensorNode& self) {
    int64_t coff = 0;
    for (auto& pn : nodes) {
      pn->ensure_grad();
      int pc = pn->shape[1];
      for (int b = 0; b < n; ++b)
        for (int64_t i = 0; i < pc * inner; ++i)
          pn->grad[b * pc * inner + i] += self.grad[(b * ctotal + coff) * inner + i];
      coff += pc;
    }
  });
  int64_t coff = 0;
  for (const Tensor& p : parts) {
    int pc = p.dim(1);
    for (int b = 0; b < n; ++b)
      for (int64_t i = 0; i < pc * inner; ++i)
        out[(b * ctotal + coff) * inner + i] = p[b * pc * inner + i];
    coff += pc;
  }
  return out;
}

// Fully connected layer: x (N,C) * W (O,C)^T + b (O) -> (N,O)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  AERO_CHECK(x.ndim() == 2 && w.ndim() == 2, "linear: expected 2-D x and W, got "
                                                 << shape_str(x.shape()) << " and "
                                                 << shape_str(w.shape()));
  int n = x.dim(0), c = x.dim(1), o = w.dim(0);
  AERO_CHECK(w.dim(1) == c, "linear: W " << shape_str(w.shape()) << " does not match x "
                                         << shape_str(x.shape()));
  AERO_CHECK(!b.defined() || (b.ndim() == 1 && b.dim(0) == o),
             "linear: bias shape mismatch");
  auto xn = x.node();
  auto wn = w.node();
  std::vector<Tensor> ins = {x, w};
  if (b.defined()) ins.push_back(b);
  auto bn = b.defined() ? b.node() : nullptr;
  Tensor out = make_result({n, o}, ins, [xn, wn, bn, n, c, o](TensorNode& self) {
    xn->ensure_grad();
    wn->ensure_grad();
    if (bn) bn->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) {
        double g = self.grad[i * o + j];
        if (g == 0.0) continue;
        for (int k = 0; k < c; ++k) {
          xn->grad[i * c + k] += g * wn->data[j * c + k];
          wn->grad[j * c + k] += g * xn->data[i * c + k];
        }
        if (bn) bn->grad[j] += g;
      }
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) {
      double acc = b.defined() ? b[j] : 0.0;
      for (int k = 0; k < c; ++k) acc += x[i * c + k] * w[j * c + k];
      out[i * o + j] = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

// Softmax over the channel axis (axis 1) of an N,C[,H,W] tensor.
inline Tensor softmax_channels(const Tensor& x) {
  AERO_CHECK(x.ndim() >= 2, "softmax_channels: need at least 2 dims, got "
                                << shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1);
  int64_t inner = 1;
  for (int d = 2; d < x.ndim(); ++d) inner *= x.dim(d);
  auto xn = x.node();
  Tensor out = make_result(x.shape(), {x}, [xn, n, c, inner](TensorNode& self) {
    xn->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int64_t i = 0; i < inner; ++i) {
        double dot = 0.0;
        for (int k = 0; k < c; ++k) {
          int64_t id = (b * c + k) * inner + i;
          dot += self.grad[id] * self.data[id];
        }
        for (int k = 0; k < c; ++k) {
          int64_t id = (b * c + k) * inner + i;
          xn->grad[id] += self.data[id] * (self.grad[id] - dot);
        }
      }
  });
  for (int b = 0; b < n; ++b)
    for (int64_t i = 0; i < inner; ++i) {
      double mx = -INFINITY;
      for (int k = 0; k < c; ++k) mx = std::max(mx, x[(b * c + k) * inner + i]);
      double z = 0.0;
      for (int k = 0; k < c; ++k) z += std::exp(x[(b * c + k) * inner + i] - mx);
      for (int k = 0; k < c; ++k)
        out[(b * c + k) * inner + i] = std::exp(x[(b * c + k) * inner + i] - mx) / z;
    }
  return out;
}

// Softmax over the spatial positions (H*W) of each channel of an N,C,H,W map.
inline Tensor softmax_spatial(const Tensor& x) {
  AERO_CHECK(x.ndim() == 4, "softmax_spatial: expected N,C,H,W, got " << shape_str(x.shape()));
  int n = x.dim(0), c = x.dim(1);
  int64_t hw = (int64_t)x.dim(2) * x.dim(3);
  auto xn = x.node();
  Tensor out = make_result(x.shape(), {x}, [xn, n, c, hw](TensorNode& self) {
    xn->ensure_grad();
    for (int64_t p = 0; p < (int64_t)n * c; ++p) {
      int64_t base = p * hw;
      double dot = 0.0;
      for (int64_t i = 0; i < hw; ++i) dot += self.grad[base + i] * self.data[base + i];
      for (int64_t i = 0; i < hw; ++i)
        xn->grad[base + i] += self.data[base + i] * (self.grad[base + i] - dot);
    }
  });
  for (int64_t p = 0; p < (int64_t)n * c; ++p) {
    int64_t base = p * hw;
    double mx = -INFINITY;
    for (int64_t i = 0; i < hw; ++i) mx = std::max(mx, x[base + i]);
    double z = 0.0;
    for (int64_t i = 0; i < hw; ++i) z += std::exp(x[base + i] - mx);
    for (int64_t i = 0; i < hw; ++i) out[base + i] = std::exp(x[base + i] - mx) / z;
  }
  return out;
}

}  // namespace aero

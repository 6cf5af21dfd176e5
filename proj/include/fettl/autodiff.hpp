#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation in creation order, so the node list is
// already topologically sorted; backward() walks it once in reverse. Vars are
// cheap (tape, index) handles. Leaves come in two flavours: leaf() owns its
// value, watch() mirrors an external Tensor (a model parameter) and
// accumulates gradients into that tensor's grad buffer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "fettl/tensor.hpp"

namespace fettl {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
};

// Gradients of one backward call keyed by leaf label.
using GradientMap = std::map<std::string, Tensor>;

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), {}, nullptr, false); }

  Var leaf(Tensor v, std::string label) {
    Var out = push(std::move(v), {}, nullptr, true);
    nodes_[out.id].is_leaf = true;
    nodes_[out.id].label = std::move(label);
    return out;
  }

  // The returned Var holds a copy of t's value; `t` must outlive backward().
  Var watch(Tensor& t, std::string label) {
    Var out = leaf(t, std::move(label));
    nodes_[out.id].value.zero_grad();
    nodes_[out.id].bound = &t;
    return out;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Accumulated gradient of a leaf() across backward calls (empty if none yet).
  std::span<const double> leaf_grad(Var v) const { return nodes_.at(v.id).value.grad(); }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.tape != this) throw ContractError("operation mixes variables from different tapes");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs ? std::move(fn) : nullptr, needs);
  }

  // Gradient buffer of node `id` during backward(); empty when the node does
  // not participate in differentiation.
  std::span<double> grad(std::size_t id) {
    if (!nodes_[id].requires_grad) return {};
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.numel(), 0.0);
    return g;
  }

  GradientMap backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward on a variable from another tape");
    const Node& root = nodes_.at(loss.id);
    if (root.value.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
    GradientMap out;
    if (!root.requires_grad) return out;

    grads_.assign(nodes_.size(), {});
    grads_[loss.id].assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (grads_[i].empty()) continue;
      Node& n = nodes_[i];
      if (n.backward) n.backward(grads_[i], *this);
      if (n.is_leaf) {
        auto it = out.find(n.label);
        if (it == out.end()) {
          out.emplace(n.label, Tensor(n.value.shape(), grads_[i]));
        } else {
          for (std::size_t k = 0; k < grads_[i].size(); ++k) it->second[k] += grads_[i][k];
        }
        n.value.accumulate_grad(grads_[i]);
        if (n.bound) n.bound->accumulate_grad(grads_[i]);
      }
      if (!n.is_leaf) std::vector<double>().swap(grads_[i]);
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string label;
    Tensor* bound = nullptr;
  };

  Var push(Tensor v, std::vector<std::size_t> inputs, BackwardFn fn, bool needs) {
    nodes_.push_back(Node{std::move(v), std::move(inputs), std::move(fn), needs, false, {}, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

inline const Tensor& Var::value() const {
  if (!tape) throw ContractError("variable is not attached to a tape");
  return tape->value(id);
}

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw ContractError("variable is not attached to a tape");
  return *a.tape;
}

inline void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::same_shape("add", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib](std::span<const double> g, Tape& tp) {
    for (std::size_t id : {ia, ib}) {
      auto gx = tp.grad(id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::same_shape("sub", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = tp.grad(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::same_shape("mul", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib](std::span<const double> g, Tape& tp) {
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * yv[i];
    auto gb = tp.grad(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * xv[i];
  });
}

inline Var div(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::same_shape("div", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] / y[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib](std::span<const double> g, Tape& tp) {
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / yv[i];
    auto gb = tp.grad(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * xv[i] / (yv[i] * yv[i]);
  });
}

inline Var scale(Var a, double s) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = s * x[i];
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, s](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var add_scalar(Var a, double s) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + s;
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

// Multiplies every entry of `a` by the single-element variable `s`.
inline Var scale_by(Var a, Var s) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (s.numel() != 1) throw DimensionError("scale_by expects a scalar, got " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = sv * x[i];
  const std::size_t ia = a.id, is = s.id;
  return t.record(std::move(out), {a, s}, [ia, is](std::span<const double> g, Tape& tp) {
    const Tensor& xv = tp.value(ia);
    const double svv = tp.value(is)[0];
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += svv * g[i];
    auto gs = tp.grad(is);
    if (!gs.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.numel(); ++i) acc += g[i] * xv[i];
      gs[0] += acc;
    }
  });
}

template <class F, class DF>
Var map_unary(Var a, F f, DF df) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id;
  // Output id is the next node; the closure reads it back during backward.
  const std::size_t io = t.size();
  return t.record(std::move(out), {a}, [ia, io, df](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    if (ga.empty()) return;
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(io);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

inline Var relu(Var a) {
  return map_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return map_unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var abs(Var a) {
  return map_unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var exp(Var a) {
  return map_unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return map_unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
  return map_unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Var pow(Var a, double p) {
  return map_unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

// Gradient passes only where lo < x < hi.
inline Var clamp(Var a, double lo, double hi) {
  return map_unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceKind { sum, mean, channel_mean };

inline Var sum(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t ia = a.id;
  return t.record(Tensor::scalar(s), {a}, [ia](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (double& v : ga) v += g[0];
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

// C×H×W -> [C]; N×C×H×W -> [N×C]. Spatial mean per channel.
inline Var channel_mean(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 3 && x.rank() != 4)
    throw DimensionError("channel_mean expects C×H×W or N×C×H×W, got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t hw = x.numel() / (n * c);
  Tensor out(batched ? Shape{n, c} : Shape{c});
  for (std::size_t k = 0; k < n * c; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += x[k * hw + j];
    out[k] = s / static_cast<double>(hw);
  }
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, hw](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t k = 0; k < g.size(); ++k)
      for (std::size_t j = 0; j < hw; ++j) ga[k * hw + j] += g[k] * inv;
  });
}

inline Var reduce(Var a, ReduceKind kind) {
  if (a.numel() == 0) throw InvalidInput("reduce on empty tensor");
  switch (kind) {
    case ReduceKind::sum:
      return sum(a);
    case ReduceKind::mean:
      return mean(a);
    case ReduceKind::channel_mean:
      return channel_mean(a);
  }
  throw InvalidInput("unknown reduce kind");
}

// [N×...] -> [N], summing everything after the leading dimension.
inline Var sum_per_sample(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const std::size_t n = x.dim(0);
  const std::size_t per = x.numel() / n;
  Tensor out({n});
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < per; ++j) s += x[k * per + j];
    out[k] = s;
  }
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, per](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k)
      for (std::size_t j = 0; j < per; ++j) ga[k * per + j] += g[k];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var a, Shape shape) {
  Tape& t = detail::tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

inline Var transpose(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, r, c](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

// Stacks equally shaped variables along a new leading dimension.
inline Var stack(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("stack of zero tensors");
  Tape& t = detail::tape_of(parts[0]);
  const Shape inner = parts[0].shape();
  const std::size_t per = shape_numel(inner);
  Shape s{parts.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  Tensor out(s);
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    detail::same_shape("stack", parts[0].value(), parts[k].value());
    const auto src = parts[k].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * per));
    ids.push_back(parts[k].id);
  }
  return t.record(std::move(out), parts, [ids, per](std::span<const double> g, Tape& tp) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto gk = tp.grad(ids[k]);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[k * per + i];
    }
  });
}

// Picks sample k of a batched tensor, dropping the leading dimension.
inline Var select(Var a, std::size_t k) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() < 2 || k >= x.dim(0))
    throw DimensionError("select index " + std::to_string(k) + " out of range for " + shape_str(x.shape()));
  Shape inner(x.shape().begin() + 1, x.shape().end());
  const std::size_t per = shape_numel(inner);
  Tensor out(inner);
  std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(k * per), per, out.data().begin());
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, k, per](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < per; ++i) ga[k * per + i] += g[i];
  });
}

// N×C×H×W -> C×(N·H·W): every column is one spatial sample.
inline Var to_channel_major(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 4) throw DimensionError("to_channel_major expects N×C×H×W, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({c, n * hw});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((s * c + ch) * hw), hw,
                  out.data().begin() + static_cast<std::ptrdiff_t>(ch * n * hw + s * hw));
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, n, c, hw](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < hw; ++j) ga[(s * c + ch) * hw + j] += g[ch * n * hw + s * hw + j];
  });
}

inline Var from_channel_major(Var a, std::size_t n, std::size_t h, std::size_t w) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const std::size_t hw = h * w;
  if (x.rank() != 2 || x.dim(1) != n * hw)
    throw DimensionError("from_channel_major: " + shape_str(x.shape()) + " incompatible with N=" +
                         std::to_string(n) + " H=" + std::to_string(h) + " W=" + std::to_string(w));
  const std::size_t c = x.dim(0);
  Tensor out({n, c, h, w});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(ch * n * hw + s * hw), hw,
                  out.data().begin() + static_cast<std::ptrdiff_t>((s * c + ch) * hw));
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, n, c, hw](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < hw; ++j) ga[ch * n * hw + s * hw + j] += g[(s * c + ch) * hw + j];
  });
}

// [C] -> [C×n], repeating the vector along columns.
inline Var broadcast_cols(Var m, std::size_t n) {
  Tape& t = detail::tape_of(m);
  const Tensor& x = m.value();
  if (x.rank() != 1) throw DimensionError("broadcast_cols expects a vector, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0);
  Tensor out({c, n});
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i];
  const std::size_t ia = m.id;
  return t.record(std::move(out), {m}, [ia, c, n](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < c; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
      ga[i] += s;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0))
    throw DimensionError("matmul dimension mismatch: " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* yrow = y.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib, m, k, n](std::span<const double> g, Tape& tp) {
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    auto ga = tp.grad(ia);
    if (!ga.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = g.data() + i * n;
          const double* yrow = yv.data().data() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * yrow[j];
          ga[i * k + p] += s;
        }
    }
    auto gb = tp.grad(ib);
    if (!gb.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xval = xv[i * k + p];
          if (xval == 0.0) continue;
          const double* grow = g.data() + i * n;
          double* brow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += xval * grow[j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutional building blocks. Images are C×H×W or batched N×C×H×W.

namespace detail {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  bool batched;
};

inline ConvGeom conv_geom(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 && x.rank() != 4)
    throw DimensionError("conv2d input must be C×H×W or N×C×H×W, got " + shape_str(x.shape()));
  if (k.rank() != 4) throw DimensionError("conv2d kernels must be Cout×Cin×k×k, got " + shape_str(k.shape()));
  if (stride == 0) throw DimensionError("conv2d stride must be >= 1");
  ConvGeom g{};
  g.batched = x.rank() == 4;
  const std::size_t o = g.batched ? 1 : 0;
  g.n = g.batched ? x.dim(0) : 1;
  g.cin = x.dim(o);
  g.h = x.dim(o + 1);
  g.w = x.dim(o + 2);
  g.cout = k.dim(0);
  g.kh = k.dim(2);
  g.kw = k.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (k.dim(1) != g.cin)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernels " +
                         shape_str(k.shape()));
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad)
    throw DimensionError("conv2d kernel " + shape_str(k.shape()) + " larger than padded input " +
                         shape_str(x.shape()) + " (padding " + std::to_string(pad) + ")");
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

inline void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            row[oy * g.wo + ox] = (iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w))
                                      ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                                      : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding.
inline Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t padding) {
  Tape& t = detail::tape_of(input);
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const detail::ConvGeom g = detail::conv_geom(x, k, stride, padding);
  const std::size_t hw = g.ho * g.wo;
  const std::size_t rows = g.cin * g.kh * g.kw;
  Tensor out(g.batched ? Shape{g.n, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo});
  std::vector<double> cols(rows * hw);
  const std::size_t in_per = g.cin * g.h * g.w;
  const std::size_t out_per = g.cout * hw;
  for (std::size_t s = 0; s < g.n; ++s) {
    detail::im2col(x.data().data() + s * in_per, g, cols.data());
    double* o = out.data().data() + s * out_per;
    for (std::size_t co = 0; co < g.cout; ++co) {
      double* orow = o + co * hw;
      for (std::size_t r = 0; r < rows; ++r) {
        const double wv = k[co * rows + r];
        const double* crow = cols.data() + r * hw;
        for (std::size_t j = 0; j < hw; ++j) orow[j] += wv * crow[j];
      }
    }
  }
  const std::size_t ix = input.id, ik = kernels.id;
  return t.record(std::move(out), {input, kernels}, [ix, ik, g, hw, rows, in_per, out_per](std::span<const double> gr, Tape& tp) {
    const Tensor& xv = tp.value(ix);
    const Tensor& kv = tp.value(ik);
    auto gx = tp.grad(ix);
    auto gk = tp.grad(ik);
    std::vector<double> cols(rows * hw);
    std::vector<double> dcols;
    if (!gx.empty()) dcols.resize(rows * hw);
    for (std::size_t s = 0; s < g.n; ++s) {
      const double* go = gr.data() + s * out_per;
      if (!gk.empty()) {
        detail::im2col(xv.data().data() + s * in_per, g, cols.data());
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* grow = go + co * hw;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* crow = cols.data() + r * hw;
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += grow[j] * crow[j];
            gk[co * rows + r] += acc;
          }
        }
      }
      if (!gx.empty()) {
        std::fill(dcols.begin(), dcols.end(), 0.0);
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* grow = go + co * hw;
          for (std::size_t r = 0; r < rows; ++r) {
            const double wv = kv[co * rows + r];
            if (wv == 0.0) continue;
            double* drow = dcols.data() + r * hw;
            for (std::size_t j = 0; j < hw; ++j) drow[j] += wv * grow[j];
          }
        }
        detail::col2im_add(dcols.data(), g, gx.data() + s * in_per);
      }
    }
  });
}

namespace detail {
// Returns (n, c, hw) for C×H×W or N×C×H×W tensors.
inline std::tuple<std::size_t, std::size_t, std::size_t> nchw(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1) * x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw DimensionError(std::string(op) + " expects C×H×W or N×C×H×W, got " + shape_str(x.shape()));
}
}  // namespace detail

inline Var add_channel_bias(Var a, Var bias) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  auto [n, c, hw] = detail::nchw(x, "add_channel_bias");
  if (b.rank() != 1 || b.dim(0) != c)
    throw DimensionError("add_channel_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t i = (s * c + ch) * hw + j;
        out[i] = x[i] + b[ch];
      }
  const std::size_t ia = a.id, ib = bias.id;
  return t.record(std::move(out), {a, bias}, [ia, ib, n, c, hw](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = tp.grad(ib);
    if (!gb.empty())
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t j = 0; j < hw; ++j) acc += g[(s * c + ch) * hw + j];
          gb[ch] += acc;
        }
  });
}

// y = gamma[c] * x + beta[c] per channel.
inline Var channel_affine(Var a, Var gamma, Var beta) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  auto [n, c, hw] = detail::nchw(x, "channel_affine");
  if (gm.numel() != c || bt.numel() != c)
    throw DimensionError("channel_affine: parameters " + shape_str(gm.shape()) + "/" + shape_str(bt.shape()) +
                         " vs input " + shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t i = (s * c + ch) * hw + j;
        out[i] = gm[ch] * x[i] + bt[ch];
      }
  const std::size_t ia = a.id, ig = gamma.id, ib = beta.id;
  return t.record(std::move(out), {a, gamma, beta}, [ia, ig, ib, n, c, hw](std::span<const double> g, Tape& tp) {
    const Tensor& xv = tp.value(ia);
    const Tensor& gmv = tp.value(ig);
    auto ga = tp.grad(ia);
    auto gg = tp.grad(ig);
    auto gb = tp.grad(ib);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < hw; ++j) {
          const std::size_t i = (s * c + ch) * hw + j;
          if (!ga.empty()) ga[i] += g[i] * gmv[ch];
          if (!gg.empty()) gg[ch] += g[i] * xv[i];
          if (!gb.empty()) gb[ch] += g[i];
        }
  });
}

inline Var upsample_nearest(Var a, std::size_t factor) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 3 && x.rank() != 4)
    throw DimensionError("upsample_nearest expects C×H×W or N×C×H×W, got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const std::size_t o = batched ? 1 : 0;
  const std::size_t n = batched ? x.dim(0) : 1, c = x.dim(o), h = x.dim(o + 1), w = x.dim(o + 2);
  const std::size_t H = h * factor, W = w * factor;
  Tensor out(batched ? Shape{n, c, H, W} : Shape{c, H, W});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(p * H + y) * W + xx] = x[(p * h + y / factor) * w + xx / factor];
  const std::size_t ia = a.id;
  return t.record(std::move(out), {a}, [ia, n, c, h, w, factor](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    const std::size_t H = h * factor, W = w * factor;
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) ga[(p * h + y / factor) * w + xx / factor] += g[(p * H + y) * W + xx];
  });
}

namespace detail {

// Normalizes groups of entries to zero mean and unit (biased) variance.
// `index(group, j)` enumerates the members of each group.
template <class Index>
Var group_normalize(Var a, std::size_t groups, std::size_t members, double eps, Index index) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double mu = 0.0;
    for (std::size_t j = 0; j < members; ++j) mu += x[index(gi, j)];
    mu /= static_cast<double>(members);
    double var = 0.0;
    for (std::size_t j = 0; j < members; ++j) {
      const double d = x[index(gi, j)] - mu;
      var += d * d;
    }
    var /= static_cast<double>(members);
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < members; ++j) {
      const std::size_t i = index(gi, j);
      out[i] = (x[i] - mu) * inv_std[gi];
    }
  }
  const std::size_t ia = a.id;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a}, [ia, io, groups, members, inv_std, index](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    if (ga.empty()) return;
    const Tensor& y = tp.value(io);
    const double m = static_cast<double>(members);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      double gmean = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < members; ++j) {
        const std::size_t i = index(gi, j);
        gmean += g[i];
        gy += g[i] * y[i];
      }
      gmean /= m;
      gy /= m;
      for (std::size_t j = 0; j < members; ++j) {
        const std::size_t i = index(gi, j);
        ga[i] += inv_std[gi] * (g[i] - gmean - y[i] * gy);
      }
    }
  });
}

}  // namespace detail

// Per-sample, per-channel normalization over the spatial extent. No running statistics.
inline Var instance_norm(Var a, double eps = 1e-5) {
  const auto [n, c, hw_] = detail::nchw(a.value(), "instance_norm");
  const std::size_t hw = hw_;
  return detail::group_normalize(a, n * c, hw, eps, [hw](std::size_t gi, std::size_t j) { return gi * hw + j; });
}

// Per-channel normalization over batch and spatial extent (training-mode statistics).
inline Var batch_norm(Var a, double eps = 1e-5) {
  const auto [n, c_, hw_] = detail::nchw(a.value(), "batch_norm");
  const std::size_t c = c_, hw = hw_;
  return detail::group_normalize(a, c, n * hw, eps, [c, hw](std::size_t ch, std::size_t j) {
    const std::size_t s = j / hw;
    return (s * c + ch) * hw + (j % hw);
  });
}

// x: [N×K] + b: [K]
inline Var add_row_bias(Var a, Var bias) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * k + j] + b[j];
  const std::size_t ia = a.id, ib = bias.id;
  return t.record(std::move(out), {a, bias}, [ia, ib, n, k](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = tp.grad(ib);
    if (!gb.empty())
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
  });
}

// Row-wise log-softmax of an [N×K] matrix.
inline Var log_softmax(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("log_softmax expects N×K, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[i * k + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * k + j] - lse;
  }
  const std::size_t ia = a.id;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a}, [ia, io, n, k](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    const Tensor& y = tp.value(io);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g[i * k + j];
      for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[i * k + j] - std::exp(y[i * k + j]) * gs;
    }
  });
}

// Mean negative log-likelihood of the labelled class; `logp` is [N×K].
inline Var nll_loss(Var logp, const std::vector<int>& labels) {
  Tape& t = detail::tape_of(logp);
  const Tensor& x = logp.value();
  if (x.rank() != 2 || x.dim(0) != labels.size())
    throw DimensionError("nll_loss: " + shape_str(x.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t n = x.dim(0), k = x.dim(1);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw InvalidInput("nll_loss: label " + std::to_string(labels[i]) + " out of range");
    s -= x[i * k + static_cast<std::size_t>(labels[i])];
  }
  const std::size_t ia = logp.id;
  return t.record(Tensor::scalar(s / static_cast<double>(n)), {logp}, [ia, labels, n, k](std::span<const double> g, Tape& tp) {
    auto ga = tp.grad(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i * k + static_cast<std::size_t>(labels[i])] -= g[0] / static_cast<double>(n);
  });
}

}  // namespace fettl

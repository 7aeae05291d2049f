#pragma once

// Tape-based reverse-mode differentiation over Tensor operations. A Tape owns
// every intermediate value; ops append nodes and register a pull function
// that routes the node's gradient to its parents. Replaying the tape in
// reverse creation order visits nodes in reverse topological order, so
// backward() is a single reverse sweep.
//
// Numerical policy: values are float32, reductions (convolutions, sums,
// pools) accumulate in float64 before the final cast.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "invcodec/tensor.hpp"

namespace invcodec {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using PullFn = std::function<void(Tape&, int32_t self)>;

  Var leaf(Tensor value) { return emit(std::move(value), nullptr); }

  Var emit(Tensor value, PullFn pull) {
    nodes_.push_back(Node{std::move(value), Tensor(), false, std::move(pull)});
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  const Tensor& val(Var v) const { return nodes_[idx(v.id)].value; }
  const Tensor& val_of(int32_t id) const { return nodes_[idx(id)].value; }

  // Gradient of a node; zeros if backward never reached it.
  const Tensor& grad(Var v) { return grad_buf(v.id); }

  Tensor& grad_buf(int32_t id) {
    Node& n = nodes_[idx(id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    n.seen = true;
    return n.grad;
  }

  bool grad_seen(int32_t id) const { return nodes_[idx(id)].seen; }

  void accumulate(int32_t id, const Tensor& g) {
    Tensor& dst = grad_buf(id);
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  }

  void accumulate(int32_t id, const std::vector<double>& g) {
    Tensor& dst = grad_buf(id);
    for (size_t i = 0; i < g.size(); ++i)
      dst[static_cast<int64_t>(i)] += static_cast<float>(g[i]);
  }

  void backward(Var loss) {
    require(loss.tape == this, "backward: foreign node");
    require(val(loss).numel() == 1, "backward: loss must be scalar, got " +
                                        val(loss).shape_str());
    require(!ran_backward_, "backward: tape already differentiated");
    ran_backward_ = true;
    grad_buf(loss.id)[0] = 1.0f;
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.seen && n.pull) n.pull(*this, i);
    }
  }

  int64_t node_count() const { return static_cast<int64_t>(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool seen = false;
    PullFn pull;
  };

  size_t idx(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
      throw std::invalid_argument("tape: invalid node id");
    return static_cast<size_t>(id);
  }

  // A deque keeps references to node values stable while later ops append,
  // so layer code may hold val() references across op calls.
  std::deque<Node> nodes_;
  bool ran_backward_ = false;
};

namespace detail {

inline Tape& tape_of(Var a) {
  require(a.valid(), "op on invalid Var");
  return *a.tape;
}

inline void require_same_tape(Var a, Var b, const char* op) {
  require(a.valid() && b.valid() && a.tape == b.tape,
          std::string(op) + ": operands on different tapes");
}

template <class F, class DF>
Var unary_op(Var a, F f, DF df, const char* /*name*/) {
  Tape& t = tape_of(a);
  const Tensor& x = t.val(a);
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, df](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    const Tensor& x = tp.val_of(ia);
    const Tensor& y = tp.val_of(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  require_same_shape(x, y, "add");
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  const int32_t ia = a.id, ib = b.id;
  return t.emit(std::move(out), [ia, ib](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b, "sub");
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  require_same_shape(x, y, "sub");
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
  const int32_t ia = a.id, ib = b.id;
  return t.emit(std::move(out), [ia, ib](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    tp.accumulate(ia, g);
    Tensor& gb = tp.grad_buf(ib);
    for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b, "mul");
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  require_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
  const int32_t ia = a.id, ib = b.id;
  return t.emit(std::move(out), [ia, ib](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    const Tensor& x = tp.val_of(ia);
    const Tensor& y = tp.val_of(ib);
    Tensor& ga = tp.grad_buf(ia);
    Tensor& gb = tp.grad_buf(ib);
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i] * y[i];
      gb[i] += g[i] * x[i];
    }
  });
}

inline Var div(Var a, Var b) {
  detail::require_same_tape(a, b, "div");
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  require_same_shape(x, y, "div");
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] / y[i];
  const int32_t ia = a.id, ib = b.id;
  return t.emit(std::move(out), [ia, ib](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    const Tensor& x = tp.val_of(ia);
    const Tensor& y = tp.val_of(ib);
    Tensor& ga = tp.grad_buf(ia);
    Tensor& gb = tp.grad_buf(ib);
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i] / y[i];
      gb[i] -= g[i] * x[i] / (y[i] * y[i]);
    }
  });
}

inline Var scale(Var a, float s) {
  return detail::unary_op(
      a, [s](float x) { return x * s; },
      [s](float, float) { return s; }, "scale");
}

inline Var add_scalar(Var a, float s) {
  return detail::unary_op(
      a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; },
      "add_scalar");
}

inline Var vexp(Var a) {
  return detail::unary_op(
      a, [](float x) { return std::exp(x); },
      [](float, float y) { return y; }, "exp");
}

inline Var vlog(Var a) {
  return detail::unary_op(
      a, [](float x) { return std::log(x); },
      [](float x, float) { return 1.0f / x; }, "log");
}

inline float sigmoid_scalar(float x) {
  if (x >= 0.0f) {
    const float e = std::exp(-x);
    return 1.0f / (1.0f + e);
  }
  const float e = std::exp(x);
  return e / (1.0f + e);
}

inline Var sigmoid(Var a) {
  return detail::unary_op(
      a, [](float x) { return sigmoid_scalar(x); },
      [](float, float y) { return y * (1.0f - y); }, "sigmoid");
}

inline Var vtanh(Var a) {
  return detail::unary_op(
      a, [](float x) { return std::tanh(x); },
      [](float, float y) { return 1.0f - y * y; }, "tanh");
}

inline float softplus_scalar(float x) {
  return std::max(x, 0.0f) + std::log1p(std::exp(-std::abs(x)));
}

inline Var softplus(Var a) {
  return detail::unary_op(
      a, [](float x) { return softplus_scalar(x); },
      [](float x, float) { return sigmoid_scalar(x); }, "softplus");
}

inline Var leaky_relu(Var a, float slope) {
  require(slope > 0.0f && slope < 1.0f, "leaky_relu: slope must be in (0,1)");
  return detail::unary_op(
      a, [slope](float x) { return x > 0.0f ? x : slope * x; },
      [slope](float x, float) { return x > 0.0f ? 1.0f : slope; },
      "leaky_relu");
}

inline Var clamp_min(Var a, float lo) {
  return detail::unary_op(
      a, [lo](float x) { return x < lo ? lo : x; },
      [lo](float x, float) { return x < lo ? 0.0f : 1.0f; }, "clamp_min");
}

inline Var pow_const(Var a, float p) {
  return detail::unary_op(
      a,
      [p](float x) {
        return static_cast<float>(std::pow(static_cast<double>(x), p));
      },
      [p](float x, float) {
        return static_cast<float>(p * std::pow(static_cast<double>(x), p - 1.0));
      },
      "pow_const");
}

inline double std_normal_cdf_scalar(double x) {
  return 0.5 * std::erfc(-x * 0.7071067811865475244);
}

inline double std_normal_pdf_scalar(double x) {
  return 0.3989422804014326779 * std::exp(-0.5 * x * x);
}

inline Var std_normal_cdf(Var a) {
  return detail::unary_op(
      a,
      [](float x) {
        return static_cast<float>(std_normal_cdf_scalar(x));
      },
      [](float x, float) {
        return static_cast<float>(std_normal_pdf_scalar(x));
      },
      "std_normal_cdf");
}

// Rounding carries no gradient; it only appears on non-differentiated paths.
inline Var vround(Var a) {
  Tape& t = detail::tape_of(a);
  Tensor out = round_half_away(t.val(a));
  return t.emit(std::move(out), nullptr);
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  const int32_t ia = a.id;
  return t.emit(Tensor::scalar(static_cast<float>(acc)),
                [ia](Tape& tp, int32_t self) {
                  const float g = tp.grad_buf(self)[0];
                  Tensor& ga = tp.grad_buf(ia);
                  for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
                });
}

inline Var mean_all(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  const int64_t n = x.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  const int32_t ia = a.id;
  return t.emit(
      Tensor::scalar(static_cast<float>(acc / static_cast<double>(n))),
      [ia, n](Tape& tp, int32_t self) {
        const float g =
            tp.grad_buf(self)[0] / static_cast<float>(n);
        Tensor& ga = tp.grad_buf(ia);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
      });
}

// ---------------------------------------------------------------------------
// Shape / layout ops
// ---------------------------------------------------------------------------

inline Var reshape(Var a, std::vector<int64_t> shape) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  Tensor out(std::move(shape), x.data());
  require(out.numel() == x.numel(), "reshape: element count mismatch");
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

inline Var slice_channels(Var a, int64_t c0, int64_t c1) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "slice_channels: rank-3 input expected");
  require(0 <= c0 && c0 < c1 && c1 <= x.dim(0), "slice_channels: bad range");
  const int64_t h = x.dim(1), w = x.dim(2), plane = h * w;
  Tensor out({c1 - c0, h, w});
  std::copy(x.data().begin() + c0 * plane, x.data().begin() + c1 * plane,
            out.data().begin());
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, c0, plane](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    const int64_t base = c0 * plane;
    for (int64_t i = 0; i < g.numel(); ++i) ga[base + i] += g[i];
  });
}

inline Var concat_channels(Var a, Var b) {
  detail::require_same_tape(a, b, "concat_channels");
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  require(x.rank() == 3 && y.rank() == 3 && x.dim(1) == y.dim(1) &&
              x.dim(2) == y.dim(2),
          "concat_channels: spatial dims must match (" + x.shape_str() +
              " vs " + y.shape_str() + ")");
  Tensor out({x.dim(0) + y.dim(0), x.dim(1), x.dim(2)});
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  std::copy(y.data().begin(), y.data().end(),
            out.data().begin() + x.numel());
  const int32_t ia = a.id, ib = b.id;
  const int64_t na = x.numel();
  return t.emit(std::move(out), [ia, ib, na](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    Tensor& gb = tp.grad_buf(ib);
    for (int64_t i = 0; i < na; ++i) ga[i] += g[i];
    for (int64_t i = na; i < g.numel(); ++i) gb[i - na] += g[i];
  });
}

// Space-to-depth on 2x2 blocks. Output channel c*4 + (dy*2 + dx) holds input
// channel c at spatial offset (dy, dx), so a 1xHxW tensor maps its 2x2 block
// [[a,b],[c,d]] to channels [a,b,c,d].
inline Var pixel_shuffle_down(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "pixel_shuffle_down: rank-3 input expected");
  require(x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
          "pixel_shuffle_down: spatial dims must be even, got " +
              x.shape_str());
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C * 4, H / 2, W / 2});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dy = 0; dy < 2; ++dy)
      for (int64_t dx = 0; dx < 2; ++dx)
        for (int64_t y = 0; y < H / 2; ++y)
          for (int64_t xx = 0; xx < W / 2; ++xx)
            out.at(c * 4 + dy * 2 + dx, y, xx) =
                x.at(c, 2 * y + dy, 2 * xx + dx);
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, C, H, W](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx)
          for (int64_t y = 0; y < H / 2; ++y)
            for (int64_t xx = 0; xx < W / 2; ++xx)
              ga[( (c * H + 2 * y + dy) * W + 2 * xx + dx)] +=
                  g.at(c * 4 + dy * 2 + dx, y, xx);
  });
}

inline Var pixel_shuffle_up(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "pixel_shuffle_up: rank-3 input expected");
  require(x.dim(0) % 4 == 0,
          "pixel_shuffle_up: channel count must be divisible by 4");
  const int64_t C = x.dim(0) / 4, h = x.dim(1), w = x.dim(2);
  Tensor out({C, h * 2, w * 2});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dy = 0; dy < 2; ++dy)
      for (int64_t dx = 0; dx < 2; ++dx)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xx = 0; xx < w; ++xx)
            out.at(c, 2 * y + dy, 2 * xx + dx) =
                x.at(c * 4 + dy * 2 + dx, y, xx);
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, C, h, w](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx)
          for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
              ga[((c * 4 + dy * 2 + dx) * h + y) * w + xx] +=
                  g.at(c, 2 * y + dy, 2 * xx + dx);
  });
}

// Mean over groups of channels: input (alpha*N, h, w) -> (N, h, w) where
// output channel n averages input channels {g*N + n : g in [0, alpha)}.
inline Var group_mean_channels(Var a, int alpha) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "group_mean_channels: rank-3 input expected");
  require(alpha >= 1 && x.dim(0) % alpha == 0,
          "group_mean_channels: channel count " + std::to_string(x.dim(0)) +
              " not divisible by alpha " + std::to_string(alpha));
  const int64_t N = x.dim(0) / alpha, plane = x.dim(1) * x.dim(2);
  Tensor out({N, x.dim(1), x.dim(2)});
  // Mean entirely in double: the mean of alpha identical values is exact.
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (int64_t g = 0; g < alpha; ++g) acc += x[(g * N + n) * plane + p];
      out[n * plane + p] =
          static_cast<float>(acc / static_cast<double>(alpha));
    }
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, N, plane, alpha](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    const float inv = 1.0f / static_cast<float>(alpha);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t p = 0; p < plane; ++p) {
        const float gv = g[n * plane + p] * inv;
        for (int64_t gI = 0; gI < alpha; ++gI)
          ga[(gI * N + n) * plane + p] += gv;
      }
  });
}

// Inverse of group_mean_channels' layout: stack alpha copies, (N, h, w) ->
// (alpha*N, h, w).
inline Var repeat_channels(Var a, int alpha) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "repeat_channels: rank-3 input expected");
  require(alpha >= 1, "repeat_channels: alpha must be positive");
  const int64_t N = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tensor out({N * alpha, x.dim(1), x.dim(2)});
  for (int64_t g = 0; g < alpha; ++g)
    std::copy(x.data().begin(), x.data().end(),
              out.data().begin() + g * N * plane);
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, N, plane, alpha](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t gI = 0; gI < alpha; ++gI)
      for (int64_t i = 0; i < N * plane; ++i)
        ga[i] += g[gI * N * plane + i];
  });
}

inline Var upsample_nearest2(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "upsample_nearest2: rank-3 input expected");
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C, H * 2, W * 2});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < 2 * H; ++y)
      for (int64_t xx = 0; xx < 2 * W; ++xx)
        out.at(c, y, xx) = x.at(c, y / 2, xx / 2);
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, C, H, W](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < 2 * H; ++y)
        for (int64_t xx = 0; xx < 2 * W; ++xx)
          ga[(c * H + y / 2) * W + xx / 2] += g.at(c, y, xx);
  });
}

// Keep the top-left (th, tw) window.
inline Var crop_hw(Var a, int64_t th, int64_t tw) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "crop_hw: rank-3 input expected");
  require(th >= 1 && tw >= 1 && th <= x.dim(1) && tw <= x.dim(2),
          "crop_hw: target exceeds input " + x.shape_str());
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C, th, tw});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < th; ++y)
      for (int64_t xx = 0; xx < tw; ++xx) out.at(c, y, xx) = x.at(c, y, xx);
  const int32_t ia = a.id;
  return t.emit(std::move(out), [ia, C, H, W, th, tw](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < th; ++y)
        for (int64_t xx = 0; xx < tw; ++xx)
          ga[(c * H + y) * W + xx] += g.at(c, y, xx);
  });
}

// 2x2 mean pooling with stride 2; odd trailing rows/columns are dropped.
inline Var avg_pool2(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = t.val(a);
  require(x.rank() == 3, "avg_pool2: rank-3 input expected");
  const int64_t C = x.dim(0), H = x.dim(1) / 2, W = x.dim(2) / 2;
  require(H >= 1 && W >= 1, "avg_pool2: input too small " + x.shape_str());
  Tensor out({C, H, W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx)
        out.at(c, y, xx) =
            0.25f * (x.at(c, 2 * y, 2 * xx) + x.at(c, 2 * y, 2 * xx + 1) +
                     x.at(c, 2 * y + 1, 2 * xx) +
                     x.at(c, 2 * y + 1, 2 * xx + 1));
  const int32_t ia = a.id;
  const int64_t iH = x.dim(1), iW = x.dim(2);
  return t.emit(std::move(out), [ia, C, H, W, iH, iW](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    Tensor& ga = tp.grad_buf(ia);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
          const float gv = 0.25f * g.at(c, y, xx);
          ga[(c * iH + 2 * y) * iW + 2 * xx] += gv;
          ga[(c * iH + 2 * y) * iW + 2 * xx + 1] += gv;
          ga[(c * iH + 2 * y + 1) * iW + 2 * xx] += gv;
          ga[(c * iH + 2 * y + 1) * iW + 2 * xx + 1] += gv;
        }
  });
}

// Per-channel scaling by a rank-1 vector: out[c,p] = x[c,p] * v[c].
inline Var mul_channel_vec(Var a, Var v) {
  detail::require_same_tape(a, v, "mul_channel_vec");
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  const Tensor& s = t.val(v);
  require(x.rank() == 3 && s.rank() == 1 && s.dim(0) == x.dim(0),
          "mul_channel_vec: vector length must equal channel count");
  const int64_t C = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < plane; ++p)
      out[c * plane + p] = x[c * plane + p] * s[c];
  const int32_t ia = a.id, iv = v.id;
  return t.emit(std::move(out), [ia, iv, C, plane](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    const Tensor& x = tp.val_of(ia);
    const Tensor& s = tp.val_of(iv);
    Tensor& ga = tp.grad_buf(ia);
    Tensor& gv = tp.grad_buf(iv);
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t p = 0; p < plane; ++p) {
        ga[c * plane + p] += g[c * plane + p] * s[c];
        acc += static_cast<double>(g[c * plane + p]) * x[c * plane + p];
      }
      gv[c] += static_cast<float>(acc);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// Cross-correlation, zero padding. Input (C,H,W), weight (O,C,K,K), optional
// bias (O). Output (O, (H+2p-K)/s+1, (W+2p-K)/s+1).
inline Var conv2d(Var input, Var weight, Var bias, int stride, int padding) {
  detail::require_same_tape(input, weight, "conv2d");
  Tape& t = *input.tape;
  const Tensor& x = t.val(input);
  const Tensor& w = t.val(weight);
  require(x.rank() == 3, "conv2d: input must be rank 3, got " + x.shape_str());
  require(w.rank() == 4, "conv2d: weight must be rank 4, got " + w.shape_str());
  require(w.dim(2) == w.dim(3) && w.dim(2) % 2 == 1,
          "conv2d: kernel must be square with odd size, got " + w.shape_str());
  if (x.dim(0) != w.dim(1))
    throw std::invalid_argument(
        "conv2d: input channels do not match weight: input " + x.shape_str() +
        " vs weight " + w.shape_str());
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int64_t O = w.dim(0), K = w.dim(2);
  const int64_t OH = (H + 2 * padding - K) / stride + 1;
  const int64_t OW = (W + 2 * padding - K) / stride + 1;
  require(H + 2 * padding >= K && W + 2 * padding >= K,
          "conv2d: kernel larger than padded input");
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor& b = t.val(bias);
    require(b.rank() == 1 && b.dim(0) == O,
            "conv2d: bias must have one value per output channel");
  }

  Tensor out({O, OH, OW});
  std::vector<double> acc(static_cast<size_t>(OW));
  for (int64_t o = 0; o < O; ++o) {
    const double b0 =
        has_bias ? static_cast<double>(t.val(bias)[o]) : 0.0;
    for (int64_t oy = 0; oy < OH; ++oy) {
      std::fill(acc.begin(), acc.end(), b0);
      for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < K; ++ky) {
          const int64_t iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) continue;
          for (int64_t kx = 0; kx < K; ++kx) {
            const double wv = w.at4(o, c, ky, kx);
            if (wv == 0.0) continue;
            const int64_t x0 = -padding + kx;
            for (int64_t ox = 0; ox < OW; ++ox) {
              const int64_t ix = ox * stride + x0;
              if (ix < 0 || ix >= W) continue;
              acc[static_cast<size_t>(ox)] += wv * x.at(c, iy, ix);
            }
          }
        }
      for (int64_t ox = 0; ox < OW; ++ox)
        out.at(o, oy, ox) = static_cast<float>(acc[static_cast<size_t>(ox)]);
    }
  }

  const int32_t ix_id = input.id, iw_id = weight.id;
  const int32_t ib_id = has_bias ? bias.id : -1;
  return t.emit(
      std::move(out),
      [ix_id, iw_id, ib_id, stride, padding](Tape& tp, int32_t self) {
        const Tensor& g = tp.grad_buf(self);
        const Tensor& x = tp.val_of(ix_id);
        const Tensor& w = tp.val_of(iw_id);
        const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
        const int64_t O = w.dim(0), K = w.dim(2);
        const int64_t OH = g.dim(1), OW = g.dim(2);
        std::vector<double> gx(static_cast<size_t>(x.numel()), 0.0);
        std::vector<double> gw(static_cast<size_t>(w.numel()), 0.0);
        std::vector<double> gb(static_cast<size_t>(O), 0.0);
        for (int64_t o = 0; o < O; ++o)
          for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
              const double gv = g.at(o, oy, ox);
              if (gv == 0.0) continue;
              gb[static_cast<size_t>(o)] += gv;
              for (int64_t c = 0; c < C; ++c)
                for (int64_t ky = 0; ky < K; ++ky) {
                  const int64_t iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int64_t kx = 0; kx < K; ++kx) {
                    const int64_t ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= W) continue;
                    const size_t xi =
                        static_cast<size_t>((c * H + iy) * W + ix);
                    const size_t wi = static_cast<size_t>(
                        ((o * C + c) * K + ky) * K + kx);
                    gx[xi] += gv * w.data()[wi];
                    gw[wi] += gv * x.data()[xi];
                  }
                }
            }
        tp.accumulate(ix_id, gx);
        tp.accumulate(iw_id, gw);
        if (ib_id >= 0) tp.accumulate(ib_id, gb);
      });
}

inline Var conv2d(Var input, Var weight, int stride, int padding) {
  return conv2d(input, weight, Var{}, stride, padding);
}

// ---------------------------------------------------------------------------
// Matrix inverse (for invertible 1x1 convolutions)
// ---------------------------------------------------------------------------

namespace detail {

// LU with partial pivoting in double precision. Returns determinant; fills
// inv if non-null. Throws nothing; caller inspects the determinant.
inline double lu_invert(const Tensor& m, Tensor* inv) {
  const int64_t n = m.dim(0);
  std::vector<double> a(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n * n; ++i) a[static_cast<size_t>(i)] = m[i];
  std::vector<int64_t> piv(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) piv[static_cast<size_t>(i)] = i;
  double det = 1.0;
  for (int64_t k = 0; k < n; ++k) {
    int64_t p = k;
    double best = std::abs(a[static_cast<size_t>(k * n + k)]);
    for (int64_t i = k + 1; i < n; ++i) {
      const double v = std::abs(a[static_cast<size_t>(i * n + k)]);
      if (v > best) {
        best = v;
        p = i;
      }
    }
    if (best == 0.0) return 0.0;
    if (p != k) {
      for (int64_t j = 0; j < n; ++j)
        std::swap(a[static_cast<size_t>(k * n + j)],
                  a[static_cast<size_t>(p * n + j)]);
      std::swap(piv[static_cast<size_t>(k)], piv[static_cast<size_t>(p)]);
      det = -det;
    }
    det *= a[static_cast<size_t>(k * n + k)];
    const double inv_pivot = 1.0 / a[static_cast<size_t>(k * n + k)];
    for (int64_t i = k + 1; i < n; ++i) {
      const double f = a[static_cast<size_t>(i * n + k)] * inv_pivot;
      a[static_cast<size_t>(i * n + k)] = f;
      for (int64_t j = k + 1; j < n; ++j)
        a[static_cast<size_t>(i * n + j)] -= f * a[static_cast<size_t>(k * n + j)];
    }
  }
  if (inv != nullptr) {
    *inv = Tensor({n, n});
    std::vector<double> col(static_cast<size_t>(n));
    for (int64_t e = 0; e < n; ++e) {
      // Solve A x = unit(e) reusing the LU factors; rows were permuted.
      for (int64_t i = 0; i < n; ++i)
        col[static_cast<size_t>(i)] = (piv[static_cast<size_t>(i)] == e) ? 1.0 : 0.0;
      for (int64_t i = 1; i < n; ++i) {
        double s = col[static_cast<size_t>(i)];
        for (int64_t j = 0; j < i; ++j)
          s -= a[static_cast<size_t>(i * n + j)] * col[static_cast<size_t>(j)];
        col[static_cast<size_t>(i)] = s;
      }
      for (int64_t i = n - 1; i >= 0; --i) {
        double s = col[static_cast<size_t>(i)];
        for (int64_t j = i + 1; j < n; ++j)
          s -= a[static_cast<size_t>(i * n + j)] * col[static_cast<size_t>(j)];
        col[static_cast<size_t>(i)] = s / a[static_cast<size_t>(i * n + i)];
      }
      for (int64_t i = 0; i < n; ++i)
        (*inv)[i * n + e] = static_cast<float>(col[static_cast<size_t>(i)]);
    }
  }
  return det;
}

}  // namespace detail

inline double matrix_det(const Tensor& m) {
  require(m.rank() == 2 && m.dim(0) == m.dim(1),
          "matrix_det: square matrix expected, got " + m.shape_str());
  return detail::lu_invert(m, nullptr);
}

inline Tensor matrix_inverse_plain(const Tensor& m) {
  require(m.rank() == 2 && m.dim(0) == m.dim(1),
          "matrix_inverse: square matrix expected, got " + m.shape_str());
  Tensor inv;
  const double det = detail::lu_invert(m, &inv);
  if (std::abs(det) <= 1e-8)
    throw std::domain_error("matrix_inverse: singular matrix, |det| = " +
                            std::to_string(std::abs(det)));
  return inv;
}

// Differentiable matrix inverse; d(inv)/dW pulled as -inv^T * g * inv^T.
inline Var matrix_inverse(Var a) {
  Tape& t = detail::tape_of(a);
  Tensor inv = matrix_inverse_plain(t.val(a));
  const int32_t ia = a.id;
  return t.emit(std::move(inv), [ia](Tape& tp, int32_t self) {
    const Tensor& g = tp.grad_buf(self);
    const Tensor& inv = tp.val_of(self);
    const int64_t n = inv.dim(0);
    // tmp = inv^T * g
    std::vector<double> tmp(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < n; ++k) {
        const double v = inv[k * n + i];
        if (v == 0.0) continue;
        for (int64_t j = 0; j < n; ++j)
          tmp[static_cast<size_t>(i * n + j)] += v * g[k * n + j];
      }
    std::vector<double> ga(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < n; ++k) {
        const double v = tmp[static_cast<size_t>(i * n + k)];
        if (v == 0.0) continue;
        for (int64_t j = 0; j < n; ++j)
          ga[static_cast<size_t>(i * n + j)] -= v * inv[j * n + k];
      }
    tp.accumulate(ia, ga);
  });
}

}  // namespace invcodec

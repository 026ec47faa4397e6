#include "advlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace advlab {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Index checked_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor: zero-size or negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

namespace {

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

[[noreturn]] void bad_shape(const char* op, const Shape& a, const char* expected) {
  throw ShapeError(std::string(op) + ": expected " + expected + ", got shape " + to_string(a));
}

template <typename S>
Tape<S>& same_tape(const char* op, const Var<S>& a, const Var<S>& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

Index normalize_axis(Index axis, Index rank) { return axis < 0 ? axis + rank : axis; }

Index prod(const Shape& s, std::size_t from, std::size_t to) {
  Index n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

template <typename S>
void im2col(const S* img, Index C, Index H, Index W, Index kh, Index kw, Index stride, Index pad, Index Ho, Index Wo,
            S* col) {
  const Index P = Ho * Wo;
  for (Index c = 0; c < C; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        S* row = col + ((c * kh + i) * kw + j) * P;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + i;
          S* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, S(0));
            continue;
          }
          const S* src = img + (c * H + iy) * W;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + j;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* col, Index C, Index H, Index W, Index kh, Index kw, Index stride, Index pad, Index Ho,
                Index Wo, S* img) {
  const Index P = Ho * Wo;
  for (Index c = 0; c < C; ++c) {
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const S* row = col + ((c * kh + i) * kw + j) * P;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) continue;
          S* dst = img + (c * H + iy) * W;
          const S* src = row + oy * Wo;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + j;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = same_tape("add", a, b);
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor<S> out(a.shape(), a.value().array() + b.value().array());
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.adjoint(ia).array() += g.array();
    if (t.requires_grad(ib)) t.adjoint(ib).array() += g.array();
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = same_tape("sub", a, b);
  if (a.shape() != b.shape()) mismatch("sub", a.shape(), b.shape());
  Tensor<S> out(a.shape(), a.value().array() - b.value().array());
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.adjoint(ia).array() += g.array();
    if (t.requires_grad(ib)) t.adjoint(ib).array() -= g.array();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = same_tape("mul", a, b);
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  Tensor<S> out(a.shape(), a.value().array() * b.value().array());
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.adjoint(ia).array() += g.array() * t.value(ib).array();
    if (t.requires_grad(ib)) t.adjoint(ib).array() += g.array() * t.value(ia).array();
  });
}

template <typename S>
Var<S> scale(const Var<S>& x, S factor) {
  Tensor<S> out(x.shape(), x.value().array() * factor);
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, factor](Tape<S>& t, const Tensor<S>& g) {
    t.adjoint(ix).array() += g.array() * factor;
  });
}

template <typename S>
Var<S> add_rowwise(const Var<S>& x, const Var<S>& bias) {
  Tape<S>& tape = same_tape("add_rowwise", x, bias);
  const Shape& xs = x.shape();
  if (bias.value().rank() != 1 || xs.empty() || xs.back() != bias.shape()[0]) mismatch("add_rowwise", xs, bias.shape());
  const Index cols = xs.back();
  const Index rows = x.value().size() / cols;
  Tensor<S> out = x.value();
  out.matrix(rows).rowwise() += bias.value().array().matrix().transpose();
  const auto ix = x.id(), ib = bias.id();
  return tape.record(std::move(out), {ix, ib}, [ix, ib, rows](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ix)) t.adjoint(ix).array() += g.array();
    if (t.requires_grad(ib)) t.adjoint(ib).array() += g.matrix(rows).colwise().sum().transpose().array();
  });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = same_tape("matmul", a, b);
  const Shape &as = a.shape(), &bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) mismatch("matmul", as, bs);
  const Index M = as[0], N = bs[1];
  Tensor<S> out(Shape{M, N});
  out.matrix(M).noalias() = a.value().matrix(M) * b.value().matrix(bs[0]);
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, M](Tape<S>& t, const Tensor<S>& g) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    const Index K = bv.dim(0);
    if (t.requires_grad(ia)) t.adjoint(ia).matrix(M).noalias() += g.matrix(M) * bv.matrix(K).transpose();
    if (t.requires_grad(ib)) t.adjoint(ib).matrix(K).noalias() += av.matrix(M).transpose() * g.matrix(M);
  });
}

template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b) {
  Tape<S>& tape = same_tape("bmm", a, b);
  const Shape &as = a.shape(), &bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) mismatch("bmm", as, bs);
  const Index B = as[0], M = as[1], K = as[2], N = bs[2];
  Tensor<S> out(Shape{B, M, N});
  using Map = Eigen::Map<RowMatrix<S>>;
  using CMap = Eigen::Map<const RowMatrix<S>>;
  for (Index i = 0; i < B; ++i) {
    Map(out.data() + i * M * N, M, N).noalias() =
        CMap(a.value().data() + i * M * K, M, K) * CMap(b.value().data() + i * K * N, K, N);
  }
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, B, M, K, N](Tape<S>& t, const Tensor<S>& g) {
    const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
    for (Index i = 0; i < B; ++i) {
      CMap gi(g.data() + i * M * N, M, N);
      if (ga) {
        Map(t.adjoint(ia).data() + i * M * K, M, K).noalias() +=
            gi * CMap(t.value(ib).data() + i * K * N, K, N).transpose();
      }
      if (gb) {
        Map(t.adjoint(ib).data() + i * K * N, K, N).noalias() +=
            CMap(t.value(ia).data() + i * M * K, M, K).transpose() * gi;
      }
    }
  });
}

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias, Conv2dParams params) {
  Tape<S>& tape = same_tape("conv2d", x, weight);
  const Shape &xs = x.shape(), &ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1]) mismatch("conv2d", xs, ws);
  if (params.stride < 1 || params.padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  const Index B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const Index O = ws[0], kh = ws[2], kw = ws[3];
  const Index stride = params.stride, pad = params.padding;
  const Index Ho = (H + 2 * pad - kh) / stride + 1;
  const Index Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw) mismatch("conv2d", xs, ws);
  if (bias) {
    same_tape("conv2d", x, *bias);
    if (bias->shape() != Shape{O}) mismatch("conv2d(bias)", bias->shape(), Shape{O});
  }
  const Index CKK = C * kh * kw, P = Ho * Wo;

  Tensor<S> out(Shape{B, O, Ho, Wo});
  RowMatrix<S> col(CKK, P);
  const auto wmat = weight.value().matrix(O);
  for (Index b = 0; b < B; ++b) {
    im2col(x.value().data() + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    Eigen::Map<RowMatrix<S>> ob(out.data() + b * O * P, O, P);
    ob.noalias() = wmat * col;
    if (bias) ob.colwise() += bias->value().array().matrix();
  }

  std::vector<std::size_t> inputs{x.id(), weight.id()};
  if (bias) inputs.push_back(bias->id());
  const auto ix = x.id(), iw = weight.id();
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  return tape.record(std::move(out), std::move(inputs),
                     [=](Tape<S>& t, const Tensor<S>& g) {
                       const bool gx = t.requires_grad(ix), gw = t.requires_grad(iw);
                       const bool gb = ib && t.requires_grad(*ib);
                       const auto& xv = t.value(ix);
                       const auto wm = t.value(iw).matrix(O);
                       RowMatrix<S> colb(CKK, P);
                       for (Index b = 0; b < B; ++b) {
                         Eigen::Map<const RowMatrix<S>> gbm(g.data() + b * O * P, O, P);
                         if (gw) {
                           im2col(xv.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, colb.data());
                           t.adjoint(iw).matrix(O).noalias() += gbm * colb.transpose();
                         }
                         if (gx) {
                           colb.noalias() = wm.transpose() * gbm;
                           col2im_add(colb.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                      t.adjoint(ix).data() + b * C * H * W);
                         }
                         if (gb) t.adjoint(*ib).array() += gbm.rowwise().sum().array();
                       }
                     });
}

template <typename S>
Var<S> maxpool2d(const Var<S>& x, Pool2dParams p) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) bad_shape("maxpool2d", xs, "[B,C,H,W]");
  if (p.kernel_h < 1 || p.kernel_w < 1 || p.stride_h < 1 || p.stride_w < 1 || p.kernel_h > xs[2] ||
      p.kernel_w > xs[3]) {
    throw ShapeError("maxpool2d: window " + to_string({p.kernel_h, p.kernel_w}) + " invalid for input " +
                     to_string(xs));
  }
  const Index B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const Index Ho = (H - p.kernel_h) / p.stride_h + 1;
  const Index Wo = (W - p.kernel_w) / p.stride_w + 1;
  Tensor<S> out(Shape{B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<Index>>(std::size_t(out.size()));
  const S* in = x.value().data();
  Index o = 0;
  for (Index plane = 0; plane < B * C; ++plane) {
    const Index base = plane * H * W;
    for (Index oy = 0; oy < Ho; ++oy) {
      for (Index ox = 0; ox < Wo; ++ox, ++o) {
        Index best = base + (oy * p.stride_h) * W + ox * p.stride_w;
        for (Index i = 0; i < p.kernel_h; ++i) {
          for (Index j = 0; j < p.kernel_w; ++j) {
            const Index idx = base + (oy * p.stride_h + i) * W + ox * p.stride_w + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        (*argmax)[std::size_t(o)] = best;
        out[o] = in[best];
      }
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, argmax](Tape<S>& t, const Tensor<S>& g) {
    S* dx = t.adjoint(ix).data();
    for (std::size_t k = 0; k < argmax->size(); ++k) dx[(*argmax)[k]] += g[Index(k)];
  });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
  Tensor<S> out(x.shape(), x.value().array().max(S(0)));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<S>& t, const Tensor<S>& g) {
    t.adjoint(ix).array() += (t.value(ix).array() > S(0)).select(g.array(), S(0));
  });
}

template <typename S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  Tensor<S> out(x.shape(), x.value().array().max(lo).min(hi));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, lo, hi](Tape<S>& t, const Tensor<S>& g) {
    const auto& v = t.value(ix).array();
    t.adjoint(ix).array() += (v >= lo && v <= hi).select(g.array(), S(0));
  });
}

template <typename S>
Var<S> concat(const Var<S>& a, const Var<S>& b, Index axis) {
  Tape<S>& tape = same_tape("concat", a, b);
  const Shape &as = a.shape(), &bs = b.shape();
  const Index rank = Index(as.size());
  axis = normalize_axis(axis, rank);
  if (Index(bs.size()) != rank || axis < 0 || axis >= rank) mismatch("concat", as, bs);
  for (Index i = 0; i < rank; ++i) {
    if (i != axis && as[std::size_t(i)] != bs[std::size_t(i)]) mismatch("concat", as, bs);
  }
  Shape os = as;
  os[std::size_t(axis)] += bs[std::size_t(axis)];
  const Index outer = prod(as, 0, std::size_t(axis));
  const Index na = prod(as, std::size_t(axis), as.size());
  const Index nb = prod(bs, std::size_t(axis), bs.size());
  Tensor<S> out(os);
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(a.value().data() + o * na, na, out.data() + o * (na + nb));
    std::copy_n(b.value().data() + o * nb, nb, out.data() + o * (na + nb) + na);
  }
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, outer, na, nb](Tape<S>& t, const Tensor<S>& g) {
    using CMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
    using Map = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
    const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
    for (Index o = 0; o < outer; ++o) {
      if (ga) Map(t.adjoint(ia).data() + o * na, na) += CMap(g.data() + o * (na + nb), na);
      if (gb) Map(t.adjoint(ib).data() + o * nb, nb) += CMap(g.data() + o * (na + nb) + na, nb);
    }
  });
}

template <typename S>
Var<S> expand(const Var<S>& x, Index axis, Index count) {
  const Shape& xs = x.shape();
  axis = normalize_axis(axis, Index(xs.size()) + 1);
  if (axis < 0 || axis > Index(xs.size()) || count < 1) {
    throw ShapeError("expand: invalid axis/count for shape " + to_string(xs));
  }
  Shape os = xs;
  os.insert(os.begin() + axis, count);
  const Index outer = prod(xs, 0, std::size_t(axis));
  const Index inner = prod(xs, std::size_t(axis), xs.size());
  Tensor<S> out(os);
  for (Index o = 0; o < outer; ++o) {
    for (Index c = 0; c < count; ++c) {
      std::copy_n(x.value().data() + o * inner, inner, out.data() + (o * count + c) * inner);
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, outer, inner, count](Tape<S>& t, const Tensor<S>& g) {
    S* dx = t.adjoint(ix).data();
    for (Index o = 0; o < outer; ++o) {
      for (Index c = 0; c < count; ++c) {
        const S* src = g.data() + (o * count + c) * inner;
        for (Index i = 0; i < inner; ++i) dx[o * inner + i] += src[i];
      }
    }
  });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
  Tensor<S> out(Shape{}, {x.value().array().sum()});
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<S>& t, const Tensor<S>& g) {
    t.adjoint(ix).array() += g[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  const S n = S(x.value().size());
  Tensor<S> out(Shape{}, {x.value().array().sum() / n});
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, n](Tape<S>& t, const Tensor<S>& g) {
    t.adjoint(ix).array() += g[0] / n;
  });
}

namespace {

template <typename S>
RowMatrix<S> softmax_rows(const Eigen::Map<const RowMatrix<S>>& x) {
  RowMatrix<S> y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

}  // namespace

template <typename S>
Var<S> softmax(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.empty()) bad_shape("softmax", xs, "at least one axis");
  const Index rows = x.value().size() / xs.back();
  Tensor<S> out(xs);
  out.matrix(rows) = softmax_rows<S>(x.value().matrix(rows));
  const auto ix = x.id();
  const auto id_out_holder = std::make_shared<Tensor<S>>(out);
  return x.tape().record(std::move(out), {ix}, [ix, rows, id_out_holder](Tape<S>& t, const Tensor<S>& g) {
    const auto y = id_out_holder->matrix(rows);
    const auto gm = g.matrix(rows);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = (gm.array() * y.array()).rowwise().sum().matrix();
    t.adjoint(ix).matrix(rows).array() += y.array() * (gm.colwise() - dot).array();
  });
}

template <typename S>
Var<S> log_softmax(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.empty()) bad_shape("log_softmax", xs, "at least one axis");
  const Index rows = x.value().size() / xs.back();
  const auto xm = x.value().matrix(rows);
  const Eigen::Matrix<S, Eigen::Dynamic, 1> mx = xm.rowwise().maxCoeff();
  RowMatrix<S> shifted = xm.colwise() - mx;
  const Eigen::Matrix<S, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Tensor<S> out(xs);
  out.matrix(rows) = shifted.colwise() - lse;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, rows](Tape<S>& t, const Tensor<S>& g) {
    const RowMatrix<S> p = softmax_rows<S>(t.value(ix).matrix(rows));
    const auto gm = g.matrix(rows);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> gs = gm.rowwise().sum();
    t.adjoint(ix).matrix(rows) += gm - (p.array().colwise() * gs.array()).matrix();
  });
}

template <typename S>
Var<S> l2_norm(const Var<S>& x) {
  const S n = std::sqrt(x.value().array().square().sum());
  Tensor<S> out(Shape{}, {n});
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, n](Tape<S>& t, const Tensor<S>& g) {
    if (n > S(0)) t.adjoint(ix).array() += t.value(ix).array() * (g[0] / n);
  });
}

template <typename S>
Var<S> l2_norm_rows(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.empty()) bad_shape("l2_norm_rows", xs, "at least one axis");
  const Index rows = x.value().size() / xs.back();
  Shape os(xs.begin(), xs.end() - 1);
  Tensor<S> out(os);
  out.array() = x.value().matrix(rows).rowwise().norm().array();
  const auto ix = x.id();
  const auto norms = std::make_shared<typename Tensor<S>::Storage>(out.array());
  return x.tape().record(std::move(out), {ix}, [ix, rows, norms](Tape<S>& t, const Tensor<S>& g) {
    const auto xm = t.value(ix).matrix(rows);
    auto dx = t.adjoint(ix).matrix(rows);
    for (Index r = 0; r < rows; ++r) {
      const S n = (*norms)[r];
      if (n > S(0)) dx.row(r) += xm.row(r) * (g[r] / n);
    }
  });
}

template <typename S>
Var<S> take_along_rows(const Var<S>& x, std::span<const Index> columns) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 || Index(columns.size()) != xs[0]) {
    throw ShapeError("take_along_rows: expected [R,C] with R indices, got shape " + to_string(xs) + " and " +
                     std::to_string(columns.size()) + " indices");
  }
  const Index R = xs[0], C = xs[1];
  std::vector<Index> cols(columns.begin(), columns.end());
  Tensor<S> out(Shape{R});
  for (Index r = 0; r < R; ++r) {
    if (cols[std::size_t(r)] < 0 || cols[std::size_t(r)] >= C) {
      throw std::out_of_range("take_along_rows: column index " + std::to_string(cols[std::size_t(r)]) +
                              " outside [0," + std::to_string(C) + ")");
    }
    out[r] = x.value()[r * C + cols[std::size_t(r)]];
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, C, cols = std::move(cols)](Tape<S>& t, const Tensor<S>& g) {
    S* dx = t.adjoint(ix).data();
    for (std::size_t r = 0; r < cols.size(); ++r) dx[Index(r) * C + cols[r]] += g[Index(r)];
  });
}

template <typename S>
Var<S> cw_margin(const Var<S>& logits, std::span<const Index> labels) {
  const Shape& xs = logits.shape();
  if (xs.size() != 2 || Index(labels.size()) != xs[0]) {
    throw ShapeError("cw_margin: expected [R,K] logits with R labels, got shape " + to_string(xs));
  }
  const Index R = xs[0], K = xs[1];
  if (K < 2) throw ShapeError("cw_margin: need at least 2 classes, got shape " + to_string(xs));
  std::vector<std::pair<Index, Index>> routes(static_cast<std::size_t>(R));
  Tensor<S> out(Shape{R});
  const S* z = logits.value().data();
  for (Index r = 0; r < R; ++r) {
    const Index y = labels[std::size_t(r)];
    if (y < 0 || y >= K) {
      throw std::out_of_range("cw_margin: label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
    }
    Index best = -1;
    for (Index j = 0; j < K; ++j) {
      if (j != y && (best < 0 || z[r * K + j] > z[r * K + best])) best = j;
    }
    routes[std::size_t(r)] = {best, y};
    out[r] = z[r * K + best] - z[r * K + y];
  }
  const auto ix = logits.id();
  return logits.tape().record(std::move(out), {ix},
                              [ix, K, routes = std::move(routes)](Tape<S>& t, const Tensor<S>& g) {
                                S* dx = t.adjoint(ix).data();
                                for (std::size_t r = 0; r < routes.size(); ++r) {
                                  dx[Index(r) * K + routes[r].first] += g[Index(r)];
                                  dx[Index(r) * K + routes[r].second] -= g[Index(r)];
                                }
                              });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tensor<S> out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<S>& t, const Tensor<S>& g) {
    t.adjoint(ix).array() += g.array();
  });
}

template <typename S>
Var<S> channels_last(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) bad_shape("channels_last", xs, "[B,C,H,W]");
  const Index B = xs[0], C = xs[1], P = xs[2] * xs[3];
  Tensor<S> out(Shape{B, P, C});
  using CMap = Eigen::Map<const RowMatrix<S>>;
  using Map = Eigen::Map<RowMatrix<S>>;
  for (Index b = 0; b < B; ++b) {
    Map(out.data() + b * P * C, P, C) = CMap(x.value().data() + b * C * P, C, P).transpose();
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, B, C, P](Tape<S>& t, const Tensor<S>& g) {
    for (Index b = 0; b < B; ++b) {
      Map(t.adjoint(ix).data() + b * C * P, C, P) += CMap(g.data() + b * P * C, P, C).transpose();
    }
  });
}

template <typename S>
Var<S> spatial_mean(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) bad_shape("spatial_mean", xs, "[B,C,H,W]");
  const Index B = xs[0], C = xs[1], P = xs[2] * xs[3];
  Tensor<S> out(Shape{B, C});
  out.array() = x.value().matrix(B * C).rowwise().mean().array();
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, B, C, P](Tape<S>& t, const Tensor<S>& g) {
    t.adjoint(ix).matrix(B * C).colwise() += (g.array() / S(P)).matrix();
  });
}

template <typename S>
Var<S> detach(const Var<S>& x) {
  return x.tape().constant(x.value());
}

#define ADVLAB_INSTANTIATE_OPS(S)                                                                        \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> scale(const Var<S>&, S);                                                               \
  template Var<S> add_rowwise(const Var<S>&, const Var<S>&);                                             \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> bmm(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&, Conv2dParams);      \
  template Var<S> maxpool2d(const Var<S>&, Pool2dParams);                                                \
  template Var<S> relu(const Var<S>&);                                                                   \
  template Var<S> clamp(const Var<S>&, S, S);                                                            \
  template Var<S> concat(const Var<S>&, const Var<S>&, Index);                                           \
  template Var<S> expand(const Var<S>&, Index, Index);                                                   \
  template Var<S> sum(const Var<S>&);                                                                    \
  template Var<S> mean(const Var<S>&);                                                                   \
  template Var<S> softmax(const Var<S>&);                                                                \
  template Var<S> log_softmax(const Var<S>&);                                                            \
  template Var<S> l2_norm(const Var<S>&);                                                                \
  template Var<S> l2_norm_rows(const Var<S>&);                                                           \
  template Var<S> take_along_rows(const Var<S>&, std::span<const Index>);                                \
  template Var<S> cw_margin(const Var<S>&, std::span<const Index>);                                      \
  template Var<S> reshape(const Var<S>&, Shape);                                                         \
  template Var<S> channels_last(const Var<S>&);                                                          \
  template Var<S> spatial_mean(const Var<S>&);                                                           \
  template Var<S> detach(const Var<S>&);

ADVLAB_INSTANTIATE_OPS(float)
ADVLAB_INSTANTIATE_OPS(double)

}  // namespace advlab

#pragma once

#include <optional>
#include <span>

#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

// Differentiable primitives. Every op validates operand shapes, throwing
// ShapeError with the op name and offending shapes, and records itself on the
// operands' tape. Operands must share one tape.
//
// Subgradient conventions: relu'(0) = 0, clamp passes the gradient on the
// closed interval [lo, hi], maxpool routes to the first maximal element in
// row-major window order, l2 norms have zero gradient at the origin, and the
// cw margin routes to the first maximal competing logit.

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& x, S factor);

/// x[..., C] + bias[C] broadcast over all leading axes.
template <typename S> Var<S> add_rowwise(const Var<S>& x, const Var<S>& bias);

/// [M, K] x [K, N] -> [M, N].
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// Batched [B, M, K] x [B, K, N] -> [B, M, N].
template <typename S> Var<S> bmm(const Var<S>& a, const Var<S>& b);

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
};

/// x [B, C, H, W], weight [O, C, kh, kw], optional bias [O] -> [B, O, Ho, Wo].
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias, Conv2dParams params);

struct Pool2dParams {
  Index kernel_h = 2;
  Index kernel_w = 2;
  Index stride_h = 2;
  Index stride_w = 2;
};

/// Max pooling without padding over x [B, C, H, W].
template <typename S> Var<S> maxpool2d(const Var<S>& x, Pool2dParams params);

template <typename S> Var<S> relu(const Var<S>& x);
template <typename S> Var<S> clamp(const Var<S>& x, S lo, S hi);

/// Concatenates along `axis`; all other dimensions must agree.
template <typename S> Var<S> concat(const Var<S>& a, const Var<S>& b, Index axis);
/// Inserts a new axis of length `count` at `axis`, repeating x along it.
template <typename S> Var<S> expand(const Var<S>& x, Index axis, Index count);

/// Full reductions to a scalar (shape []).
template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);

/// Row-wise over the last axis.
template <typename S> Var<S> softmax(const Var<S>& x);
template <typename S> Var<S> log_softmax(const Var<S>& x);

/// Euclidean norm of the flattened tensor, shape [].
template <typename S> Var<S> l2_norm(const Var<S>& x);
/// Euclidean norm over the last axis.
template <typename S> Var<S> l2_norm_rows(const Var<S>& x);

/// x [R, C] -> [R] with out[r] = x[r, columns[r]].
template <typename S> Var<S> take_along_rows(const Var<S>& x, std::span<const Index> columns);
/// logits [R, K] -> [R], max over j != y of z_j minus z_y.
template <typename S> Var<S> cw_margin(const Var<S>& logits, std::span<const Index> labels);

template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
/// [B, C, H, W] -> [B, H*W, C].
template <typename S> Var<S> channels_last(const Var<S>& x);
/// [B, C, H, W] -> [B, C], mean over spatial positions.
template <typename S> Var<S> spatial_mean(const Var<S>& x);
/// Copy of the value with no gradient connection.
template <typename S> Var<S> detach(const Var<S>& x);

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator*(S factor, const Var<S>& x) { return scale(x, factor); }

/// Dense layer: x [R, K] W [K, N] + b [N].
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias) {
  Var<S> y = matmul(x, weight);
  return bias ? add_rowwise(y, *bias) : y;
}

}  // namespace advlab

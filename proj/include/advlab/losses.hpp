#pragma once

#include <span>

#include "advlab/ops.hpp"

namespace advlab {

// Per-example losses over a batch. Each takes row-major batches and returns
// one value per row, shape [R]; reduce with `mean` for the batch objective.

/// -log softmax(z)[y], computed through log_softmax.
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, std::span<const Index> labels);

/// max_{j != y} z_j - z_y (kappa = 0).
template <typename S>
Var<S> cw_margin_loss(const Var<S>& logits, std::span<const Index> labels);

/// ||G(x) - G(x')||_2 per row, not squared. Gradient flows into both operands.
template <typename S>
Var<S> feature_reg(const Var<S>& descriptor_clean, const Var<S>& descriptor_adv);

/// Same distance applied to logits.
template <typename S>
Var<S> logit_pairing_reg(const Var<S>& logits_clean, const Var<S>& logits_adv);

}  // namespace advlab

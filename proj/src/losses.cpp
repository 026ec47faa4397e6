#include "advlab/losses.hpp"

#include <stdexcept>

namespace advlab {

namespace {

template <typename S>
void check_labels(const char* op, const Var<S>& logits, std::span<const Index> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || Index(labels.size()) != s[0]) {
    throw ShapeError(std::string(op) + ": expected [R,K] logits with R labels, got " + to_string(s) + " and " +
                     std::to_string(labels.size()) + " labels");
  }
  for (Index y : labels) {
    if (y < 0 || y >= s[1]) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0," +
                              std::to_string(s[1]) + ")");
    }
  }
}

template <typename S>
Var<S> pair_distance(const char* op, const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape() || a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected two equal [R,D] batches, got " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  return l2_norm_rows(sub(a, b));
}

}  // namespace

template <typename S>
Var<S> cross_entropy(const Var<S>& logits, std::span<const Index> labels) {
  check_labels("cross_entropy", logits, labels);
  return scale(take_along_rows(log_softmax(logits), labels), S(-1));
}

template <typename S>
Var<S> cw_margin_loss(const Var<S>& logits, std::span<const Index> labels) {
  check_labels("cw_margin_loss", logits, labels);
  return cw_margin(logits, labels);
}

template <typename S>
Var<S> feature_reg(const Var<S>& descriptor_clean, const Var<S>& descriptor_adv) {
  return pair_distance("feature_reg", descriptor_clean, descriptor_adv);
}

template <typename S>
Var<S> logit_pairing_reg(const Var<S>& logits_clean, const Var<S>& logits_adv) {
  return pair_distance("logit_pairing_reg", logits_clean, logits_adv);
}

#define ADVLAB_INSTANTIATE_LOSSES(S)                                              \
  template Var<S> cross_entropy(const Var<S>&, std::span<const Index>);          \
  template Var<S> cw_margin_loss(const Var<S>&, std::span<const Index>);         \
  template Var<S> feature_reg(const Var<S>&, const Var<S>&);                      \
  template Var<S> logit_pairing_reg(const Var<S>&, const Var<S>&);

ADVLAB_INSTANTIATE_LOSSES(float)
ADVLAB_INSTANTIATE_LOSSES(double)

}  // namespace advlab

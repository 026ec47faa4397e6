#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "advlab/network.hpp"

namespace advlab {

enum class AttackLoss { CrossEntropy, CwMargin };

std::string to_string(AttackLoss kind);
AttackLoss attack_loss_from_string(const std::string& name);

/// l-infinity attack settings in pixel units of the [0, 1] image domain.
struct AttackConfig {
  double epsilon = 0.3;
  double alpha = 0.01;
  int steps = 40;
  bool random_start = true;
  AttackLoss loss = AttackLoss::CrossEntropy;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless 0 <= epsilon <= 1, alpha > 0, steps >= 1.
  void validate() const;

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

/// Evaluation adversary with the default step size alpha = 2.5 * epsilon / steps.
AttackConfig eval_attack(double epsilon, int steps, AttackLoss loss = AttackLoss::CrossEntropy,
                         std::uint64_t seed = 0);

/// splitmix64 of (master, index): seed for batch or worker `index`.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

template <typename S>
struct AdversarialBatch {
  Tensor<S> clean;
  Tensor<S> adversarial;
  std::vector<Index> labels;
  std::vector<S> loss_before;
  std::vector<S> loss_after;
};

/// Gradient of sum_i loss(net(x_i), y_i) with respect to the batch x. When
/// `losses` is given it receives the per-example loss values.
template <typename S>
Tensor<S> input_gradient(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels, AttackLoss loss,
                         std::vector<S>* losses = nullptr);

/// Per-example loss values without a backward pass.
template <typename S>
std::vector<S> example_losses(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels,
                              AttackLoss loss);

/// x' = clamp(x + epsilon * sgn(grad CE), 0, 1).
template <typename S>
AdversarialBatch<S> fgsm(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels, double epsilon);

/// Signed-gradient ascent on cfg.loss; every step is projected onto the
/// epsilon-ball around x and then onto [0, 1]. With random_start the iterate
/// starts at clamp(x + U[-epsilon, epsilon], 0, 1) drawn from cfg.seed.
template <typename S>
AdversarialBatch<S> pgd(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels,
                        const AttackConfig& cfg);

/// Argmax class per row of the batch.
template <typename S>
std::vector<Index> predict(const Network<S>& net, const Tensor<S>& x);

template <typename S>
Index count_correct(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels);

/// Adversaries computed against `source`, scored on `target`. Returns accuracy.
template <typename S>
double transfer_attack(const Network<S>& source, const Network<S>& target, const Tensor<S>& x,
                       std::span<const Index> labels, const AttackConfig& cfg);

}  // namespace advlab

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/dataset.hpp"
#include "advlab/network.hpp"

namespace advlab {

enum class Regularizer { None, FeatureL2, LogitPairing };

std::string to_string(Regularizer kind);
Regularizer regularizer_from_string(const std::string& name);

enum class LrSchedule { Constant, StepDecay };

std::string to_string(LrSchedule kind);
LrSchedule lr_schedule_from_string(const std::string& name);

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  LrSchedule schedule = LrSchedule::Constant;

  /// Learning rate for 0-based `epoch` of `epochs`. StepDecay multiplies by
  /// 0.1 from epoch >= epochs/2 and by 0.01 from epoch >= 3*epochs/4.
  double rate_at(int epoch, int epochs) const;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Architecture selection for `train`. Input shape and class count come from
/// the dataset.
struct ModelConfig {
  std::string arch = "mnist-cnn";  // mnist-cnn | mini-resnet
  bool attention = false;
  std::vector<Index> widths = {8, 8, 16, 32};
  Index attention_hidden = 64;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  double lambda = 0.1;
  /// Steps over which the regularizer weight ramps linearly up to `lambda`;
  /// 0 applies the full weight from the first step.
  Index lambda_warmup_steps = 0;
  /// Steps over which the training adversary's epsilon and alpha ramp
  /// linearly up to their configured values; 0 disables the ramp.
  Index attack_warmup_steps = 0;
  Regularizer regularizer = Regularizer::FeatureL2;
  /// When false the clean branch is detached and the regularizer only pulls
  /// the adversarial descriptor toward it.
  bool both_branches = true;
  ModelConfig model;
  AttackConfig attack;
  OptimizerConfig optimizer;
  int epochs = 5;
  Index batch_size = 50;
  std::uint64_t seed = 0;
  /// Steps between intermediate checkpoints; 0 disables them.
  Index checkpoint_every = 0;

  /// Throws ConfigError on negative lambda, non-positive batch size,
  /// negative epochs, an invalid attack or an unknown architecture.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Network spec for `model` on images of `input` shape with `classes` labels.
NetworkSpec network_spec(const ModelConfig& model, const Shape& input, Index classes);

/// Named desk-scale variants: mnist-at, mnist-at-reg (MNIST CNN, PGD eps 0.3)
/// and mini-at, mini-at-reg, mini-at-att, mini-at-att-reg (mini residual
/// network, PGD eps 8/255). Throws ConfigError for unknown names.
TrainConfig preset_config(const std::string& name);
const std::vector<std::string>& preset_names();

/// Regularizer weight in effect at 0-based `step`.
double lambda_at(const TrainConfig& cfg, Index step);

/// Training adversary in effect at 0-based `step` (seed not yet derived).
AttackConfig attack_at(const TrainConfig& cfg, Index step);

/// Loss terms on a tape. `ce` and `reg` are batch means, total = ce + lambda * reg.
template <typename S>
struct LossTerms {
  Var<S> total;
  Var<S> ce;
  Var<S> reg;
  std::vector<Var<S>> params;
  Tensor<S> adversarial;
  Tensor<S> adversarial_logits;
};

/// Generates x' with cfg.attack against `net`, forwards x and x' through
/// shared parameters bound on `tape` and combines adversarial cross-entropy
/// with the configured regularizer.
template <typename S>
LossTerms<S> total_loss(const Network<S>& net, Tape<S>& tape, const Tensor<S>& x, std::span<const Index> labels,
                        const TrainConfig& cfg);

/// Heavy-ball SGD: v = momentum * v + g, theta -= lr * v.
template <typename S>
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(std::vector<Parameter<S>>& params, const std::vector<const Tensor<S>*>& grads, double lr);
  const std::vector<Tensor<S>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  std::vector<Tensor<S>> velocity_;
};

struct StepMetrics {
  Index step = 0;
  int epoch = 0;
  Index batch = 0;
  double lr = 0.0;
  double lambda = 0.0;
  double epsilon = 0.0;
  double ce = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double linf_max = 0.0;
  double linf_mean = 0.0;
  double adv_accuracy = 0.0;
  std::uint64_t perm_seed = 0;
};

struct TrainState {
  Network<float> network;
  std::vector<TensorF> velocity;
  int epoch = 0;
  Index step = 0;
  std::vector<StepMetrics> metrics;
};

struct TrainOutputs {
  std::filesystem::path metrics_path;    // JSON lines, one record per step; empty to skip
  std::filesystem::path checkpoint_dir;  // intermediate checkpoints; empty to skip
  std::string config_digest;
  std::function<void(const StepMetrics&)> on_step;
};

/// Seed streams: the network is initialised from cfg.seed, the epoch
/// permutation from derive_seed(cfg.seed, epoch + 1) and the adversary of
/// step t from derive_seed(cfg.attack.seed ^ cfg.seed, t).
std::uint64_t permutation_seed(const TrainConfig& cfg, int epoch);
std::uint64_t adversary_seed(const TrainConfig& cfg, Index step);

/// Adversarial training over `data`. Throws TrainingError when a batch
/// produces a non-finite loss.
TrainState train(const Dataset& data, const TrainConfig& cfg, const TrainOutputs& outputs = {});

/// Same loop starting from an existing network (epochs counted from zero).
TrainState train(Network<float> init, const Dataset& data, const TrainConfig& cfg, const TrainOutputs& outputs = {});

}  // namespace advlab

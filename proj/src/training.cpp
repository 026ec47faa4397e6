#include "advlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "advlab/checkpoint.hpp"
#include "advlab/losses.hpp"
#include "advlab/serialization.hpp"

namespace advlab {

std::string to_string(Regularizer kind) {
  switch (kind) {
    case Regularizer::None: return "none";
    case Regularizer::FeatureL2: return "feature-l2";
    case Regularizer::LogitPairing: return "logit-pairing";
  }
  return "unknown";
}

Regularizer regularizer_from_string(const std::string& name) {
  if (name == "none") return Regularizer::None;
  if (name == "feature-l2") return Regularizer::FeatureL2;
  if (name == "logit-pairing" || name == "alp") return Regularizer::LogitPairing;
  throw ConfigError("unknown regularizer '" + name + "' (expected none, feature-l2 or logit-pairing)");
}

std::string to_string(LrSchedule kind) { return kind == LrSchedule::Constant ? "constant" : "step-decay"; }

LrSchedule lr_schedule_from_string(const std::string& name) {
  if (name == "constant") return LrSchedule::Constant;
  if (name == "step-decay") return LrSchedule::StepDecay;
  throw ConfigError("unknown schedule '" + name + "' (expected constant or step-decay)");
}

double OptimizerConfig::rate_at(int epoch, int epochs) const {
  if (schedule == LrSchedule::Constant) return learning_rate;
  if (epoch >= 0.75 * epochs) return learning_rate * 0.01;
  if (epoch >= 0.5 * epochs) return learning_rate * 0.1;
  return learning_rate;
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be non-negative, got " + std::to_string(lambda));
  if (lambda_warmup_steps < 0) throw ConfigError("train: lambda_warmup_steps must be non-negative");
  if (attack_warmup_steps < 0) throw ConfigError("train: attack_warmup_steps must be non-negative");
  if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
  if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be non-negative");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0) throw ConfigError("train: momentum must lie in [0,1)");
  if (model.arch != "mnist-cnn" && model.arch != "mini-resnet") {
    throw ConfigError("train: unknown model.arch '" + model.arch + "' (expected mnist-cnn or mini-resnet)");
  }
  attack.validate();
}

NetworkSpec network_spec(const ModelConfig& model, const Shape& input, Index classes) {
  NetworkSpec s;
  if (model.arch == "mnist-cnn") {
    s = mnist_cnn_spec(model.attention);
    s.input = input;
    s.classes = classes;
  } else if (model.arch == "mini-resnet") {
    s = mini_resnet_spec(model.attention, model.widths, input, classes);
  } else {
    throw ConfigError("unknown model.arch '" + model.arch + "'");
  }
  if (s.attention) s.attention->hidden = model.attention_hidden;
  return s;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"mnist-at", "mnist-at-reg", "mini-at",
                                              "mini-at-reg", "mini-at-att", "mini-at-att-reg"};
  return names;
}

TrainConfig preset_config(const std::string& name) {
  TrainConfig c;
  if (name.rfind("mnist-", 0) == 0) {
    c.model.arch = "mnist-cnn";
    c.attack = AttackConfig{0.3, 0.03, 10, true, AttackLoss::CrossEntropy, 0};
    c.optimizer = OptimizerConfig{0.01, 0.9, LrSchedule::Constant};
    c.attack_warmup_steps = 300;
    c.epochs = 5;
  } else if (name.rfind("mini-", 0) == 0) {
    c.model.arch = "mini-resnet";
    c.attack = AttackConfig{8.0 / 255.0, 2.0 / 255.0, 5, true, AttackLoss::CrossEntropy, 0};
    c.optimizer = OptimizerConfig{0.1, 0.9, LrSchedule::StepDecay};
    c.epochs = 10;
  }
  if (name == "mnist-at" || name == "mini-at" || name == "mini-at-att") {
    c.regularizer = Regularizer::None;
    c.lambda = 0.0;
  } else if (name == "mnist-at-reg" || name == "mini-at-att-reg") {
    c.lambda = 0.1;
  } else if (name == "mini-at-reg") {
    c.lambda = 1.0;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  c.model.attention = name.find("-att") != std::string::npos;
  return c;
}

template <typename S>
LossTerms<S> total_loss(const Network<S>& net, Tape<S>& tape, const Tensor<S>& x, std::span<const Index> labels,
                        const TrainConfig& cfg) {
  LossTerms<S> t;
  t.adversarial = pgd(net, x, labels, cfg.attack).adversarial;
  t.params = net.bind(tape, true);
  const auto clean = net.forward(tape, tape.constant(x), t.params);
  const auto adv = net.forward(tape, tape.constant(t.adversarial), t.params);
  t.adversarial_logits = adv.logits.value();
  t.ce = mean(cross_entropy(adv.logits, labels));
  if (cfg.regularizer == Regularizer::None) {
    t.reg = tape.constant(Tensor<S>(Shape{}));
  } else {
    const bool features = cfg.regularizer == Regularizer::FeatureL2;
    Var<S> a = features ? clean.descriptor : clean.logits;
    const Var<S> b = features ? adv.descriptor : adv.logits;
    if (!cfg.both_branches) a = detach(a);
    t.reg = mean(features ? feature_reg(a, b) : logit_pairing_reg(a, b));
  }
  t.total = add(t.ce, scale(t.reg, S(cfg.lambda)));
  return t;
}

template <typename S>
void SgdMomentum<S>::step(std::vector<Parameter<S>>& params, const std::vector<const Tensor<S>*>& grads, double lr) {
  if (grads.size() != params.size()) throw ShapeError("sgd: gradient count does not match parameter count");
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.push_back(Tensor<S>::zeros(p.value.shape()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = velocity_[k].array();
    v = S(momentum_) * v + grads[k]->array();
    params[k].value.array() -= S(lr) * v;
  }
}

double lambda_at(const TrainConfig& cfg, Index step) {
  if (step >= cfg.lambda_warmup_steps) return cfg.lambda;
  return cfg.lambda * double(step + 1) / double(cfg.lambda_warmup_steps);
}

AttackConfig attack_at(const TrainConfig& cfg, Index step) {
  AttackConfig a = cfg.attack;
  if (step < cfg.attack_warmup_steps) {
    const double f = double(step + 1) / double(cfg.attack_warmup_steps);
    a.epsilon *= f;
    a.alpha *= f;
  }
  return a;
}

std::uint64_t permutation_seed(const TrainConfig& cfg, int epoch) { return derive_seed(cfg.seed, std::uint64_t(epoch) + 1); }

std::uint64_t adversary_seed(const TrainConfig& cfg, Index step) {
  return derive_seed(cfg.attack.seed ^ cfg.seed, std::uint64_t(step));
}

TrainState train(const Dataset& data, const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("train: dataset is empty");
  auto net = Network<float>::build(network_spec(cfg.model, data.image_shape(), data.classes), cfg.seed);
  return train(std::move(net), data, cfg, outputs);
}

TrainState train(Network<float> init, const Dataset& data, const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("train: dataset is empty");
  if (init.spec().input != data.image_shape()) {
    throw ShapeError("train: network input " + to_string(init.spec().input) + " does not match images " +
                     to_string(data.image_shape()));
  }
  TrainState state;
  state.network = std::move(init);
  SgdMomentum<float> opt(cfg.optimizer.momentum);

  std::ofstream metrics;
  if (!outputs.metrics_path.empty()) {
    if (outputs.metrics_path.has_parent_path()) std::filesystem::create_directories(outputs.metrics_path.parent_path());
    metrics.open(outputs.metrics_path, std::ios::trunc);
    if (!metrics) throw FormatError(outputs.metrics_path.string() + ": cannot open for writing");
  }

  const Index n = data.size();
  const Index per = checked_numel(data.image_shape());
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t perm_seed = permutation_seed(cfg, epoch);
    std::iota(order.begin(), order.end(), Index(0));
    std::mt19937_64 rng(perm_seed);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.optimizer.rate_at(epoch, cfg.epochs);

    for (Index start = 0, batch = 0; start < n; start += cfg.batch_size, ++batch) {
      const Index count = std::min(cfg.batch_size, n - start);
      std::span<const Index> idx(order.data() + start, std::size_t(count));
      const TensorF x = data.batch<float>(idx);
      const auto y = data.batch_labels(idx);

      TrainConfig step_cfg = cfg;
      step_cfg.attack = attack_at(cfg, state.step);
      step_cfg.attack.seed = adversary_seed(cfg, state.step);
      step_cfg.lambda = lambda_at(cfg, state.step);
      Tape<float> tape;
      const auto terms = total_loss(state.network, tape, x, y, step_cfg);

      StepMetrics m;
      m.step = state.step;
      m.epoch = epoch;
      m.batch = batch;
      m.lr = lr;
      m.lambda = step_cfg.lambda;
      m.epsilon = step_cfg.attack.epsilon;
      m.perm_seed = perm_seed;
      m.ce = terms.ce.value()[0];
      m.reg = terms.reg.value()[0];
      m.total = terms.total.value()[0];
      if (!std::isfinite(m.ce) || !std::isfinite(m.reg) || !std::isfinite(m.total)) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "non-finite loss at epoch %d batch %ld (step %ld): ce=%g reg=%g total=%g", epoch,
                      long(batch), long(state.step), m.ce, m.reg, m.total);
        throw TrainingError(buf);
      }

      tape.backward(terms.total);
      std::vector<const TensorF*> grads;
      for (const auto& p : terms.params) grads.push_back(p.grad());
      opt.step(state.network.parameters(), grads, lr);

      double linf_sum = 0.0;
      Index correct = 0;
      const Index K = terms.adversarial_logits.dim(1);
      for (Index b = 0; b < count; ++b) {
        float worst = 0.0f;
        for (Index i = b * per; i < (b + 1) * per; ++i) worst = std::max(worst, std::abs(terms.adversarial[i] - x[i]));
        m.linf_max = std::max(m.linf_max, double(worst));
        linf_sum += worst;
        const float* z = terms.adversarial_logits.data() + b * K;
        correct += Index(std::max_element(z, z + K) - z) == y[std::size_t(b)];
      }
      m.linf_mean = linf_sum / double(count);
      m.adv_accuracy = double(correct) / double(count);

      state.metrics.push_back(m);
      if (metrics) metrics << to_json(m).dump() << '\n' << std::flush;
      if (outputs.on_step) outputs.on_step(m);
      ++state.step;
      if (cfg.checkpoint_every > 0 && !outputs.checkpoint_dir.empty() && state.step % cfg.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof name, "step-%08ld.ckpt", long(state.step));
        save_checkpoint(outputs.checkpoint_dir / name,
                        Checkpoint<float>::of(state.network, std::uint64_t(state.step), outputs.config_digest));
      }
    }
    state.epoch = epoch + 1;
  }
  state.velocity = opt.velocity();
  return state;
}

template class SgdMomentum<float>;
template class SgdMomentum<double>;

template LossTerms<float> total_loss(const Network<float>&, Tape<float>&, const TensorF&, std::span<const Index>,
                                     const TrainConfig&);
template LossTerms<double> total_loss(const Network<double>&, Tape<double>&, const TensorD&, std::span<const Index>,
                                      const TrainConfig&);

}  // namespace advlab

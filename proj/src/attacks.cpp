#include "advlab/attacks.hpp"

#include <algorithm>
#include <random>

#include "advlab/losses.hpp"

namespace advlab {

std::string to_string(AttackLoss kind) { return kind == AttackLoss::CrossEntropy ? "cross-entropy" : "cw-margin"; }

AttackLoss attack_loss_from_string(const std::string& name) {
  if (name == "cross-entropy" || name == "ce" || name == "pgd") return AttackLoss::CrossEntropy;
  if (name == "cw-margin" || name == "cw") return AttackLoss::CwMargin;
  throw ConfigError("unknown attack loss '" + name + "' (expected cross-entropy or cw-margin)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("attack: epsilon must lie in [0,1], got " + std::to_string(epsilon));
  if (!(alpha > 0.0)) throw ConfigError("attack: alpha must be positive, got " + std::to_string(alpha));
  if (steps < 1) throw ConfigError("attack: steps must be >= 1, got " + std::to_string(steps));
}

AttackConfig eval_attack(double epsilon, int steps, AttackLoss loss, std::uint64_t seed) {
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.steps = steps;
  cfg.alpha = epsilon > 0.0 ? 2.5 * epsilon / steps : 1.0;
  cfg.loss = loss;
  cfg.seed = seed;
  return cfg;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

template <typename S>
Var<S> loss_rows(const Var<S>& logits, std::span<const Index> labels, AttackLoss kind) {
  return kind == AttackLoss::CrossEntropy ? cross_entropy(logits, labels) : cw_margin_loss(logits, labels);
}

template <typename S>
std::vector<S> to_vector(const Tensor<S>& t) {
  return std::vector<S>(t.data(), t.data() + t.size());
}

template <typename S>
S sign(S v) {
  return S((v > S(0)) - (v < S(0)));
}

template <typename S>
void check_batch(const char* op, const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels) {
  if (x.rank() != 4 || Index(labels.size()) != x.dim(0)) {
    throw ShapeError(std::string(op) + ": expected [B,C,H,W] batch with B labels, got " + to_string(x.shape()) +
                     " and " + std::to_string(labels.size()) + " labels");
  }
  if (Shape(x.shape().begin() + 1, x.shape().end()) != net.spec().input) {
    throw ShapeError(std::string(op) + ": input " + to_string(x.shape()) + " does not match network input " +
                     to_string(net.spec().input));
  }
}

}  // namespace

template <typename S>
Tensor<S> input_gradient(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels, AttackLoss loss,
                         std::vector<S>* losses) {
  Tape<S> tape;
  auto xv = tape.leaf(x, true);
  auto out = net.forward(tape, xv, false);
  auto rows = loss_rows(out.logits, labels, loss);
  if (losses) *losses = to_vector(rows.value());
  tape.backward(sum(rows));
  return *xv.grad();
}

template <typename S>
std::vector<S> example_losses(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels,
                              AttackLoss loss) {
  Tape<S> tape;
  auto out = net.forward(tape, tape.constant(x));
  return to_vector(loss_rows(out.logits, labels, loss).value());
}

template <typename S>
AdversarialBatch<S> fgsm(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels, double epsilon) {
  if (epsilon < 0.0) throw ConfigError("fgsm: epsilon must be non-negative, got " + std::to_string(epsilon));
  check_batch("fgsm", net, x, labels);
  AdversarialBatch<S> out;
  out.clean = x;
  out.labels.assign(labels.begin(), labels.end());
  Tensor<S> g = input_gradient(net, x, labels, AttackLoss::CrossEntropy, &out.loss_before);
  const S eps = S(epsilon);
  out.adversarial = x;
  for (Index i = 0; i < x.size(); ++i) {
    out.adversarial[i] = std::clamp(S(x[i] + eps * sign(g[i])), S(0), S(1));
  }
  out.loss_after = example_losses(net, out.adversarial, labels, AttackLoss::CrossEntropy);
  return out;
}

template <typename S>
AdversarialBatch<S> pgd(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels,
                        const AttackConfig& cfg) {
  cfg.validate();
  check_batch("pgd", net, x, labels);
  AdversarialBatch<S> out;
  out.clean = x;
  out.labels.assign(labels.begin(), labels.end());

  const S eps = S(cfg.epsilon), alpha = S(cfg.alpha);
  Tensor<S> lo = x, hi = x;
  for (Index i = 0; i < x.size(); ++i) {
    lo[i] = std::max(S(x[i] - eps), S(0));
    hi[i] = std::min(S(x[i] + eps), S(1));
  }
  Tensor<S> xa = x;
  if (cfg.random_start) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> noise(-cfg.epsilon, cfg.epsilon);
    for (Index i = 0; i < x.size(); ++i) xa[i] = std::clamp(S(x[i] + S(noise(rng))), lo[i], hi[i]);
  }
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<S> losses;
    Tensor<S> g = input_gradient(net, xa, labels, cfg.loss, &losses);
    if (step == 0) out.loss_before = std::move(losses);
    for (Index i = 0; i < x.size(); ++i) {
      const S stepped = xa[i] + alpha * sign(g[i]);
      xa[i] = std::clamp(std::clamp(stepped, S(x[i] - eps), S(x[i] + eps)), S(0), S(1));
    }
  }
  out.adversarial = std::move(xa);
  out.loss_after = example_losses(net, out.adversarial, labels, cfg.loss);
  return out;
}

template <typename S>
std::vector<Index> predict(const Network<S>& net, const Tensor<S>& x) {
  const Tensor<S> z = net.logits(x);
  const Index B = z.dim(0), K = z.dim(1);
  std::vector<Index> out(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const S* row = z.data() + b * K;
    out[std::size_t(b)] = Index(std::max_element(row, row + K) - row);
  }
  return out;
}

template <typename S>
Index count_correct(const Network<S>& net, const Tensor<S>& x, std::span<const Index> labels) {
  const auto pred = predict(net, x);
  if (pred.size() != labels.size()) throw ShapeError("count_correct: label count does not match batch");
  Index n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) n += pred[i] == labels[i];
  return n;
}

template <typename S>
double transfer_attack(const Network<S>& source, const Network<S>& target, const Tensor<S>& x,
                       std::span<const Index> labels, const AttackConfig& cfg) {
  if (source.spec().input != target.spec().input) {
    throw ShapeError("transfer_attack: source input " + to_string(source.spec().input) + " vs target input " +
                     to_string(target.spec().input));
  }
  const auto adv = pgd(source, x, labels, cfg);
  return double(count_correct(target, adv.adversarial, labels)) / double(labels.size());
}

#define ADVLAB_INSTANTIATE_ATTACKS(S)                                                                             \
  template Tensor<S> input_gradient(const Network<S>&, const Tensor<S>&, std::span<const Index>, AttackLoss,     \
                                    std::vector<S>*);                                                             \
  template std::vector<S> example_losses(const Network<S>&, const Tensor<S>&, std::span<const Index>, AttackLoss); \
  template AdversarialBatch<S> fgsm(const Network<S>&, const Tensor<S>&, std::span<const Index>, double);        \
  template AdversarialBatch<S> pgd(const Network<S>&, const Tensor<S>&, std::span<const Index>,                  \
                                   const AttackConfig&);                                                          \
  template std::vector<Index> predict(const Network<S>&, const Tensor<S>&);                                       \
  template Index count_correct(const Network<S>&, const Tensor<S>&, std::span<const Index>);                      \
  template double transfer_attack(const Network<S>&, const Network<S>&, const Tensor<S>&, std::span<const Index>, \
                                  const AttackConfig&);

ADVLAB_INSTANTIATE_ATTACKS(float)
ADVLAB_INSTANTIATE_ATTACKS(double)

}  // namespace advlab

#include "advlab/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace advlab {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Dense: return "dense";
    case LayerKind::ResidualBlock: return "residual-block";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::GlobalAvgPool: return "global-avg-pool";
    case LayerKind::GlobalMaxPool: return "global-max-pool";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::Relu, LayerKind::MaxPool, LayerKind::Dense, LayerKind::ResidualBlock,
                      LayerKind::Flatten, LayerKind::GlobalAvgPool, LayerKind::GlobalMaxPool}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

namespace {

struct ParamSlot {
  std::string name;
  Shape shape;
  Index fan_in;  // 0 for biases
};

/// Feature shape without the batch axis: {C, H, W} or {D}.
struct Trace {
  Shape shape;
  bool is_map() const { return shape.size() == 3; }
};

[[noreturn]] void layer_error(const std::string& where, const LayerSpec& l, const Shape& in, const std::string& why) {
  throw ShapeError("network: " + where + " layer '" + to_string(l.kind) + "' cannot take input " + to_string(in) +
                   ": " + why);
}

void add_conv(std::vector<ParamSlot>& slots, const std::string& prefix, Index out, Index in, Index k) {
  slots.push_back({prefix + ".weight", {out, in, k, k}, in * k * k});
  slots.push_back({prefix + ".bias", {out}, 0});
}

Index conv_out(Index n, Index k, Index s, Index p) { return (n + 2 * p - k) / s + 1; }

Trace trace_stage(const std::vector<LayerSpec>& layers, Trace t, const std::string& stage,
                  std::vector<ParamSlot>& slots) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string prefix = stage + "." + std::to_string(i);
    const std::string where = stage + "[" + std::to_string(i) + "]";
    switch (l.kind) {
      case LayerKind::Conv: {
        if (!t.is_map()) layer_error(where, l, t.shape, "needs a feature map");
        if (l.out < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0) layer_error(where, l, t.shape, "bad params");
        const Index H = t.shape[1] + 2 * l.padding, W = t.shape[2] + 2 * l.padding;
        if (H < l.kernel || W < l.kernel) layer_error(where, l, t.shape, "kernel larger than padded input");
        add_conv(slots, prefix, l.out, t.shape[0], l.kernel);
        t.shape = {l.out, conv_out(t.shape[1], l.kernel, l.stride, l.padding),
                   conv_out(t.shape[2], l.kernel, l.stride, l.padding)};
        break;
      }
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool: {
        if (!t.is_map()) layer_error(where, l, t.shape, "needs a feature map");
        if (l.kernel < 1 || l.stride < 1 || l.kernel > t.shape[1] || l.kernel > t.shape[2]) {
          layer_error(where, l, t.shape, "window does not fit");
        }
        t.shape = {t.shape[0], (t.shape[1] - l.kernel) / l.stride + 1, (t.shape[2] - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::Dense: {
        if (t.is_map()) layer_error(where, l, t.shape, "needs a vector; flatten or pool first");
        if (l.out < 1) layer_error(where, l, t.shape, "width must be positive");
        slots.push_back({prefix + ".weight", {t.shape[0], l.out}, t.shape[0]});
        slots.push_back({prefix + ".bias", {l.out}, 0});
        t.shape = {l.out};
        break;
      }
      case LayerKind::ResidualBlock: {
        if (!t.is_map()) layer_error(where, l, t.shape, "needs a feature map");
        if (l.out < 1 || l.stride < 1) layer_error(where, l, t.shape, "bad params");
        const Index in = t.shape[0];
        const Index H = conv_out(t.shape[1], 3, l.stride, 1), W = conv_out(t.shape[2], 3, l.stride, 1);
        add_conv(slots, prefix + ".conv1", l.out, in, 3);
        add_conv(slots, prefix + ".conv2", l.out, l.out, 3);
        if (in != l.out || l.stride != 1) add_conv(slots, prefix + ".proj", l.out, in, 1);
        t.shape = {l.out, H, W};
        break;
      }
      case LayerKind::Flatten:
        t.shape = {checked_numel(t.shape)};
        break;
      case LayerKind::GlobalAvgPool:
      case LayerKind::GlobalMaxPool:
        if (!t.is_map()) layer_error(where, l, t.shape, "needs a feature map");
        t.shape = {t.shape[0]};
        break;
    }
  }
  return t;
}

struct Layout {
  std::vector<ParamSlot> slots;
  Trace local;
  Trace global;
};

Layout layout_of(const NetworkSpec& spec) {
  if (spec.input.size() != 3) throw ShapeError("network: input must be [C,H,W], got " + to_string(spec.input));
  checked_numel(spec.input);
  if (spec.classes < 2) throw ShapeError("network: need at least 2 classes");
  Layout out;
  out.local = trace_stage(spec.trunk, Trace{spec.input}, "trunk", out.slots);
  out.global = trace_stage(spec.global_head, out.local, "head", out.slots);
  if (out.global.is_map()) throw ShapeError("network: global head must end in a vector, got " + to_string(out.global.shape));
  Index descriptor = out.global.shape[0];
  if (spec.attention) {
    if (!out.local.is_map()) {
      throw ShapeError("network: attention needs a local feature map, trunk ends in " + to_string(out.local.shape));
    }
    const Index D = out.local.shape[0];
    const Index in = D + out.global.shape[0];
    if (spec.attention->kind == AttentionKind::Mlp) {
      if (spec.attention->hidden < 1) throw ShapeError("network: attention hidden width must be positive");
      out.slots.push_back({"attention.hidden.weight", {in, spec.attention->hidden}, in});
      out.slots.push_back({"attention.hidden.bias", {spec.attention->hidden}, 0});
      out.slots.push_back({"attention.out.weight", {spec.attention->hidden, 1}, spec.attention->hidden});
    } else {
      out.slots.push_back({"attention.out.weight", {in, 1}, in});
    }
    out.slots.push_back({"attention.out.bias", {1}, 0});
    descriptor = D;
  }
  out.slots.push_back({"classifier.weight", {descriptor, spec.classes}, descriptor});
  out.slots.push_back({"classifier.bias", {spec.classes}, 0});
  return out;
}

template <typename S>
struct Cursor {
  const std::vector<Var<S>>& params;
  std::size_t next = 0;
  const Var<S>& take() { return params.at(next++); }
};

template <typename S>
Var<S> run_stage(const std::vector<LayerSpec>& layers, Var<S> x, Cursor<S>& cur) {
  for (const LayerSpec& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv: {
        const auto& w = cur.take();
        const auto& b = cur.take();
        x = conv2d(x, w, std::optional(b), Conv2dParams{l.stride, l.padding});
        break;
      }
      case LayerKind::Relu:
        x = relu(x);
        break;
      case LayerKind::MaxPool:
        x = maxpool2d(x, Pool2dParams{l.kernel, l.kernel, l.stride, l.stride});
        break;
      case LayerKind::Dense: {
        const auto& w = cur.take();
        const auto& b = cur.take();
        x = linear(x, w, std::optional(b));
        break;
      }
      case LayerKind::ResidualBlock: {
        const Index in = x.shape()[1];
        const auto& w1 = cur.take();
        const auto& b1 = cur.take();
        const auto& w2 = cur.take();
        const auto& b2 = cur.take();
        Var<S> h = relu(conv2d(x, w1, std::optional(b1), Conv2dParams{l.stride, 1}));
        h = conv2d(h, w2, std::optional(b2), Conv2dParams{1, 1});
        Var<S> shortcut = x;
        if (in != l.out || l.stride != 1) {
          const auto& wp = cur.take();
          const auto& bp = cur.take();
          shortcut = conv2d(x, wp, std::optional(bp), Conv2dParams{l.stride, 0});
        }
        x = relu(add(h, shortcut));
        break;
      }
      case LayerKind::Flatten:
        x = reshape(x, Shape{x.shape()[0], x.value().size() / x.shape()[0]});
        break;
      case LayerKind::GlobalAvgPool:
        x = spatial_mean(x);
        break;
      case LayerKind::GlobalMaxPool: {
        const Shape s = x.shape();
        x = reshape(maxpool2d(x, Pool2dParams{s[2], s[3], s[2], s[3]}), Shape{s[0], s[1]});
        break;
      }
    }
  }
  return x;
}

}  // namespace

template <typename S>
Var<S> attention_scores(const Var<S>& local, const Var<S>& global, const EstimatorParams<S>& p) {
  const Shape& ls = local.shape();
  const Shape& gs = global.shape();
  if (ls.size() != 3 || gs.size() != 2 || ls[0] != gs[0]) {
    throw ShapeError("attention_scores: expected local [B,N,D] and global [B,Dg], got " + to_string(ls) + " and " +
                     to_string(gs));
  }
  const Index B = ls[0], N = ls[1], width = ls[2] + gs[1];
  const Var<S>& first = (p.kind == AttentionKind::Mlp) ? p.hidden_weight.value() : p.out_weight;
  if (first.shape().size() != 2 || first.shape()[0] != width) {
    throw ShapeError("attention_scores: estimator input width " + to_string(first.shape()) +
                     " does not match D + Dg = " + std::to_string(width));
  }
  Var<S> joint = reshape(concat(local, expand(global, 1, N), 2), Shape{B * N, width});
  if (p.kind == AttentionKind::Mlp) joint = relu(linear(joint, *p.hidden_weight, p.hidden_bias));
  return reshape(linear(joint, p.out_weight, std::optional(p.out_bias)), Shape{B, N});
}

template <typename S>
Var<S> linear_attention_scores(const Var<S>& local, const Var<S>& global, const Var<S>& weight, const Var<S>& bias) {
  EstimatorParams<S> p;
  p.kind = AttentionKind::Linear;
  p.out_weight = weight;
  p.out_bias = bias;
  return attention_scores(local, global, p);
}

template <typename S>
AttentionPool<S> attention_pool(const Var<S>& local, const Var<S>& scores) {
  const Shape& ls = local.shape();
  const Shape& ss = scores.shape();
  if (ls.size() != 3 || ss.size() != 2 || ls[0] != ss[0] || ls[1] != ss[1]) {
    throw ShapeError("attention_pool: shape mismatch " + to_string(ls) + " vs " + to_string(ss));
  }
  const Index B = ls[0], N = ls[1], D = ls[2];
  Var<S> w = softmax(scores);
  Var<S> h = reshape(bmm(reshape(w, Shape{B, 1, N}), local), Shape{B, D});
  return {w, h};
}

template <typename S>
Network<S> Network<S>::build(NetworkSpec spec, std::uint64_t seed) {
  const Layout layout = layout_of(spec);
  std::mt19937_64 rng(seed);
  std::vector<Parameter<S>> params;
  for (const auto& slot : layout.slots) {
    TensorD t(slot.shape);
    if (slot.fan_in > 0) {
      const double bound = 1.0 / std::sqrt(double(slot.fan_in));
      std::uniform_real_distribution<double> uniform(-bound, bound);
      for (Index i = 0; i < t.size(); ++i) t[i] = uniform(rng);
    }
    params.push_back({slot.name, t.cast<S>()});
  }
  Network net;
  net.spec_ = std::move(spec);
  net.params_ = std::move(params);
  return net;
}

template <typename S>
Network<S> Network<S>::from_parameters(NetworkSpec spec, std::vector<Parameter<S>> params) {
  const Layout layout = layout_of(spec);
  if (layout.slots.size() != params.size()) {
    throw ShapeError("network: expected " + std::to_string(layout.slots.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != layout.slots[i].name || params[i].value.shape() != layout.slots[i].shape) {
      throw ShapeError("network: parameter " + std::to_string(i) + " is '" + params[i].name + "' " +
                       to_string(params[i].value.shape()) + ", expected '" + layout.slots[i].name + "' " +
                       to_string(layout.slots[i].shape));
    }
  }
  Network net;
  net.spec_ = std::move(spec);
  net.params_ = std::move(params);
  return net;
}

template <typename S>
std::vector<Var<S>> Network<S>::bind(Tape<S>& tape, bool requires_grad) const {
  std::vector<Var<S>> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.leaf(p.value, requires_grad));
  return vars;
}

template <typename S>
ForwardOutputs<S> Network<S>::forward(Tape<S>& tape, const Var<S>& input, bool params_require_grad) const {
  return forward(tape, input, bind(tape, params_require_grad));
}

template <typename S>
ForwardOutputs<S> Network<S>::forward(Tape<S>&, const Var<S>& input, const std::vector<Var<S>>& params) const {
  const Shape& xs = input.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != spec_.input) {
    throw ShapeError("network: input shape " + to_string(xs) + " does not match [B]" + to_string(spec_.input));
  }
  if (params.size() != params_.size()) {
    throw ShapeError("network: forward got " + std::to_string(params.size()) + " bound parameters, expected " +
                     std::to_string(params_.size()));
  }
  ForwardOutputs<S> out;
  out.params = params;
  Cursor<S> cur{out.params};

  Var<S> local_map = run_stage(spec_.trunk, input, cur);
  Var<S> g = run_stage(spec_.global_head, local_map, cur);
  out.global_feature = g;
  if (local_map.shape().size() == 4) out.local_features = channels_last(local_map);

  if (spec_.attention) {
    EstimatorParams<S> est;
    est.kind = spec_.attention->kind;
    if (est.kind == AttentionKind::Mlp) {
      est.hidden_weight = cur.take();
      est.hidden_bias = cur.take();
    }
    est.out_weight = cur.take();
    est.out_bias = cur.take();
    Var<S> scores = attention_scores(*out.local_features, g, est);
    AttentionPool<S> pooled = attention_pool(*out.local_features, scores);
    out.compat_scores = scores;
    out.attention_weights = pooled.weights;
    out.descriptor = pooled.descriptor;
  } else {
    out.descriptor = g;
  }
  const auto& cw = cur.take();
  const auto& cb = cur.take();
  out.logits = linear(out.descriptor, cw, std::optional(cb));
  return out;
}

template <typename S>
Tensor<S> Network<S>::logits(const Tensor<S>& input) const {
  Tape<S> tape;
  return forward(tape, tape.constant(input)).logits.value();
}

template <typename S>
Index Network<S>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename S>
std::optional<std::pair<Index, Index>> Network<S>::local_grid() const {
  std::vector<ParamSlot> scratch;
  Trace t = trace_stage(spec_.trunk, Trace{spec_.input}, "trunk", scratch);
  if (!t.is_map()) return std::nullopt;
  return std::make_pair(t.shape[1], t.shape[2]);
}

NetworkSpec mnist_cnn_spec(bool with_attention) {
  NetworkSpec s;
  s.arch = "mnist-cnn";
  s.input = {1, 28, 28};
  s.trunk = {
      {LayerKind::Conv, 32, 5, 1, 2},    {LayerKind::Relu},
      {LayerKind::MaxPool, 0, 2, 2, 0},  {LayerKind::Conv, 64, 5, 1, 2},
      {LayerKind::Relu},                 {LayerKind::MaxPool, 0, 2, 2, 0},
  };
  s.global_head = {{LayerKind::Flatten}, {LayerKind::Dense, 1024}, {LayerKind::Relu}};
  if (with_attention) s.attention = AttentionSpec{};
  s.classes = 10;
  return s;
}

NetworkSpec mini_resnet_spec(bool with_attention, const std::vector<Index>& widths, Shape input, Index classes,
                             std::optional<Index> head_channels) {
  if (widths.size() != 4) throw ShapeError("mini_resnet: expected 4 widths, got " + std::to_string(widths.size()));
  for (Index w : widths) {
    if (w < 1) throw ShapeError("mini_resnet: widths must be positive");
  }
  if (input.size() != 3 || input[1] % 4 != 0 || input[2] % 4 != 0 || input[1] < 8 || input[2] < 8) {
    throw ShapeError("mini_resnet: input " + to_string(input) +
                     " is incompatible with two stride-2 stages and the 2x2 head pooling");
  }
  NetworkSpec s;
  s.arch = "mini-resnet";
  s.input = std::move(input);
  s.classes = classes;
  s.trunk = {
      {LayerKind::Conv, widths[0], 3, 1, 1},
      {LayerKind::Relu},
      {LayerKind::ResidualBlock, widths[1], 0, 1, 0},
      {LayerKind::ResidualBlock, widths[2], 0, 2, 0},
      {LayerKind::ResidualBlock, widths[3], 0, 2, 0},
  };
  if (with_attention) {
    s.global_head = {{LayerKind::MaxPool, 0, 2, 2, 0},
                     {LayerKind::Conv, head_channels.value_or(widths[3]), 3, 1, 1},
                     {LayerKind::Relu},
                     {LayerKind::GlobalMaxPool}};
    s.attention = AttentionSpec{};
  } else {
    s.global_head = {{LayerKind::GlobalAvgPool}};
  }
  return s;
}

template class Network<float>;
template class Network<double>;

#define ADVLAB_INSTANTIATE_ATTENTION(S)                                                              \
  template Var<S> attention_scores(const Var<S>&, const Var<S>&, const EstimatorParams<S>&);         \
  template Var<S> linear_attention_scores(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&); \
  template AttentionPool<S> attention_pool(const Var<S>&, const Var<S>&);

ADVLAB_INSTANTIATE_ATTENTION(float)
ADVLAB_INSTANTIATE_ATTENTION(double)

}  // namespace advlab

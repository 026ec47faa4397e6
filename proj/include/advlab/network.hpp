#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "advlab/ops.hpp"

namespace advlab {

enum class LayerKind { Conv, Relu, MaxPool, Dense, ResidualBlock, Flatten, GlobalAvgPool, GlobalMaxPool };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One layer of a sequential stage. `out` is the channel count (conv,
/// residual block) or width (dense); `kernel` doubles as the pooling window.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  Index out = 0;
  Index kernel = 0;
  Index stride = 1;
  Index padding = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class AttentionKind { Mlp, Linear };

struct AttentionSpec {
  AttentionKind kind = AttentionKind::Mlp;
  Index hidden = 64;

  friend bool operator==(const AttentionSpec&, const AttentionSpec&) = default;
};

/// Architecture description.
///
/// trunk          input image -> local feature map [D, H, W]
/// global_head    local feature map -> global feature g [Dg]
/// attention      optional; scores every location of the local map against g
/// classifier     dense layer on h (attention) or g (plain) -> K logits
struct NetworkSpec {
  std::string arch = "custom";
  Shape input;  // C, H, W
  std::vector<LayerSpec> trunk;
  std::vector<LayerSpec> global_head;
  std::optional<AttentionSpec> attention;
  Index classes = 10;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
};

/// Per-batch outputs of a forward pass.
template <typename S>
struct ForwardOutputs {
  std::optional<Var<S>> local_features;     // [B, N, D]
  Var<S> global_feature;                    // [B, Dg]
  std::optional<Var<S>> compat_scores;      // [B, N]
  std::optional<Var<S>> attention_weights;  // [B, N]
  Var<S> descriptor;                        // [B, D] with attention, else g
  Var<S> logits;                            // [B, K]
  std::vector<Var<S>> params;               // same order as Network::parameters()
};

/// Estimator parameters as tape variables. Mlp uses all four; Linear leaves
/// the hidden pair empty.
template <typename S>
struct EstimatorParams {
  AttentionKind kind = AttentionKind::Mlp;
  std::optional<Var<S>> hidden_weight;  // [D + Dg, hidden]
  std::optional<Var<S>> hidden_bias;    // [hidden]
  Var<S> out_weight;                    // [hidden or D + Dg, 1]
  Var<S> out_bias;                      // [1]
};

/// Compatibility scores c_n = f(concat(l_n, g)) for local [B, N, D] and
/// global [B, Dg], with estimator parameters shared across locations.
template <typename S>
Var<S> attention_scores(const Var<S>& local, const Var<S>& global, const EstimatorParams<S>& params);

/// Single linear functional of concat(l_n, g); the non-linear estimator's
/// comparison baseline.
template <typename S>
Var<S> linear_attention_scores(const Var<S>& local, const Var<S>& global, const Var<S>& weight, const Var<S>& bias);

template <typename S>
struct AttentionPool {
  Var<S> weights;     // [B, N]
  Var<S> descriptor;  // [B, D]
};

/// Softmax over locations and the weighted sum of local feature vectors.
template <typename S>
AttentionPool<S> attention_pool(const Var<S>& local, const Var<S>& scores);

template <typename S>
class Network {
 public:
  Network() = default;

  /// Validates the layer chain and draws weights uniformly from
  /// [-1/sqrt(fan_in), 1/sqrt(fan_in)] with zero biases from `seed`.
  static Network build(NetworkSpec spec, std::uint64_t seed);

  /// Wraps existing parameters; names and shapes must match what `spec` implies.
  static Network from_parameters(NetworkSpec spec, std::vector<Parameter<S>> params);

  /// Records the parameters as tape leaves, in `parameters()` order.
  std::vector<Var<S>> bind(Tape<S>& tape, bool requires_grad) const;

  ForwardOutputs<S> forward(Tape<S>& tape, const Var<S>& input, bool params_require_grad = false) const;

  /// Forward with parameters already bound on `tape`. Several forwards may
  /// share one binding so that their gradients accumulate on the same leaves.
  ForwardOutputs<S> forward(Tape<S>& tape, const Var<S>& input, const std::vector<Var<S>>& params) const;

  /// Inference-only logits for a batch [B, C, H, W].
  Tensor<S> logits(const Tensor<S>& input) const;

  const NetworkSpec& spec() const { return spec_; }
  bool has_attention() const { return spec_.attention.has_value(); }
  const std::vector<Parameter<S>>& parameters() const { return params_; }
  std::vector<Parameter<S>>& parameters() { return params_; }
  Index parameter_count() const;

  /// Spatial grid (H, W) of the local feature map, when the trunk ends in one.
  std::optional<std::pair<Index, Index>> local_grid() const;

  template <typename T>
  Network<T> cast() const {
    std::vector<Parameter<T>> out;
    for (const auto& p : params_) out.push_back({p.name, p.value.template cast<T>()});
    return Network<T>::from_parameters(spec_, std::move(out));
  }

 private:
  NetworkSpec spec_;
  std::vector<Parameter<S>> params_;
};

/// Two 5x5 same-padded conv stages (32, 64 filters, each followed by relu and
/// 2x2 max pooling), dense 1024 + relu as the global feature, 10-way
/// classifier. With attention the 7x7x64 map is the local feature and the
/// classifier reads the attention descriptor.
NetworkSpec mnist_cnn_spec(bool with_attention);

/// Residual network on `input` (default 3x32x32) with widths
/// [stem, stage1, stage2, stage3]; stages 2 and 3 halve the resolution.
/// Plain variant: global average pooling. Attention variant: g comes from
/// maxpool 2x2 -> conv 3x3 (`head_channels`, default widths[3]) -> relu ->
/// global max pool.
NetworkSpec mini_resnet_spec(bool with_attention, const std::vector<Index>& widths = {8, 8, 16, 32},
                             Shape input = {3, 32, 32}, Index classes = 10,
                             std::optional<Index> head_channels = std::nullopt);

template <typename S>
Network<S> build_mnist_cnn(bool with_attention, std::uint64_t seed) {
  return Network<S>::build(mnist_cnn_spec(with_attention), seed);
}

template <typename S>
Network<S> build_mini_resnet(bool with_attention, const std::vector<Index>& widths, std::uint64_t seed) {
  return Network<S>::build(mini_resnet_spec(with_attention, widths), seed);
}

}  // namespace advlab

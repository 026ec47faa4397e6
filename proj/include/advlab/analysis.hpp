#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/dataset.hpp"
#include "advlab/serialization.hpp"

namespace advlab {

/// One attack of an evaluation suite. Transfer entries craft the adversary
/// on the transfer source and score the evaluated network.
struct SuiteEntry {
  AttackConfig attack;
  bool transfer = false;

  friend bool operator==(const SuiteEntry&, const SuiteEntry&) = default;
};

struct EvalCell {
  SuiteEntry entry;
  double accuracy = 0.0;
};

struct EvalReport {
  Index examples = 0;
  double natural_accuracy = 0.0;
  std::vector<EvalCell> cells;
  Json provenance = Json::object();
};

/// "pgd-40" or "cw-30".
std::string cell_name(const SuiteEntry& entry);

Json to_json(const EvalReport& report);
Json to_json(const SuiteEntry& entry);
SuiteEntry suite_entry_from_json(const Json& j);

/// Accuracy on clean inputs and under every suite entry, in batches of
/// `batch_size`. Batch b of an entry attacks with derive_seed(seed, b).
/// Throws ConfigError when a transfer entry is present without a source.
template <typename S>
EvalReport evaluate(const Network<S>& net, const Dataset& data, const std::vector<SuiteEntry>& suite,
                    std::type_identity_t<const Network<S>*> transfer_source = nullptr, Index batch_size = 100);

/// Clips to mean +- clip_sigmas * std (population statistics over every
/// element), then rescales min -> 0 and max -> 1. A constant map becomes 0.5.
TensorD normalize_map(const TensorD& raw, std::optional<double> clip_sigmas);

struct GradientMap {
  TensorD raw;         // d CE / d x, shape of the image
  TensorD normalized;  // in [0, 1]
};

/// Gradient map of a single image [C, H, W] for label y.
template <typename S>
GradientMap gradient_map(const Network<S>& net, const Tensor<S>& image, Index label,
                         std::optional<double> clip_sigmas = 3.0);

/// Normalized gradient maps of a batch [B, C, H, W], each image normalized on its own.
template <typename S>
Tensor<S> gradient_maps(const Network<S>& net, const Tensor<S>& batch, std::span<const Index> labels,
                        std::optional<double> clip_sigmas = 3.0);

/// Fraction of examples whose subject gradient map `standard` classifies as
/// the true label.
template <typename S>
double gradmap_classification(const Network<S>& standard, const Network<S>& subject, const Dataset& data,
                              bool clipped, Index batch_size = 100);

enum class RankingMode { AverageThenRank, PerImage };

/// Locations ordered from most robust (rank 0) to least robust.
struct RobustnessRanking {
  Index grid_h = 0;
  Index grid_w = 0;
  std::vector<double> location_distance;  // by location, mean over the split
  std::vector<double> location_weight;    // by location, mean clean attention weight
  std::vector<Index> location_of_rank;    // AverageThenRank only
  std::vector<double> rank_distance;      // non-decreasing in AverageThenRank
  std::vector<double> rank_weight;
};

/// Per location n, ||l_n(x) - l_n(x')||_2 with x' from `attack`. Ties keep
/// location index order. PerImage ranks each image separately and averages
/// distances and weights per rank.
template <typename S>
RobustnessRanking robustness_ranking(const Network<S>& net, const Dataset& data, const AttackConfig& attack,
                                     RankingMode mode = RankingMode::AverageThenRank, Index batch_size = 100);

/// Spearman rank correlation, ties given average ranks.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Nearest-neighbour upsampling of a grid_h x grid_w weight vector to
/// height x width, rescaled to [0, 1] (constant input gives 0.5).
TensorD render_weights(const std::vector<double>& weights, Index grid_h, Index grid_w, Index height, Index width);

/// Attention map of one image [C, H, W] at input resolution.
template <typename S>
TensorD render_attention_map(const Network<S>& net, const Tensor<S>& image);

/// Binary PGM (P5, maxval 255). Accepts [H, W] or [C, H, W]; channels are averaged.
void write_pgm(const std::filesystem::path& path, const TensorD& image);

/// Columns rank, mean_distance, mean_weight.
void write_ranking_csv(const std::filesystem::path& path, const RobustnessRanking& ranking);

}  // namespace advlab

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab {

/// Labelled images, pixels in [0, 1]. Immutable once built.
struct Dataset {
  TensorF images;  // [N, C, H, W]
  std::vector<Index> labels;
  Index classes = 0;
  std::string split;
  std::string provenance;

  Index size() const { return Index(labels.size()); }
  Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  /// Throws FormatError unless pixels lie in [0, 1], labels in [0, classes)
  /// and the image and label counts agree.
  void validate() const;

  /// Rows `indices` as a batch [B, C, H, W].
  template <typename S = float>
  Tensor<S> batch(std::span<const Index> indices) const;
  std::vector<Index> batch_labels(std::span<const Index> indices) const;

  /// The first `count` examples (all when count exceeds the size).
  Dataset head(Index count) const;
};

/// Parses an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Both may be gzip-compressed. Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::string split = "");

/// `train` or `test` split from a directory holding the four MNIST IDX
/// files, plain or with a .gz suffix.
Dataset load_mnist(const std::filesystem::path& dir, const std::string& split, Index limit = 0);

/// Two-class images on a grid x grid layout of cell x cell pixel blocks.
///
/// Each pixel is clip(0.5 + N(0, noise^2) + shift, 0, 1). Robust cells shift
/// by +mu_robust (class 1) or -mu_robust (class 0). Non-robust cells shift by
/// +-mu_nonrobust with a sign that agrees with the label with probability
/// `correlation`, drawn once per image. Other cells carry noise only.
struct SyntheticSpec {
  Index count = 2048;
  Index grid = 8;
  Index cell = 4;
  Index channels = 3;
  std::vector<Index> robust_locations;
  std::vector<Index> nonrobust_locations;
  double mu_robust = 0.25;
  double mu_nonrobust = 0.08;
  double noise = 0.1;
  double correlation = 0.9;
  double epsilon = 0.1;
  std::uint64_t seed = 0;

  /// Left half of the grid robust, right half non-robust.
  static SyntheticSpec halves(Index count = 2048, std::uint64_t seed = 0, Index grid = 8);

  /// Throws ConfigError unless mu_robust > 2 epsilon, mu_nonrobust < epsilon
  /// and the location lists are disjoint and inside the grid.
  void validate() const;
};

Dataset gen_synthetic(const SyntheticSpec& spec);

}  // namespace advlab

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlab/network.hpp"

namespace advlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Network parameters plus the metadata needed to rebuild and audit a run.
/// Binary layout is documented in docs/checkpoint-format.md.
template <typename S>
struct Checkpoint {
  NetworkSpec spec;
  std::vector<Parameter<S>> params;
  std::uint64_t step = 0;
  std::string config_digest;

  static Checkpoint of(const Network<S>& net, std::uint64_t step = 0, std::string config_digest = "") {
    return Checkpoint{net.spec(), net.parameters(), step, std::move(config_digest)};
  }
  Network<S> network() const { return Network<S>::from_parameters(spec, params); }
};

template <typename S>
std::vector<unsigned char> encode_checkpoint(const Checkpoint<S>& ckpt);

/// Decodes either dtype; tensors stored with the other precision are cast.
/// Rejects a version other than kCheckpointVersion naming both versions.
template <typename S>
Checkpoint<S> decode_checkpoint(std::span<const unsigned char> bytes);

/// Writes to a temporary sibling and renames it into place.
template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<S>& ckpt);

/// With `expected_digest`, a differing stored digest raises
/// "checkpoint/config divergence".
template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path,
                              const std::optional<std::string>& expected_digest = std::nullopt);

}  // namespace advlab

#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fgreid/head.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct ConvStage {
  Var weight;  // (3, 3, c_in, c_out)
  Var bias;    // (c_out)
};

/// Small strided convolutional stack standing in for a real backbone:
/// three 3x3 stride-2 stages, 3 -> 32 -> 64 -> out_channels, ReLU after each.
struct ToyBackbone {
  std::vector<ConvStage> stages;

  static ToyBackbone init(std::size_t out_channels, Rng& rng);
  bool defined() const { return !stages.empty(); }
  std::size_t out_channels() const;
};

/// Smallest frame side the stack accepts (its total stride).
inline constexpr std::size_t kToyBackboneMinInput = 8;

/// frames (t, H, W, 3) -> features (t, ceil(H/8), ceil(W/8), out_channels).
Var toy_backbone(const Var& frames, const ToyBackbone& backbone);

/// Two backbones plus the head, trained together.
struct Model {
  HeadConfig config;
  ToyBackbone coarse_backbone;
  ToyBackbone fine_backbone;
  HeadParameters head;

  static Model init(const HeadConfig& config, Rng& rng);

  /// Clips are pixel tensors (t, H, W, 3) sharing one shape.
  HeadBatchOutput forward(std::span<const Tensor> clips, BnMode mode);

  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::vector<std::pair<std::string, Tensor*>> named_buffers();
};

}  // namespace fgreid::inline FGREID_PRECISION

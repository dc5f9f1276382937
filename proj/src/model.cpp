#include "fgreid/model.hpp"

#include <cmath>
#include <stdexcept>

namespace fgreid::inline FGREID_PRECISION {

namespace {

constexpr std::size_t kStageChannels[] = {3, 32, 64};

void append_backbone(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix, const ToyBackbone& b) {
  for (std::size_t i = 0; i < b.stages.size(); ++i) {
    out.emplace_back(prefix + ".conv" + std::to_string(i + 1) + ".weight", b.stages[i].weight);
    out.emplace_back(prefix + ".conv" + std::to_string(i + 1) + ".bias", b.stages[i].bias);
  }
}

}  // namespace

ToyBackbone ToyBackbone::init(std::size_t out_channels, Rng& rng) {
  if (out_channels == 0) throw std::invalid_argument("backbone needs at least one output channel");
  ToyBackbone b;
  const std::size_t schedule[] = {kStageChannels[0], kStageChannels[1], kStageChannels[2], out_channels};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t c_in = schedule[i];
    const std::size_t c_out = schedule[i + 1];
    const double stddev = std::sqrt(2.0 / static_cast<double>(9 * c_in));
    b.stages.push_back({Var::parameter(normal_tensor({3, 3, c_in, c_out}, stddev, rng)), Var::parameter(Tensor({c_out}))});
  }
  return b;
}

std::size_t ToyBackbone::out_channels() const {
  if (stages.empty()) return 0;
  return stages.back().bias.shape()[0];
}

Var toy_backbone(const Var& frames, const ToyBackbone& backbone) {
  const FeatureDims d = feature_dims(frames.value());
  if (d.c != 3) throw ShapeError("toy backbone expects RGB frames (t, H, W, 3), got " + to_string(frames.shape()));
  if (d.h < kToyBackboneMinInput || d.w < kToyBackboneMinInput) {
    throw ShapeError("frames of " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                     " are smaller than the backbone footprint of " + std::to_string(kToyBackboneMinInput));
  }
  if (!backbone.defined()) throw std::invalid_argument("toy backbone is not initialised");
  Var x = frames;
  for (const ConvStage& stage : backbone.stages) x = relu(conv2d(x, stage.weight, stage.bias, 2, 1));
  return x;
}

Model Model::init(const HeadConfig& config, Rng& rng) {
  config.validate();
  Model m;
  m.config = config;
  if (config.needs_coarse_features()) m.coarse_backbone = ToyBackbone::init(config.c_backbone, rng);
  if (config.has_fine_branch()) m.fine_backbone = ToyBackbone::init(config.c_backbone, rng);
  m.head = HeadParameters::init(config, rng);
  return m;
}

HeadBatchOutput Model::forward(std::span<const Tensor> clips, BnMode mode) {
  std::vector<ClipFeatures> features;
  features.reserve(clips.size());
  for (const Tensor& clip : clips) {
    const Var pixels = constant(clip);
    ClipFeatures f;
    if (coarse_backbone.defined()) f.coarse = toy_backbone(pixels, coarse_backbone);
    if (fine_backbone.defined()) f.fine = toy_backbone(pixels, fine_backbone);
    features.push_back(std::move(f));
  }
  return head_forward(features, head, config, mode);
}

std::vector<std::pair<std::string, Var>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  append_backbone(out, "backbone_coarse", coarse_backbone);
  append_backbone(out, "backbone_fine", fine_backbone);
  for (auto& [name, var] : head.named_parameters()) out.emplace_back("head." + name, var);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, ptr] : head.named_buffers()) out.emplace_back("head." + name, ptr);
  return out;
}

}  // namespace fgreid::inline FGREID_PRECISION

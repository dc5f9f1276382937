#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fgreid/ops.hpp"
#include "fgreid/rng.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct HeadConfig {
  std::size_t c_backbone = 2048;
  std::size_t c_star = 1024;
  std::size_t num_classes = 1;

  // Ablation switches. The fine branch exists while spatial attention or the
  // non-local block is on; with both off only the global branch remains.
  bool use_channel_weights = true;
  bool use_nonlocal = true;
  bool distinct_kq = false;
  bool use_gfm = true;
  bool use_fgm = true;

  std::size_t c_bar() const { return c_star / 4; }
  bool has_coarse_branch() const { return use_gfm; }
  bool has_fine_branch() const { return use_fgm || use_nonlocal; }
  /// The coarse reduction feeds the global branch and the attention maps.
  bool needs_coarse_features() const { return use_gfm || use_fgm; }
  std::size_t embedding_dim() const;
  void validate() const;
};

struct Classifier {
  Var weight;  // (c_star, num_classes)
  Var bias;    // (num_classes)

  bool defined() const { return weight.defined(); }
};

enum class LayerKind { projection, classifier, batch_norm };

struct LayerInfo {
  std::string name;
  LayerKind kind;
  std::size_t parameters;
};

/// Learnable state of the head. Layers a configuration does not use are left
/// undefined and do not appear in `layers()`.
struct HeadParameters {
  ProjectionParams reduce_coarse;
  ProjectionParams reduce_fine;
  ProjectionParams theta;
  ProjectionParams delta;
  ProjectionParams beta_proj;
  ProjectionParams k_proj;  // only with distinct_kq
  Classifier classifier;
  BatchNormParams bn_coarse;
  BatchNormParams bn_fine;

  static HeadParameters init(const HeadConfig& config, Rng& rng);

  std::vector<LayerInfo> layers() const;
  /// Trainable tensors, in a fixed order.
  std::vector<std::pair<std::string, Var>> named_parameters() const;
  /// Running statistics (non-trainable state).
  std::vector<std::pair<std::string, Tensor*>> named_buffers();
};

/// Per-clip intermediates kept for inspection and export.
struct ClipTrace {
  Var a_gap;       // (t, c*)
  Var s_channel;   // (t, c*)
  Var a_maps;      // (t, h, w, 1)
  Var a1;          // (t, h, w, c*)
  Var a2;          // (t, h, w, c*)
  Var a3;          // (t, c*)
  Var w_affinity;  // (thw, thw), undefined without the non-local block
};

/// Raw backbone outputs for one clip, both (t, h, w, c_backbone).
struct ClipFeatures {
  Var coarse;
  Var fine;
};

/// Batch-level head output. Branch tensors are undefined when ablated.
struct HeadBatchOutput {
  Var f_hat_coarse;  // (B, c*)
  Var f_hat_fine;    // (B, c*)
  Var f_star;        // (B, embedding_dim)
  Var y1;            // (B, num_classes)
  Var y2;            // (B, num_classes)
  std::vector<ClipTrace> traces;
};

/// Plain-tensor result for one clip.
struct EmbeddingBundle {
  Tensor f_hat_coarse;
  Tensor f_hat_fine;
  Tensor f_star;
  Tensor y1;
  Tensor y2;
  Tensor a_maps;
};

struct IntermediateTrace {
  Tensor a_gap;
  Tensor s_channel;
  Tensor a1;
  Tensor a2;
  Tensor a3;
  Tensor w_affinity;
};

// Building blocks of the head, each differentiable.

/// Per-frame softmax over channels of the spatially averaged features.
Var channel_weights(const Var& a_gap);
/// sigmoid(sum_c (f' - min f') * s_channel); one global minimum per clip.
Var attention_maps(const Var& f_coarse_reduced, const Var& s_channel);
/// Broadcasts (t, h, w, 1) maps over the channels of `f_fine_reduced`.
Var apply_attention(const Var& f_fine_reduced, const Var& a_maps);

struct NonLocalOutput {
  Var a2;
  Var w_affinity;
};

/// Self-attention over all t*h*w positions with a residual connection. When
/// `key` is undefined the query projection doubles as the key.
NonLocalOutput nonlocal_block(const Var& a1, const ProjectionParams& theta, const ProjectionParams& delta,
                              const ProjectionParams& beta_proj, const ProjectionParams& key = {});
/// a3[t] = sum_hw a2[t] / sum_hw a_maps[t].
Var attentive_pool(const Var& a2, const Var& a_maps);
/// Spatial mean per frame, (t, c).
Var spatial_average(const Var& f);

struct GlobalFeature {
  Var f_hat;  // (c*) after normalisation
  Var a_gap;  // (t, c*)
};

/// Single-clip global branch using inference statistics.
GlobalFeature global_feature(const Var& f_coarse_reduced, BatchNormParams& bn);
/// Temporal mean of (t, c*) then inference-mode normalisation.
Var finalize_fine(const Var& a3, BatchNormParams& bn);
/// softmax(f W + b) for f of shape (c*) or (B, c*).
Var classify(const Var& f_hat, const Classifier& classifier);

HeadBatchOutput head_forward(std::span<const ClipFeatures> clips, HeadParameters& params, const HeadConfig& config,
                             BnMode mode);

/// Inference on one clip (running statistics in the batch norms).
EmbeddingBundle forward(const Tensor& f_coarse_raw, const Tensor& f_fine_raw, HeadParameters& params,
                        const HeadConfig& config, IntermediateTrace* trace = nullptr);

struct ParamReport {
  std::vector<LayerInfo> layers;
  std::size_t total = 0;
  std::size_t projections = 0;
  std::size_t classifiers = 0;
  std::size_t batch_norms = 0;
};

ParamReport param_count(const HeadParameters& params);
/// Closed-form trainable parameter count of a configuration.
std::size_t analytic_param_count(const HeadConfig& config);

struct KqvComparison {
  std::size_t shared_qk = 0;
  std::size_t distinct_kqv = 0;
  std::size_t delta = 0;
};

KqvComparison compare_kqv(HeadConfig config);

std::string to_string(LayerKind kind);

}  // namespace fgreid::inline FGREID_PRECISION

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fgreid/rng.hpp"
#include "fgreid/tensor.hpp"

namespace fgreid::inline FGREID_PRECISION {

/// A sequence of frames of one identity seen by one camera. Images are
/// tracklets with a single frame.
struct Tracklet {
  std::size_t tracklet_id = 0;
  std::size_t identity = 0;
  std::size_t camera = 0;
  Tensor frames;       // (num_frames, H, W, 3), values in [0, 1]
  std::string source;  // archive the frames came from, empty when generated

  std::size_t num_frames() const { return frames.rank() == 0 ? 0 : frames.dim(0); }
};

struct Dataset {
  std::vector<Tracklet> tracklets;

  /// Distinct identities in ascending order; a label is a position in this list.
  std::vector<std::size_t> identities() const;
  std::size_t num_classes() const { return identities().size(); }
  /// Checks every tracklet is non-empty and all frames share one (H, W, 3).
  void validate() const;
};

struct BatchSpec {
  std::size_t p = 32;  // identities per batch
  std::size_t k = 5;   // clips per identity
  std::size_t t = 4;   // frames per clip

  std::size_t batch_size() const { return p * k; }
  void validate() const;
};

struct Batch {
  std::vector<Tensor> clips;         // each (t, H, W, 3)
  std::vector<std::size_t> labels;   // class index per clip
  std::vector<std::size_t> tracklet_ids;
};

/// t evenly spaced frame positions covering a tracklet of `num_frames`;
/// `phase` in [0, 1) shifts every position by the same fraction of a stride.
/// Shorter tracklets repeat cyclically from `phase * num_frames`.
std::vector<std::size_t> clip_frame_indices(std::size_t num_frames, std::size_t t, double phase);
Tensor gather_frames(const Tensor& frames, std::span<const std::size_t> indices);

/// p distinct identities with k clips each. Identities holding fewer than k
/// tracklets are drawn with replacement.
Batch sample_pk_batch(const Dataset& dataset, const BatchSpec& spec, Rng& rng);

/// Procedural pedestrians. Identities come in pairs that share body colours
/// and differ only in where a small accessory patch sits, so global colour
/// statistics cannot tell the two apart.
Dataset synth_dataset(std::size_t num_identities, std::size_t tracklets_per_id, std::size_t frames,
                      std::size_t image_size, Rng& rng);

/// Training tracklets keep their leading frames; the trailing `holdout_frames`
/// of every tracklet become evaluation clips. The first tracklet of each
/// identity is the query, the rest form the gallery.
struct HoldoutSplit {
  Dataset train;
  Dataset query;
  Dataset gallery;
};

HoldoutSplit holdout_split(const Dataset& dataset, std::size_t holdout_frames);

}  // namespace fgreid::inline FGREID_PRECISION

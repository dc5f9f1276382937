#include "fgreid/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace fgreid::inline FGREID_PRECISION {

namespace {

using Rgb = std::array<double, 3>;

constexpr Rgb kShirts[8] = {{0.80, 0.20, 0.20}, {0.20, 0.70, 0.30}, {0.20, 0.30, 0.80}, {0.85, 0.80, 0.20},
                            {0.60, 0.25, 0.70}, {0.90, 0.50, 0.15}, {0.15, 0.60, 0.60}, {0.85, 0.85, 0.85}};
constexpr Rgb kPants[8] = {{0.10, 0.10, 0.35}, {0.08, 0.08, 0.08}, {0.65, 0.55, 0.35}, {0.45, 0.45, 0.45},
                           {0.40, 0.25, 0.10}, {0.15, 0.15, 0.30}, {0.35, 0.40, 0.15}, {0.45, 0.10, 0.10}};
constexpr Rgb kPatches[8] = {{1.00, 0.95, 0.10}, {1.00, 0.10, 0.90}, {0.10, 1.00, 1.00}, {0.05, 0.05, 0.05},
                             {1.00, 1.00, 1.00}, {0.10, 0.30, 1.00}, {1.00, 0.40, 0.00}, {0.00, 0.90, 0.10}};
constexpr Rgb kSkin = {0.90, 0.75, 0.60};

struct Appearance {
  Rgb shirt;
  Rgb pants;
  Rgb patch;
  bool patch_on_torso_side;
};

Appearance appearance_of(std::size_t identity) {
  const std::size_t pair = identity / 2;
  const std::size_t palette = pair % 8;
  // Pairs beyond the first eight reuse palettes at a darker shade.
  const double shade = 1.0 - 0.2 * static_cast<double>((pair / 8) % 3);
  Appearance a;
  for (int c = 0; c < 3; ++c) {
    a.shirt[c] = kShirts[palette][c] * shade;
    a.pants[c] = kPants[(palette * 3) % 8][c] * shade;
    a.patch[c] = kPatches[palette][c];
  }
  a.patch_on_torso_side = identity % 2 == 0;
  return a;
}

struct Box {
  long x0, y0, x1, y1;
};

Box scaled_box(double x0, double y0, double x1, double y1, std::size_t size) {
  const double s = static_cast<double>(size);
  return {std::lround(x0 * s), std::lround(y0 * s), std::lround(x1 * s), std::lround(y1 * s)};
}

void paint(Tensor& frame, std::size_t size, Box box, long dx, long dy, const Rgb& color) {
  const long n = static_cast<long>(size);
  for (long y = std::max(0L, box.y0 + dy); y < std::min(n, box.y1 + dy); ++y) {
    for (long x = std::max(0L, box.x0 + dx); x < std::min(n, box.x1 + dx); ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)) * 3;
      for (std::size_t c = 0; c < 3; ++c) frame[base + c] = static_cast<Real>(color[c]);
    }
  }
}

Tensor render_frame(const Appearance& a, const Rgb& background, std::size_t size, Rng& rng) {
  Tensor frame({size, size, 3});
  for (std::size_t i = 0; i < size * size; ++i) {
    for (std::size_t c = 0; c < 3; ++c) frame[i * 3 + c] = static_cast<Real>(background[c]);
  }
  const long jitter = std::max<long>(1, static_cast<long>(size / 16));
  const long dx = static_cast<long>(rng.index(static_cast<std::size_t>(2 * jitter + 1))) - jitter;
  const long dy = static_cast<long>(rng.index(static_cast<std::size_t>(2 * jitter + 1))) - jitter;

  paint(frame, size, scaled_box(0.42, 0.06, 0.58, 0.20, size), dx, dy, kSkin);
  paint(frame, size, scaled_box(0.34, 0.20, 0.66, 0.55, size), dx, dy, a.shirt);
  paint(frame, size, scaled_box(0.36, 0.55, 0.64, 0.94, size), dx, dy, a.pants);
  // Both patch sites lie on background, so either placement removes the same
  // expected colour mass from the frame.
  const Box patch = a.patch_on_torso_side ? scaled_box(0.14, 0.28, 0.30, 0.44, size)
                                          : scaled_box(0.70, 0.66, 0.86, 0.82, size);
  paint(frame, size, patch, dx, dy, a.patch);

  if (rng.uniform() < 0.3) {
    const std::size_t width = std::max<std::size_t>(2, size / 12);
    const long x0 = static_cast<long>(rng.index(size - width + 1));
    const double g = rng.uniform(0.1, 0.9);
    paint(frame, size, {x0, 0, x0 + static_cast<long>(width), static_cast<long>(size)}, 0, 0, {g, g, g});
  }

  const double brightness = rng.uniform(0.85, 1.15);
  for (Real& v : frame.data()) {
    v = static_cast<Real>(std::clamp(static_cast<double>(v) * brightness + 0.04 * rng.normal(), 0.0, 1.0));
  }
  return frame;
}

}  // namespace

std::vector<std::size_t> Dataset::identities() const {
  std::set<std::size_t> ids;
  for (const Tracklet& t : tracklets) ids.insert(t.identity);
  return {ids.begin(), ids.end()};
}

void Dataset::validate() const {
  Shape frame_shape;
  for (const Tracklet& t : tracklets) {
    if (t.frames.rank() != 4 || t.frames.dim(3) != 3) {
      throw ShapeError("tracklet " + std::to_string(t.tracklet_id) + " frames must be (n, H, W, 3), got " +
                       to_string(t.frames.shape()));
    }
    if (t.num_frames() == 0) throw std::invalid_argument("tracklet " + std::to_string(t.tracklet_id) + " is empty");
    const Shape s{t.frames.dim(1), t.frames.dim(2), 3};
    if (frame_shape.empty()) frame_shape = s;
    if (s != frame_shape) {
      throw ShapeError("tracklet " + std::to_string(t.tracklet_id) + " frame size " + to_string(s) +
                       " differs from " + to_string(frame_shape));
    }
  }
}

void BatchSpec::validate() const {
  if (p < 2) throw std::invalid_argument("batch needs p >= 2 identities");
  if (k < 2) throw std::invalid_argument("batch needs k >= 2 clips per identity");
  if (t < 1) throw std::invalid_argument("clips need t >= 1 frames");
}

std::vector<std::size_t> clip_frame_indices(std::size_t num_frames, std::size_t t, double phase) {
  if (num_frames == 0) throw std::invalid_argument("cannot sample a clip from an empty tracklet");
  if (t == 0) throw std::invalid_argument("clip length must be positive");
  phase = std::clamp(phase, 0.0, std::nextafter(1.0, 0.0));
  std::vector<std::size_t> idx(t);
  if (num_frames < t) {
    const auto start = static_cast<std::size_t>(phase * static_cast<double>(num_frames));
    for (std::size_t i = 0; i < t; ++i) idx[i] = (start + i) % num_frames;
    return idx;
  }
  const double stride = static_cast<double>(num_frames) / static_cast<double>(t);
  for (std::size_t i = 0; i < t; ++i) {
    idx[i] = std::min(num_frames - 1, static_cast<std::size_t>((static_cast<double>(i) + phase) * stride));
  }
  return idx;
}

Tensor gather_frames(const Tensor& frames, std::span<const std::size_t> indices) {
  if (frames.rank() != 4) throw ShapeError("frames must be rank 4, got " + to_string(frames.shape()));
  const std::size_t per_frame = frames.size() / frames.dim(0);
  Tensor out({indices.size(), frames.dim(1), frames.dim(2), frames.dim(3)});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= frames.dim(0)) throw std::out_of_range("frame index out of range");
    std::copy_n(frames.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * per_frame), per_frame,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * per_frame));
  }
  return out;
}

Batch sample_pk_batch(const Dataset& dataset, const BatchSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::size_t> ids = dataset.identities();
  if (ids.size() < spec.p) {
    throw std::invalid_argument("dataset has " + std::to_string(ids.size()) + " identities, batch needs p = " +
                                std::to_string(spec.p));
  }
  std::map<std::size_t, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < dataset.tracklets.size(); ++i) by_identity[dataset.tracklets[i].identity].push_back(i);

  std::vector<std::size_t> labels(ids.size());
  std::iota(labels.begin(), labels.end(), 0);
  for (std::size_t i = 0; i < spec.p; ++i) std::swap(labels[i], labels[i + rng.index(labels.size() - i)]);

  Batch batch;
  batch.clips.reserve(spec.batch_size());
  for (std::size_t i = 0; i < spec.p; ++i) {
    const std::size_t label = labels[i];
    std::vector<std::size_t> pool = by_identity.at(ids[label]);
    std::vector<std::size_t> chosen(spec.k);
    if (pool.size() >= spec.k) {
      for (std::size_t j = 0; j < spec.k; ++j) {
        std::swap(pool[j], pool[j + rng.index(pool.size() - j)]);
        chosen[j] = pool[j];
      }
    } else {
      for (std::size_t j = 0; j < spec.k; ++j) chosen[j] = pool[rng.index(pool.size())];
    }
    for (std::size_t tracklet_index : chosen) {
      const Tracklet& tr = dataset.tracklets[tracklet_index];
      const auto idx = clip_frame_indices(tr.num_frames(), spec.t, rng.uniform());
      batch.clips.push_back(gather_frames(tr.frames, idx));
      batch.labels.push_back(label);
      batch.tracklet_ids.push_back(tr.tracklet_id);
    }
  }
  return batch;
}

Dataset synth_dataset(std::size_t num_identities, std::size_t tracklets_per_id, std::size_t frames,
                      std::size_t image_size, Rng& rng) {
  if (num_identities == 0 || tracklets_per_id == 0 || frames == 0) {
    throw std::invalid_argument("synthetic dataset counts must be at least 1");
  }
  if (image_size < 16) throw std::invalid_argument("synthetic frames need image_size >= 16");
  Dataset ds;
  for (std::size_t id = 0; id < num_identities; ++id) {
    const Appearance look = appearance_of(id);
    for (std::size_t j = 0; j < tracklets_per_id; ++j) {
      const double g = rng.uniform(0.30, 0.55);
      // Each camera adds its own faint colour cast to the scene.
      const double cast = 0.04 * static_cast<double>(j % 3) - 0.04;
      const Rgb background = {g + cast, g, g - cast};
      Tracklet tr;
      tr.tracklet_id = ds.tracklets.size();
      tr.identity = id;
      tr.camera = j;
      tr.frames = Tensor({frames, image_size, image_size, 3});
      const std::size_t per_frame = image_size * image_size * 3;
      for (std::size_t f = 0; f < frames; ++f) {
        const Tensor frame = render_frame(look, background, image_size, rng);
        std::copy(frame.data().begin(), frame.data().end(),
                  tr.frames.data().begin() + static_cast<std::ptrdiff_t>(f * per_frame));
      }
      ds.tracklets.push_back(std::move(tr));
    }
  }
  return ds;
}

HoldoutSplit holdout_split(const Dataset& dataset, std::size_t holdout_frames) {
  if (holdout_frames == 0) throw std::invalid_argument("holdout needs at least one frame");
  HoldoutSplit split;
  std::set<std::size_t> seen;
  for (const Tracklet& tr : dataset.tracklets) {
    const std::size_t n = tr.num_frames();
    if (n <= holdout_frames) {
      throw std::invalid_argument("tracklet " + std::to_string(tr.tracklet_id) + " has " + std::to_string(n) +
                                  " frames, too few to hold out " + std::to_string(holdout_frames));
    }
    std::vector<std::size_t> head(n - holdout_frames), tail(holdout_frames);
    std::iota(head.begin(), head.end(), 0);
    std::iota(tail.begin(), tail.end(), n - holdout_frames);
    Tracklet train = tr, held = tr;
    train.frames = gather_frames(tr.frames, head);
    held.frames = gather_frames(tr.frames, tail);
    split.train.tracklets.push_back(std::move(train));
    (seen.insert(tr.identity).second ? split.query : split.gallery).tracklets.push_back(std::move(held));
  }
  return split;
}

}  // namespace fgreid::inline FGREID_PRECISION

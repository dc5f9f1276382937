#pragma once

#include <span>
#include <string>
#include <vector>

#include "fgreid/ops.hpp"

namespace fgreid::inline FGREID_PRECISION {

/// Mixing weights of the total objective and per-loss hyperparameters.
struct LossWeights {
  double beta_mix = 0.5;  // triplet gets (1 - beta_mix), OSM gets beta_mix
  double w_var = 0.01;
  double w_center = 0.0005;
  double w_kl = 1.0;
  double w_sr = 1.0;

  double smoothing_eps = 0.1;
  double triplet_margin = 0.3;
  double sr_margin = 0.05;
  double osm_alpha = 1.2;
  double osm_sigma = 0.8;
  double osm_lambda = 0.5;
  bool kl_swap = false;  // false: KL(y2 || y1), the fine prediction is the target

  bool use_ce = true;
  bool use_triplet = true;
  bool use_osm = true;
  bool use_var = true;
  bool use_center = true;
  bool use_kl = true;
  bool use_sr = true;

  void validate() const;
};

struct ClassCenters {
  Tensor centers;  // (num_classes, dim)
  double update_rate = 0.5;

  static ClassCenters zeros(std::size_t num_classes, std::size_t dim, double update_rate);
  std::size_t num_classes() const { return centers.dim(0); }
  std::size_t dim() const { return centers.dim(1); }
};

using Labels = std::span<const std::size_t>;

/// Cross-entropy against an eps-smoothed one-hot target, averaged over the
/// batch. `y` holds probabilities, (B, N) or a single (N) vector.
Var ce_label_smooth(const Var& y, Labels labels, double eps);
/// Mean of the smoothed cross-entropies of both predictions.
Var ce_avg(const Var& y1, const Var& y2, Labels labels, double eps);

/// Batch-hard triplet loss with Euclidean distances.
Var batch_hard_triplet(const Var& embeddings, Labels labels, double margin);

/// Mean squared distance of each embedding to its class centre.
Var center_loss(const Var& embeddings, Labels labels, const ClassCenters& centers);
/// Moves each centre seen in the batch toward its batch class mean.
void update_centers(const Tensor& embeddings, Labels labels, ClassCenters& centers);

struct OsmParams {
  double alpha = 1.2;   // negative margin on normalised embeddings
  double sigma = 0.8;   // positive-pair soft-mining bandwidth
  double lambda = 0.5;  // weight of the negative term
};

/// Online soft-mining contrastive loss with class-aware attention taken from
/// the class centres.
Var osm_cl(const Var& embeddings, Labels labels, const ClassCenters& centers, const OsmParams& params);

/// Sum over batch classes of the mean squared deviation from the class mean.
Var variance_reg(const Var& embeddings, Labels labels);

/// Batch mean of KL(y2 || y1) (or KL(y1 || y2) when swapped).
Var kl_consistency(const Var& y1, const Var& y2, bool swap = false);

/// Batch mean of hinge(y1[l] - y2[l] + m) + hinge(m - y1[l]).
Var satisfied_rank(const Var& y1, const Var& y2, Labels labels, double margin);

/// Individual terms; undefined members are absent from the objective.
struct LossComponents {
  Var ce;
  Var triplet;
  Var osm;
  Var var;
  Var center;
  Var kl;
  Var sr;
};

struct LossTerm {
  std::string name;
  double value = 0;         // raw term
  double weight = 0;
  double contribution = 0;  // weight * value as summed into the total
};

struct TotalLoss {
  Var total;
  std::vector<LossTerm> breakdown;
  double value() const { return total.value()[0]; }
};

TotalLoss total_loss(const LossComponents& components, const LossWeights& weights);

}  // namespace fgreid::inline FGREID_PRECISION

#include "fgreid/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace fgreid::inline FGREID_PRECISION {

namespace {

constexpr Real kLogFloor = Real(1e-12);

Var as_batch(const Var& y) {
  if (y.shape().size() == 1) return reshape(y, {1, y.shape()[0]});
  if (y.shape().size() != 2) throw ShapeError("expected (batch, classes) probabilities, got " + to_string(y.shape()));
  return y;
}

void check_labels(Labels labels, std::size_t batch, std::size_t classes, const char* who) {
  if (labels.size() != batch) {
    throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(batch));
  }
  for (std::size_t l : labels) {
    if (l >= classes) throw std::out_of_range(std::string(who) + ": label " + std::to_string(l) + " out of range");
  }
}

void check_embeddings(const Var& e, Labels labels, const char* who) {
  if (e.shape().size() != 2) throw ShapeError(std::string(who) + " expects (batch, dim) embeddings, got " + to_string(e.shape()));
  if (labels.size() != e.shape()[0]) throw ShapeError(std::string(who) + ": label count does not match batch");
}

// (B, B) squared Euclidean distances from explicit differences.
Var pairwise_sq_dist(const Var& x) {
  const std::size_t b = x.shape()[0];
  const std::size_t d = x.shape()[1];
  const Var rows = expand(reshape(x, {b, 1, d}), {b, b, d});
  const Var cols = expand(reshape(x, {1, b, d}), {b, b, d});
  return reduce_sum(square(sub(rows, cols)), {2});
}

Tensor pair_mask(Labels labels, bool same, bool exclude_diagonal) {
  const std::size_t b = labels.size();
  Tensor mask({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const bool match = labels[i] == labels[j];
      if (match == same && !(exclude_diagonal && i == j)) mask[i * b + j] = 1;
    }
  }
  return mask;
}

Var zero_scalar() { return constant(Tensor::scalar(0)); }

}  // namespace

void LossWeights::validate() const {
  if (!(beta_mix >= 0 && beta_mix <= 1)) throw std::invalid_argument("beta_mix must lie in [0, 1]");
  for (double w : {w_var, w_center, w_kl, w_sr}) {
    if (!(w >= 0)) throw std::invalid_argument("loss weights must be >= 0");
  }
  if (!(smoothing_eps >= 0 && smoothing_eps < 1)) throw std::invalid_argument("smoothing_eps must lie in [0, 1)");
  if (!(triplet_margin > 0)) throw std::invalid_argument("triplet_margin must be > 0");
  if (!(sr_margin >= 0)) throw std::invalid_argument("sr_margin must be >= 0");
  if (!(osm_alpha > 0) || !(osm_sigma > 0)) throw std::invalid_argument("osm_alpha and osm_sigma must be > 0");
  if (!(osm_lambda >= 0 && osm_lambda <= 1)) throw std::invalid_argument("osm_lambda must lie in [0, 1]");
}

ClassCenters ClassCenters::zeros(std::size_t num_classes, std::size_t dim, double update_rate) {
  if (!(update_rate > 0 && update_rate <= 1)) throw std::invalid_argument("center update_rate must lie in (0, 1]");
  return {Tensor({num_classes, dim}), update_rate};
}

Var ce_label_smooth(const Var& y, Labels labels, double eps) {
  if (!(eps >= 0 && eps < 1)) throw std::invalid_argument("smoothing eps must lie in [0, 1)");
  const Var probs = as_batch(y);
  const std::size_t batch = probs.shape()[0];
  const std::size_t classes = probs.shape()[1];
  check_labels(labels, batch, classes, "ce_label_smooth");
  Tensor target({batch, classes}, static_cast<Real>(eps / static_cast<double>(classes)));
  for (std::size_t i = 0; i < batch; ++i) target[i * classes + labels[i]] += static_cast<Real>(1 - eps);
  const Var nll = neg(sum(mul(constant(std::move(target)), log_clamped(probs, kLogFloor))));
  return scale(nll, Real(1) / static_cast<Real>(batch));
}

Var ce_avg(const Var& y1, const Var& y2, Labels labels, double eps) {
  return scale(add(ce_label_smooth(y1, labels, eps), ce_label_smooth(y2, labels, eps)), Real(0.5));
}

Var batch_hard_triplet(const Var& embeddings, Labels labels, double margin) {
  check_embeddings(embeddings, labels, "batch_hard_triplet");
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t l : labels) ++counts[l];
  if (counts.size() < 2) throw std::invalid_argument("batch_hard_triplet needs at least two classes in the batch");
  for (const auto& [label, n] : counts) {
    if (n < 2) throw std::invalid_argument("batch_hard_triplet needs two instances of every class (class " + std::to_string(label) + ")");
  }
  const Var dist = sqrt_clamped(pairwise_sq_dist(embeddings), Real(1e-12));
  const Var hardest_pos = masked_row_max(dist, pair_mask(labels, true, true));
  const Var hardest_neg = masked_row_min(dist, pair_mask(labels, false, false));
  return mean(relu(add_scalar(sub(hardest_pos, hardest_neg), static_cast<Real>(margin))));
}

Var center_loss(const Var& embeddings, Labels labels, const ClassCenters& centers) {
  check_embeddings(embeddings, labels, "center_loss");
  if (centers.dim() != embeddings.shape()[1]) throw ShapeError("center_loss: centre dim does not match embeddings");
  check_labels(labels, labels.size(), centers.num_classes(), "center_loss");
  Tensor own({labels.size(), centers.dim()});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t k = 0; k < centers.dim(); ++k) own[i * centers.dim() + k] = centers.centers[labels[i] * centers.dim() + k];
  }
  return scale(sum(square(sub(embeddings, constant(std::move(own))))), Real(1) / static_cast<Real>(labels.size()));
}

void update_centers(const Tensor& embeddings, Labels labels, ClassCenters& centers) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size() || embeddings.dim(1) != centers.dim()) {
    throw ShapeError("update_centers: embeddings do not match labels or centre dim");
  }
  check_labels(labels, labels.size(), centers.num_classes(), "update_centers");
  const std::size_t d = centers.dim();
  std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> sums;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [acc, n] = sums[labels[i]];
    acc.resize(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) acc[k] += embeddings[i * d + k];
    ++n;
  }
  for (const auto& [label, entry] : sums) {
    const auto& [acc, n] = entry;
    for (std::size_t k = 0; k < d; ++k) {
      Real& c = centers.centers[label * d + k];
      const double target = acc[k] / static_cast<double>(n);
      c = static_cast<Real>(c + centers.update_rate * (target - c));
    }
  }
}

Var osm_cl(const Var& embeddings, Labels labels, const ClassCenters& centers, const OsmParams& params) {
  check_embeddings(embeddings, labels, "osm_cl");
  if (centers.dim() != embeddings.shape()[1]) throw ShapeError("osm_cl: centre dim does not match embeddings");
  check_labels(labels, labels.size(), centers.num_classes(), "osm_cl");
  const std::size_t b = labels.size();
  const Shape square_shape{b, b};

  const Var x = l2_normalize(embeddings);
  const Var d2 = pairwise_sq_dist(x);
  const Var d = sqrt_clamped(d2, Real(1e-12));
  const Var s_pos = exp(scale(d2, static_cast<Real>(-1.0 / (params.sigma * params.sigma))));
  const Var s_neg = relu(add_scalar(neg(d), static_cast<Real>(params.alpha)));

  // Class-aware attention: probability of the own class under a softmax over
  // similarities to the normalised centres.
  const Var anchors = l2_normalize(constant(centers.centers));
  const Var class_prob = pick(softmax_axis(matmul(x, transpose(anchors)), 1), labels);
  const Var att = minimum(expand(reshape(class_prob, {1, b}), square_shape), expand(reshape(class_prob, {b, 1}), square_shape));

  const Var pos_mask = constant(pair_mask(labels, true, true));
  const Var neg_mask = constant(pair_mask(labels, false, false));
  const Var w_pos = mul(mul(s_pos, att), pos_mask);
  const Var w_neg = mul(mul(s_neg, att), neg_mask);

  Var loss_pos = zero_scalar();
  if (sum(w_pos).value()[0] > 0) loss_pos = scale(div(sum(mul(w_pos, d2)), sum(w_pos)), Real(0.5));
  Var loss_neg = zero_scalar();
  if (sum(w_neg).value()[0] > 0) loss_neg = scale(div(sum(mul(w_neg, square(s_neg))), sum(w_neg)), Real(0.5));
  return add(scale(loss_pos, static_cast<Real>(1 - params.lambda)), scale(loss_neg, static_cast<Real>(params.lambda)));
}

Var variance_reg(const Var& embeddings, Labels labels) {
  check_embeddings(embeddings, labels, "variance_reg");
  const std::size_t d = embeddings.shape()[1];
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  Var total = zero_scalar();
  for (const auto& [label, rows] : members) {
    if (rows.size() < 2) continue;
    const std::size_t n = rows.size();
    const Var group = index_rows(embeddings, rows);
    const Var centre = expand(mean_pool(group, {0}), {n, d});
    total = add(total, scale(sum(square(sub(group, centre))), Real(1) / static_cast<Real>(n)));
  }
  return total;
}

Var kl_consistency(const Var& y1, const Var& y2, bool swap) {
  const Var p = as_batch(swap ? y1 : y2);  // target
  const Var q = as_batch(swap ? y2 : y1);
  if (p.shape() != q.shape()) throw ShapeError("kl_consistency: prediction shapes differ");
  const Var kl = sum(mul(p, sub(log_clamped(p, kLogFloor), log_clamped(q, kLogFloor))));
  return scale(kl, Real(1) / static_cast<Real>(p.shape()[0]));
}

Var satisfied_rank(const Var& y1, const Var& y2, Labels labels, double margin) {
  const Var a = as_batch(y1);
  const Var b = as_batch(y2);
  if (a.shape() != b.shape()) throw ShapeError("satisfied_rank: prediction shapes differ");
  check_labels(labels, a.shape()[0], a.shape()[1], "satisfied_rank");
  const Var p1 = pick(a, labels);
  const Var p2 = pick(b, labels);
  const Real m = static_cast<Real>(margin);
  const Var rank_term = relu(add_scalar(sub(p1, p2), m));
  const Var limit_term = relu(add_scalar(neg(p1), m));
  return mean(add(rank_term, limit_term));
}

TotalLoss total_loss(const LossComponents& c, const LossWeights& w) {
  const std::pair<const char*, std::pair<const Var*, double>> terms[] = {
      {"ce", {&c.ce, 1.0}},
      {"triplet", {&c.triplet, 1.0 - w.beta_mix}},
      {"osm", {&c.osm, w.beta_mix}},
      {"var", {&c.var, w.w_var}},
      {"center", {&c.center, w.w_center}},
      {"kl", {&c.kl, w.w_kl}},
      {"sr", {&c.sr, w.w_sr}},
  };
  TotalLoss out;
  out.total = zero_scalar();
  for (const auto& [name, entry] : terms) {
    const auto& [term, weight] = entry;
    if (!term->defined()) continue;
    if (term->value().size() != 1) throw ShapeError(std::string("loss term ") + name + " is not a scalar");
    const Var weighted = scale(reshape(*term, Shape{}), static_cast<Real>(weight));
    out.total = add(out.total, weighted);
    out.breakdown.push_back({name, term->value()[0], weight, weighted.value()[0]});
  }
  return out;
}

}  // namespace fgreid::inline FGREID_PRECISION

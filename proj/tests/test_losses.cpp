#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fgreid/losses.hpp"
#include "fgreid/rng.hpp"

using namespace fgreid;

namespace {

using Rows = std::vector<std::vector<double>>;
using LabelVec = std::vector<std::size_t>;

Tensor matrix(const Rows& rows) {
  Tensor t({rows.size(), rows.front().size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) t[r * rows[r].size() + c] = static_cast<Real>(rows[r][c]);
  }
  return t;
}

Rows to_rows(const Tensor& t) {
  Rows rows(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) rows[r][c] = t[r * t.dim(1) + c];
  }
  return rows;
}

double value(const Var& v) { return v.value()[0]; }

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= std::max(n, 1e-12);
  return v;
}

// Hinge over every (anchor, positive, negative) triple, keeping the worst per anchor.
double triplet_oracle(const Rows& x, const LabelVec& y, double margin) {
  double total = 0;
  for (std::size_t a = 0; a < x.size(); ++a) {
    double worst = 0;
    for (std::size_t p = 0; p < x.size(); ++p) {
      for (std::size_t n = 0; n < x.size(); ++n) {
        if (p == a || y[p] != y[a] || y[n] == y[a]) continue;
        worst = std::max(worst, dist(x[a], x[p]) - dist(x[a], x[n]) + margin);
      }
    }
    total += worst;
  }
  return total / static_cast<double>(x.size());
}

// Soft-mined contrastive loss written directly from its definition.
double osm_oracle(const Rows& emb, const LabelVec& y, const Rows& centers, const OsmParams& p) {
  const std::size_t b = emb.size();
  Rows x(b), c(centers.size());
  for (std::size_t i = 0; i < b; ++i) x[i] = unit(emb[i]);
  for (std::size_t k = 0; k < centers.size(); ++k) c[k] = unit(centers[k]);
  std::vector<double> prob(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> logits(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) logits[k] = std::inner_product(x[i].begin(), x[i].end(), c[k].begin(), 0.0);
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - m);
    prob[i] = std::exp(logits[y[i]] - m) / z;
  }
  double wp = 0, lp = 0, wn = 0, ln = 0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      if (i == j) continue;
      const double d = dist(x[i], x[j]);
      const double att = std::min(prob[i], prob[j]);
      if (y[i] == y[j]) {
        const double w = std::exp(-d * d / (p.sigma * p.sigma)) * att;
        wp += w;
        lp += w * d * d;
      } else {
        const double s = std::max(0.0, p.alpha - d);
        const double w = s * att;
        wn += w;
        ln += w * s * s;
      }
    }
  }
  const double pos = wp > 0 ? 0.5 * lp / wp : 0;
  const double neg = wn > 0 ? 0.5 * ln / wn : 0;
  return (1 - p.lambda) * pos + p.lambda * neg;
}

double variance_oracle(const Rows& x, const LabelVec& y) {
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < y.size(); ++i) members[y[i]].push_back(i);
  double total = 0;
  for (const auto& [label, idx] : members) {
    std::vector<double> mean(x[0].size(), 0.0);
    for (std::size_t i : idx) {
      for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += x[i][d] / static_cast<double>(idx.size());
    }
    double s = 0;
    for (std::size_t i : idx) {
      for (std::size_t d = 0; d < mean.size(); ++d) s += (x[i][d] - mean[d]) * (x[i][d] - mean[d]);
    }
    total += s / static_cast<double>(idx.size());
  }
  return total;
}

Tensor random_probs(std::size_t b, std::size_t n, Rng& rng) {
  return softmax_axis(constant(normal_tensor({b, n}, 1.0, rng)), 1).value();
}

}  // namespace

TEST_CASE("ce_label_smooth") {
  const LabelVec zero{0};
  CHECK(value(ce_label_smooth(constant(Tensor::vector({0.75, 0.25})), zero, 0.1)) == doctest::Approx(0.34261).epsilon(1e-4));
  CHECK(value(ce_label_smooth(constant(Tensor::vector({1, 0, 0})), zero, 0.0)) == doctest::Approx(0).epsilon(1e-6));
  for (double eps : {0.0, 0.1, 0.5}) {
    CHECK(value(ce_label_smooth(constant(Tensor({2, 5}, Real(0.2))), LabelVec{1, 4}, eps)) ==
          doctest::Approx(std::log(5.0)).epsilon(1e-5));
  }
  // Zero probabilities are clamped rather than producing infinities.
  CHECK(std::isfinite(value(ce_label_smooth(constant(Tensor::vector({0, 1})), zero, 0.1))));
  CHECK_THROWS(ce_label_smooth(constant(Tensor::vector({0.5, 0.5})), LabelVec{2}, 0.1));
  CHECK_THROWS(ce_label_smooth(constant(Tensor::vector({0.5, 0.5})), zero, 1.0));

  const Tensor y1 = Tensor({1, 2}, {0.75, 0.25});
  const Tensor y2 = Tensor({1, 2}, {0.5, 0.5});
  const double expected = (value(ce_label_smooth(constant(y1), zero, 0.1)) + value(ce_label_smooth(constant(y2), zero, 0.1))) / 2;
  CHECK(value(ce_avg(constant(y1), constant(y2), zero, 0.1)) == doctest::Approx(expected));
}

TEST_CASE("batch_hard_triplet") {
  const Rows x{{0}, {1}, {2}, {5}};
  const LabelVec y{0, 0, 1, 1};
  CHECK(triplet_oracle(x, y, 0.3) == doctest::Approx(0.65));
  CHECK(value(batch_hard_triplet(constant(matrix(x)), y, 0.3)) == doctest::Approx(0.65).epsilon(1e-5));

  CHECK(value(batch_hard_triplet(constant(Tensor({4, 3}, Real(1))), y, 0.3)) == doctest::Approx(0.3).epsilon(1e-5));
  CHECK(value(batch_hard_triplet(constant(matrix({{0}, {0.1}, {50}, {50.1}})), y, 0.3)) == 0);

  CHECK_THROWS_AS(batch_hard_triplet(constant(matrix(x)), LabelVec{0, 0, 0, 0}, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(batch_hard_triplet(constant(matrix(x)), LabelVec{0, 0, 0, 1}, 0.3), std::invalid_argument);

  Rng rng(8);
  const LabelVec yy{0, 0, 1, 1, 2, 2, 2};
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor e = normal_tensor({7, 3}, 1.0, rng);
    CHECK(value(batch_hard_triplet(constant(e), yy, 0.3)) == doctest::Approx(triplet_oracle(to_rows(e), yy, 0.3)).epsilon(1e-4));
  }
}

TEST_CASE("center loss and centre updates") {
  ClassCenters centers = ClassCenters::zeros(2, 1, 0.5);
  CHECK(value(center_loss(constant(matrix({{2}})), LabelVec{0}, centers)) == doctest::Approx(4));
  centers.centers = matrix({{1}, {-2}});
  CHECK(value(center_loss(constant(matrix({{1}, {-2}})), LabelVec{0, 1}, centers)) == 0);

  ClassCenters full = ClassCenters::zeros(3, 2, 1.0);
  update_centers(matrix({{1, 2}, {3, 4}, {9, 9}}), LabelVec{0, 0, 2}, full);
  CHECK(to_rows(full.centers) == Rows{{2, 3}, {0, 0}, {9, 9}});

  ClassCenters half = ClassCenters::zeros(1, 1, 0.5);
  update_centers(matrix({{4}}), LabelVec{0}, half);
  CHECK(half.centers[0] == doctest::Approx(2));

  CHECK_THROWS(center_loss(constant(matrix({{2}})), LabelVec{3}, centers));
  CHECK_THROWS(ClassCenters::zeros(2, 2, 0.0));
}

TEST_CASE("osm_cl") {
  const OsmParams params;
  // Classes on opposite unit directions sit at distance 2 > alpha; positives coincide.
  ClassCenters centers = ClassCenters::zeros(2, 2, 0.5);
  centers.centers = matrix({{1, 0}, {-1, 0}});
  const Rows at_center{{1, 0}, {1, 0}, {-1, 0}, {-1, 0}};
  const LabelVec y{0, 0, 1, 1};
  CHECK(osm_oracle(at_center, y, to_rows(centers.centers), params) == 0);
  CHECK(value(osm_cl(constant(matrix(at_center)), y, centers, params)) == doctest::Approx(0).epsilon(1e-6));

  Rng rng(17);
  const LabelVec yy{0, 0, 1, 1, 2, 2};
  for (int trial = 0; trial < 50; ++trial) {
    ClassCenters c = ClassCenters::zeros(3, 4, 0.5);
    c.centers = normal_tensor({3, 4}, 1.0, rng);
    const Tensor e = normal_tensor({6, 4}, 1.0, rng);
    const double loss = value(osm_cl(constant(e), yy, c, params));
    CHECK(loss >= 0);
    CHECK(loss == doctest::Approx(osm_oracle(to_rows(e), yy, to_rows(c.centers), params)).epsilon(1e-4));

    // Reverse the batch together with its labels.
    Rows rows = to_rows(e);
    std::reverse(rows.begin(), rows.end());
    LabelVec rev(yy.rbegin(), yy.rend());
    CHECK(value(osm_cl(constant(matrix(rows)), rev, c, params)) == doctest::Approx(loss).epsilon(1e-5));
  }
}

TEST_CASE("variance_reg") {
  CHECK(value(variance_reg(constant(matrix({{0}, {2}})), LabelVec{0, 0})) == doctest::Approx(1));
  CHECK(value(variance_reg(constant(matrix({{1, 2}, {3, 4}, {5, 6}})), LabelVec{0, 1, 2})) == 0);
  CHECK(value(variance_reg(constant(matrix({{1, 2}, {1, 2}, {5, 6}, {5, 6}})), LabelVec{0, 0, 1, 1})) == 0);

  Rng rng(23);
  const LabelVec y{0, 1, 0, 2, 1, 0, 3};
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor e = normal_tensor({7, 5}, 1.0, rng);
    CHECK(value(variance_reg(constant(e), y)) == doctest::Approx(variance_oracle(to_rows(e), y)).epsilon(1e-5));
  }
}

TEST_CASE("kl_consistency") {
  const Tensor y1({1, 2}, {0.75, 0.25});
  const Tensor y2({1, 2}, {0.5, 0.5});
  CHECK(value(kl_consistency(constant(y1), constant(y2))) == doctest::Approx(0.143841).epsilon(1e-5));
  CHECK(value(kl_consistency(constant(y1), constant(y1))) == doctest::Approx(0).epsilon(1e-7));
  const double swapped = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  CHECK(value(kl_consistency(constant(y1), constant(y2), true)) == doctest::Approx(swapped).epsilon(1e-5));

  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    CHECK(value(kl_consistency(constant(random_probs(3, 4, rng)), constant(random_probs(3, 4, rng)))) >= -1e-7);
  }
  CHECK_THROWS_AS(kl_consistency(constant(y1), constant(Tensor({1, 3}, Real(1.0 / 3)))), ShapeError);
}

TEST_CASE("satisfied_rank") {
  const LabelVec zero{0};
  CHECK(value(satisfied_rank(constant(Tensor({1, 2}, {0.9, 0.1})), constant(Tensor({1, 2}, {0.5, 0.5})), zero, 0.05)) ==
        doctest::Approx(0.45));
  CHECK(value(satisfied_rank(constant(Tensor({1, 2}, {0.3, 0.7})), constant(Tensor({1, 2}, {0.6, 0.4})), zero, 0.05)) == 0);
  // The limiting term alone: y1 collapses below the margin.
  CHECK(value(satisfied_rank(constant(Tensor({1, 2}, {0.01, 0.99})), constant(Tensor({1, 2}, {0.9, 0.1})), zero, 0.05)) ==
        doctest::Approx(0.04));

  double previous = 1e9;
  for (double p2 = 0.0; p2 <= 1.0; p2 += 0.05) {
    const double l = value(satisfied_rank(constant(Tensor({1, 2}, {0.6, 0.4})),
                                          constant(Tensor({1, 2}, {static_cast<Real>(p2), static_cast<Real>(1 - p2)})), zero, 0.05));
    CHECK(l <= previous + 1e-7);
    previous = l;
  }
}

TEST_CASE("total_loss") {
  const auto one = [] { return constant(Tensor::scalar(1)); };
  LossWeights w;
  w.beta_mix = 0.5;
  w.w_var = w.w_center = w.w_kl = w.w_sr = 0.1;
  const LossComponents all{one(), one(), one(), one(), one(), one(), one()};
  const TotalLoss t = total_loss(all, w);
  CHECK(t.value() == doctest::Approx(2.4).epsilon(1e-6));
  REQUIRE(t.breakdown.size() == 7);
  Real sum = 0;
  for (const LossTerm& term : t.breakdown) sum += static_cast<Real>(term.contribution);
  CHECK(sum == t.total.value()[0]);

  const auto zero = [] { return constant(Tensor::scalar(0)); };
  CHECK(total_loss({zero(), zero(), zero(), zero(), zero(), zero(), zero()}, w).value() == 0);

  LossWeights b0 = w;
  b0.beta_mix = 0;
  LossComponents partial;
  partial.triplet = constant(Tensor::scalar(2));
  partial.osm = constant(Tensor::scalar(5));
  const TotalLoss t0 = total_loss(partial, b0);
  CHECK(t0.value() == doctest::Approx(2));
  CHECK(t0.breakdown.size() == 2);
  CHECK(t0.breakdown[1].contribution == 0);

  LossWeights bad;
  bad.beta_mix = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("losses are invariant to batch permutation") {
  Rng rng(31);
  const LabelVec y{0, 0, 1, 1, 2, 2};
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor e = normal_tensor({6, 3}, 1.0, rng);
    const Tensor y1 = random_probs(6, 3, rng), y2 = random_probs(6, 3, rng);
    ClassCenters c = ClassCenters::zeros(3, 3, 0.5);
    c.centers = normal_tensor({3, 3}, 1.0, rng);

    Tensor pe(e.shape()), p1(y1.shape()), p2(y2.shape());
    LabelVec py(6);
    for (std::size_t i = 0; i < 6; ++i) {
      py[i] = y[perm[i]];
      for (std::size_t d = 0; d < 3; ++d) {
        pe[i * 3 + d] = e[perm[i] * 3 + d];
        p1[i * 3 + d] = y1[perm[i] * 3 + d];
        p2[i * 3 + d] = y2[perm[i] * 3 + d];
      }
    }
    const auto same = [](const Var& a, const Var& b) { CHECK(value(a) == doctest::Approx(value(b)).epsilon(1e-5)); };
    same(ce_avg(constant(y1), constant(y2), y, 0.1), ce_avg(constant(p1), constant(p2), py, 0.1));
    same(batch_hard_triplet(constant(e), y, 0.3), batch_hard_triplet(constant(pe), py, 0.3));
    same(center_loss(constant(e), y, c), center_loss(constant(pe), py, c));
    same(variance_reg(constant(e), y), variance_reg(constant(pe), py));
    same(kl_consistency(constant(y1), constant(y2)), kl_consistency(constant(p1), constant(p2)));
    same(satisfied_rank(constant(y1), constant(y2), y, 0.05), satisfied_rank(constant(p1), constant(p2), py, 0.05));
  }
}

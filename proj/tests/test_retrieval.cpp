#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fgreid/retrieval.hpp"

using namespace fgreid;

namespace {

using Vecs = std::vector<std::vector<double>>;

ScoreMatrix table(std::size_t rows, std::size_t cols, std::vector<double> values, bool higher = true) {
  return {rows, cols, std::move(values), higher};
}

struct Oracle {
  std::vector<double> cmc;  // per rank
  double map = 0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;
};

// Straightforward per-query evaluation: filter, stable sort, scan.
Oracle brute_force(const ScoreMatrix& s, const RetrievalMeta& m, const std::vector<std::size_t>& ranks) {
  Oracle o;
  o.cmc.assign(ranks.size(), 0);
  for (std::size_t q = 0; q < s.rows; ++q) {
    std::vector<std::size_t> kept;
    for (std::size_t g = 0; g < s.cols; ++g) {
      if (!(m.g_ids[g] == m.q_ids[q] && m.g_cams[g] == m.q_cams[q])) kept.push_back(g);
    }
    std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
      return s.higher_is_better ? s(q, a) > s(q, b) : s(q, a) < s(q, b);
    });
    std::size_t first = 0, hits = 0;
    double precision_sum = 0;
    for (std::size_t pos = 0; pos < kept.size(); ++pos) {
      if (m.g_ids[kept[pos]] != m.q_ids[q]) continue;
      if (hits == 0) first = pos + 1;
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(pos + 1);
    }
    if (hits == 0) {
      ++o.excluded;
      continue;
    }
    ++o.evaluated;
    o.map += precision_sum / static_cast<double>(hits);
    for (std::size_t r = 0; r < ranks.size(); ++r) o.cmc[r] += first <= ranks[r] ? 1 : 0;
  }
  if (o.evaluated > 0) {
    o.map /= static_cast<double>(o.evaluated);
    for (double& v : o.cmc) v /= static_cast<double>(o.evaluated);
  }
  return o;
}

double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> unit(std::vector<double> v) {
  const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (double& x : v) x /= n;
  return v;
}

Model small_model(std::size_t classes = 2) {
  HeadConfig c;
  c.c_backbone = 8;
  c.c_star = 8;
  c.num_classes = classes;
  Rng rng(3);
  return Model::init(c, rng);
}

}  // namespace

TEST_CASE("similarity_matrix") {
  const Vecs q{{1, 0}};
  const Vecs g{{0.6, 0.8}, {0, 3}, {5, 0}};
  const ScoreMatrix s = similarity_matrix(q, g, Metric::dot);
  CHECK(s.higher_is_better);
  CHECK(s(0, 0) == doctest::Approx(0.6));
  CHECK(s(0, 1) == doctest::Approx(0));
  CHECK(s(0, 2) == doctest::Approx(1));

  const ScoreMatrix e = similarity_matrix(q, g, Metric::euclidean);
  CHECK_FALSE(e.higher_is_better);
  CHECK(e(0, 2) == doctest::Approx(4));
  CHECK(e(0, 0) == doctest::Approx(std::sqrt(0.16 + 0.64)));

  // Dot mode ignores vector length.
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Vecs a(3, std::vector<double>(4)), b(5, std::vector<double>(4));
    for (auto& v : a) for (double& x : v) x = rng.normal();
    for (auto& v : b) for (double& x : v) x = rng.normal();
    Vecs scaled = b;
    for (auto& v : scaled) for (double& x : v) x *= 7.5;
    const ScoreMatrix s1 = similarity_matrix(a, b, Metric::dot);
    const ScoreMatrix s2 = similarity_matrix(a, scaled, Metric::dot);
    for (std::size_t i = 0; i < s1.values.size(); ++i) CHECK(s1.values[i] == doctest::Approx(s2.values[i]));
  }

  CHECK_THROWS(similarity_matrix(Vecs{{1, 2, 3}}, g, Metric::dot));
}

TEST_CASE("cmc and map examples") {
  const std::vector<std::size_t> ranks{1, 5};
  // Only query, first correct match in third place.
  RetrievalMeta m{{0}, {1, 2, 0, 3, 4}, {0}, {1, 1, 1, 1, 1}};
  const ScoreMatrix s = table(1, 5, {0.9, 0.8, 0.7, 0.6, 0.5});
  const CmcResult c = compute_cmc(s, m, ranks);
  CHECK(c.values == std::vector<double>{0, 1});
  CHECK(compute_map(s, m).map == doctest::Approx(1.0 / 3));

  // correct, wrong, correct.
  RetrievalMeta m2{{0}, {0, 1, 0}, {0}, {1, 1, 1}};
  CHECK(compute_map(table(1, 3, {3, 2, 1}), m2).map == doctest::Approx(0.8333).epsilon(1e-4));

  // Perfect ranking.
  RetrievalMeta m3{{0, 1}, {0, 1, 0, 1}, {0, 0}, {1, 1, 1, 1}};
  const ScoreMatrix perfect = table(2, 4, {1, 0, 1, 0, 0, 1, 0, 1});
  CHECK(compute_cmc(perfect, m3, ranks).values == std::vector<double>{1, 1});
  CHECK(compute_map(perfect, m3).map == 1.0);

  // Every match shares the query's camera: excluded.
  RetrievalMeta m4{{0, 1}, {0, 1, 2}, {3, 0}, {3, 1, 1}};
  const ScoreMatrix s4 = table(2, 3, {1, 0, 0, 0, 1, 0});
  const CmcResult c4 = compute_cmc(s4, m4, ranks);
  CHECK(c4.excluded == 1);
  CHECK(c4.evaluated == 1);
  CHECK(compute_map(s4, m4).excluded == 1);

  // Same-camera distractors are dropped before ranking.
  RetrievalMeta m5{{0}, {0, 0}, {2}, {2, 5}};
  const ScoreMatrix s5 = table(1, 2, {1, 0});
  CHECK(ranked_gallery(s5, m5, 0) == std::vector<std::size_t>{1});
  CHECK(compute_cmc(s5, m5, ranks).values[0] == 1);

  // Ties keep gallery order.
  RetrievalMeta m6{{0}, {1, 0}, {0}, {1, 1}};
  CHECK(compute_cmc(table(1, 2, {1, 1}), m6, ranks).values[0] == 0);

  // Distances rank ascending.
  CHECK(compute_cmc(table(1, 2, {0.1, 0.9}, false), m6, ranks).values[0] == 0);
}

TEST_CASE("cmc and map agree with a brute-force oracle") {
  Rng rng(2024);
  const std::vector<std::size_t> ranks{1, 2, 5, 10};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + rng.index(6), ng = 1 + rng.index(15);
    RetrievalMeta m;
    for (std::size_t i = 0; i < nq; ++i) {
      m.q_ids.push_back(rng.index(4));
      m.q_cams.push_back(rng.index(3));
    }
    for (std::size_t i = 0; i < ng; ++i) {
      m.g_ids.push_back(rng.index(4));
      m.g_cams.push_back(rng.index(3));
    }
    // Coarse scores force frequent ties.
    std::vector<double> values(nq * ng);
    for (double& v : values) v = static_cast<double>(rng.index(5));
    const ScoreMatrix s = table(nq, ng, values, trial % 2 == 0);
    const Oracle o = brute_force(s, m, ranks);
    const CmcResult c = compute_cmc(s, m, ranks);
    const MapResult mp = compute_map(s, m);
    CHECK(c.evaluated == o.evaluated);
    CHECK(c.excluded == o.excluded);
    CHECK(mp.excluded == o.excluded);
    for (std::size_t r = 0; r < ranks.size(); ++r) CHECK(std::abs(c.values[r] - o.cmc[r]) <= 1e-9);
    CHECK(std::abs(mp.map - o.map) <= 1e-9);
    for (std::size_t r = 1; r < ranks.size(); ++r) CHECK(c.values[r] >= c.values[r - 1]);
  }
}

TEST_CASE("k-reciprocal re-ranking") {
  Rng rng(5);
  Vecs q(3, std::vector<double>(4)), g(9, std::vector<double>(4));
  for (auto& v : q) for (double& x : v) x = rng.normal();
  for (auto& v : g) for (double& x : v) x = rng.normal();

  const ScoreMatrix plain = k_reciprocal_rerank(q, g, {4, 2, 1.0});
  CHECK_FALSE(plain.higher_is_better);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 9; ++j) CHECK(plain(i, j) == doctest::Approx(euclid(unit(q[i]), unit(g[j]))));
  }

  // Two tight clusters far apart: nearest gallery entry keeps its cluster.
  const Vecs cq{{1, 0.02}, {-1, 0.01}};
  const Vecs cg{{1, 0}, {1, 0.05}, {0.98, -0.03}, {-1, 0}, {-1, 0.04}, {-0.97, -0.02}};
  const ScoreMatrix before = similarity_matrix(cq, cg, Metric::dot);
  const ScoreMatrix after = k_reciprocal_rerank(cq, cg, {3, 1, 0.3});
  for (std::size_t i = 0; i < 2; ++i) {
    std::size_t best_before = 0, best_after = 0;
    for (std::size_t j = 1; j < 6; ++j) {
      if (before(i, j) > before(i, best_before)) best_before = j;
      if (after(i, j) < after(i, best_after)) best_after = j;
    }
    CHECK(best_before == best_after);
    CHECK(best_after / 3 == i);
  }

  // Symmetric, nonnegative revised distances on a symmetric input.
  const std::size_t n = 10;
  Vecs pts(n, std::vector<double>(3));
  for (auto& v : pts) for (double& x : v) x = rng.normal();
  std::vector<double> d(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = euclid(pts[i], pts[j]);
  }
  const std::vector<double> r = k_reciprocal_distances(d, n, {4, 2, 0.3});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(r[i * n + j] >= 0);
      CHECK(r[i * n + j] == doctest::Approx(r[j * n + i]).epsilon(1e-9));
    }
  }

  CHECK_THROWS(k_reciprocal_rerank(q, g, {9, 2, 0.3}));
  CHECK_THROWS(k_reciprocal_rerank(q, g, {20, 6, 0.3}));
}

TEST_CASE("evaluation clips") {
  CHECK(evaluation_clips(4, 4, 32) == std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}});
  CHECK(evaluation_clips(2, 4, 32) == std::vector<std::vector<std::size_t>>{{0, 1, 0, 1}});
  CHECK(evaluation_clips(9, 4, 32) == std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}, {4, 5, 6, 7}});
  const auto many = evaluation_clips(200, 4, 32);
  CHECK(many.size() == 32);
  CHECK(many.front().front() == 0);
  for (std::size_t i = 1; i < many.size(); ++i) CHECK(many[i].front() > many[i - 1].back());
  CHECK_THROWS(evaluation_clips(0, 4, 32));
}

TEST_CASE("tracklet embeddings") {
  Model model = small_model();
  Rng rng(6);
  Tracklet tr;
  tr.tracklet_id = 4;
  tr.identity = 9;
  tr.camera = 1;
  tr.frames = uniform_tensor({8, 16, 16, 3}, 0, 1, rng);

  const EmbeddingRecord rec = extract_tracklet_embedding(tr, model, 4);
  CHECK(rec.tracklet_id == 4);
  CHECK(rec.identity == 9);
  CHECK(rec.camera == 1);
  REQUIRE(rec.vector.size() == 16);

  // Mean of the per-clip embeddings.
  std::vector<double> expected(16, 0.0);
  {
    NoGradGuard no_grad;
    for (std::size_t start : {0u, 4u}) {
      std::vector<std::size_t> idx(4);
      std::iota(idx.begin(), idx.end(), start);
      const std::vector<Tensor> clip{gather_frames(tr.frames, idx)};
      const Tensor f = model.forward(clip, BnMode::infer).f_star.value();
      for (std::size_t i = 0; i < 16; ++i) expected[i] += f[i] / 2;
    }
  }
  for (std::size_t i = 0; i < 16; ++i) CHECK(rec.vector[i] == doctest::Approx(expected[i]).epsilon(1e-5));

  Tracklet copy = tr;
  copy.tracklet_id = 5;
  CHECK(extract_tracklet_embedding(copy, model, 4).vector == rec.vector);

  Tracklet empty = tr;
  empty.frames = Tensor();
  CHECK_THROWS(extract_tracklet_embedding(empty, model, 4));
}

TEST_CASE("embedding archives and reports") {
  std::vector<EmbeddingRecord> recs{{3, 7, 1, {0.5, -1.25}}, {8, 2, 0, {1e-3, 4}}};
  const auto back = embeddings_from_archive(embeddings_to_archive(recs));
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].tracklet_id == recs[i].tracklet_id);
    CHECK(back[i].identity == recs[i].identity);
    CHECK(back[i].camera == recs[i].camera);
    for (std::size_t d = 0; d < 2; ++d) CHECK(back[i].vector[d] == static_cast<float>(recs[i].vector[d]));
  }
  CHECK_THROWS(embeddings_from_archive({}));

  RetrievalReport r;
  r.cmc = {{1, 5}, {0.5, 1.0}, 2, 1};
  r.map.map = 0.75;
  CHECK(report_csv(r) == "rank,value\n1,0.500000\n5,1.000000\nmAP,0.750000\n");
  CHECK(report_summary(r) == "mAP 0.7500  R-1 0.5000  R-5 1.0000  (2 queries, 1 excluded)\n");
}

#include "fgreid/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fgreid::inline FGREID_PRECISION {

namespace {

std::vector<double> normalized(const std::vector<double>& v) {
  double norm = 0;
  for (double x : v) norm += x * x;
  norm = std::max(std::sqrt(norm), 1e-12);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
  return out;
}

std::size_t common_dim(std::span<const std::vector<double>> a, std::span<const std::vector<double>> b) {
  const std::size_t d = !a.empty() ? a.front().size() : (!b.empty() ? b.front().size() : 0);
  for (auto set : {a, b}) {
    for (const auto& v : set) {
      if (v.size() != d) {
        throw ShapeError("embedding dimension mismatch: " + std::to_string(v.size()) + " vs " + std::to_string(d));
      }
    }
  }
  return d;
}

double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

void check_meta(const ScoreMatrix& scores, const RetrievalMeta& meta) {
  if (meta.q_ids.size() != scores.rows || meta.q_cams.size() != scores.rows || meta.g_ids.size() != scores.cols ||
      meta.g_cams.size() != scores.cols || scores.values.size() != scores.rows * scores.cols) {
    throw ShapeError("score matrix and query/gallery metadata disagree in size");
  }
}

/// 1-based positions of the true matches in a query's filtered ranking.
std::vector<std::size_t> hit_positions(const ScoreMatrix& scores, const RetrievalMeta& meta, std::size_t q) {
  std::vector<std::size_t> hits;
  const auto order = ranked_gallery(scores, meta, q);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    if (meta.g_ids[order[pos]] == meta.q_ids[q]) hits.push_back(pos + 1);
  }
  return hits;
}

std::size_t checked_id(Real v, const char* what) {
  if (!(v >= 0) || v != std::floor(v)) {
    throw FormatError(std::string("embedding archive ") + what + " entry is not a nonnegative integer");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

std::vector<std::vector<std::size_t>> evaluation_clips(std::size_t num_frames, std::size_t t, std::size_t max_clips) {
  if (num_frames == 0) throw std::invalid_argument("cannot embed an empty tracklet");
  if (t == 0 || max_clips == 0) throw std::invalid_argument("clip length and clip cap must be positive");
  if (num_frames < t) return {clip_frame_indices(num_frames, t, 0.0)};
  const std::size_t available = num_frames / t;
  const std::size_t used = std::min(available, max_clips);
  std::vector<std::vector<std::size_t>> clips;
  for (std::size_t i = 0; i < used; ++i) {
    const std::size_t chunk = i * available / used;
    std::vector<std::size_t> idx(t);
    std::iota(idx.begin(), idx.end(), chunk * t);
    clips.push_back(std::move(idx));
  }
  return clips;
}

EmbeddingRecord extract_tracklet_embedding(const Tracklet& tracklet, Model& model, std::size_t t,
                                           std::size_t max_clips) {
  if (tracklet.num_frames() == 0) {
    throw std::invalid_argument("tracklet " + std::to_string(tracklet.tracklet_id) + " has no frames");
  }
  std::vector<Tensor> clips;
  for (const auto& idx : evaluation_clips(tracklet.num_frames(), t, max_clips)) {
    clips.push_back(gather_frames(tracklet.frames, idx));
  }
  NoGradGuard no_grad;
  const Tensor f = model.forward(clips, BnMode::infer).f_star.value();
  const std::size_t n = f.dim(0), d = f.dim(1);
  EmbeddingRecord rec{tracklet.tracklet_id, tracklet.identity, tracklet.camera, std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) rec.vector[k] += f[i * d + k];
  }
  for (double& v : rec.vector) v /= static_cast<double>(n);
  return rec;
}

std::vector<EmbeddingRecord> extract_embeddings(const Dataset& dataset, Model& model, std::size_t t,
                                                std::size_t max_clips) {
  std::vector<EmbeddingRecord> out;
  out.reserve(dataset.tracklets.size());
  for (const Tracklet& tr : dataset.tracklets) out.push_back(extract_tracklet_embedding(tr, model, t, max_clips));
  return out;
}

ScoreMatrix similarity_matrix(std::span<const std::vector<double>> queries, std::span<const std::vector<double>> gallery,
                              Metric metric) {
  common_dim(queries, gallery);
  ScoreMatrix s{queries.size(), gallery.size(), std::vector<double>(queries.size() * gallery.size()),
                metric == Metric::dot};
  if (metric == Metric::dot) {
    std::vector<std::vector<double>> gn;
    for (const auto& g : gallery) gn.push_back(normalized(g));
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto qn = normalized(queries[q]);
      for (std::size_t g = 0; g < gallery.size(); ++g) {
        s.values[q * s.cols + g] = std::inner_product(qn.begin(), qn.end(), gn[g].begin(), 0.0);
      }
    }
  } else {
    for (std::size_t q = 0; q < queries.size(); ++q) {
      for (std::size_t g = 0; g < gallery.size(); ++g) s.values[q * s.cols + g] = euclidean(queries[q], gallery[g]);
    }
  }
  return s;
}

RetrievalMeta RetrievalMeta::from_records(std::span<const EmbeddingRecord> queries,
                                          std::span<const EmbeddingRecord> gallery) {
  RetrievalMeta m;
  for (const auto& r : queries) {
    m.q_ids.push_back(r.identity);
    m.q_cams.push_back(r.camera);
  }
  for (const auto& r : gallery) {
    m.g_ids.push_back(r.identity);
    m.g_cams.push_back(r.camera);
  }
  return m;
}

std::vector<std::size_t> ranked_gallery(const ScoreMatrix& scores, const RetrievalMeta& meta, std::size_t q) {
  check_meta(scores, meta);
  std::vector<std::size_t> order;
  for (std::size_t g = 0; g < scores.cols; ++g) {
    if (meta.g_ids[g] == meta.q_ids[q] && meta.g_cams[g] == meta.q_cams[q]) continue;
    order.push_back(g);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.higher_is_better ? scores(q, a) > scores(q, b) : scores(q, a) < scores(q, b);
  });
  return order;
}

CmcResult compute_cmc(const ScoreMatrix& scores, const RetrievalMeta& meta, std::span<const std::size_t> ranks) {
  for (std::size_t r : ranks) {
    if (r == 0) throw std::invalid_argument("CMC ranks are 1-based");
  }
  CmcResult out;
  out.ranks.assign(ranks.begin(), ranks.end());
  std::vector<std::size_t> counts(ranks.size(), 0);
  for (std::size_t q = 0; q < scores.rows; ++q) {
    const auto hits = hit_positions(scores, meta, q);
    if (hits.empty()) {
      ++out.excluded;
      continue;
    }
    ++out.evaluated;
    for (std::size_t i = 0; i < ranks.size(); ++i) counts[i] += hits.front() <= ranks[i] ? 1 : 0;
  }
  for (std::size_t c : counts) {
    out.values.push_back(out.evaluated ? static_cast<double>(c) / static_cast<double>(out.evaluated) : 0.0);
  }
  return out;
}

MapResult compute_map(const ScoreMatrix& scores, const RetrievalMeta& meta) {
  MapResult out;
  for (std::size_t q = 0; q < scores.rows; ++q) {
    const auto hits = hit_positions(scores, meta, q);
    if (hits.empty()) {
      ++out.excluded;
      continue;
    }
    double ap = 0;
    for (std::size_t i = 0; i < hits.size(); ++i) ap += static_cast<double>(i + 1) / static_cast<double>(hits[i]);
    out.average_precision.push_back(ap / static_cast<double>(hits.size()));
  }
  out.evaluated = out.average_precision.size();
  if (out.evaluated) {
    out.map = std::accumulate(out.average_precision.begin(), out.average_precision.end(), 0.0) /
              static_cast<double>(out.evaluated);
  }
  return out;
}

std::vector<double> k_reciprocal_distances(std::span<const double> dist, std::size_t n, const RerankParams& p) {
  if (dist.size() != n * n) throw ShapeError("re-ranking needs an n x n distance matrix");
  if (!(p.k2 >= 1 && p.k1 > p.k2)) throw std::invalid_argument("re-ranking needs k1 > k2 >= 1");
  if (!(p.lambda >= 0 && p.lambda <= 1)) throw std::invalid_argument("re-ranking lambda must lie in [0, 1]");
  if (p.k1 + 1 > n) throw std::invalid_argument("re-ranking k1 must be smaller than the number of points");

  std::vector<std::vector<std::size_t>> rank(n, std::vector<std::size_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(rank[i].begin(), rank[i].end(), 0);
    std::stable_sort(rank[i].begin(), rank[i].end(),
                     [&](std::size_t a, std::size_t b) { return dist[i * n + a] < dist[i * n + b]; });
  }
  // Points among the first k+1 neighbours of i that also hold i among theirs.
  auto reciprocal = [&](std::size_t i, std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t a = 0; a <= k; ++a) {
      const std::size_t cand = rank[i][a];
      for (std::size_t b = 0; b <= k; ++b) {
        if (rank[cand][b] == i) {
          out.push_back(cand);
          break;
        }
      }
    }
    return out;
  };

  const auto half = static_cast<std::size_t>(std::nearbyint(static_cast<double>(p.k1) / 2.0));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto base = reciprocal(i, p.k1);
    std::vector<std::size_t> expanded = base;
    for (std::size_t cand : base) {
      const auto cand_set = reciprocal(cand, half);
      std::size_t common = 0;
      for (std::size_t x : cand_set) common += std::find(base.begin(), base.end(), x) != base.end() ? 1 : 0;
      if (static_cast<double>(common) > 2.0 / 3.0 * static_cast<double>(cand_set.size())) {
        expanded.insert(expanded.end(), cand_set.begin(), cand_set.end());
      }
    }
    std::sort(expanded.begin(), expanded.end());
    expanded.erase(std::unique(expanded.begin(), expanded.end()), expanded.end());
    double total = 0;
    for (std::size_t j : expanded) total += std::exp(-dist[i * n + j]);
    for (std::size_t j : expanded) v[i][j] = std::exp(-dist[i * n + j]) / total;
  }
  if (p.k2 != 1) {
    std::vector<std::vector<double>> qe(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < p.k2; ++a) {
        for (std::size_t j = 0; j < n; ++j) qe[i][j] += v[rank[i][a]][j] / static_cast<double>(p.k2);
      }
    }
    v = std::move(qe);
  }
  std::vector<std::vector<std::size_t>> inverted(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (v[i][j] != 0) inverted[j].push_back(i);
    }
  }
  std::vector<double> out(n * n);
  std::vector<double> shared(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(shared.begin(), shared.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      if (v[i][k] == 0) continue;
      for (std::size_t j : inverted[k]) shared[j] += std::min(v[i][k], v[j][k]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double jaccard = 1.0 - shared[j] / (2.0 - shared[j]);
      out[i * n + j] = jaccard * (1.0 - p.lambda) + dist[i * n + j] * p.lambda;
    }
  }
  return out;
}

ScoreMatrix k_reciprocal_rerank(std::span<const std::vector<double>> queries,
                                std::span<const std::vector<double>> gallery, const RerankParams& params) {
  common_dim(queries, gallery);
  if (params.k1 >= gallery.size()) {
    throw std::invalid_argument("re-ranking k1 = " + std::to_string(params.k1) + " must be below the gallery size " +
                                std::to_string(gallery.size()));
  }
  std::vector<std::vector<double>> all;
  for (const auto& q : queries) all.push_back(normalized(q));
  for (const auto& g : gallery) all.push_back(normalized(g));
  const std::size_t n = all.size();
  std::vector<double> dist(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) dist[i * n + j] = euclidean(all[i], all[j]);
  }
  const auto revised = k_reciprocal_distances(dist, n, params);
  ScoreMatrix s{queries.size(), gallery.size(), std::vector<double>(queries.size() * gallery.size()), false};
  for (std::size_t q = 0; q < s.rows; ++q) {
    for (std::size_t g = 0; g < s.cols; ++g) s.values[q * s.cols + g] = revised[q * n + s.rows + g];
  }
  return s;
}

std::string report_csv(const RetrievalReport& r) {
  std::ostringstream out;
  out << std::setprecision(6) << std::fixed;
  out << "rank,value\n";
  for (std::size_t i = 0; i < r.cmc.ranks.size(); ++i) out << r.cmc.ranks[i] << ',' << r.cmc.values[i] << '\n';
  out << "mAP," << r.map.map << '\n';
  return out.str();
}

std::string report_summary(const RetrievalReport& r) {
  std::ostringstream out;
  out << std::setprecision(4) << std::fixed;
  out << "mAP " << r.map.map;
  for (std::size_t i = 0; i < r.cmc.ranks.size(); ++i) out << "  R-" << r.cmc.ranks[i] << ' ' << r.cmc.values[i];
  out << "  (" << r.cmc.evaluated << " queries, " << r.cmc.excluded << " excluded"
      << (r.reranked ? ", re-ranked" : "") << ")\n";
  return out.str();
}

TensorList embeddings_to_archive(std::span<const EmbeddingRecord> records) {
  const std::size_t n = records.size();
  const std::size_t d = n ? records.front().vector.size() : 0;
  Tensor emb({n, d}), tids({n}), ids({n}), cams({n});
  constexpr std::size_t kExactLimit = std::size_t{1} << 24;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[i];
    if (r.vector.size() != d) throw ShapeError("embedding records differ in dimension");
    if (r.tracklet_id >= kExactLimit || r.identity >= kExactLimit || r.camera >= kExactLimit) {
      throw std::out_of_range("ids must stay below 2^24 to be stored exactly");
    }
    for (std::size_t k = 0; k < d; ++k) emb[i * d + k] = static_cast<Real>(r.vector[k]);
    tids[i] = static_cast<Real>(r.tracklet_id);
    ids[i] = static_cast<Real>(r.identity);
    cams[i] = static_cast<Real>(r.camera);
  }
  return {{"embeddings", emb}, {"tracklet_ids", tids}, {"identities", ids}, {"cameras", cams}};
}

std::vector<EmbeddingRecord> embeddings_from_archive(const TensorList& tensors) {
  const Tensor& emb = find_tensor(tensors, "embeddings");
  const Tensor& tids = find_tensor(tensors, "tracklet_ids");
  const Tensor& ids = find_tensor(tensors, "identities");
  const Tensor& cams = find_tensor(tensors, "cameras");
  if (emb.rank() != 2) throw FormatError("embeddings must be a (n, d) tensor");
  const std::size_t n = emb.dim(0), d = emb.dim(1);
  for (const Tensor* t : {&tids, &ids, &cams}) {
    if (t->shape() != Shape{n}) throw FormatError("id tensors must have one entry per embedding");
  }
  std::vector<EmbeddingRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].tracklet_id = checked_id(tids[i], "tracklet_ids");
    out[i].identity = checked_id(ids[i], "identities");
    out[i].camera = checked_id(cams[i], "cameras");
    out[i].vector.assign(emb.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                         emb.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return out;
}

}  // namespace fgreid::inline FGREID_PRECISION

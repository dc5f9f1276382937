#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fgreid/archive.hpp"
#include "fgreid/dataset.hpp"
#include "fgreid/model.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct EmbeddingRecord {
  std::size_t tracklet_id = 0;
  std::size_t identity = 0;
  std::size_t camera = 0;
  std::vector<double> vector;
};

/// Frame indices of the evaluation clips: consecutive non-overlapping runs of
/// t frames, thinned evenly to at most `max_clips`. A tracklet shorter than t
/// yields one clip repeated cyclically.
std::vector<std::vector<std::size_t>> evaluation_clips(std::size_t num_frames, std::size_t t, std::size_t max_clips);

/// Mean f* over the evaluation clips, inference statistics throughout.
EmbeddingRecord extract_tracklet_embedding(const Tracklet& tracklet, Model& model, std::size_t t,
                                           std::size_t max_clips = 32);
std::vector<EmbeddingRecord> extract_embeddings(const Dataset& dataset, Model& model, std::size_t t,
                                                std::size_t max_clips = 32);

/// "dot" ranks by cosine similarity (both sides l2-normalised first);
/// "euclidean" by plain Euclidean distance.
enum class Metric { dot, euclidean };

/// Dense row-major (queries x gallery) score table.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  bool higher_is_better = true;

  double operator()(std::size_t q, std::size_t g) const { return values[q * cols + g]; }
};

ScoreMatrix similarity_matrix(std::span<const std::vector<double>> queries, std::span<const std::vector<double>> gallery,
                              Metric metric);

/// Identity and camera of every query and gallery entry.
struct RetrievalMeta {
  std::vector<std::size_t> q_ids, g_ids, q_cams, g_cams;

  static RetrievalMeta from_records(std::span<const EmbeddingRecord> queries, std::span<const EmbeddingRecord> gallery);
};

struct CmcResult {
  std::vector<std::size_t> ranks;
  std::vector<double> values;  // fraction of evaluated queries matched within each rank
  std::size_t evaluated = 0;
  std::size_t excluded = 0;    // queries left with no valid match
};

struct MapResult {
  double map = 0;
  std::vector<double> average_precision;  // per evaluated query
  std::size_t evaluated = 0;
  std::size_t excluded = 0;
};

/// Gallery order for one query after dropping same-identity same-camera
/// entries; ties keep gallery order.
std::vector<std::size_t> ranked_gallery(const ScoreMatrix& scores, const RetrievalMeta& meta, std::size_t query);

CmcResult compute_cmc(const ScoreMatrix& scores, const RetrievalMeta& meta, std::span<const std::size_t> ranks);
MapResult compute_map(const ScoreMatrix& scores, const RetrievalMeta& meta);

struct RerankParams {
  std::size_t k1 = 20;
  std::size_t k2 = 6;
  double lambda = 0.3;
};

/// Revised distances over the joint set of n points given their (n x n)
/// original distances: lambda * d + (1 - lambda) * Jaccard distance of the
/// k-reciprocal neighbourhoods.
std::vector<double> k_reciprocal_distances(std::span<const double> distances, std::size_t n, const RerankParams& params);

/// (queries x gallery) re-ranked distances. Original distances are Euclidean
/// between l2-normalised embeddings, which orders like cosine similarity.
ScoreMatrix k_reciprocal_rerank(std::span<const std::vector<double>> queries,
                                std::span<const std::vector<double>> gallery, const RerankParams& params);

struct RetrievalReport {
  CmcResult cmc;
  MapResult map;
  bool reranked = false;
};

/// "rank,value" rows followed by a "mAP" row.
std::string report_csv(const RetrievalReport& report);
std::string report_summary(const RetrievalReport& report);

/// Archive layout: "embeddings" (n, d) plus "tracklet_ids", "identities" and
/// "cameras", each (n) and stored as float values.
TensorList embeddings_to_archive(std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> embeddings_from_archive(const TensorList& tensors);

}  // namespace fgreid::inline FGREID_PRECISION

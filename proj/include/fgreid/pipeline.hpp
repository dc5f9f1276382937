#pragma once

#include <filesystem>
#include <span>

#include "fgreid/config.hpp"

namespace fgreid::inline FGREID_PRECISION {

/// CMC at the configured ranks and mAP, optionally on re-ranked distances.
RetrievalReport evaluate_records(std::span<const EmbeddingRecord> queries, std::span<const EmbeddingRecord> gallery,
                                 const EvalConfig& config);

struct ExperimentResult {
  TrainResult training;
  std::vector<EmbeddingRecord> queries;
  std::vector<EmbeddingRecord> gallery;
  RetrievalReport report;
};

/// Train on `data.train`, embed the query and gallery clips, evaluate.
ExperimentResult run_experiment(const HoldoutSplit& data, const RunConfig& config, const TrainOptions& options = {});

/// Rebuilds a trained model; the class count is read from the checkpoint.
Model load_model(const std::filesystem::path& checkpoint, const RunConfig& config, ClassCenters* centers = nullptr);

}  // namespace fgreid::inline FGREID_PRECISION

#include "fgreid/pipeline.hpp"

namespace fgreid::inline FGREID_PRECISION {

RetrievalReport evaluate_records(std::span<const EmbeddingRecord> queries, std::span<const EmbeddingRecord> gallery,
                                 const EvalConfig& config) {
  std::vector<std::vector<double>> qv, gv;
  for (const auto& r : queries) qv.push_back(r.vector);
  for (const auto& r : gallery) gv.push_back(r.vector);
  const ScoreMatrix scores = config.rerank ? k_reciprocal_rerank(qv, gv, config.rerank_params)
                                           : similarity_matrix(qv, gv, config.metric);
  const RetrievalMeta meta = RetrievalMeta::from_records(queries, gallery);
  return {compute_cmc(scores, meta, config.ranks), compute_map(scores, meta), config.rerank};
}

ExperimentResult run_experiment(const HoldoutSplit& data, const RunConfig& config, const TrainOptions& options) {
  ExperimentResult r{train_loop(data.train, config.train, options), {}, {}, {}};
  r.queries = extract_embeddings(data.query, r.training.model, config.train.batch.t, config.eval.max_clips);
  r.gallery = extract_embeddings(data.gallery, r.training.model, config.train.batch.t, config.eval.max_clips);
  r.report = evaluate_records(r.queries, r.gallery, config.eval);
  return r;
}

Model load_model(const std::filesystem::path& checkpoint, const RunConfig& config, ClassCenters* centers) {
  const TensorList tensors = read_archive(checkpoint);
  const Tensor& c = find_tensor(tensors, "centers");
  if (c.rank() != 2 || c.dim(0) == 0) throw ShapeError("checkpoint centres must be a non-empty (classes, dim) tensor");
  HeadConfig head = config.train.head;
  head.num_classes = c.dim(0);
  Rng rng(config.train.seed);
  Model model = Model::init(head, rng);
  if (centers) *centers = ClassCenters::zeros(c.dim(0), c.dim(1), config.train.center_update_rate);
  restore_checkpoint(tensors, model, centers);
  return model;
}

}  // namespace fgreid::inline FGREID_PRECISION

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fgreid/archive.hpp"
#include "fgreid/dataset.hpp"
#include "fgreid/losses.hpp"
#include "fgreid/model.hpp"

namespace fgreid::inline FGREID_PRECISION {

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  std::size_t epochs = 120;
  double base_lr = 3.5e-4;
  std::size_t warmup_epochs = 10;
  std::vector<std::size_t> milestones = {40, 70};
  double decay = 0.1;
  std::uint64_t seed = 1;

  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;     // Adam first moment; SGD momentum
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 5e-4;

  /// Batches per epoch; 0 means one pass over the identities (num_ids / p).
  std::size_t iterations_per_epoch = 0;
  double center_update_rate = 0.5;

  LossWeights loss;
  BatchSpec batch;
  HeadConfig head;

  void validate() const;
};

/// Learning rate for a 1-based epoch: linear ramp base * e / warmup during
/// warmup, then base times decay per milestone already reached.
double learning_rate(const TrainConfig& config, std::size_t epoch);

class Optimizer {
 public:
  Optimizer(std::vector<Var> params, const TrainConfig& config);

  void zero_grad();
  void step(double lr);
  std::size_t steps() const { return steps_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  OptimizerKind kind_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t steps_ = 0;
};

/// Loss terms for one batch, following the enabled set in `weights` and the
/// predictions the head configuration produces.
TotalLoss batch_loss(const HeadBatchOutput& out, Labels labels, const ClassCenters& centers,
                     const LossWeights& weights);

struct StepResult {
  double total = 0;
  std::vector<LossTerm> breakdown;
};

/// Forward in training mode, one optimizer step, then the centre update.
/// Throws std::runtime_error naming the term when any loss is non-finite.
StepResult train_step(const Batch& batch, Model& model, ClassCenters& centers, Optimizer& optimizer,
                      const TrainConfig& config, double lr);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  std::vector<LossTerm> terms;  // batch means
  double total = 0;
};

struct TrainResult {
  Model model;
  ClassCenters centers;
  std::vector<EpochMetrics> log;
};

struct TrainOptions {
  /// When set, the checkpoint and metrics log are rewritten here after every epoch.
  std::filesystem::path out_dir;
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline constexpr const char* kCheckpointFile = "checkpoint.fgrd";
inline constexpr const char* kMetricsFile = "metrics.csv";

/// Builds the model from `config.head` (num_classes taken from the dataset).
TrainResult train_loop(const Dataset& dataset, const TrainConfig& config, const TrainOptions& options = {});

/// Parameters, batch-norm running statistics and class centres.
TensorList checkpoint_tensors(Model& model, const ClassCenters* centers);
/// Restores into a model of matching configuration; every tensor must be present.
void restore_checkpoint(const TensorList& tensors, Model& model, ClassCenters* centers);

std::string metrics_csv(const std::vector<EpochMetrics>& log);

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

}  // namespace fgreid::inline FGREID_PRECISION

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgreid/retrieval.hpp"
#include "fgreid/trainer.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct EvalConfig {
  Metric metric = Metric::dot;
  std::vector<std::size_t> ranks = {1, 5, 10, 20};
  bool rerank = false;
  RerankParams rerank_params;
  std::size_t max_clips = 32;
};

/// Everything a run needs besides data. The class count is not configured;
/// it follows the training set.
struct RunConfig {
  TrainConfig train;
  EvalConfig eval;
  std::size_t input_height = 250;
  std::size_t input_width = 150;

  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Preset names: "mars-like" (video, t=4, P=32, K=5), "image-like" (t=1,
/// P=32, K=4) and "desk" (toy backbone on 32x32 synthetic frames).
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// Flat "key = value" lines; '#' starts a comment. A "preset" key may appear
/// only before any other key and resets everything to that preset.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Applies one "key=value" assignment.
void set_config_value(RunConfig& config, const std::string& assignment);
/// Every key, one per line, in a stable order.
std::string serialize_run_config(const RunConfig& config);
std::vector<std::string> config_keys();

/// Named architecture and loss ablations, applied on top of a config.
std::vector<std::string> ablation_rows();
void apply_ablation(RunConfig& config, const std::string& row);

std::string to_string(Metric metric);
Metric parse_metric(const std::string& name);

}  // namespace fgreid::inline FGREID_PRECISION

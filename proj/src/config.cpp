#include "fgreid/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace fgreid::inline FGREID_PRECISION {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("key '" + key + "': cannot parse '" + text + "' as a number");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError("key '" + key + "': value must be finite");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  return out;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FGREID_SIZE_KEY(key, field)                                                                \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = parse_number<std::size_t>(key, v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define FGREID_DOUBLE_KEY(key, field)                                                         \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = parse_number<double>(key, v); }, \
      [](const RunConfig& c) { return format_double(c.field); }}
#define FGREID_BOOL_KEY(key, field)                                                   \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = parse_bool(key, v); }, \
      [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define FGREID_LIST_KEY(key, field)                                                   \
  Key{key, [](RunConfig& c, const std::string& v) { c.field = parse_list(key, v); }, \
      [](const RunConfig& c) { return format_list(c.field); }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      FGREID_SIZE_KEY("head.c_backbone", train.head.c_backbone),
      FGREID_SIZE_KEY("head.c_star", train.head.c_star),
      FGREID_BOOL_KEY("head.use_channel_weights", train.head.use_channel_weights),
      FGREID_BOOL_KEY("head.use_nonlocal", train.head.use_nonlocal),
      FGREID_BOOL_KEY("head.distinct_kq", train.head.distinct_kq),
      FGREID_BOOL_KEY("head.use_gfm", train.head.use_gfm),
      FGREID_BOOL_KEY("head.use_fgm", train.head.use_fgm),
      FGREID_SIZE_KEY("batch.p", train.batch.p),
      FGREID_SIZE_KEY("batch.k", train.batch.k),
      FGREID_SIZE_KEY("batch.t", train.batch.t),
      FGREID_DOUBLE_KEY("loss.beta_mix", train.loss.beta_mix),
      FGREID_DOUBLE_KEY("loss.w_var", train.loss.w_var),
      FGREID_DOUBLE_KEY("loss.w_center", train.loss.w_center),
      FGREID_DOUBLE_KEY("loss.w_kl", train.loss.w_kl),
      FGREID_DOUBLE_KEY("loss.w_sr", train.loss.w_sr),
      FGREID_DOUBLE_KEY("loss.smoothing_eps", train.loss.smoothing_eps),
      FGREID_DOUBLE_KEY("loss.triplet_margin", train.loss.triplet_margin),
      FGREID_DOUBLE_KEY("loss.sr_margin", train.loss.sr_margin),
      FGREID_DOUBLE_KEY("loss.osm_alpha", train.loss.osm_alpha),
      FGREID_DOUBLE_KEY("loss.osm_sigma", train.loss.osm_sigma),
      FGREID_DOUBLE_KEY("loss.osm_lambda", train.loss.osm_lambda),
      FGREID_BOOL_KEY("loss.kl_swap", train.loss.kl_swap),
      FGREID_BOOL_KEY("loss.use_ce", train.loss.use_ce),
      FGREID_BOOL_KEY("loss.use_triplet", train.loss.use_triplet),
      FGREID_BOOL_KEY("loss.use_osm", train.loss.use_osm),
      FGREID_BOOL_KEY("loss.use_var", train.loss.use_var),
      FGREID_BOOL_KEY("loss.use_center", train.loss.use_center),
      FGREID_BOOL_KEY("loss.use_kl", train.loss.use_kl),
      FGREID_BOOL_KEY("loss.use_sr", train.loss.use_sr),
      FGREID_SIZE_KEY("train.epochs", train.epochs),
      FGREID_DOUBLE_KEY("train.base_lr", train.base_lr),
      FGREID_SIZE_KEY("train.warmup_epochs", train.warmup_epochs),
      FGREID_LIST_KEY("train.milestones", train.milestones),
      FGREID_DOUBLE_KEY("train.decay", train.decay),
      Key{"train.seed",
          [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("train.seed", v); },
          [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      Key{"train.optimizer",
          [](RunConfig& c, const std::string& v) {
            try {
              c.train.optimizer = parse_optimizer(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("key 'train.optimizer': ") + e.what());
            }
          },
          [](const RunConfig& c) { return to_string(c.train.optimizer); }},
      FGREID_DOUBLE_KEY("train.beta1", train.beta1),
      FGREID_DOUBLE_KEY("train.beta2", train.beta2),
      FGREID_DOUBLE_KEY("train.adam_eps", train.adam_eps),
      FGREID_DOUBLE_KEY("train.weight_decay", train.weight_decay),
      FGREID_SIZE_KEY("train.iterations_per_epoch", train.iterations_per_epoch),
      FGREID_DOUBLE_KEY("train.center_update_rate", train.center_update_rate),
      Key{"eval.metric",
          [](RunConfig& c, const std::string& v) {
            try {
              c.eval.metric = parse_metric(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("key 'eval.metric': ") + e.what());
            }
          },
          [](const RunConfig& c) { return to_string(c.eval.metric); }},
      FGREID_LIST_KEY("eval.ranks", eval.ranks),
      FGREID_BOOL_KEY("eval.rerank", eval.rerank),
      FGREID_SIZE_KEY("eval.k1", eval.rerank_params.k1),
      FGREID_SIZE_KEY("eval.k2", eval.rerank_params.k2),
      FGREID_DOUBLE_KEY("eval.lambda", eval.rerank_params.lambda),
      FGREID_SIZE_KEY("eval.max_clips", eval.max_clips),
      FGREID_SIZE_KEY("input.height", input_height),
      FGREID_SIZE_KEY("input.width", input_width),
  };
  return table;
}

#undef FGREID_SIZE_KEY
#undef FGREID_DOUBLE_KEY
#undef FGREID_BOOL_KEY
#undef FGREID_LIST_KEY

const Key& find_key(const std::string& name) {
  for (const Key& k : keys()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

std::pair<std::string, std::string> split_assignment(const std::string& line) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
  return {trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1))};
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  if (eval.ranks.empty()) throw ConfigError("eval.ranks must list at least one rank");
  for (std::size_t r : eval.ranks) {
    if (r == 0) throw ConfigError("eval.ranks are 1-based");
  }
  if (!(eval.rerank_params.k2 >= 1 && eval.rerank_params.k1 > eval.rerank_params.k2)) {
    throw ConfigError("eval.k1 > eval.k2 >= 1 required");
  }
  if (!(eval.rerank_params.lambda >= 0 && eval.rerank_params.lambda <= 1)) {
    throw ConfigError("eval.lambda must lie in [0, 1]");
  }
  if (eval.max_clips == 0) throw ConfigError("eval.max_clips must be positive");
  if (input_height < kToyBackboneMinInput || input_width < kToyBackboneMinInput) {
    throw ConfigError("input must be at least " + std::to_string(kToyBackboneMinInput) + " pixels per side");
  }
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "mars-like") return c;
  if (name == "image-like") {
    c.train.batch = {32, 4, 1};
    return c;
  }
  if (name == "desk") {
    c.train.head.c_backbone = 128;
    c.train.head.c_star = 64;
    c.train.batch = {8, 2, 4};
    c.train.epochs = 50;
    c.train.base_lr = 3e-3;
    c.train.warmup_epochs = 5;
    c.train.milestones = {30, 40};
    c.train.iterations_per_epoch = 6;
    c.input_height = 32;
    c.input_width = 32;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected mars-like, image-like or desk)");
}

std::vector<std::string> preset_names() { return {"mars-like", "image-like", "desk"}; }

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  bool seen_key = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    try {
      const auto [key, value] = split_assignment(line);
      if (key == "preset") {
        if (seen_key) throw ConfigError("'preset' must come before every other key");
        base = preset(value);
      } else {
        find_key(key).set(base, value);
      }
      seen_key = true;
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void set_config_value(RunConfig& config, const std::string& assignment) {
  const auto [key, value] = split_assignment(assignment);
  if (key == "preset") throw ConfigError("'preset' cannot be combined with individual overrides here");
  find_key(key).set(config, value);
}

std::string serialize_run_config(const RunConfig& config) {
  std::string out;
  for (const Key& k : keys()) out += k.name + " = " + k.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Key& k : keys()) out.push_back(k.name);
  return out;
}

std::vector<std::string> ablation_rows() {
  return {"full",   "wo-s-channel", "wo-nonlocal", "kqv",      "only-gfm",  "wo-gfm",  "wo-fgm",  "wo-ce",
          "wo-triplet", "wo-osm",   "wo-center",   "wo-var",   "wo-sr",     "wo-kl"};
}

void apply_ablation(RunConfig& c, const std::string& row) {
  HeadConfig& h = c.train.head;
  LossWeights& l = c.train.loss;
  if (row == "full") {
  } else if (row == "wo-s-channel") {
    h.use_channel_weights = false;
  } else if (row == "wo-nonlocal") {
    h.use_nonlocal = false;
  } else if (row == "kqv") {
    h.distinct_kq = true;
  } else if (row == "only-gfm") {
    h.use_fgm = false;
    h.use_nonlocal = false;
  } else if (row == "wo-gfm") {
    h.use_gfm = false;
  } else if (row == "wo-fgm") {
    h.use_fgm = false;
  } else if (row == "wo-ce") {
    l.use_ce = false;
  } else if (row == "wo-triplet") {
    l.use_triplet = false;
  } else if (row == "wo-osm") {
    l.use_osm = false;
  } else if (row == "wo-center") {
    l.use_center = false;
  } else if (row == "wo-var") {
    l.use_var = false;
  } else if (row == "wo-sr") {
    l.use_sr = false;
  } else if (row == "wo-kl") {
    l.use_kl = false;
  } else {
    throw ConfigError("unknown ablation row '" + row + "'");
  }
}

std::string to_string(Metric metric) { return metric == Metric::dot ? "dot" : "euclidean"; }

Metric parse_metric(const std::string& name) {
  if (name == "dot" || name == "cosine") return Metric::dot;
  if (name == "euclidean") return Metric::euclidean;
  throw std::invalid_argument("unknown metric '" + name + "' (expected dot or euclidean)");
}

}  // namespace fgreid::inline FGREID_PRECISION

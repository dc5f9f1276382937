#include "fgreid/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fgreid::inline FGREID_PRECISION {

void TrainConfig::validate() const {
  if (!(base_lr >= 0) || !std::isfinite(base_lr)) throw std::invalid_argument("base_lr must be finite and >= 0");
  if (!(decay > 0 && decay <= 1)) throw std::invalid_argument("decay must lie in (0, 1]");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) throw std::invalid_argument("milestones must be strictly increasing");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw std::invalid_argument("adam_eps must be > 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(center_update_rate > 0 && center_update_rate <= 1)) {
    throw std::invalid_argument("center_update_rate must lie in (0, 1]");
  }
  loss.validate();
  batch.validate();
  head.validate();
}

double learning_rate(const TrainConfig& config, std::size_t epoch) {
  if (epoch == 0) throw std::invalid_argument("epochs are counted from 1");
  if (epoch <= config.warmup_epochs) {
    return config.base_lr * static_cast<double>(epoch) / static_cast<double>(config.warmup_epochs);
  }
  double lr = config.base_lr;
  for (std::size_t m : config.milestones) {
    if (epoch > m) lr *= config.decay;
  }
  return lr;
}

Optimizer::Optimizer(std::vector<Var> params, const TrainConfig& config)
    : params_(std::move(params)),
      kind_(config.optimizer),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_eps),
      weight_decay_(config.weight_decay) {
  for (const Var& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("optimizer given a tensor that is not a parameter");
    m_.emplace_back(p.shape());
    if (kind_ == OptimizerKind::adam) v_.emplace_back(p.shape());
  }
}

void Optimizer::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

void Optimizer::step(double lr) {
  ++steps_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& value = params_[i].mutable_value();
    const Tensor& grad = params_[i].node()->grad;
    const bool has_grad = grad.size() == value.size();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = (has_grad ? static_cast<double>(grad[j]) : 0.0) + weight_decay_ * value[j];
      double update;
      if (kind_ == OptimizerKind::adam) {
        m_[i][j] = static_cast<Real>(beta1_ * m_[i][j] + (1 - beta1_) * g);
        v_[i][j] = static_cast<Real>(beta2_ * v_[i][j] + (1 - beta2_) * g * g);
        update = (m_[i][j] / bias1) / (std::sqrt(v_[i][j] / bias2) + eps_);
      } else {
        m_[i][j] = static_cast<Real>(beta1_ * m_[i][j] + g);
        update = m_[i][j];
      }
      value[j] = static_cast<Real>(value[j] - lr * update);
    }
  }
}

TotalLoss batch_loss(const HeadBatchOutput& out, Labels labels, const ClassCenters& centers,
                     const LossWeights& w) {
  LossComponents c;
  const bool both = out.y1.defined() && out.y2.defined();
  if (w.use_ce) {
    c.ce = both ? ce_avg(out.y1, out.y2, labels, w.smoothing_eps)
                : ce_label_smooth(out.y1.defined() ? out.y1 : out.y2, labels, w.smoothing_eps);
  }
  if (w.use_triplet) c.triplet = batch_hard_triplet(out.f_star, labels, w.triplet_margin);
  if (w.use_osm) c.osm = osm_cl(out.f_star, labels, centers, {w.osm_alpha, w.osm_sigma, w.osm_lambda});
  if (w.use_var) c.var = variance_reg(out.f_star, labels);
  if (w.use_center) c.center = center_loss(out.f_star, labels, centers);
  if (w.use_kl && both) c.kl = kl_consistency(out.y1, out.y2, w.kl_swap);
  if (w.use_sr && both) c.sr = satisfied_rank(out.y1, out.y2, labels, w.sr_margin);
  return total_loss(c, w);
}

StepResult train_step(const Batch& batch, Model& model, ClassCenters& centers, Optimizer& optimizer,
                      const TrainConfig& config, double lr) {
  optimizer.zero_grad();
  Tensor f_star;
  StepResult result;
  {
    const HeadBatchOutput out = model.forward(batch.clips, BnMode::train);
    const TotalLoss loss = batch_loss(out, batch.labels, centers, config.loss);
    for (const LossTerm& term : loss.breakdown) {
      if (!std::isfinite(term.value)) {
        throw std::runtime_error("non-finite loss term '" + term.name + "' (value " + std::to_string(term.value) +
                                 ", weight " + std::to_string(term.weight) + ")");
      }
    }
    if (!std::isfinite(loss.value())) throw std::runtime_error("non-finite total loss");
    backward(loss.total);
    f_star = out.f_star.value();
    result.total = loss.value();
    result.breakdown = loss.breakdown;
  }
  optimizer.step(lr);
  update_centers(f_star, batch.labels, centers);
  return result;
}

namespace {

std::vector<Var> parameters_of(const Model& model) {
  std::vector<Var> out;
  for (const auto& [name, var] : model.named_parameters()) out.push_back(var);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

TrainResult train_loop(const Dataset& dataset, const TrainConfig& config, const TrainOptions& options) {
  dataset.validate();
  TrainConfig cfg = config;
  cfg.head.num_classes = dataset.num_classes();
  cfg.validate();

  Rng rng(cfg.seed);
  TrainResult result{Model::init(cfg.head, rng), {}, {}};
  result.centers = ClassCenters::zeros(cfg.head.num_classes, cfg.head.embedding_dim(), cfg.center_update_rate);
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  Optimizer optimizer(parameters_of(result.model), cfg);
  const std::size_t iterations =
      cfg.iterations_per_epoch > 0 ? cfg.iterations_per_epoch : std::max<std::size_t>(1, cfg.head.num_classes / cfg.batch.p);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.lr = learning_rate(cfg, epoch);
    for (std::size_t it = 0; it < iterations; ++it) {
      const Batch batch = sample_pk_batch(dataset, cfg.batch, rng);
      const StepResult step = train_step(batch, result.model, result.centers, optimizer, cfg, metrics.lr);
      if (metrics.terms.empty()) {
        metrics.terms = step.breakdown;
        for (LossTerm& t : metrics.terms) t.value = t.contribution = 0;
      }
      for (std::size_t i = 0; i < step.breakdown.size(); ++i) {
        metrics.terms[i].value += step.breakdown[i].value / static_cast<double>(iterations);
        metrics.terms[i].contribution += step.breakdown[i].contribution / static_cast<double>(iterations);
      }
      metrics.total += step.total / static_cast<double>(iterations);
    }
    result.log.push_back(metrics);
    if (!options.out_dir.empty()) {
      write_archive(checkpoint_tensors(result.model, &result.centers), options.out_dir / kCheckpointFile);
      write_text(options.out_dir / kMetricsFile, metrics_csv(result.log));
    }
    if (options.on_epoch) options.on_epoch(metrics);
  }
  if (!options.out_dir.empty() && cfg.epochs == 0) {
    write_archive(checkpoint_tensors(result.model, &result.centers), options.out_dir / kCheckpointFile);
    write_text(options.out_dir / kMetricsFile, metrics_csv(result.log));
  }
  return result;
}

TensorList checkpoint_tensors(Model& model, const ClassCenters* centers) {
  TensorList out;
  for (const auto& [name, var] : model.named_parameters()) out.push_back({name, var.value()});
  for (const auto& [name, buffer] : model.named_buffers()) out.push_back({name, *buffer});
  if (centers) out.push_back({"centers", centers->centers});
  return out;
}

void restore_checkpoint(const TensorList& tensors, Model& model, ClassCenters* centers) {
  auto load = [&](const std::string& name, Tensor& dst) {
    const Tensor& src = find_tensor(tensors, name);
    if (src.shape() != dst.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + to_string(src.shape()) + ", model expects " +
                       to_string(dst.shape()));
    }
    dst = src;
  };
  for (auto& [name, var] : model.named_parameters()) {
    Var v = var;
    load(name, v.mutable_value());
  }
  for (auto& [name, buffer] : model.named_buffers()) load(name, *buffer);
  if (centers) {
    const Tensor& c = find_tensor(tensors, "centers");
    if (c.rank() != 2) throw ShapeError("checkpoint centres must be rank 2");
    centers->centers = c;
  }
}

std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "epoch,lr";
  if (!log.empty()) {
    for (const LossTerm& t : log.front().terms) out << ',' << t.name;
  }
  out << ",total\n";
  for (const EpochMetrics& m : log) {
    out << m.epoch << ',' << m.lr;
    for (const LossTerm& t : m.terms) out << ',' << t.value;
    out << ',' << m.total << '\n';
  }
  return out.str();
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected adam or sgd)");
}

}  // namespace fgreid::inline FGREID_PRECISION

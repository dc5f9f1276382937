#include "grad_suite.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>

#include "fgreid/grad_check.hpp"
#include "fgreid/head.hpp"
#include "fgreid/losses.hpp"
#include "fgreid/ops.hpp"

namespace fgreid_testing {

namespace {

using namespace fgreid;

struct Instance {
  std::function<Var()> loss;
  std::vector<Var> inputs;
};

using Generator = std::function<Instance(Rng&)>;

Var param(const Shape& shape, Rng& rng, double stddev = 1.0) { return Var::parameter(normal_tensor(shape, stddev, rng)); }

/// Scalar summary of a tensor output that touches every element with a
/// distinct weight.
Var contract(const Var& out) {
  Tensor w(out.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.5 + 0.75 * std::sin(1.3 * static_cast<double>(i) + 0.7);
  return sum(mul(out, constant(w)));
}

ProjectionParams projection(std::size_t c_in, std::size_t c_out, Rng& rng) {
  return {param({c_in, c_out}, rng, 1.0 / std::sqrt(static_cast<double>(c_in))), param({c_out}, rng, 0.1)};
}

std::vector<std::size_t> pk_labels(std::size_t p, std::size_t k) {
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < p; ++i) labels.insert(labels.end(), k, i);
  return labels;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> labels(n);
  for (auto& l : labels) l = rng.index(classes);
  return labels;
}

void append(std::vector<Var>& out, const ProjectionParams& p) {
  out.push_back(p.weight);
  out.push_back(p.bias);
}

/// Two identities with two clips each, t = 2. Parameters are redrawn at a
/// common scale so every path carries signal.
Instance whole_head(Rng& rng, std::size_t h, std::size_t w, bool with_loss) {
  HeadConfig cfg;
  cfg.c_backbone = 4;
  cfg.c_star = 4;
  cfg.num_classes = 2;
  auto params = std::make_shared<HeadParameters>(HeadParameters::init(cfg, rng));
  for (auto& [name, v] : params->named_parameters()) {
    Var p = v;
    p.mutable_value() = normal_tensor(p.shape(), 0.5, rng);
  }
  auto clips = std::make_shared<std::vector<ClipFeatures>>();
  std::vector<Var> inputs;
  for (int i = 0; i < 4; ++i) {
    clips->push_back({param({2, h, w, 4}, rng), param({2, h, w, 4}, rng)});
    inputs.push_back(clips->back().coarse);
    inputs.push_back(clips->back().fine);
  }
  for (auto& [name, v] : params->named_parameters()) inputs.push_back(v);
  auto labels = std::make_shared<std::vector<std::size_t>>(pk_labels(2, 2));
  auto centers =
      std::make_shared<ClassCenters>(ClassCenters{normal_tensor({2, cfg.embedding_dim()}, 1.0, rng), 0.5});
  return Instance{[=] {
                    const HeadBatchOutput out = head_forward(*clips, *params, cfg, BnMode::train);
                    if (!with_loss) return add(contract(out.f_star), add(contract(out.y1), contract(out.y2)));
                    const LossWeights lw;
                    LossComponents c{ce_avg(out.y1, out.y2, *labels, lw.smoothing_eps),
                                     batch_hard_triplet(out.f_star, *labels, lw.triplet_margin),
                                     osm_cl(out.f_star, *labels, *centers, {}),
                                     variance_reg(out.f_star, *labels),
                                     center_loss(out.f_star, *labels, *centers),
                                     kl_consistency(out.y1, out.y2),
                                     satisfied_rank(out.y1, out.y2, *labels, lw.sr_margin)};
                    return total_loss(c, lw).total;
                  },
                  inputs};
}

const std::map<std::string, Generator>& generators() {
  static const std::map<std::string, Generator> table = {
      {"loss.ce_label_smooth",
       [](Rng& rng) {
         Var logits = param({4, 5}, rng);
         auto labels = std::make_shared<std::vector<std::size_t>>(random_labels(4, 5, rng));
         return Instance{[=] { return ce_label_smooth(softmax_axis(logits, 1), *labels, 0.1); }, {logits}};
       }},
      {"loss.ce_avg",
       [](Rng& rng) {
         Var a = param({4, 5}, rng), b = param({4, 5}, rng);
         auto labels = std::make_shared<std::vector<std::size_t>>(random_labels(4, 5, rng));
         return Instance{[=] { return ce_avg(softmax_axis(a, 1), softmax_axis(b, 1), *labels, 0.1); }, {a, b}};
       }},
      {"loss.batch_hard_triplet",
       [](Rng& rng) {
         Var x = param({6, 3}, rng, 0.5);
         auto labels = std::make_shared<std::vector<std::size_t>>(pk_labels(3, 2));
         return Instance{[=] { return batch_hard_triplet(x, *labels, 0.3); }, {x}};
       }},
      {"loss.center",
       [](Rng& rng) {
         Var x = param({6, 3}, rng);
         auto centers = std::make_shared<ClassCenters>(ClassCenters{normal_tensor({3, 3}, 1.0, rng), 0.5});
         auto labels = std::make_shared<std::vector<std::size_t>>(pk_labels(3, 2));
         return Instance{[=] { return center_loss(x, *labels, *centers); }, {x}};
       }},
      {"loss.osm_cl",
       [](Rng& rng) {
         Var x = param({6, 3}, rng);
         auto centers = std::make_shared<ClassCenters>(ClassCenters{normal_tensor({3, 3}, 1.0, rng), 0.5});
         auto labels = std::make_shared<std::vector<std::size_t>>(pk_labels(3, 2));
         return Instance{[=] { return osm_cl(x, *labels, *centers, {}); }, {x}};
       }},
      {"loss.variance_reg",
       [](Rng& rng) {
         Var x = param({6, 3}, rng);
         auto labels = std::make_shared<std::vector<std::size_t>>(pk_labels(3, 2));
         return Instance{[=] { return variance_reg(x, *labels); }, {x}};
       }},
      {"loss.kl_consistency",
       [](Rng& rng) {
         Var a = param({4, 5}, rng), b = param({4, 5}, rng);
         const bool swap = rng.uniform() < 0.5;
         return Instance{[=] { return kl_consistency(softmax_axis(a, 1), softmax_axis(b, 1), swap); }, {a, b}};
       }},
      {"loss.satisfied_rank",
       [](Rng& rng) {
         Var a = param({4, 3}, rng), b = param({4, 3}, rng);
         auto labels = std::make_shared<std::vector<std::size_t>>(random_labels(4, 3, rng));
         return Instance{[=] { return satisfied_rank(softmax_axis(a, 1), softmax_axis(b, 1), *labels, 0.05); }, {a, b}};
       }},
      {"loss.total",
       [](Rng& rng) {
         Var x = param({6, 3}, rng), a = param({6, 3}, rng), b = param({6, 3}, rng);
         auto centers = std::make_shared<ClassCenters>(ClassCenters{normal_tensor({3, 3}, 1.0, rng), 0.5});
         auto labels = std::make_shared<std::vector<std::size_t>>(pk_labels(3, 2));
         return Instance{[=] {
                           const Var y1 = softmax_axis(a, 1), y2 = softmax_axis(b, 1);
                           LossWeights w;
                           LossComponents c{ce_avg(y1, y2, *labels, w.smoothing_eps),
                                            batch_hard_triplet(x, *labels, w.triplet_margin),
                                            osm_cl(x, *labels, *centers, {}),
                                            variance_reg(x, *labels),
                                            center_loss(x, *labels, *centers),
                                            kl_consistency(y1, y2),
                                            satisfied_rank(y1, y2, *labels, w.sr_margin)};
                           return total_loss(c, w).total;
                         },
                         {x, a, b}};
       }},
      {"head.channel_project",
       [](Rng& rng) {
         Var x = param({2, 2, 2, 4}, rng);
         ProjectionParams p = projection(4, 3, rng);
         return Instance{[=] { return contract(channel_project(x, p)); }, {x, p.weight, p.bias}};
       }},
      {"head.channel_weights",
       [](Rng& rng) {
         Var a = param({2, 5}, rng);
         return Instance{[=] { return contract(channel_weights(a)); }, {a}};
       }},
      {"head.attention_maps",
       [](Rng& rng) {
         Var f = param({2, 2, 3, 4}, rng), s = param({2, 4}, rng, 0.5);
         return Instance{[=] { return contract(attention_maps(f, s)); }, {f, s}};
       }},
      {"head.apply_attention",
       [](Rng& rng) {
         Var f = param({2, 2, 3, 4}, rng), m = param({2, 2, 3, 1}, rng);
         return Instance{[=] { return contract(apply_attention(f, m)); }, {f, m}};
       }},
      {"head.nonlocal_shared_qk",
       [](Rng& rng) {
         Var a1 = param({2, 2, 2, 8}, rng);
         ProjectionParams theta = projection(8, 2, rng), delta = projection(8, 2, rng), beta = projection(2, 8, rng);
         std::vector<Var> inputs{a1};
         for (const auto* p : {&theta, &delta, &beta}) append(inputs, *p);
         return Instance{[=] { return contract(nonlocal_block(a1, theta, delta, beta).a2); }, inputs};
       }},
      {"head.nonlocal_distinct_kq",
       [](Rng& rng) {
         Var a1 = param({2, 2, 2, 8}, rng);
         ProjectionParams theta = projection(8, 2, rng), delta = projection(8, 2, rng), beta = projection(2, 8, rng),
                          key = projection(8, 2, rng);
         std::vector<Var> inputs{a1};
         for (const auto* p : {&theta, &delta, &beta, &key}) append(inputs, *p);
         return Instance{[=] { return contract(nonlocal_block(a1, theta, delta, beta, key).a2); }, inputs};
       }},
      {"head.attentive_pool",
       [](Rng& rng) {
         Var a2 = param({2, 2, 3, 4}, rng), m = param({2, 2, 3, 1}, rng);
         return Instance{[=] { return contract(attentive_pool(a2, sigmoid(m))); }, {a2, m}};
       }},
      {"head.spatial_average",
       [](Rng& rng) {
         Var f = param({2, 2, 3, 4}, rng);
         return Instance{[=] { return contract(spatial_average(f)); }, {f}};
       }},
      {"head.batch_norm_train",
       [](Rng& rng) {
         Var x = param({4, 5}, rng);
         auto bn = std::make_shared<BatchNormParams>(BatchNormParams::identity(5));
         bn->gamma = param({5}, rng);
         bn->beta = param({5}, rng);
         return Instance{[=] { return contract(batch_norm(x, *bn, BnMode::train)); }, {x, bn->gamma, bn->beta}};
       }},
      {"head.global_feature",
       [](Rng& rng) {
         Var f = param({2, 2, 2, 4}, rng);
         auto bn = std::make_shared<BatchNormParams>(BatchNormParams::identity(4));
         bn->gamma = param({4}, rng);
         bn->beta = param({4}, rng);
         bn->running_mean = normal_tensor({4}, 0.5, rng);
         bn->running_var = uniform_tensor({4}, 0.5, 2.0, rng);
         return Instance{[=] { return contract(global_feature(f, *bn).f_hat); }, {f, bn->gamma, bn->beta}};
       }},
      {"head.finalize_fine",
       [](Rng& rng) {
         Var a3 = param({3, 4}, rng);
         auto bn = std::make_shared<BatchNormParams>(BatchNormParams::identity(4));
         bn->gamma = param({4}, rng);
         bn->running_var = uniform_tensor({4}, 0.5, 2.0, rng);
         return Instance{[=] { return contract(finalize_fine(a3, *bn)); }, {a3, bn->gamma, bn->beta}};
       }},
      {"head.classify",
       [](Rng& rng) {
         Var f = param({3, 4}, rng);
         Classifier c{param({4, 5}, rng), param({5}, rng)};
         return Instance{[=] { return contract(classify(f, c)); }, {f, c.weight, c.bias}};
       }},
      {"head.forward",
       [](Rng& rng) { return whole_head(rng, 2, 2, false); }},
      {"head.forward_with_loss",
       [](Rng& rng) { return whole_head(rng, 4, 3, true); }},
      {"backbone.conv2d",
       [](Rng& rng) {
         Var x = param({1, 5, 5, 2}, rng), w = param({3, 3, 2, 3}, rng, 0.5), b = param({3}, rng);
         return Instance{[=] { return contract(conv2d(x, w, b, 2, 1)); }, {x, w, b}};
       }},
  };
  return table;
}

}  // namespace

std::vector<std::string> gradient_case_names() {
  std::vector<std::string> names;
  for (const auto& [name, gen] : generators()) names.push_back(name);
  return names;
}

GradCaseReport run_gradient_case(const std::string& name, std::size_t instances, std::uint64_t seed) {
  const auto it = generators().find(name);
  if (it == generators().end()) throw std::invalid_argument("unknown gradient case " + name);
  Rng rng(seed);
  GradCaseReport report{name, 0, 0, 0};
  while (report.instances < instances) {
    Instance inst = it->second(rng);
    if (!differences_agree(inst.loss, inst.inputs, kGradStep, 1e-4)) {
      if (++report.rejected > 10 * instances) throw std::runtime_error(name + ": too many draws near a kink");
      continue;
    }
    const GradCheckResult r = grad_check(inst.loss, inst.inputs, kGradStep);
    report.worst_relative_error = std::max(report.worst_relative_error, r.max_relative_error);
    ++report.instances;
  }
  return report;
}

std::vector<GradCaseReport> run_gradient_suite(std::size_t instances, std::uint64_t seed) {
  std::vector<GradCaseReport> out;
  for (const std::string& name : gradient_case_names()) out.push_back(run_gradient_case(name, instances, seed));
  return out;
}

}  // namespace fgreid_testing

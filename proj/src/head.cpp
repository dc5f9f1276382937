#include "fgreid/head.hpp"

#include <cmath>
#include <stdexcept>

namespace fgreid::inline FGREID_PRECISION {

namespace {

ProjectionParams make_projection(std::size_t c_in, std::size_t c_out, Rng& rng) {
  ProjectionParams p;
  p.weight = Var::parameter(normal_tensor({c_in, c_out}, std::sqrt(2.0 / static_cast<double>(c_in)), rng));
  p.bias = Var::parameter(Tensor({c_out}));
  return p;
}

Tensor ones_like_maps(const FeatureDims& d) { return Tensor({d.t, d.h, d.w, 1}, Real(1)); }

}  // namespace

std::size_t HeadConfig::embedding_dim() const {
  return (has_coarse_branch() ? c_star : 0) + (has_fine_branch() ? c_star : 0);
}

void HeadConfig::validate() const {
  if (c_backbone == 0 || c_star == 0 || num_classes == 0) throw std::invalid_argument("head sizes must be >= 1");
  if (c_star % 4 != 0 || c_bar() == 0) {
    throw std::invalid_argument("c_star must be a positive multiple of 4 (c_bar = c_star / 4), got " + std::to_string(c_star));
  }
  if (!has_coarse_branch() && !has_fine_branch()) {
    throw std::invalid_argument("ablation flags leave no branch: enable the global module, spatial attention or the non-local block");
  }
}

HeadParameters HeadParameters::init(const HeadConfig& config, Rng& rng) {
  config.validate();
  HeadParameters p;
  const std::size_t cs = config.c_star;
  const std::size_t cb = config.c_bar();
  if (config.needs_coarse_features()) p.reduce_coarse = make_projection(config.c_backbone, cs, rng);
  if (config.has_fine_branch()) {
    p.reduce_fine = make_projection(config.c_backbone, cs, rng);
    if (config.use_nonlocal) {
      p.theta = make_projection(cs, cb, rng);
      p.delta = make_projection(cs, cb, rng);
      p.beta_proj = make_projection(cb, cs, rng);
      if (config.distinct_kq) p.k_proj = make_projection(cs, cb, rng);
    }
    p.bn_fine = BatchNormParams::identity(cs);
  }
  if (config.has_coarse_branch()) p.bn_coarse = BatchNormParams::identity(cs);
  p.classifier.weight = Var::parameter(normal_tensor({cs, config.num_classes}, 0.001, rng));
  p.classifier.bias = Var::parameter(Tensor({config.num_classes}));
  return p;
}

std::vector<LayerInfo> HeadParameters::layers() const {
  std::vector<LayerInfo> out;
  const std::pair<const char*, const ProjectionParams*> projections[] = {
      {"reduce_coarse", &reduce_coarse}, {"reduce_fine", &reduce_fine}, {"theta", &theta},
      {"delta", &delta},                 {"beta_proj", &beta_proj},     {"k_proj", &k_proj}};
  for (const auto& [name, proj] : projections) {
    if (proj->defined()) out.push_back({name, LayerKind::projection, proj->parameter_count()});
  }
  if (classifier.defined()) {
    out.push_back({"classifier", LayerKind::classifier, classifier.weight.value().size() + classifier.bias.value().size()});
  }
  const std::pair<const char*, const BatchNormParams*> norms[] = {{"bn_coarse", &bn_coarse}, {"bn_fine", &bn_fine}};
  for (const auto& [name, bn] : norms) {
    if (bn->defined()) out.push_back({name, LayerKind::batch_norm, bn->gamma.value().size() + bn->beta.value().size()});
  }
  return out;
}

std::vector<std::pair<std::string, Var>> HeadParameters::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  const std::pair<const char*, const ProjectionParams*> projections[] = {
      {"reduce_coarse", &reduce_coarse}, {"reduce_fine", &reduce_fine}, {"theta", &theta},
      {"delta", &delta},                 {"beta_proj", &beta_proj},     {"k_proj", &k_proj}};
  for (const auto& [name, proj] : projections) {
    if (!proj->defined()) continue;
    out.emplace_back(std::string(name) + ".weight", proj->weight);
    out.emplace_back(std::string(name) + ".bias", proj->bias);
  }
  if (classifier.defined()) {
    out.emplace_back("classifier.weight", classifier.weight);
    out.emplace_back("classifier.bias", classifier.bias);
  }
  const std::pair<const char*, const BatchNormParams*> norms[] = {{"bn_coarse", &bn_coarse}, {"bn_fine", &bn_fine}};
  for (const auto& [name, bn] : norms) {
    if (!bn->defined()) continue;
    out.emplace_back(std::string(name) + ".gamma", bn->gamma);
    out.emplace_back(std::string(name) + ".beta", bn->beta);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> HeadParameters::named_buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  if (bn_coarse.defined()) {
    out.emplace_back("bn_coarse.running_mean", &bn_coarse.running_mean);
    out.emplace_back("bn_coarse.running_var", &bn_coarse.running_var);
  }
  if (bn_fine.defined()) {
    out.emplace_back("bn_fine.running_mean", &bn_fine.running_mean);
    out.emplace_back("bn_fine.running_var", &bn_fine.running_var);
  }
  return out;
}

Var channel_weights(const Var& a_gap) {
  if (a_gap.shape().size() != 2) throw ShapeError("channel_weights expects (t, c), got " + to_string(a_gap.shape()));
  return softmax_axis(a_gap, 1);
}

Var attention_maps(const Var& f_coarse_reduced, const Var& s_channel) {
  const FeatureDims d = feature_dims(f_coarse_reduced.value());
  if (s_channel.shape() != Shape{d.t, d.c}) {
    throw ShapeError("attention_maps: channel weights " + to_string(s_channel.shape()) + " do not match features " +
                     to_string(d.shape()));
  }
  const Var shifted = sub(f_coarse_reduced, expand(global_min(f_coarse_reduced), d.shape()));
  const Var weights = expand(reshape(s_channel, {d.t, 1, 1, d.c}), d.shape());
  const Var logits = reduce_sum(mul(shifted, weights), {3});
  return sigmoid(reshape(logits, {d.t, d.h, d.w, 1}));
}

Var apply_attention(const Var& f_fine_reduced, const Var& a_maps) {
  const FeatureDims d = feature_dims(f_fine_reduced.value());
  if (a_maps.shape() != Shape{d.t, d.h, d.w, 1}) {
    throw ShapeError("apply_attention: maps " + to_string(a_maps.shape()) + " do not match features " + to_string(d.shape()));
  }
  return mul(f_fine_reduced, expand(a_maps, d.shape()));
}

NonLocalOutput nonlocal_block(const Var& a1, const ProjectionParams& theta, const ProjectionParams& delta,
                              const ProjectionParams& beta_proj, const ProjectionParams& key) {
  const FeatureDims d = feature_dims(a1.value());
  const std::size_t positions = d.positions();
  const Var flat = reshape(a1, {positions, d.c});
  const Var query = l2_normalize(relu(channel_project(flat, theta)));
  const Var keys = key.defined() ? l2_normalize(relu(channel_project(flat, key))) : query;
  const Var values = relu(channel_project(flat, delta));
  const Var affinity = softmax_axis(matmul(query, transpose(keys)), 1);
  const Var v_avg = matmul(affinity, values);
  const Var restored = channel_project(v_avg, beta_proj);
  return {reshape(add(restored, flat), d.shape()), affinity};
}

Var attentive_pool(const Var& a2, const Var& a_maps) {
  const FeatureDims d = feature_dims(a2.value());
  if (a_maps.shape() != Shape{d.t, d.h, d.w, 1}) {
    throw ShapeError("attentive_pool: maps " + to_string(a_maps.shape()) + " do not match features " + to_string(d.shape()));
  }
  const Var numerator = reduce_sum(a2, {1, 2});    // (t, c)
  const Var mass = reduce_sum(a_maps, {1, 2});     // (t, 1)
  return div(numerator, expand(mass, {d.t, d.c}));
}

Var spatial_average(const Var& f) {
  feature_dims(f.value());
  return mean_pool(f, {1, 2});
}

GlobalFeature global_feature(const Var& f_coarse_reduced, BatchNormParams& bn) {
  const Var a_gap = spatial_average(f_coarse_reduced);
  const Var pooled = mean_pool(a_gap, {0});
  const Var normed = batch_norm(reshape(pooled, {1, pooled.shape()[0]}), bn, BnMode::infer);
  return {reshape(normed, {pooled.shape()[0]}), a_gap};
}

Var finalize_fine(const Var& a3, BatchNormParams& bn) {
  if (a3.shape().size() != 2) throw ShapeError("finalize_fine expects (t, c), got " + to_string(a3.shape()));
  const Var pooled = mean_pool(a3, {0});
  const Var normed = batch_norm(reshape(pooled, {1, pooled.shape()[0]}), bn, BnMode::infer);
  return reshape(normed, {pooled.shape()[0]});
}

Var classify(const Var& f_hat, const Classifier& classifier) {
  if (!classifier.defined()) throw std::invalid_argument("classifier is not initialised");
  const bool single = f_hat.shape().size() == 1;
  const Var rows = single ? reshape(f_hat, {1, f_hat.shape()[0]}) : f_hat;
  ProjectionParams proj{classifier.weight, classifier.bias};
  const Var probs = softmax_axis(channel_project(rows, proj), 1);
  return single ? reshape(probs, {classifier.bias.shape()[0]}) : probs;
}

HeadBatchOutput head_forward(std::span<const ClipFeatures> clips, HeadParameters& params, const HeadConfig& config,
                             BnMode mode) {
  config.validate();
  if (clips.empty()) throw std::invalid_argument("head_forward on an empty batch");
  HeadBatchOutput out;
  std::vector<Var> coarse_pre;
  std::vector<Var> fine_pre;
  for (const ClipFeatures& clip : clips) {
    ClipTrace trace;
    const bool need_coarse = config.needs_coarse_features();
    const bool need_fine = config.has_fine_branch();
    const Var& ref = need_coarse ? clip.coarse : clip.fine;
    if (!ref) throw std::invalid_argument("head_forward: missing backbone features");
    const FeatureDims d = feature_dims(ref.value());
    if (d.c != config.c_backbone) {
      throw ShapeError("backbone features carry " + std::to_string(d.c) + " channels, head expects " +
                       std::to_string(config.c_backbone));
    }
    if (need_coarse && need_fine) {
      if (!clip.fine || clip.fine.shape() != clip.coarse.shape()) {
        throw ShapeError("coarse and fine backbone features must share (t, h, w, c)");
      }
    }

    Var f_coarse;
    if (need_coarse) {
      f_coarse = channel_project(clip.coarse, params.reduce_coarse);
      trace.a_gap = spatial_average(f_coarse);
      if (config.use_gfm) coarse_pre.push_back(mean_pool(trace.a_gap, {0}));
    }

    if (need_fine) {
      if (config.use_fgm) {
        trace.s_channel = config.use_channel_weights
                              ? channel_weights(trace.a_gap)
                              : constant(Tensor({d.t, config.c_star}, Real(1) / static_cast<Real>(config.c_star)));
        trace.a_maps = attention_maps(f_coarse, trace.s_channel);
      } else {
        trace.a_maps = constant(ones_like_maps(d));
      }
      const Var f_fine = channel_project(clip.fine, params.reduce_fine);
      trace.a1 = config.use_fgm ? apply_attention(f_fine, trace.a_maps) : f_fine;
      if (config.use_nonlocal) {
        NonLocalOutput nl = nonlocal_block(trace.a1, params.theta, params.delta, params.beta_proj,
                                           config.distinct_kq ? params.k_proj : ProjectionParams{});
        trace.a2 = nl.a2;
        trace.w_affinity = nl.w_affinity;
      } else {
        trace.a2 = trace.a1;
      }
      trace.a3 = config.use_fgm ? attentive_pool(trace.a2, trace.a_maps) : spatial_average(trace.a2);
      fine_pre.push_back(mean_pool(trace.a3, {0}));
    }
    out.traces.push_back(std::move(trace));
  }

  std::vector<Var> parts;
  if (config.has_coarse_branch()) {
    out.f_hat_coarse = batch_norm(stack(coarse_pre), params.bn_coarse, mode);
    out.y1 = classify(out.f_hat_coarse, params.classifier);
    parts.push_back(out.f_hat_coarse);
  }
  if (config.has_fine_branch()) {
    out.f_hat_fine = batch_norm(stack(fine_pre), params.bn_fine, mode);
    out.y2 = classify(out.f_hat_fine, params.classifier);
    parts.push_back(out.f_hat_fine);
  }
  out.f_star = parts.size() == 1 ? parts[0] : concat_last(parts);
  return out;
}

EmbeddingBundle forward(const Tensor& f_coarse_raw, const Tensor& f_fine_raw, HeadParameters& params,
                        const HeadConfig& config, IntermediateTrace* trace) {
  NoGradGuard no_grad;
  const ClipFeatures clip{constant(f_coarse_raw), constant(f_fine_raw)};
  HeadBatchOutput out = head_forward(std::span(&clip, 1), params, config, BnMode::infer);
  auto row = [](const Var& v) {
    if (!v) return Tensor();
    return v.value().reshaped({v.shape()[1]});
  };
  EmbeddingBundle bundle;
  bundle.f_hat_coarse = row(out.f_hat_coarse);
  bundle.f_hat_fine = row(out.f_hat_fine);
  bundle.f_star = row(out.f_star);
  bundle.y1 = row(out.y1);
  bundle.y2 = row(out.y2);
  const ClipTrace& ct = out.traces.front();
  if (ct.a_maps) {
    bundle.a_maps = ct.a_maps.value();
  } else {
    const FeatureDims d = feature_dims(f_coarse_raw);
    bundle.a_maps = ones_like_maps(d);
  }
  if (trace) {
    auto value = [](const Var& v) { return v ? v.value() : Tensor(); };
    trace->a_gap = value(ct.a_gap);
    trace->s_channel = value(ct.s_channel);
    trace->a1 = value(ct.a1);
    trace->a2 = value(ct.a2);
    trace->a3 = value(ct.a3);
    trace->w_affinity = value(ct.w_affinity);
  }
  return bundle;
}

ParamReport param_count(const HeadParameters& params) {
  ParamReport report;
  report.layers = params.layers();
  for (const LayerInfo& layer : report.layers) {
    report.total += layer.parameters;
    switch (layer.kind) {
      case LayerKind::projection: ++report.projections; break;
      case LayerKind::classifier: ++report.classifiers; break;
      case LayerKind::batch_norm: ++report.batch_norms; break;
    }
  }
  return report;
}

std::size_t analytic_param_count(const HeadConfig& config) {
  config.validate();
  const std::size_t cb = config.c_backbone;
  const std::size_t cs = config.c_star;
  const std::size_t cbar = config.c_bar();
  const std::size_t reduce = cb * cs + cs;
  const std::size_t to_inner = cs * cbar + cbar;
  const std::size_t from_inner = cbar * cs + cs;
  const std::size_t norm = 2 * cs;
  std::size_t total = config.num_classes * cs + config.num_classes;
  if (config.needs_coarse_features()) total += reduce;
  if (config.has_coarse_branch()) total += norm;
  if (config.has_fine_branch()) {
    total += reduce + norm;
    if (config.use_nonlocal) total += 2 * to_inner + from_inner + (config.distinct_kq ? to_inner : 0);
  }
  return total;
}

KqvComparison compare_kqv(HeadConfig config) {
  config.use_nonlocal = true;
  config.distinct_kq = false;
  KqvComparison cmp;
  cmp.shared_qk = analytic_param_count(config);
  config.distinct_kq = true;
  cmp.distinct_kqv = analytic_param_count(config);
  cmp.delta = cmp.distinct_kqv - cmp.shared_qk;
  return cmp;
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::projection: return "projection";
    case LayerKind::classifier: return "classifier";
    case LayerKind::batch_norm: return "batch_norm";
  }
  return "unknown";
}

}  // namespace fgreid::inline FGREID_PRECISION

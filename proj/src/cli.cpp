#include "fgreid/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>

#include "fgreid/manifest.hpp"
#include "fgreid/overlay.hpp"
#include "fgreid/pipeline.hpp"

namespace fgreid::inline FGREID_PRECISION {

namespace {

namespace fs = std::filesystem;

struct ConfigOptions {
  std::string preset_name = "mars-like";
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset_name, "Base preset: mars-like, image-like or desk");
    app->add_option("--config", file, "key=value config file applied over the preset");
    app->add_option("--set", sets, "Override one key, e.g. --set train.epochs=10")->take_last()->multi_option_policy(
        CLI::MultiOptionPolicy::TakeAll);
  }

  RunConfig resolve(const std::string& fallback_file = {}) const {
    RunConfig c = preset(preset_name);
    const std::string path = file.empty() ? fallback_file : file;
    if (!path.empty()) c = load_run_config(path, c);
    for (const std::string& s : sets) set_config_value(c, s);
    c.validate();
    return c;
  }
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

std::string with_commas(std::size_t n) {
  std::string digits = std::to_string(n), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

std::vector<std::size_t> parse_ranks(const std::string& text) {
  RunConfig tmp;
  set_config_value(tmp, "eval.ranks=" + text);
  if (tmp.eval.ranks.empty()) throw std::invalid_argument("--ranks needs at least one rank");
  return tmp.eval.ranks;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void check_input_size(const Dataset& ds, const RunConfig& c) {
  if (ds.tracklets.empty()) throw std::invalid_argument("dataset is empty");
  const Tensor& f = ds.tracklets.front().frames;
  if (f.dim(1) != c.input_height || f.dim(2) != c.input_width) {
    throw std::invalid_argument("frames are " + std::to_string(f.dim(1)) + "x" + std::to_string(f.dim(2)) +
                                " but the config expects " + std::to_string(c.input_height) + "x" +
                                std::to_string(c.input_width) + " (try --preset desk)");
  }
}

fs::path default_config_for(const std::string& checkpoint) { return fs::path(checkpoint).parent_path() / "run.cfg"; }

std::string fallback_config(const ConfigOptions& opts, const std::string& checkpoint) {
  if (!opts.file.empty()) return {};
  const fs::path p = default_config_for(checkpoint);
  return fs::exists(p) ? p.string() : std::string();
}

void print_layers(std::ostream& out, const ParamReport& r) {
  out << std::left << std::setw(28) << "layer" << std::setw(12) << "kind" << std::right << std::setw(12)
      << "parameters" << '\n';
  for (const LayerInfo& l : r.layers) {
    out << std::left << std::setw(28) << l.name << std::setw(12) << to_string(l.kind) << std::right << std::setw(12)
        << with_commas(l.parameters) << '\n';
  }
  out << "projections: " << std::count_if(r.layers.begin(), r.layers.end(),
                                          [](const LayerInfo& l) { return l.kind == LayerKind::projection; })
      << ", classifiers: "
      << std::count_if(r.layers.begin(), r.layers.end(),
                       [](const LayerInfo& l) { return l.kind == LayerKind::classifier; })
      << ", batch-norms: "
      << std::count_if(r.layers.begin(), r.layers.end(),
                       [](const LayerInfo& l) { return l.kind == LayerKind::batch_norm; })
      << '\n';
  out << "total head parameters: " << with_commas(r.total) << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fine-grained re-identification head: data, training and evaluation", "fgreid"};
  app.require_subcommand(1, 1);

  // synth-gen
  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic tracklet dataset with manifests");
  std::string synth_out;
  std::size_t synth_ids = 16, synth_tracklets = 4, synth_frames = 16, synth_size = 32, synth_holdout = 4;
  std::uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--identities", synth_ids, "Number of identities")->capture_default_str();
  synth->add_option("--tracklets", synth_tracklets, "Tracklets (cameras) per identity")->capture_default_str();
  synth->add_option("--frames", synth_frames, "Frames per tracklet")->capture_default_str();
  synth->add_option("--size", synth_size, "Frame side in pixels")->capture_default_str();
  synth->add_option("--holdout", synth_holdout, "Trailing frames held out for query/gallery; 0 writes one manifest")
      ->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train the model; writes checkpoint, metrics log and run config");
  ConfigOptions train_cfg;
  train_cfg.attach(train);
  std::string train_manifest, train_out;
  train->add_option("--manifest", train_manifest, "Training manifest")->required();
  train->add_option("--out", train_out, "Output directory")->required();

  // extract
  auto* extract = app.add_subcommand("extract", "Embed every tracklet of a manifest");
  ConfigOptions extract_cfg;
  extract_cfg.attach(extract);
  std::string extract_ckpt, extract_manifest, extract_out;
  extract->add_option("--checkpoint", extract_ckpt, "Checkpoint archive")->required();
  extract->add_option("--manifest", extract_manifest, "Tracklets to embed")->required();
  extract->add_option("--out", extract_out, "Embedding archive to write")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Rank gallery embeddings for each query; prints CMC and mAP");
  std::string eval_query, eval_gallery, eval_ranks = "1,5,10,20", eval_metric = "dot", eval_report;
  bool eval_rerank = false;
  RerankParams rr;
  eval->add_option("--query", eval_query, "Query embedding archive")->required();
  eval->add_option("--gallery", eval_gallery, "Gallery embedding archive")->required();
  eval->add_option("--ranks", eval_ranks, "Comma-separated CMC ranks")->capture_default_str();
  eval->add_option("--metric", eval_metric, "dot (cosine) or euclidean")->capture_default_str();
  eval->add_flag("--rerank", eval_rerank, "Apply k-reciprocal re-ranking");
  eval->add_option("--k1", rr.k1, "Re-ranking k1")->capture_default_str();
  eval->add_option("--k2", rr.k2, "Re-ranking k2")->capture_default_str();
  eval->add_option("--lambda", rr.lambda, "Re-ranking blend weight of the original distance")->capture_default_str();
  eval->add_option("--report", eval_report, "Also write the CSV report here");

  // attn-export
  auto* attn = app.add_subcommand("attn-export", "Write attention overlays for one tracklet as P6 pixmaps");
  ConfigOptions attn_cfg;
  attn_cfg.attach(attn);
  std::string attn_ckpt, attn_manifest, attn_out;
  std::size_t attn_tracklet = 0;
  attn->add_option("--checkpoint", attn_ckpt, "Checkpoint archive")->required();
  attn->add_option("--manifest", attn_manifest, "Manifest holding the tracklet")->required();
  attn->add_option("--tracklet", attn_tracklet, "Tracklet id")->required();
  attn->add_option("--out", attn_out, "Output directory")->required();

  // param-count
  auto* params = app.add_subcommand("param-count", "Report head parameter accounting");
  ConfigOptions params_cfg;
  params_cfg.attach(params);
  std::string params_ckpt;
  std::size_t params_classes = 1;
  bool params_compare = false;
  params->add_option("--checkpoint", params_ckpt, "Count the head stored in this checkpoint");
  params->add_option("--num-classes", params_classes, "Classifier width when no checkpoint is given")
      ->capture_default_str();
  params->add_flag("--compare-kqv", params_compare, "Compare shared query/key with distinct key/query/value");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate one named ablation row");
  ConfigOptions ablate_cfg;
  ablate_cfg.attach(ablate);
  std::string ablate_row, ablate_train, ablate_query, ablate_gallery, ablate_out;
  ablate->add_option("--row", ablate_row, "Row name")->required()->check(CLI::IsMember(ablation_rows()));
  ablate->add_option("--train", ablate_train, "Training manifest")->required();
  ablate->add_option("--query", ablate_query, "Query manifest")->required();
  ablate->add_option("--gallery", ablate_gallery, "Gallery manifest")->required();
  ablate->add_option("--out", ablate_out, "Output directory")->required();

  if (!args.empty() && !args.front().starts_with("-") && !app.get_subcommand_no_throw(args.front())) {
    err << "usage error: unknown subcommand '" << args.front() << "' (see --help)\n";
    return kExitUsage;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "usage error: " << one_line(e.what()) << " (see --help)\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) {
      Rng rng(synth_seed);
      const Dataset ds = synth_dataset(synth_ids, synth_tracklets, synth_frames, synth_size, rng);
      if (synth_holdout == 0) {
        out << "wrote " << save_dataset(ds, synth_out, "all").string() << '\n';
      } else {
        const HoldoutSplit split = holdout_split(ds, synth_holdout);
        for (const auto& [stem, part] : {std::pair{"train", &split.train}, {"query", &split.query},
                                         std::pair{"gallery", &split.gallery}}) {
          out << "wrote " << save_dataset(*part, synth_out, stem).string() << " (" << part->tracklets.size()
              << " tracklets)\n";
        }
      }
    } else if (train->parsed()) {
      const RunConfig c = train_cfg.resolve();
      const Dataset ds = load_dataset(train_manifest);
      check_input_size(ds, c);
      fs::create_directories(train_out);
      write_file(fs::path(train_out) / "run.cfg", serialize_run_config(c));
      const TrainResult r = train_loop(ds, c.train, {train_out, [&](const EpochMetrics& m) {
                                          out << "epoch " << m.epoch << " lr " << m.lr << " loss " << m.total << '\n';
                                        }});
      out << "checkpoint " << (fs::path(train_out) / kCheckpointFile).string() << '\n';
    } else if (extract->parsed()) {
      const RunConfig c = extract_cfg.resolve(fallback_config(extract_cfg, extract_ckpt));
      Model model = load_model(extract_ckpt, c);
      const Dataset ds = load_dataset(extract_manifest);
      check_input_size(ds, c);
      const auto records = extract_embeddings(ds, model, c.train.batch.t, c.eval.max_clips);
      write_archive(embeddings_to_archive(records), extract_out);
      out << "wrote " << records.size() << " embeddings to " << extract_out << '\n';
    } else if (eval->parsed()) {
      EvalConfig ec;
      ec.ranks = parse_ranks(eval_ranks);
      ec.metric = parse_metric(eval_metric);
      ec.rerank = eval_rerank;
      ec.rerank_params = rr;
      const auto q = embeddings_from_archive(read_archive(eval_query));
      const auto g = embeddings_from_archive(read_archive(eval_gallery));
      const RetrievalReport report = evaluate_records(q, g, ec);
      out << report_csv(report) << report_summary(report);
      if (!eval_report.empty()) write_file(eval_report, report_csv(report));
    } else if (attn->parsed()) {
      const RunConfig c = attn_cfg.resolve(fallback_config(attn_cfg, attn_ckpt));
      if (!c.train.head.use_fgm) throw std::invalid_argument("attention maps need head.use_fgm = true");
      Model model = load_model(attn_ckpt, c);
      const Dataset ds = load_dataset(attn_manifest);
      const auto it = std::find_if(ds.tracklets.begin(), ds.tracklets.end(),
                                   [&](const Tracklet& t) { return t.tracklet_id == attn_tracklet; });
      if (it == ds.tracklets.end()) throw std::invalid_argument("no tracklet " + std::to_string(attn_tracklet));
      const auto idx = evaluation_clips(it->num_frames(), c.train.batch.t, 1).front();
      const Tensor clip = gather_frames(it->frames, idx);
      NoGradGuard no_grad;
      const Tensor maps = model.forward(std::vector<Tensor>{clip}, BnMode::infer).traces.front().a_maps.value();
      const FeatureDims d = feature_dims(maps);
      fs::create_directories(attn_out);
      for (std::size_t f = 0; f < d.t; ++f) {
        const std::size_t one[] = {f};
        const Tensor frame = gather_frames(clip, one).reshaped({clip.dim(1), clip.dim(2), 3});
        Tensor att({d.h, d.w});
        std::copy_n(maps.data().begin() + static_cast<std::ptrdiff_t>(f * d.h * d.w), d.h * d.w, att.data().begin());
        const fs::path path = fs::path(attn_out) / ("frame_" + std::to_string(idx[f]) + ".ppm");
        export_attention_overlay(frame, att, path);
        out << "wrote " << path.string() << '\n';
      }
    } else if (params->parsed()) {
      const RunConfig c = params_cfg.resolve(params_ckpt.empty() ? std::string() : fallback_config(params_cfg, params_ckpt));
      HeadParameters head;
      if (!params_ckpt.empty()) {
        head = load_model(params_ckpt, c).head;
      } else {
        HeadConfig hc = c.train.head;
        hc.num_classes = params_classes;
        Rng rng(c.train.seed);
        head = HeadParameters::init(hc, rng);
      }
      print_layers(out, param_count(head));
      if (params_compare) {
        const KqvComparison k = compare_kqv(c.train.head);
        out << "shared query/key: " << with_commas(k.shared_qk) << '\n'
            << "distinct key/query/value: " << with_commas(k.distinct_kqv) << '\n'
            << "delta: " << with_commas(k.delta) << '\n';
      }
    } else if (ablate->parsed()) {
      RunConfig c = ablate_cfg.resolve();
      apply_ablation(c, ablate_row);
      c.validate();
      HoldoutSplit data{load_dataset(ablate_train), load_dataset(ablate_query), load_dataset(ablate_gallery)};
      check_input_size(data.train, c);
      fs::create_directories(ablate_out);
      write_file(fs::path(ablate_out) / "run.cfg", serialize_run_config(c));
      const ExperimentResult r = run_experiment(data, c, {ablate_out, {}});
      write_file(fs::path(ablate_out) / "report.csv", report_csv(r.report));
      out << "row " << ablate_row << ": " << report_summary(r.report);
    }
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace fgreid::inline FGREID_PRECISION

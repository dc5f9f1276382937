#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fgreid/archive.hpp"
#include "fgreid/cli.hpp"
#include "fgreid/config.hpp"
#include "fgreid/manifest.hpp"
#include "fgreid/overlay.hpp"

using namespace fgreid;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fgreid_io_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TensorList sample_archive() {
  Rng rng(1);
  return {{"weights", normal_tensor({3, 4}, 1.0, rng)},
          {"scalar", Tensor::scalar(-2.5)},
          {"empty", Tensor({0, 3})},
          {"deep", normal_tensor({2, 1, 2, 3}, 1.0, rng)}};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("archive round trip") {
  const TensorList in = sample_archive();
  const auto bytes = encode_archive(in);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FGRD");
  const TensorList out = decode_archive(bytes);
  REQUIRE(out.size() == in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    CHECK(out[i].name == in[i].name);
    CHECK(out[i].tensor == in[i].tensor);
  }
  CHECK(encode_archive(out) == bytes);
  CHECK(decode_archive(encode_archive({})).empty());

  TempDir dir("roundtrip");
  write_archive(in, dir.path / "a.fgrd");
  CHECK(file_bytes(dir.path / "a.fgrd") == bytes);
  CHECK(read_archive(dir.path / "a.fgrd")[3].tensor == in[3].tensor);
  CHECK(find_tensor(out, "scalar").item() == Real(-2.5));
  CHECK_THROWS_AS(find_tensor(out, "missing"), std::out_of_range);
  CHECK_THROWS(read_archive(dir.path / "missing.fgrd"));
}

TEST_CASE("archive rejects malformed input") {
  const auto good = encode_archive(sample_archive());

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_archive(bad_magic), FormatError);

  auto ahead = good;
  ahead[4] = 2;
  CHECK_THROWS_AS(decode_archive(ahead), UnsupportedVersionError);
  auto zero = good;
  zero[4] = 0;
  CHECK_THROWS_AS(decode_archive(zero), FormatError);

  // First dimension of "weights" sits after magic, version, count, name length, name and rank.
  auto grown = good;
  grown[4 + 2 + 4 + 4 + 7 + 1] = 9;
  CHECK_THROWS_AS(decode_archive(grown), CorruptionError);

  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_archive(trailing), CorruptionError);

  for (std::size_t n = 0; n < good.size(); ++n) {
    CHECK_THROWS_AS(decode_archive(std::span(good.data(), n)), ArchiveError);
  }

  Tensor nan({2}, Real(0));
  nan[1] = std::numeric_limits<Real>::quiet_NaN();
  CHECK_THROWS(encode_archive({{"x", nan}}));
  CHECK_THROWS(encode_archive({{"x", Tensor({1})}, {"x", Tensor({1})}}));

  // A non-finite payload smuggled into the bytes.
  auto smuggled = encode_archive({{"x", Tensor({1}, Real(1))}});
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(smuggled.data() + smuggled.size() - 4, &inf, 4);
  CHECK_THROWS_AS(decode_archive(smuggled), CorruptionError);
}

TEST_CASE("manifest parsing") {
  const std::string text =
      "{\"tracklet_id\": 3, \"identity\": 1, \"camera\": 0, \"path\": \"t/3.fgrd\", \"frames\": 16}\n"
      "\n"
      "{\"tracklet_id\": 4, \"identity\": 1, \"camera\": 2, \"path\": \"t/4.fgrd\", \"frames\": 8}\n";
  const auto recs = parse_manifest(text);
  REQUIRE(recs.size() == 2);
  CHECK(recs[1].camera == 2);
  CHECK(recs[0].path == "t/3.fgrd");
  CHECK(parse_manifest(serialize_manifest(recs))[1].frames == 8);

  const auto rejects = [](const std::string& line, const std::string& fragment) {
    try {
      parse_manifest(line);
      FAIL("accepted: " << line);
    } catch (const ManifestError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  rejects("{\"tracklet_id\": 1}", "missing field");
  rejects("not json", "invalid JSON");
  rejects("[1, 2]", "expected a JSON object");
  rejects("{\"tracklet_id\": -1, \"identity\": 1, \"camera\": 0, \"path\": \"a\", \"frames\": 1}", "nonnegative integer");
  rejects("{\"tracklet_id\": 1, \"identity\": 1, \"camera\": 0, \"path\": \"\", \"frames\": 1}", "path");
  rejects("{\"tracklet_id\": 1, \"identity\": 1, \"camera\": 0, \"path\": \"a\", \"frames\": 0}", "frame count");
  rejects(text + "{\"tracklet_id\": 3, \"identity\": 2, \"camera\": 0, \"path\": \"b\", \"frames\": 1}", "line 4: duplicate");
}

TEST_CASE("datasets round trip through manifests") {
  TempDir dir("dataset");
  Rng rng(2);
  const Dataset ds = synth_dataset(2, 2, 3, 16, rng);
  const fs::path manifest = save_dataset(ds, dir.path, "all");
  CHECK(manifest == dir.path / "all.jsonl");
  const Dataset back = load_dataset(manifest);
  REQUIRE(back.tracklets.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.tracklets[i].identity == ds.tracklets[i].identity);
    CHECK(back.tracklets[i].camera == ds.tracklets[i].camera);
    CHECK(back.tracklets[i].frames == ds.tracklets[i].frames);
  }

  std::ofstream(dir.path / "wrong.jsonl")
      << "{\"tracklet_id\": 0, \"identity\": 0, \"camera\": 0, \"path\": \"all/0.fgrd\", \"frames\": 5}\n";
  CHECK_THROWS_AS(load_dataset(dir.path / "wrong.jsonl"), ManifestError);
}

TEST_CASE("run configuration") {
  for (const std::string& name : preset_names()) {
    const RunConfig c = preset(name);
    const std::string text = serialize_run_config(c);
    CHECK(serialize_run_config(parse_run_config(text)) == text);
    CHECK(count_lines(text) == config_keys().size());
  }
  const RunConfig mars = preset("mars-like");
  CHECK(mars.train.batch.p == 32);
  CHECK(mars.train.batch.k == 5);
  CHECK(mars.train.batch.t == 4);
  CHECK(mars.train.head.c_star == 1024);
  CHECK(preset("image-like").train.batch.t == 1);
  CHECK(preset("desk").input_width == 32);
  CHECK_THROWS_AS(preset("huge"), ConfigError);

  RunConfig c = parse_run_config("preset = desk\n# comment\ntrain.epochs = 7  # trailing\neval.ranks = 1,3\n");
  CHECK(c.train.epochs == 7);
  CHECK(c.eval.ranks == std::vector<std::size_t>{1, 3});
  CHECK(c.train.head.c_star == 64);

  set_config_value(c, "loss.beta_mix=0.25");
  CHECK(c.train.loss.beta_mix == 0.25);
  CHECK_THROWS_AS(set_config_value(c, "train.nonsense=1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "train.epochs=many"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.epochs = 2\npreset = desk\n"), ConfigError);
  try {
    parse_run_config("train.epochs = 2\n\nbogus = 1\n");
    FAIL("accepted an unknown key");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }

  for (const std::string& row : ablation_rows()) {
    RunConfig a = preset("desk");
    apply_ablation(a, row);
    CHECK_NOTHROW(a.validate());
  }
  RunConfig only = preset("desk");
  apply_ablation(only, "only-gfm");
  CHECK_FALSE(only.train.head.use_fgm);
  CHECK_FALSE(only.train.head.use_nonlocal);
  CHECK_THROWS(apply_ablation(only, "wo-everything"));

  CHECK(parse_metric("cosine") == Metric::dot);
  CHECK(to_string(Metric::euclidean) == "euclidean");
}

TEST_CASE("pixmaps") {
  TempDir dir("ppm");
  RgbImage img{3, 2, {}};
  for (std::size_t i = 0; i < 18; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 13));
  write_ppm(img, dir.path / "x.ppm");
  const RgbImage back = read_ppm(dir.path / "x.ppm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("command line") {
  SUBCASE("eval on perfectly separated embeddings") {
    TempDir dir("cli_eval");
    const std::vector<EmbeddingRecord> q{{0, 0, 0, {1, 0, 0}}, {1, 1, 0, {0, 1, 0}}, {2, 2, 0, {0, 0, 1}}};
    const std::vector<EmbeddingRecord> g{{3, 0, 1, {0.9, 0.1, 0}}, {4, 1, 1, {0.1, 0.9, 0}}, {5, 2, 1, {0, 0.1, 0.9}}};
    write_archive(embeddings_to_archive(q), dir.path / "q.fgrd");
    write_archive(embeddings_to_archive(g), dir.path / "g.fgrd");
    const CliRun r = cli({"eval", "--query", (dir.path / "q.fgrd").string(), "--gallery", (dir.path / "g.fgrd").string(),
                          "--ranks", "1,2", "--report", (dir.path / "r.csv").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("mAP 1.0000  R-1 1.0000  R-2 1.0000  (3 queries, 0 excluded)") != std::string::npos);
    std::ifstream csv(dir.path / "r.csv");
    const std::string report{std::istreambuf_iterator<char>(csv), {}};
    CHECK(report == "rank,value\n1,1.000000\n2,1.000000\nmAP,1.000000\n");

    const CliRun rr = cli({"eval", "--query", (dir.path / "q.fgrd").string(), "--gallery", (dir.path / "g.fgrd").string(),
                           "--rerank", "--k1", "2", "--k2", "1"});
    CHECK(rr.code == 0);
    CHECK(rr.out.find("re-ranked") != std::string::npos);
  }

  SUBCASE("param-count") {
    const CliRun r = cli({"param-count", "--compare-kqv"});
    CHECK(r.code == 0);
    CHECK(r.out.find("delta: 262,400") != std::string::npos);
    CHECK(r.out.find("projections: 5, classifiers: 1, batch-norms: 2") != std::string::npos);
  }

  SUBCASE("usage and runtime errors") {
    for (const auto& args : std::vector<std::vector<std::string>>{
             {"bogus"}, {"eval", "--nope"}, {"eval"}, {}, {"param-count", "--num-classes", "x"}}) {
      const CliRun r = cli(args);
      CHECK(r.code == 2);
      CHECK(r.err.rfind("usage error: ", 0) == 0);
      CHECK(count_lines(r.err) == 1);
    }
    const CliRun missing = cli({"eval", "--query", "/nonexistent/q.fgrd", "--gallery", "/nonexistent/g.fgrd"});
    CHECK(missing.code == 1);
    CHECK(missing.err.rfind("error: ", 0) == 0);
    CHECK(count_lines(missing.err) == 1);
  }

  SUBCASE("training is reproducible end to end") {
    TempDir dir("cli_train");
    const std::string d = dir.path.string();
    REQUIRE(cli({"synth-gen", "--out", d + "/data", "--identities", "4", "--tracklets", "2", "--frames", "6", "--holdout",
                 "2", "--seed", "3"})
                .code == 0);
    const auto train = [&](const std::string& out) {
      return cli({"train", "--preset", "desk", "--manifest", d + "/data/train.jsonl", "--out", out, "--set",
                  "train.epochs=1", "--set", "batch.p=2", "--set", "train.iterations_per_epoch=2", "--set",
                  "head.c_backbone=16", "--set", "head.c_star=8"});
    };
    REQUIRE(train(d + "/a").code == 0);
    REQUIRE(train(d + "/b").code == 0);
    CHECK(file_bytes(d + "/a/checkpoint.fgrd") == file_bytes(d + "/b/checkpoint.fgrd"));
    CHECK(fs::exists(d + "/a/metrics.csv"));
    CHECK(fs::exists(d + "/a/run.cfg"));

    const CliRun ex = cli({"extract", "--checkpoint", d + "/a/checkpoint.fgrd", "--manifest", d + "/data/query.jsonl",
                           "--out", d + "/q.fgrd"});
    CHECK(ex.code == 0);
    CHECK(embeddings_from_archive(read_archive(d + "/q.fgrd")).size() == 4);

    const CliRun wrong_size = cli({"train", "--manifest", d + "/data/train.jsonl", "--out", d + "/c"});
    CHECK(wrong_size.code != 0);
    CHECK(count_lines(wrong_size.err) == 1);
  }
}

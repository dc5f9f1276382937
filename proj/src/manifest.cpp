#include "fgreid/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fgreid/archive.hpp"

namespace fgreid::inline FGREID_PRECISION {

namespace {

std::size_t unsigned_field(const nlohmann::json& obj, const char* key, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ManifestError("line " + std::to_string(line) + ": missing field '" + key + "'");
  if (!it->is_number_unsigned()) {
    throw ManifestError("line " + std::to_string(line) + ": field '" + key + "' must be a nonnegative integer");
  }
  return it->get<std::size_t>();
}

}  // namespace

std::vector<ManifestRecord> parse_manifest(const std::string& text) {
  std::vector<ManifestRecord> out;
  std::set<std::size_t> ids;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestError("line " + std::to_string(line_no) + ": invalid JSON");
    }
    if (!obj.is_object()) throw ManifestError("line " + std::to_string(line_no) + ": expected a JSON object");
    ManifestRecord r;
    r.tracklet_id = unsigned_field(obj, "tracklet_id", line_no);
    r.identity = unsigned_field(obj, "identity", line_no);
    r.camera = unsigned_field(obj, "camera", line_no);
    r.frames = unsigned_field(obj, "frames", line_no);
    const auto path = obj.find("path");
    if (path == obj.end() || !path->is_string() || path->get<std::string>().empty()) {
      throw ManifestError("line " + std::to_string(line_no) + ": field 'path' must be a non-empty string");
    }
    r.path = path->get<std::string>();
    if (r.frames == 0) throw ManifestError("line " + std::to_string(line_no) + ": frame count must be >= 1");
    if (!ids.insert(r.tracklet_id).second) {
      throw ManifestError("line " + std::to_string(line_no) + ": duplicate tracklet_id " + std::to_string(r.tracklet_id));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string serialize_manifest(const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const ManifestRecord& r : records) {
    const nlohmann::ordered_json obj = {{"tracklet_id", r.tracklet_id}, {"identity", r.identity},
                                        {"camera", r.camera},           {"path", r.path},
                                        {"frames", r.frames}};
    out += obj.dump() + "\n";
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::vector<ManifestRecord> records;
  try {
    records = parse_manifest(ss.str());
  } catch (const ManifestError& e) {
    throw ManifestError(manifest.string() + ": " + e.what());
  }
  Dataset ds;
  for (const ManifestRecord& r : records) {
    const std::filesystem::path path = manifest.parent_path() / r.path;
    Tracklet tr;
    tr.tracklet_id = r.tracklet_id;
    tr.identity = r.identity;
    tr.camera = r.camera;
    tr.source = path.string();
    tr.frames = find_tensor(read_archive(path), "frames");
    if (tr.frames.rank() != 4 || tr.frames.dim(0) != r.frames) {
      throw ManifestError(path.string() + ": expected " + std::to_string(r.frames) + " frames, archive holds shape " +
                          to_string(tr.frames.shape()));
    }
    ds.tracklets.push_back(std::move(tr));
  }
  ds.validate();
  return ds;
}

std::filesystem::path save_dataset(const Dataset& dataset, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir / stem);
  std::vector<ManifestRecord> records;
  for (const Tracklet& tr : dataset.tracklets) {
    const std::string rel = stem + "/" + std::to_string(tr.tracklet_id) + ".fgrd";
    write_archive({{"frames", tr.frames}}, dir / rel);
    records.push_back({tr.tracklet_id, tr.identity, tr.camera, rel, tr.num_frames()});
  }
  const std::filesystem::path manifest = dir / (stem + ".jsonl");
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + manifest.string() + " for writing");
  out << serialize_manifest(records);
  if (!out) throw std::runtime_error("failed writing " + manifest.string());
  return manifest;
}

}  // namespace fgreid::inline FGREID_PRECISION

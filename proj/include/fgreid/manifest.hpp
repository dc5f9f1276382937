#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fgreid/dataset.hpp"

namespace fgreid::inline FGREID_PRECISION {

/// One JSON object per line:
///   {"tracklet_id": 3, "identity": 1, "camera": 0, "path": "t/0003.fgrd", "frames": 16}
/// Paths are relative to the manifest's directory.
struct ManifestRecord {
  std::size_t tracklet_id = 0;
  std::size_t identity = 0;
  std::size_t camera = 0;
  std::string path;
  std::size_t frames = 0;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<ManifestRecord> parse_manifest(const std::string& text);
std::string serialize_manifest(const std::vector<ManifestRecord>& records);

/// Loads every tracklet's "frames" tensor, checking the frame count.
Dataset load_dataset(const std::filesystem::path& manifest);
/// Writes one archive per tracklet under `dir/<stem>/` plus `dir/<stem>.jsonl`.
std::filesystem::path save_dataset(const Dataset& dataset, const std::filesystem::path& dir, const std::string& stem);

}  // namespace fgreid::inline FGREID_PRECISION

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "markvqa/scene.hpp"

namespace markvqa {

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Manifest record for one scene; images are referenced by relative path.
nlohmann::json scene_to_json(const Scene& scene);

/// Metadata record followed by raw pixel bytes. Equal scenes serialize identically.
std::string serialize_scene(const Scene& scene);

struct DatasetManifest {
    std::filesystem::path path;
    std::size_t scene_count = 0;
    std::size_t qa_count = 0;
};

/// Writes images/<scene_id>_<view>.png and manifest.jsonl under `dir`.
DatasetManifest save_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& dir);

/// Reads and re-validates a dataset; malformed records raise ValidationError naming the line.
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

/// Generate `count` scenes with seeds 0..count-1.
std::vector<Scene> generate_dataset(const SceneConfig& config, std::size_t count);

/// Deterministic split: the last floor(n * val_fraction) scenes form "val", the rest "train".
/// Throws ValidationError for an unknown split name or an empty result.
std::vector<Scene> split_scenes(const std::vector<Scene>& scenes, double val_fraction, const std::string& split);

}  // namespace markvqa

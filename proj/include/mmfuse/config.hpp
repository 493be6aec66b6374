#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/data.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/train.hpp"

namespace mmfuse {

struct CvConfig {
  std::size_t folds = 5;
  std::size_t jobs = 1;
  // Independent repetitions of the whole comparison; each seed offsets the
  // data, model and training seeds.
  std::vector<std::uint64_t> seeds{0};
};

struct RunConfig {
  std::string preset = "desk";
  SyntheticSpec data;
  // Read samples from a generated dataset directory instead of generating
  // them in memory.
  std::optional<std::string> data_dir;
  ModelConfig model;
  TrainConfig train;
  CvConfig cv;
  std::vector<std::size_t> sweep_heads{1, 2, 4, 8};
  // Heads used for the multihead_gmu row of a comparison.
  std::size_t compare_heads = 3;
  std::string out_dir = "runs/out";

  void validate() const;  // throws ConfigError
};

std::vector<std::string> preset_names();
RunConfig preset(const std::string& name);  // throws ConfigError

nlohmann::json spec_to_json(const SyntheticSpec& spec);
SyntheticSpec spec_from_json(const nlohmann::json& j, const SyntheticSpec& base = {});
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base = {});
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base = {});

nlohmann::json run_config_to_json(const RunConfig& cfg);
// Keys missing from `j` keep the values of the preset named by j["preset"]
// (default "desk"). Unknown keys and ill-typed values are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Checkpoint directory: manifest.json (model config and, per tensor, name,
// shape, offset and count in floats) plus weights.bin holding the
// little-endian f32 values back to back.
void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const nlohmann::json& extra = nlohmann::json::object());
Model<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace mmfuse

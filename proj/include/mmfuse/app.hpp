#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/config.hpp"

namespace mmfuse {

// Repetition `seed` of a run: data, model and training seeds shifted by it.
RunConfig with_seed(const RunConfig& cfg, std::uint64_t seed);

// Samples from cfg.data_dir if set, else generated in memory. Volumes are
// standardized; EHR is left raw for the per-split scaler.
Dataset load_samples(const RunConfig& cfg);

struct StrategyRow {
  Fusion fusion = Fusion::gmu;
  std::size_t heads = 1;
  std::vector<std::uint64_t> seeds;
  std::vector<CvResult> runs;  // one per seed
  // Over every fold of every seed.
  double mean = 0;
  double stdev = 0;
};

struct CompareResult {
  MetricKind metric = MetricKind::auc;
  std::vector<StrategyRow> rows;
};

// Cross-validates one strategy on every seed of cfg.cv.seeds. `data` holds the
// samples for each seed in the same order (see load_samples).
StrategyRow run_strategy(const RunConfig& cfg, const std::vector<Dataset>& data, Fusion fusion,
                         std::size_t heads);

// All six strategies; multihead_gmu uses cfg.compare_heads.
CompareResult run_compare(const RunConfig& cfg);
nlohmann::json compare_json(const CompareResult& result, const RunConfig& cfg);
std::string compare_table(const CompareResult& result);

// multihead_gmu for each head count.
std::vector<StrategyRow> run_sweep(const RunConfig& cfg, const std::vector<std::size_t>& heads);
std::string sweep_csv(const std::vector<StrategyRow>& rows);

// Files written by the commands that take --out.
void cmd_generate(const RunConfig& cfg, const std::filesystem::path& out, bool force);

struct TrainReport {
  FitResult fit;
  std::vector<std::string> val_ids;
};
// Fits on the first cross-validation fold and writes history.csv,
// metrics.json and checkpoint/ under `out`.
TrainReport cmd_train(const RunConfig& cfg, const std::filesystem::path& out, bool force);

CompareResult cmd_compare(const RunConfig& cfg, const std::filesystem::path& out, bool force);
std::vector<StrategyRow> cmd_sweep_heads(const RunConfig& cfg, const std::filesystem::path& out,
                                         bool force);

// One PPM per requested depth per attention placement. The sample is looked
// up in the data the checkpoint was trained on unless `data_cfg` is given.
std::vector<std::filesystem::path> cmd_export_attention(
    const std::filesystem::path& checkpoint, const std::string& sample_id,
    const std::vector<std::size_t>& depths, const std::filesystem::path& out,
    const std::optional<RunConfig>& data_cfg = std::nullopt);

}  // namespace mmfuse

#include "mmfuse/app.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mmfuse/error.hpp"
#include "mmfuse/log.hpp"

namespace mmfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void prepare_out(const fs::path& out, bool force) {
  std::error_code ec;
  if (fs::exists(out, ec)) {
    if (!fs::is_directory(out, ec)) throw IoError(out.string() + ": exists and is not a directory");
    if (!fs::is_empty(out, ec) && !force)
      throw IoError(out.string() + ": directory is not empty (pass --force to overwrite)");
  }
  fs::create_directories(out, ec);
  if (ec) throw IoError(out.string() + ": " + ec.message());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

void finish_row(StrategyRow& row) {
  std::vector<double> all;
  for (const auto& r : row.runs)
    for (const auto& f : r.folds) all.push_back(f.metric);
  if (all.empty()) return;
  double sum = 0;
  for (double v : all) sum += v;
  row.mean = sum / static_cast<double>(all.size());
  double ss = 0;
  for (double v : all) ss += (v - row.mean) * (v - row.mean);
  row.stdev = std::sqrt(ss / static_cast<double>(all.size()));
}

std::vector<Dataset> load_per_seed(const RunConfig& cfg) {
  std::vector<Dataset> data;
  for (auto s : cfg.cv.seeds) data.push_back(load_samples(with_seed(cfg, s)));
  return data;
}

json row_json(const StrategyRow& row) {
  json runs = json::array();
  for (std::size_t i = 0; i < row.runs.size(); ++i) {
    const auto& r = row.runs[i];
    json folds = json::array();
    for (const auto& f : r.folds)
      folds.push_back({{"fold", f.fold}, {"metric", f.metric}, {"best_epoch", f.best_epoch}});
    runs.push_back({{"seed", row.seeds[i]}, {"mean", r.mean}, {"std", r.stdev}, {"folds", folds}});
  }
  return {{"strategy", fusion_name(row.fusion)},
          {"heads", row.heads},
          {"mean", row.mean},
          {"std", row.stdev},
          {"runs", runs}};
}

// The configuration as far as it affects results: output location and job
// count are left out so that result files compare equal across them.
json result_config(const RunConfig& cfg) {
  json j = run_config_to_json(cfg);
  j.erase("out_dir");
  j["cv"].erase("jobs");
  return j;
}

}  // namespace

RunConfig with_seed(const RunConfig& cfg, std::uint64_t seed) {
  RunConfig c = cfg;
  c.data.seed += seed;
  c.model.seed += seed;
  c.train.seed += seed;
  c.cv.seeds = {0};
  return c;
}

Dataset load_samples(const RunConfig& cfg) {
  Dataset data;
  if (cfg.data_dir) {
    data = load_dataset(*cfg.data_dir);
  } else {
    data = generate_synthetic(cfg.data);
  }
  if (data.empty()) throw ValueError("dataset has no samples");
  standardize_volumes(data);
  return data;
}

StrategyRow run_strategy(const RunConfig& cfg, const std::vector<Dataset>& data, Fusion fusion,
                         std::size_t heads) {
  if (data.size() != cfg.cv.seeds.size())
    throw ValueError("run_strategy: one dataset per seed expected");
  StrategyRow row;
  row.fusion = fusion;
  row.heads = fusion == Fusion::multihead_gmu ? heads : 1;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto seed = cfg.cv.seeds[i];
    const RunConfig sc = with_seed(cfg, seed);
    ModelConfig mc = for_fusion(sc.model, fusion);
    mc.heads = row.heads;
    log_info(std::string(fusion_name(fusion)) + " (heads " + std::to_string(row.heads) + "), seed " +
             std::to_string(seed));
    row.seeds.push_back(seed);
    row.runs.push_back(run_cv(data[i], mc, sc.train, sc.cv.folds, sc.cv.jobs));
  }
  finish_row(row);
  return row;
}

CompareResult run_compare(const RunConfig& cfg) {
  cfg.validate();
  const auto data = load_per_seed(cfg);
  CompareResult result;
  result.metric = cfg.train.resolve_metric(cfg.model.num_classes);
  for (Fusion f : kAllFusions) result.rows.push_back(run_strategy(cfg, data, f, cfg.compare_heads));
  return result;
}

json compare_json(const CompareResult& result, const RunConfig& cfg) {
  json rows = json::array();
  for (const auto& r : result.rows) rows.push_back(row_json(r));
  return {{"metric", metric_name(result.metric)},
          {"config", result_config(cfg)},
          {"strategies", rows}};
}

std::string compare_table(const CompareResult& result) {
  const std::string metric(metric_name(result.metric));
  std::size_t nseeds = 0;
  for (const auto& r : result.rows) nseeds = std::max(nseeds, r.runs.size());
  std::string out = pad("strategy", 16) + pad("heads", 7) + pad(metric + " mean +/- std", 20);
  for (std::size_t i = 0; i < nseeds && !result.rows.empty(); ++i)
    out += pad("seed " + std::to_string(result.rows[0].seeds[i]), 9);
  while (!out.empty() && out.back() == ' ') out.pop_back();
  out += "\n";
  for (const auto& r : result.rows) {
    std::string line = pad(std::string(fusion_name(r.fusion)), 16) + pad(std::to_string(r.heads), 7) +
                       pad(fmt("%.4f", r.mean) + " +/- " + fmt("%.4f", r.stdev), 20);
    for (const auto& run : r.runs) line += pad(fmt("%.4f", run.mean), 9);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

std::vector<StrategyRow> run_sweep(const RunConfig& cfg, const std::vector<std::size_t>& heads) {
  cfg.validate();
  if (heads.empty()) throw ConfigError("sweep: no head counts given");
  for (auto n : heads)
    if (n == 0) throw ConfigError("sweep: head counts must be positive");
  const auto data = load_per_seed(cfg);
  std::vector<StrategyRow> rows;
  for (auto n : heads) rows.push_back(run_strategy(cfg, data, Fusion::multihead_gmu, n));
  return rows;
}

std::string sweep_csv(const std::vector<StrategyRow>& rows) {
  std::string out = "n,mean,std\n";
  for (const auto& r : rows)
    out += std::to_string(r.heads) + "," + fmt("%.17g", r.mean) + "," + fmt("%.17g", r.stdev) + "\n";
  return out;
}

void cmd_generate(const RunConfig& cfg, const fs::path& out, bool force) {
  cfg.data.validate();
  prepare_out(out, force);
  std::error_code ec;
  fs::remove_all(out / "volumes", ec);
  const auto data = generate_synthetic(cfg.data);
  save_dataset(out, data, cfg.data);
  log_info("wrote " + std::to_string(data.size()) + " samples to " + out.string());
}

TrainReport cmd_train(const RunConfig& cfg, const fs::path& out, bool force) {
  cfg.validate();
  prepare_out(out, force);
  const RunConfig sc = with_seed(cfg, cfg.cv.seeds.front());
  const auto data = load_samples(sc);
  std::vector<std::size_t> labels;
  for (const auto& s : data) labels.push_back(s.label);
  const auto folds = stratified_kfold(labels, sc.cv.folds, sc.train.seed);
  const auto scaler = EhrScaler::fit(data, folds[0].train);
  Model<float> model(sc.model);
  TrainReport report;
  report.fit = fit(model, prepare_split(data, folds[0].train, scaler),
                   prepare_split(data, folds[0].val, scaler), sc.train);
  for (auto i : folds[0].val) report.val_ids.push_back(data[i].id);

  const auto metric = sc.train.resolve_metric(sc.model.num_classes);
  write_file_atomic(out / "history.csv", history_csv(report.fit.history));
  const json metrics = {{"metric", metric_name(metric)},
                        {"best_metric", report.fit.best_metric},
                        {"best_epoch", report.fit.best_epoch},
                        {"epochs", report.fit.history.size()},
                        {"train_samples", folds[0].train.size()},
                        {"val_samples", folds[0].val.size()}};
  write_file_atomic(out / "metrics.json", metrics.dump(2) + "\n");
  const json extra = {{"run_config", run_config_to_json(sc)},
                      {"ehr_scaler", {{"mean", scaler.mean}, {"scale", scaler.scale}}},
                      {"val_ids", report.val_ids}};
  save_checkpoint(out / "checkpoint", model, extra);
  log_info(std::string(metric_name(metric)) + " " + fmt("%.4f", report.fit.best_metric) +
           " at epoch " + std::to_string(report.fit.best_epoch));
  return report;
}

CompareResult cmd_compare(const RunConfig& cfg, const fs::path& out, bool force) {
  cfg.validate();
  prepare_out(out, force);
  auto result = run_compare(cfg);
  write_file_atomic(out / "results.json", compare_json(result, cfg).dump(2) + "\n");
  write_file_atomic(out / "table.txt", compare_table(result));
  return result;
}

std::vector<StrategyRow> cmd_sweep_heads(const RunConfig& cfg, const fs::path& out, bool force) {
  cfg.validate();
  prepare_out(out, force);
  auto rows = run_sweep(cfg, cfg.sweep_heads);
  write_file_atomic(out / "sweep_heads.csv", sweep_csv(rows));
  json j = json::array();
  for (const auto& r : rows) j.push_back(row_json(r));
  write_file_atomic(out / "sweep_heads.json", json{{"config", result_config(cfg)}, {"rows", j}}.dump(2) + "\n");
  return rows;
}

std::vector<fs::path> cmd_export_attention(const fs::path& checkpoint, const std::string& sample_id,
                                           const std::vector<std::size_t>& depths, const fs::path& out,
                                           const std::optional<RunConfig>& data_cfg) {
  Model<float> model = load_checkpoint(checkpoint);
  if (model.config().placements().empty()) throw ConfigError("model has no attention module");
  if (depths.empty()) throw ConfigError("export-attention: no depths given");

  json extra;
  try {
    extra = json::parse(read_file(checkpoint / "manifest.json")).value("extra", json::object());
  } catch (const json::exception& e) {
    throw FormatError((checkpoint / "manifest.json").string() + ": " + e.what());
  }
  RunConfig rc;
  if (data_cfg) {
    rc = *data_cfg;
  } else if (extra.contains("run_config")) {
    rc = run_config_from_json(extra["run_config"]);
  } else {
    throw ConfigError(checkpoint.string() + ": checkpoint does not record its data; pass --config");
  }
  const auto data = load_samples(rc);
  const auto it = std::find_if(data.begin(), data.end(), [&](const Sample& s) { return s.id == sample_id; });
  if (it == data.end()) throw ValueError("no sample with id '" + sample_id + "'");

  EhrScaler scaler;
  if (extra.contains("ehr_scaler")) {
    scaler.mean = extra["ehr_scaler"].value("mean", std::vector<double>{});
    scaler.scale = extra["ehr_scaler"].value("scale", std::vector<double>{});
  }
  if (scaler.mean.size() != it->ehr.size() || scaler.scale.size() != it->ehr.size())
    throw FormatError(checkpoint.string() + ": EHR scaler does not match the sample's features");

  const auto& vol = it->volume;
  const std::size_t H = vol.dim(1), W = vol.dim(2), D = vol.dim(3);
  for (auto d : depths)
    if (d >= D)
      throw ValueError("depth " + std::to_string(d) + " out of range (volume depth " +
                       std::to_string(D) + ")");

  const auto ehr = scaler.apply(it->ehr);
  const auto maps = extract_attention(model, vol, Tensor<float>::from({ehr.size()}, ehr));
  const auto placements = model.config().placements();
  fs::create_directories(out);
  std::vector<fs::path> written;
  for (std::size_t p = 0; p < maps.size(); ++p) {
    for (auto d : depths) {
      std::vector<float> slice(H * W), q(H * W);
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          slice[h * W + w] = vol[(h * W + w) * D + d];
          q[h * W + w] = maps[p][(h * W + w) * D + d];
        }
      const auto path = out / (sample_id + "_stage" + std::to_string(placements[p]) + "_d" +
                               std::to_string(d) + ".ppm");
      export_attention_overlay(slice, q, H, W, path);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace mmfuse

#include "mmfuse/config.hpp"

#include <bit>
#include <cstdint>
#include <map>
#include <set>

#include "mmfuse/error.hpp"

namespace mmfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads the members of one JSON object, rejecting keys it was not asked for.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + ": invalid value " + it->dump());
    }
  }

  static bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  // Positive integers arrive as JSON numbers; reject negatives and fractions
  // instead of letting them wrap.
  void get_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!non_negative_integer(*it))
      throw ConfigError(where_ + "." + key + ": expected a non-negative integer, got " + it->dump());
    out = it->get<std::size_t>();
  }

  void get_sizes(const char* key, std::vector<std::size_t>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array()) throw ConfigError(where_ + "." + key + ": expected a list");
    out.clear();
    for (const auto& v : *it) {
      if (!non_negative_integer(v))
        throw ConfigError(where_ + "." + key + ": expected non-negative integers, got " + v.dump());
      out.push_back(v.get<std::size_t>());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

json spec_to_json(const SyntheticSpec& s) {
  return {{"n_samples", s.n_samples},
          {"volume_dims", s.volume_dims},
          {"ehr_dim", s.ehr_dim},
          {"class_ratio", s.class_ratio},
          {"blob_radius_range", s.blob_radius_range},
          {"blob_intensity", s.blob_intensity},
          {"noise_std", s.noise_std},
          {"ehr_signal_noise", s.ehr_signal_noise},
          {"coupling", coupling_name(s.coupling)},
          {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const json& j, const SyntheticSpec& base) {
  SyntheticSpec s = base;
  Reader r(j, "data");
  r.get_size("n_samples", s.n_samples);
  std::vector<std::size_t> dims(s.volume_dims.begin(), s.volume_dims.end());
  r.get_sizes("volume_dims", dims);
  if (dims.size() != 4) throw ConfigError("data.volume_dims: expected [C, H, W, D]");
  std::copy(dims.begin(), dims.end(), s.volume_dims.begin());
  r.get_size("ehr_dim", s.ehr_dim);
  r.get_sizes("class_ratio", s.class_ratio);
  r.get("blob_radius_range", s.blob_radius_range);
  r.get("blob_intensity", s.blob_intensity);
  r.get("noise_std", s.noise_std);
  r.get("ehr_signal_noise", s.ehr_signal_noise);
  std::string coupling(coupling_name(s.coupling));
  r.get("coupling", coupling);
  s.coupling = parse_coupling(coupling);
  r.get("seed", s.seed);
  r.finish();
  return s;
}

json model_config_to_json(const ModelConfig& c) {
  json j = {{"in_channels", c.in_channels},
            {"stage_channels", c.stage_channels},
            {"blocks_per_stage", c.blocks_per_stage},
            {"num_classes", c.num_classes},
            {"ehr_dim", c.ehr_dim},
            {"fusion", fusion_name(c.fusion)},
            {"heads", c.heads},
            {"attention_placements", nullptr},
            {"c_int", c.c_int},
            {"ehr_hidden", c.ehr_hidden},
            {"seed", c.seed}};
  if (c.attention_placements) j["attention_placements"] = *c.attention_placements;
  return j;
}

ModelConfig model_config_from_json(const json& j, const ModelConfig& base) {
  ModelConfig c = base;
  Reader r(j, "model");
  r.get_size("in_channels", c.in_channels);
  r.get_sizes("stage_channels", c.stage_channels);
  r.get_sizes("blocks_per_stage", c.blocks_per_stage);
  r.get_size("num_classes", c.num_classes);
  r.get_size("ehr_dim", c.ehr_dim);
  std::string fusion(fusion_name(c.fusion));
  r.get("fusion", fusion);
  c.fusion = parse_fusion(fusion);
  if (j.contains("fusion") && !j.contains("attention_placements")) c = for_fusion(c, c.fusion);
  r.get_size("heads", c.heads);
  if (const json* p = r.sub("attention_placements")) {
    if (p->is_null()) {
      c.attention_placements.reset();
    } else {
      std::vector<std::size_t> v;
      json obj = json::object();
      obj["attention_placements"] = *p;
      Reader wrap(obj, "model");
      wrap.get_sizes("attention_placements", v);
      c.attention_placements = v;
    }
  }
  r.get_size("c_int", c.c_int);
  r.get_size("ehr_hidden", c.ehr_hidden);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"patience", c.patience},
          {"warmup_epochs", c.warmup_epochs},
          {"plateau_factor", c.plateau_factor},
          {"metric", c.metric},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& base) {
  TrainConfig c = base;
  Reader r(j, "train");
  r.get("lr", c.lr);
  r.get_size("batch_size", c.batch_size);
  r.get_size("epochs", c.epochs);
  r.get_size("patience", c.patience);
  r.get_size("warmup_epochs", c.warmup_epochs);
  r.get("plateau_factor", c.plateau_factor);
  r.get("metric", c.metric);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

// ---------------------------------------------------------------------------

std::vector<std::string> preset_names() { return {"desk", "gos-like", "adni-like"}; }

RunConfig preset(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "desk") {
    c.data.n_samples = 500;
    c.data.volume_dims = {1, 24, 24, 12};
    c.data.ehr_dim = 8;
    c.data.coupling = Coupling::xor_interaction;
    // With noise at 1.0 the backbone memorizes the 400 training volumes long
    // before the interaction is found, and only about half the folds escape.
    c.data.noise_std = 0.1;
    c.data.blob_radius_range = {3.5, 5.0};
    c.model.stage_channels = {4, 8, 16, 32};
    c.model.blocks_per_stage = {1, 1, 1, 1};
    c.model.ehr_dim = 8;
    // The 6x6x3 map after the third stage is what lets attention pick a
    // hemisphere from the EHR; the 3x3x2 map alone is too coarse.
    c.model.attention_placements = std::vector<std::size_t>{2, 3};
    c.train.lr = 1e-2;
    c.train.batch_size = 8;
    c.train.epochs = 10;
    c.train.patience = 3;
    c.cv.seeds = {0, 1, 2, 3, 4};
    c.out_dir = "runs/desk";
  } else if (name == "gos-like") {
    c.data.n_samples = 2486;
    c.data.volume_dims = {1, 48, 48, 24};
    c.data.ehr_dim = 21;
    c.data.blob_radius_range = {3.0, 6.0};
    c.model.stage_channels = {16, 32, 64, 128};
    c.model.blocks_per_stage = {3, 4, 6, 3};
    c.model.ehr_dim = 21;
    c.train.lr = 3e-4;
    c.train.batch_size = 32;
    c.train.epochs = 50;
    c.train.patience = 3;
    c.train.metric = "auc";
    c.out_dir = "runs/gos-like";
  } else if (name == "adni-like") {
    c.data.n_samples = 800;
    c.data.volume_dims = {1, 48, 48, 24};
    c.data.ehr_dim = 10;
    c.data.class_ratio = {1, 1};
    c.data.blob_radius_range = {3.0, 6.0};
    c.model.stage_channels = {16, 32, 64, 128};
    c.model.blocks_per_stage = {3, 4, 6, 3};
    c.model.ehr_dim = 10;
    c.train.lr = 0.01;
    c.train.batch_size = 16;
    c.train.epochs = 50;
    c.train.patience = 5;
    c.train.metric = "oa";
    c.out_dir = "runs/adni-like";
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk, gos-like or adni-like)");
  }
  return c;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  train.resolve_metric(model.num_classes);
  if (model.ehr_dim != data.ehr_dim)
    throw ConfigError("model.ehr_dim (" + std::to_string(model.ehr_dim) +
                      ") must equal data.ehr_dim (" + std::to_string(data.ehr_dim) + ")");
  if (model.in_channels != data.volume_dims[0])
    throw ConfigError("model.in_channels must equal the channel count in data.volume_dims");
  if (model.num_classes < data.class_ratio.size())
    throw ConfigError("model.num_classes is smaller than the number of generated classes");
  if (cv.folds < 2) throw ConfigError("cv.folds must be at least 2");
  if (cv.jobs == 0) throw ConfigError("cv.jobs must be at least 1");
  if (cv.seeds.empty()) throw ConfigError("cv.seeds must not be empty");
  if (compare_heads == 0) throw ConfigError("compare_heads must be at least 1");
  for (auto n : sweep_heads)
    if (n == 0) throw ConfigError("sweep_heads must be positive integers");
}

json run_config_to_json(const RunConfig& c) {
  json cv = {{"folds", c.cv.folds}, {"jobs", c.cv.jobs}, {"seeds", c.cv.seeds}};
  return {{"preset", c.preset},
          {"data", spec_to_json(c.data)},
          {"data_dir", c.data_dir ? json(*c.data_dir) : json(nullptr)},
          {"model", model_config_to_json(c.model)},
          {"train", train_config_to_json(c.train)},
          {"cv", cv},
          {"sweep_heads", c.sweep_heads},
          {"compare_heads", c.compare_heads},
          {"out_dir", c.out_dir}};
}

RunConfig run_config_from_json(const json& j) {
  Reader r(j, "config");
  std::string name = "desk";
  r.get("preset", name);
  RunConfig c = preset(name);
  if (const json* d = r.sub("data")) c.data = spec_from_json(*d, c.data);
  if (const json* d = r.sub("data_dir")) {
    if (d->is_null()) c.data_dir.reset();
    else if (d->is_string()) c.data_dir = d->get<std::string>();
    else throw ConfigError("config.data_dir: expected a path or null");
  }
  if (const json* m = r.sub("model")) c.model = model_config_from_json(*m, c.model);
  if (const json* t = r.sub("train")) c.train = train_config_from_json(*t, c.train);
  if (const json* cv = r.sub("cv")) {
    Reader cr(*cv, "cv");
    cr.get_size("folds", c.cv.folds);
    cr.get_size("jobs", c.cv.jobs);
    cr.get("seeds", c.cv.seeds);
    cr.finish();
  }
  r.get_sizes("sweep_heads", c.sweep_heads);
  r.get_size("compare_heads", c.compare_heads);
  r.get("out_dir", c.out_dir);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& dir, const Model<float>& model, const json& extra) {
  json tensors = json::array();
  std::string blob;
  std::size_t offset = 0;
  for (const auto& t : model.state()) {
    tensors.push_back({{"name", t.name},
                       {"shape", t.tensor.shape()},
                       {"offset", offset},
                       {"count", t.tensor.size()},
                       {"trainable", t.trainable}});
    for (float v : t.tensor.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    offset += t.tensor.size();
  }
  json manifest = {{"format", "mmfuse-checkpoint"},
                   {"version", 1},
                   {"model", model_config_to_json(model.config())},
                   {"tensors", tensors},
                   {"blob", "weights.bin"},
                   {"blob_floats", offset},
                   {"extra", extra}};
  fs::create_directories(dir);
  write_file_atomic(dir / "weights.bin", blob);
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Model<float> load_checkpoint(const fs::path& dir) {
  const auto where = (dir / "manifest.json").string();
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw FormatError(where + ": " + e.what());
  }
  if (manifest.value("format", "") != "mmfuse-checkpoint" || manifest.value("version", 0) != 1)
    throw FormatError(where + ": not a version 1 mmfuse checkpoint");
  if (!manifest.contains("model") || !manifest.contains("tensors") || !manifest["tensors"].is_array())
    throw FormatError(where + ": missing model config or tensor table");
  Model<float> model(model_config_from_json(manifest["model"]));
  const std::string blob = read_file(dir / manifest.value("blob", "weights.bin"));
  if (blob.size() % 4 != 0) throw FormatError(where + ": weight blob is not a whole number of floats");
  const std::size_t floats = blob.size() / 4;

  std::map<std::string, const json*> entries;
  for (const auto& e : manifest["tensors"]) {
    if (!e.is_object() || !e.contains("name") || !e["name"].is_string())
      throw FormatError(where + ": malformed tensor entry");
    if (!entries.emplace(e["name"].get<std::string>(), &e).second)
      throw FormatError(where + ": tensor '" + e["name"].get<std::string>() + "' listed twice");
  }
  auto state = model.state();
  if (entries.size() != state.size())
    throw FormatError(where + ": checkpoint has " + std::to_string(entries.size()) +
                      " tensors, model expects " + std::to_string(state.size()));
  for (auto& t : state) {
    auto it = entries.find(t.name);
    if (it == entries.end()) throw FormatError(where + ": missing tensor '" + t.name + "'");
    const json& e = *it->second;
    Shape shape;
    std::size_t offset = 0, count = 0;
    try {
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      count = e.at("count").get<std::size_t>();
    } catch (const json::exception&) {
      throw FormatError(where + ": malformed entry for '" + t.name + "'");
    }
    if (shape != t.tensor.shape() || count != t.tensor.size())
      throw FormatError(where + ": tensor '" + t.name + "' has shape " + shape_str(shape) +
                        ", model expects " + shape_str(t.tensor.shape()));
    if (offset > floats || count > floats - offset)
      throw FormatError(where + ": tensor '" + t.name + "' lies outside the weight blob");
    auto data = t.tensor.node()->data.data();
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= std::uint32_t(static_cast<unsigned char>(blob[4 * (offset + i) + b])) << (8 * b);
      data[i] = std::bit_cast<float>(bits);
    }
  }
  model.set_mode(Mode::eval);
  return model;
}

}  // namespace mmfuse

#include "mmfuse/data.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mmfuse/config.hpp"
#include "mmfuse/error.hpp"

namespace mmfuse {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view coupling_name(Coupling c) {
  switch (c) {
    case Coupling::image_only: return "image_only";
    case Coupling::ehr_only: return "ehr_only";
    case Coupling::xor_interaction: return "xor_interaction";
  }
  return "?";
}

Coupling parse_coupling(std::string_view name) {
  for (Coupling c : {Coupling::image_only, Coupling::ehr_only, Coupling::xor_interaction})
    if (coupling_name(c) == name) return c;
  throw ConfigError("unknown coupling '" + std::string(name) + "'");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // 53 random mantissa bits
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

// Box-Muller on the raw engine output, so the stream is library independent.
double normal(std::mt19937_64& rng) {
  double u1;
  do u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<std::size_t> class_targets(const SyntheticSpec& spec) {
  std::size_t total = 0;
  for (auto r : spec.class_ratio) total += r;
  std::vector<std::size_t> target(spec.class_ratio.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < target.size(); ++c) {
    const double exact =
        static_cast<double>(spec.n_samples) * spec.class_ratio[c] / static_cast<double>(total);
    target[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += target[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < spec.n_samples; ++i, ++assigned) ++target[remainders[i].second];
  for (std::size_t c = 0; c < target.size(); ++c)
    if (target[c] == 0)
      throw ConfigError("class ratio cannot be met with " + std::to_string(spec.n_samples) +
                        " samples: class " + std::to_string(c) + " would be empty");
  return target;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_samples == 0) throw ConfigError("data: n_samples must be positive");
  for (auto d : volume_dims)
    if (d == 0) throw ConfigError("data: volume dims must be positive");
  if (ehr_dim == 0) throw ConfigError("data: ehr_dim must be positive");
  if (class_ratio.size() != 2)
    throw ConfigError("data: class_ratio must have two entries (label 0, label 1)");
  for (auto r : class_ratio)
    if (r == 0) throw ConfigError("data: class ratio parts must be positive");
  const auto [rlo, rhi] = blob_radius_range;
  if (!(rlo > 0) || !(rhi >= rlo))
    throw ConfigError("data: blob_radius_range must satisfy 0 < min <= max");
  const double h = static_cast<double>(volume_dims[1]), w = static_cast<double>(volume_dims[2]),
               d = static_cast<double>(volume_dims[3]);
  // The blob must fit inside its half of the W axis and inside H and D.
  if (2 * rhi > std::min({h - 1, std::floor(w / 2) - 1, d - 1}))
    throw ConfigError("data: blob radius " + std::to_string(rhi) + " does not fit volume " +
                      std::to_string(volume_dims[1]) + "x" + std::to_string(volume_dims[2]) + "x" +
                      std::to_string(volume_dims[3]));
  if (!(noise_std >= 0) || !(ehr_signal_noise >= 0) || !std::isfinite(blob_intensity))
    throw ConfigError("data: noise levels must be non-negative");
}

bool inside_blob(const Latent& latent, std::size_t h, std::size_t w, std::size_t d) {
  const double dh = static_cast<double>(h) - latent.center[0];
  const double dw = static_cast<double>(w) - latent.center[1];
  const double dd = static_cast<double>(d) - latent.center[2];
  return dh * dh + dw * dw + dd * dd <= latent.radius * latent.radius;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto target = class_targets(spec);
  std::vector<std::size_t> count(target.size(), 0);
  std::mt19937_64 rng(spec.seed);
  const auto [C, H, W, D] = spec.volume_dims;
  const double half = std::floor(static_cast<double>(W) / 2);

  Dataset data;
  data.reserve(spec.n_samples);
  while (data.size() < spec.n_samples) {
    Latent lat;
    lat.b_img = static_cast<int>(rng() >> 63);
    lat.b_ehr = static_cast<int>(rng() >> 63);
    int label = 0;
    switch (spec.coupling) {
      case Coupling::image_only: label = lat.b_img; break;
      case Coupling::ehr_only: label = lat.b_ehr; break;
      case Coupling::xor_interaction: label = lat.b_img ^ lat.b_ehr; break;
    }
    if (count[label] >= target[label]) continue;
    ++count[label];
    lat.radius = uniform(rng, spec.blob_radius_range[0], spec.blob_radius_range[1]);
    const double r = lat.radius;
    lat.center[0] = uniform(rng, r, static_cast<double>(H) - 1 - r);
    lat.center[1] = lat.b_img ? uniform(rng, half + r, static_cast<double>(W) - 1 - r)
                              : uniform(rng, r, half - 1 - r);
    lat.center[2] = uniform(rng, r, static_cast<double>(D) - 1 - r);

    Sample s;
    s.id = "s" + std::to_string(data.size());
    s.label = static_cast<std::size_t>(label);
    s.latent = lat;
    data.push_back(std::move(s));
  }

  // Volumes and EHR draw from per-sample streams.
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& s = data[i];
    std::mt19937_64 srng(mix_seed(spec.seed, i));
    std::vector<float> vol(C * H * W * D);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          for (std::size_t d = 0; d < D; ++d) {
            double v = spec.noise_std * normal(srng);
            if (inside_blob(s.latent, h, w, d)) v += spec.blob_intensity;
            vol[((c * H + h) * W + w) * D + d] = static_cast<float>(v);
          }
    s.volume = Tensor<float>::from({C, H, W, D}, std::move(vol));
    s.ehr.resize(spec.ehr_dim);
    s.ehr[0] = static_cast<float>((2.0 * s.latent.b_ehr - 1.0) + spec.ehr_signal_noise * normal(srng));
    for (std::size_t j = 1; j < spec.ehr_dim; ++j) s.ehr[j] = static_cast<float>(normal(srng));
  }
  return data;
}

std::uint64_t content_hash(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : data) {
    feed(s.id.data(), s.id.size());
    const std::uint64_t label = s.label;
    feed(&label, sizeof label);
    for (float v : s.ehr) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      feed(&bits, 4);
    }
    for (float v : s.volume.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      feed(&bits, 4);
    }
  }
  return h;
}

Tensor<float> standardize_volume(const Tensor<float>& volume) {
  const auto& v = volume.values();
  double mean = 0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  if (!(var > 0)) throw ValueError("standardize: volume has zero variance");
  const double inv = 1.0 / std::sqrt(var);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>((v[i] - mean) * inv);
  return Tensor<float>::from(volume.shape(), std::move(out));
}

void standardize_volumes(Dataset& data) {
  for (auto& s : data) s.volume = standardize_volume(s.volume);
}

EhrScaler EhrScaler::fit(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValueError("EHR scaler: no samples to fit on");
  const std::size_t m = data[indices[0]].ehr.size();
  EhrScaler s;
  s.mean.assign(m, 0.0);
  s.scale.assign(m, 0.0);
  for (auto i : indices)
    for (std::size_t j = 0; j < m; ++j) s.mean[j] += data[i].ehr[j];
  for (auto& v : s.mean) v /= static_cast<double>(indices.size());
  for (auto i : indices)
    for (std::size_t j = 0; j < m; ++j) s.scale[j] += std::pow(data[i].ehr[j] - s.mean[j], 2);
  for (auto& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(indices.size()));
    if (!(v > 0)) v = 1.0;
  }
  return s;
}

std::vector<float> EhrScaler::apply(const std::vector<float>& ehr) const {
  if (ehr.size() != mean.size())
    throw ShapeError("EHR scaler: vector of length " + std::to_string(ehr.size()) +
                     ", fitted on " + std::to_string(mean.size()));
  std::vector<float> out(ehr.size());
  for (std::size_t j = 0; j < ehr.size(); ++j)
    out[j] = static_cast<float>((ehr[j] - mean[j]) / scale[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading " + path.string());
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("error writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
  }
}

namespace {

void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

std::uint16_t get_u16(std::string_view s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) |
                                    (static_cast<unsigned char>(s[at + 1]) << 8));
}

}  // namespace

std::string encode_volume(const Tensor<float>& volume) {
  std::string out = "MMFV";
  put_u16(out, 1);
  put_u16(out, static_cast<std::uint16_t>(volume.ndim()));
  for (auto d : volume.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * volume.size());
  for (float v : volume.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor<float> decode_volume(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 8) throw FormatError(origin + ": truncated volume header");
  if (bytes.substr(0, 4) != "MMFV") throw FormatError(origin + ": bad magic, not a volume file");
  const auto version = get_u16(bytes, 4);
  if (version != 1) throw FormatError(origin + ": unsupported volume version " + std::to_string(version));
  const std::size_t ndim = get_u16(bytes, 6);
  if (ndim == 0) throw FormatError(origin + ": volume has no dimensions");
  const std::size_t header = 8 + 4 * ndim;
  if (bytes.size() < header) throw FormatError(origin + ": truncated volume header");
  Shape shape(ndim);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    shape[i] = get_u32(bytes, 8 + 4 * i);
    if (shape[i] == 0) throw FormatError(origin + ": zero extent in volume header");
    count *= shape[i];
    if (count > bytes.size()) throw FormatError(origin + ": payload shorter than header dims");
  }
  if (bytes.size() - header != 4 * count)
    throw FormatError(origin + ": payload has " + std::to_string(bytes.size() - header) +
                      " bytes, header implies " + std::to_string(4 * count));
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i)
    data[i] = std::bit_cast<float>(get_u32(bytes, header + 4 * i));
  return Tensor<float>::from(std::move(shape), std::move(data));
}

void write_volume(const fs::path& path, const Tensor<float>& volume) {
  write_file_atomic(path, encode_volume(volume));
}

Tensor<float> read_volume(const fs::path& path) { return decode_volume(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// EHR CSV

namespace {

std::string format_float(float v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                        : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string encode_ehr_csv(const EhrTable& table) {
  std::string out = "id,label";
  for (const auto& name : table.feature_names) out += "," + name;
  out += "\n";
  for (std::size_t i = 0; i < table.ids.size(); ++i) {
    if (table.features[i].size() != table.feature_names.size())
      throw ShapeError("EHR row " + table.ids[i] + " has " + std::to_string(table.features[i].size()) +
                       " features, header has " + std::to_string(table.feature_names.size()));
    out += table.ids[i] + "," + std::to_string(table.labels[i]);
    for (float v : table.features[i]) out += "," + format_float(v);
    out += "\n";
  }
  return out;
}

EhrTable parse_ehr_csv(std::string_view text, const std::string& origin) {
  if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
  EhrTable table;
  std::size_t line_no = 0, pos = 0;
  bool have_header = false;
  std::set<std::string, std::less<>> seen;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(line_no);
    auto cells = split_row(line);
    for (auto& c : cells) c = trim(c);
    if (!have_header) {
      if (cells.size() < 2 || cells[0] != "id" || cells[1] != "label")
        throw FormatError(where + ": header must start with id,label");
      for (std::size_t j = 2; j < cells.size(); ++j) {
        if (cells[j].empty()) throw FormatError(where + ": empty feature name in header");
        table.feature_names.emplace_back(cells[j]);
      }
      have_header = true;
      continue;
    }
    if (cells.size() != table.feature_names.size() + 2)
      throw FormatError(where + ": expected " + std::to_string(table.feature_names.size() + 2) +
                        " columns, found " + std::to_string(cells.size()));
    const std::string id(cells[0]);
    if (id.empty()) throw FormatError(where + ": empty id");
    if (!seen.insert(id).second) throw FormatError(where + ": duplicate id '" + id + "'");
    std::size_t label = 0;
    auto lr = std::from_chars(cells[1].data(), cells[1].data() + cells[1].size(), label);
    if (lr.ec != std::errc() || lr.ptr != cells[1].data() + cells[1].size())
      throw FormatError(where + ": label '" + std::string(cells[1]) + "' is not a class index");
    std::vector<float> row;
    for (std::size_t j = 2; j < cells.size(); ++j) {
      const auto cell = cells[j];
      if (cell.empty() || cell == "NA")
        throw FormatError(where + ": missing value in column '" + table.feature_names[j - 2] + "'");
      float v = 0;
      auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (r.ec != std::errc() || r.ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw FormatError(where + ": non-numeric value '" + std::string(cell) + "' in column '" +
                          table.feature_names[j - 2] + "'");
      row.push_back(v);
    }
    table.ids.push_back(id);
    table.labels.push_back(label);
    table.features.push_back(std::move(row));
  }
  if (!have_header) throw FormatError(origin + ": missing header row");
  return table;
}

void write_ehr_csv(const fs::path& path, const EhrTable& table) {
  write_file_atomic(path, encode_ehr_csv(table));
}

EhrTable read_ehr_csv(const fs::path& path) { return parse_ehr_csv(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Dataset directories

namespace {

json latent_json(const Sample& s) {
  return {{"id", s.id},
          {"label", s.label},
          {"b_img", s.latent.b_img},
          {"b_ehr", s.latent.b_ehr},
          {"center", s.latent.center},
          {"radius", s.latent.radius}};
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& data, const SyntheticSpec& spec) {
  EhrTable table;
  const std::size_t m = data.empty() ? 0 : data[0].ehr.size();
  for (std::size_t j = 0; j < m; ++j) table.feature_names.push_back("f" + std::to_string(j));
  json latents = json::array();
  for (const auto& s : data) {
    write_volume(dir / "volumes" / (s.id + ".mmfv"), s.volume);
    table.ids.push_back(s.id);
    table.labels.push_back(s.label);
    table.features.push_back(s.ehr);
    latents.push_back(latent_json(s));
  }
  write_ehr_csv(dir / "ehr.csv", table);
  json manifest = {{"format", "mmfuse-dataset"},
                   {"version", 1},
                   {"created_at", utc_timestamp()},
                   {"seed", spec.seed},
                   {"n_samples", data.size()},
                   {"content_hash", hex64(content_hash(data))},
                   {"spec", spec_to_json(spec)},
                   {"samples", latents}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const auto table = read_ehr_csv(dir / "ehr.csv");
  json latents;
  if (fs::exists(dir / "manifest.json")) {
    try {
      latents = json::parse(read_file(dir / "manifest.json")).value("samples", json::array());
    } catch (const json::exception& e) {
      throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
  }
  Dataset data;
  for (std::size_t i = 0; i < table.ids.size(); ++i) {
    Sample s;
    s.id = table.ids[i];
    s.label = table.labels[i];
    s.ehr = table.features[i];
    s.volume = read_volume(dir / "volumes" / (s.id + ".mmfv"));
    if (s.volume.ndim() != 4)
      throw FormatError(s.id + ": volume must be 4-d [C x H x W x D], got " + shape_str(s.volume.shape()));
    if (i < latents.size() && latents[i].value("id", "") == s.id) {
      const auto& l = latents[i];
      s.latent.b_img = l.value("b_img", 0);
      s.latent.b_ehr = l.value("b_ehr", 0);
      s.latent.center = l.value("center", std::array<double, 3>{});
      s.latent.radius = l.value("radius", 0.0);
    }
    if (!data.empty() && s.volume.shape() != data[0].volume.shape())
      throw FormatError(s.id + ": volume shape " + shape_str(s.volume.shape()) +
                        " differs from " + shape_str(data[0].volume.shape()));
    data.push_back(std::move(s));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Overlays

std::string encode_overlay_ppm(const std::vector<float>& slice, const std::vector<float>& q,
                               std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  if (n == 0 || slice.size() != n || q.size() != n)
    throw ShapeError("overlay: slice and attention must both be " + std::to_string(height) + "x" +
                     std::to_string(width));
  for (float v : q)
    if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("overlay: attention values must lie in [0,1]");
  const auto [lo, hi] = std::minmax_element(slice.begin(), slice.end());
  const double range = static_cast<double>(*hi) - *lo;
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double gray = range > 0 ? 255.0 * (slice[i] - *lo) / range : 0.0;
    const double red = 255.0 * q[i], blue = 255.0 * (1.0 - q[i]);
    for (double c : {red, 0.0, blue})
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(0.5 * gray + 0.5 * c))));
  }
  return out;
}

void export_attention_overlay(const std::vector<float>& slice, const std::vector<float>& q,
                              std::size_t height, std::size_t width, const fs::path& path) {
  write_file_atomic(path, encode_overlay_ppm(slice, q, height, width));
}

}  // namespace mmfuse

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

enum class Coupling { image_only, ehr_only, xor_interaction };

std::string_view coupling_name(Coupling c);
Coupling parse_coupling(std::string_view name);  // throws ConfigError

struct SyntheticSpec {
  std::size_t n_samples = 500;
  std::array<std::size_t, 4> volume_dims{1, 24, 24, 12};  // C, H, W, D
  std::size_t ehr_dim = 8;
  // Relative frequency of label 0, label 1, ...
  std::vector<std::size_t> class_ratio{929, 1557};
  std::array<double, 2> blob_radius_range{2.5, 4.0};
  double blob_intensity = 2.0;
  double noise_std = 1.0;
  // Noise on the informative EHR feature, which is (2 b_ehr - 1) + noise.
  double ehr_signal_noise = 0.3;
  Coupling coupling = Coupling::xor_interaction;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// The hidden variables a sample was generated from.
struct Latent {
  int b_img = 0;  // 0: blob in the low-W half, 1: high-W half
  int b_ehr = 0;
  std::array<double, 3> center{};  // voxel coordinates (h, w, d)
  double radius = 0.0;
};

struct Sample {
  std::string id;
  Tensor<float> volume;  // [C x H x W x D]
  std::vector<float> ehr;
  std::size_t label = 0;
  Latent latent;
};

using Dataset = std::vector<Sample>;

// Noise volumes with one planted spherical blob each and EHR vectors whose
// first feature carries a second latent bit. The label is b_img, b_ehr or
// their XOR depending on the coupling; class counts follow class_ratio
// exactly, by rejection.
Dataset generate_synthetic(const SyntheticSpec& spec);

// True when voxel (h, w, d) lies inside the sample's blob.
bool inside_blob(const Latent& latent, std::size_t h, std::size_t w, std::size_t d);

// 64-bit FNV-1a over ids, labels, EHR and volume bytes in sample order.
std::uint64_t content_hash(const Dataset& data);

// Per-volume shift/scale to mean 0, variance 1 (population variance).
Tensor<float> standardize_volume(const Tensor<float>& volume);
void standardize_volumes(Dataset& data);

// Per-feature EHR standardization fitted on a subset of samples.
struct EhrScaler {
  std::vector<double> mean;
  std::vector<double> scale;

  static EhrScaler fit(const Dataset& data, const std::vector<std::size_t>& indices);
  std::vector<float> apply(const std::vector<float>& ehr) const;
};

// Volume files: "MMFV", u16 version = 1, u16 ndim, u32 dims, then f32
// payload, all little-endian.
std::string encode_volume(const Tensor<float>& volume);
Tensor<float> decode_volume(std::string_view bytes, const std::string& origin = "volume");
void write_volume(const std::filesystem::path& path, const Tensor<float>& volume);
Tensor<float> read_volume(const std::filesystem::path& path);

// EHR CSV: header row "id,label,<feature names...>", one row per sample.
struct EhrTable {
  std::vector<std::string> feature_names;
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  std::vector<std::vector<float>> features;
};

std::string encode_ehr_csv(const EhrTable& table);
EhrTable parse_ehr_csv(std::string_view text, const std::string& origin = "csv");
void write_ehr_csv(const std::filesystem::path& path, const EhrTable& table);
EhrTable read_ehr_csv(const std::filesystem::path& path);

// Writes volumes/<id>.mmfv, ehr.csv and manifest.json (spec, hash, latents).
void save_dataset(const std::filesystem::path& dir, const Dataset& data, const SyntheticSpec& spec);
Dataset load_dataset(const std::filesystem::path& dir);

// Binary PPM (P6) of an axial slice: min-max scaled grayscale blended 50/50
// with a blue-to-red map of q. slice and q are H x W, row-major.
std::string encode_overlay_ppm(const std::vector<float>& slice, const std::vector<float>& q,
                               std::size_t height, std::size_t width);
void export_attention_overlay(const std::vector<float>& slice, const std::vector<float>& q,
                              std::size_t height, std::size_t width,
                              const std::filesystem::path& path);

// Whole-file helpers. Writes go to a temporary sibling and are renamed into
// place.
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Deterministic Fisher-Yates shuffle that does not depend on the standard
// library's distribution implementations.
void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng);
// splitmix64 mixing for deriving independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace mmfuse

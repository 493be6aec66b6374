#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <span>

#include "mmfuse/data.hpp"
#include "mmfuse/error.hpp"
#include "oracles.hpp"

using namespace mmfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mmfuse_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SyntheticSpec small_spec(Coupling c = Coupling::xor_interaction) {
  SyntheticSpec s;
  s.n_samples = 40;
  s.volume_dims = {1, 12, 12, 6};
  s.ehr_dim = 4;
  s.blob_radius_range = {1.5, 2.5};
  s.coupling = c;
  s.seed = 11;
  return s;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("generator is deterministic and respects the class ratio") {
  auto spec = small_spec();
  spec.class_ratio = {1, 3};
  const auto a = generate_synthetic(spec), b = generate_synthetic(spec);
  CHECK(content_hash(a) == content_hash(b));
  std::size_t ones = 0;
  for (const auto& s : a) ones += s.label;
  CHECK(ones == 30);
  spec.seed = 12;
  CHECK(content_hash(generate_synthetic(spec)) != content_hash(a));
}

TEST_CASE("unsatisfiable class ratio is rejected") {
  auto spec = small_spec();
  spec.n_samples = 3;
  spec.class_ratio = {1, 1000};
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("label follows the coupling rule") {
  for (auto c : {Coupling::image_only, Coupling::ehr_only, Coupling::xor_interaction}) {
    for (const auto& s : generate_synthetic(small_spec(c))) {
      const int want = c == Coupling::image_only  ? s.latent.b_img
                       : c == Coupling::ehr_only ? s.latent.b_ehr
                                                  : (s.latent.b_img ^ s.latent.b_ehr);
      CHECK(static_cast<int>(s.label) == want);
    }
  }
}

TEST_CASE("blob sits inside the volume on the side given by b_img") {
  auto spec = small_spec();
  spec.n_samples = 200;
  const auto [C, H, W, D] = spec.volume_dims;
  for (const auto& s : generate_synthetic(spec)) {
    const auto& l = s.latent;
    REQUIRE(l.radius >= spec.blob_radius_range[0]);
    REQUIRE(l.radius <= spec.blob_radius_range[1]);
    CHECK(l.center[0] - l.radius >= 0.0);
    CHECK(l.center[0] + l.radius <= H - 1.0);
    CHECK(l.center[2] - l.radius >= 0.0);
    CHECK(l.center[2] + l.radius <= D - 1.0);
    if (l.b_img) {
      CHECK(l.center[1] - l.radius >= W / 2.0);
      CHECK(l.center[1] + l.radius <= W - 1.0);
    } else {
      CHECK(l.center[1] - l.radius >= 0.0);
      CHECK(l.center[1] + l.radius <= W / 2.0 - 1.0);
    }
  }
}

TEST_CASE("xor coupling hides the label from each modality") {
  SyntheticSpec spec;  // desk-sized: 500 samples
  spec.seed = 3;
  const auto data = generate_synthetic(spec);
  std::vector<double> label, b_img, ehr0;
  std::vector<int> ilabel;
  for (const auto& s : data) {
    label.push_back(static_cast<double>(s.label));
    ilabel.push_back(static_cast<int>(s.label));
    b_img.push_back(s.latent.b_img);
    ehr0.push_back(s.ehr[0]);
  }
  CHECK(std::abs(pearson(label, b_img)) < 0.1);
  // The best a unimodal model can do is score by its own latent bit.
  for (const auto* score : {&b_img, &ehr0}) {
    const double auc = oracle::mann_whitney_auc(*score, ilabel);
    CHECK(std::max(auc, 1.0 - auc) <= 0.6);
  }
  for (const auto& s : data) CHECK((s.latent.b_img ^ s.latent.b_ehr) == static_cast<int>(s.label));
}

TEST_CASE("standardize_volume") {
  std::mt19937_64 rng(5);
  auto v = Tensor<float>::from({1, 4, 5, 3}, [&] {
    std::vector<float> d(60);
    for (auto& x : d) x = static_cast<float>(3.0 + 7.0 * std::normal_distribution<double>()(rng));
    return d;
  }());
  auto s = standardize_volume(v);
  double mean = 0, var = 0;
  for (float x : s.data()) mean += x;
  mean /= 60;
  for (float x : s.data()) var += (x - mean) * (x - mean);
  var /= 60;
  CHECK(std::abs(mean) <= 1e-5);
  CHECK(std::abs(var - 1.0) <= 1e-4);
  auto twice = standardize_volume(s);
  for (std::size_t i = 0; i < 60; ++i) CHECK(twice.data()[i] == doctest::Approx(s.data()[i]).epsilon(1e-5));
  CHECK_THROWS_AS(standardize_volume(Tensor<float>::full({1, 2, 2, 2}, 4.0f)), ValueError);
}

TEST_CASE("volume file round trip and layout") {
  auto v = Tensor<float>::from({1, 2, 2, 2}, {0.1f, -2.5f, 3e-30f, 1e30f, -0.0f, 7.f, 8.f, 9.f});
  const auto bytes = encode_volume(v);
  CHECK(bytes.substr(0, 4) == "MMFV");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 4);
  const std::size_t header = 4 + 2 + 2 + 4 * 4;
  CHECK(bytes.size() - header == 32);
  float first;
  std::memcpy(&first, bytes.data() + header, 4);
  CHECK(first == 0.1f);

  const auto dir = scratch_dir("volume");
  write_volume(dir / "v.mmfv", v);
  const auto r = read_volume(dir / "v.mmfv");
  CHECK(r.shape() == v.shape());
  CHECK(same_bits(r.data(), v.data()));
}

TEST_CASE("volume reader rejects malformed files") {
  auto v = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto good = encode_volume(v);
  auto bad_magic = good;
  bad_magic.replace(0, 4, "XXXX");
  CHECK_THROWS_AS(decode_volume(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_volume(bad_version), FormatError);
  CHECK_THROWS_AS(decode_volume(good.substr(0, good.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_volume(good + "x"), FormatError);
  CHECK_THROWS_AS(decode_volume(good.substr(0, 10)), FormatError);
  CHECK_THROWS_AS(decode_volume(""), FormatError);
}

TEST_CASE("EHR CSV parsing") {
  const auto t = parse_ehr_csv("id,label,age,gcs,sex\na,0,1.5,3,0\nb,1,-2,4e-1,1\n");
  CHECK(t.feature_names == std::vector<std::string>{"age", "gcs", "sex"});
  REQUIRE(t.ids.size() == 2);
  CHECK(t.features[0] == std::vector<float>{1.5f, 3.f, 0.f});
  CHECK(t.features[1] == std::vector<float>{-2.f, 0.4f, 1.f});
  CHECK(t.labels == std::vector<std::size_t>{0, 1});

  const auto empty = parse_ehr_csv("id,label,x\n");
  CHECK(empty.ids.empty());
  CHECK(empty.feature_names.size() == 1);

  CHECK_THROWS_AS(parse_ehr_csv("id,label,x\na,0,1\na,1,2\n"), FormatError);
  CHECK_THROWS_AS(parse_ehr_csv("id,label,x\na,0,NA\n"), FormatError);
  CHECK_THROWS_AS(parse_ehr_csv("id,label,x\na,0,\n"), FormatError);
  CHECK_THROWS_AS(parse_ehr_csv("id,label,x\na,0,abc\n"), FormatError);
  CHECK_THROWS_AS(parse_ehr_csv("id,label,x,y\na,0,1\n"), FormatError);
  CHECK_THROWS_AS(parse_ehr_csv("label,id,x\n"), FormatError);
  CHECK_THROWS_AS(parse_ehr_csv(""), FormatError);
}

TEST_CASE("EHR CSV round trip is exact") {
  EhrTable t;
  t.feature_names = {"f0", "f1"};
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    t.ids.push_back("p" + std::to_string(i));
    t.labels.push_back(static_cast<std::size_t>(i % 2));
    t.features.push_back({static_cast<float>(std::normal_distribution<double>()(rng)),
                          static_cast<float>(1e-7 * std::normal_distribution<double>()(rng))});
  }
  const auto r = parse_ehr_csv(encode_ehr_csv(t));
  CHECK(r.ids == t.ids);
  CHECK(r.labels == t.labels);
  for (std::size_t i = 0; i < t.features.size(); ++i) CHECK(same_bits(r.features[i], t.features[i]));
}

TEST_CASE("dataset directory round trip") {
  const auto spec = small_spec();
  const auto data = generate_synthetic(spec);
  const auto dir = scratch_dir("dataset");
  save_dataset(dir, data, spec);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "volumes")) files += e.is_regular_file();
  CHECK(files == data.size());
  const auto back = load_dataset(dir);
  CHECK(content_hash(back) == content_hash(data));
  CHECK(back[7].latent.center == data[7].latent.center);
  CHECK(back[7].latent.b_img == data[7].latent.b_img);
}

TEST_CASE("EHR scaler fits on the given indices only") {
  auto data = generate_synthetic(small_spec());
  std::vector<std::size_t> train, val;
  for (std::size_t i = 0; i < data.size(); ++i) (i < 25 ? train : val).push_back(i);
  const auto sc = EhrScaler::fit(data, train);
  std::vector<double> m(4, 0.0);
  for (auto i : train)
    for (std::size_t j = 0; j < 4; ++j) m[j] += sc.apply(data[i].ehr)[j];
  for (double x : m) CHECK(std::abs(x / train.size()) < 1e-5);
  double vm = 0;
  for (auto i : val) vm += sc.apply(data[i].ehr)[1];
  CHECK(std::abs(vm / val.size()) > 1e-4);
  CHECK_THROWS_AS(sc.apply({1.f, 2.f}), ShapeError);
}

TEST_CASE("overlay PPM for a 2x2 fixture") {
  // gray = 0, 85, 170, 255; tint = (255 q, 0, 255 (1 - q)); halves rounded up.
  const std::string want = std::string("P6\n2 2\n255\n") +
                           std::string{'\x00', '\x00', '\x80', '\x4a', '\x2b', '\x8a',
                                       '\x95', '\x55', '\x95', '\xff', '\x80', '\x80'};
  const auto got = encode_overlay_ppm({0.f, 1.f, 2.f, 3.f}, {0.f, 0.25f, 0.5f, 1.f}, 2, 2);
  CHECK(got.size() == 11 + 12);
  CHECK(got == want);

  const auto blue = encode_overlay_ppm({5.f, 5.f, 5.f, 5.f}, {0.f, 0.f, 0.f, 0.f}, 2, 2);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(static_cast<unsigned char>(blue[11 + 3 * p]) == 0);
    CHECK(static_cast<unsigned char>(blue[11 + 3 * p + 2]) == 128);
  }
  const auto red = encode_overlay_ppm({5.f, 5.f, 5.f, 5.f}, {1.f, 1.f, 1.f, 1.f}, 2, 2);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(static_cast<unsigned char>(red[11 + 3 * p]) == 128);
    CHECK(static_cast<unsigned char>(red[11 + 3 * p + 2]) == 0);
  }
  CHECK_THROWS_AS(encode_overlay_ppm({0.f, 1.f, 2.f, 3.f}, {0.f, 0.f, 1.5f, 0.f}, 2, 2), ValueError);
  CHECK_THROWS_AS(encode_overlay_ppm({0.f, 1.f, 2.f, 3.f}, {0.f, -0.1f, 0.f, 0.f}, 2, 2), ValueError);
  CHECK_THROWS_AS(encode_overlay_ppm({0.f, 1.f, 2.f}, {0.f, 0.f, 0.f, 0.f}, 2, 2), ShapeError);
}

}  // TEST_SUITE

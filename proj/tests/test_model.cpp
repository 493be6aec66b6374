#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "mmfuse/error.hpp"
#include "mmfuse/grad_check.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/train.hpp"
#include "oracles.hpp"

using namespace mmfuse;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

ModelConfig toy_config(Fusion f) {
  ModelConfig c;
  c.stage_channels = {2, 3, 4, 4};
  c.ehr_dim = 3;
  c.fusion = f;
  c.ehr_hidden = 5;
  c.seed = 11;
  return c;
}

template <typename T>
Tensor<T> random_t(Shape shape, std::mt19937_64& rng) {
  auto v = oracle::random_vector(shape_numel(shape), rng);
  return Tensor<T>::from(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

bool same_values(const TD& a, const TD& b) { return a.shape() == b.shape() && a.values() == b.values(); }

}  // namespace

TEST_SUITE("model") {

TEST_CASE("fusion names round-trip and unknown names are rejected") {
  for (Fusion f : kAllFusions) CHECK(parse_fusion(fusion_name(f)) == f);
  CHECK_THROWS_AS(parse_fusion("late"), ConfigError);
}

TEST_CASE("config validation") {
  auto c = toy_config(Fusion::gmu);
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.attention_placements = std::vector<std::size_t>{4};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.attention_placements = std::vector<std::size_t>{1, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.heads = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.fusion = Fusion::multihead_gmu;
  bad.heads = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config(Fusion::image_only);
  bad.attention_placements = std::vector<std::size_t>{3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.blocks_per_stage = {1, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.num_classes = 1;
  CHECK_THROWS_AS(Model<float>{bad}, ConfigError);
}

TEST_CASE("placements default to the last stage for bimodal heads only") {
  CHECK(toy_config(Fusion::gmu).placements() == std::vector<std::size_t>{3});
  CHECK(toy_config(Fusion::concat).placements() == std::vector<std::size_t>{3});
  CHECK(toy_config(Fusion::image_only).placements().empty());
  CHECK(toy_config(Fusion::ehr_only).placements().empty());
  auto c = toy_config(Fusion::linear_sum);
  c.attention_placements = std::vector<std::size_t>{3, 1};
  CHECK(c.placements() == std::vector<std::size_t>{1, 3});

  auto switched = for_fusion(c, Fusion::image_only);
  CHECK_FALSE(switched.attention_placements.has_value());
  CHECK_NOTHROW(switched.validate());
  c.fusion = Fusion::multihead_gmu;
  c.heads = 4;
  CHECK(for_fusion(c, Fusion::gmu).heads == 1);
  CHECK(for_fusion(c, Fusion::multihead_gmu).heads == 4);
}

TEST_CASE("fused dimension per head") {
  ModelConfig c;
  c.stage_channels = {8, 16, 32, 64};
  c.ehr_dim = 21;
  c.fusion = Fusion::image_only;
  CHECK(c.fused_dim() == 64);
  c.fusion = Fusion::ehr_only;
  CHECK(c.fused_dim() == 32);
  c.fusion = Fusion::concat;
  CHECK(c.fused_dim() == 85);
  c.fusion = Fusion::linear_sum;
  CHECK(c.fused_dim() == 21);
  c.fusion = Fusion::gmu;
  CHECK(c.resolved_c_int() == 21);
  CHECK(c.fused_dim() == 21);
  c.fusion = Fusion::multihead_gmu;
  c.heads = 3;
  CHECK(c.fused_dim() == 63);
  c.c_int = 5;
  CHECK(c.fused_dim() == 15);
}

TEST_CASE("attention at the last stage uses the C_int rule") {
  ModelConfig c;
  c.stage_channels = {8, 16, 32, 64};
  c.ehr_dim = 21;
  Model<float> m(c);
  bool found = false;
  for (const auto& e : m.state())
    if (e.name == "attention3.image_proj.weight") {
      found = true;
      CHECK(e.tensor.shape() == Shape{21, 64});
    }
  CHECK(found);
}

TEST_CASE("construction is deterministic in the seed and names are unique") {
  for (Fusion f : kAllFusions) {
    CAPTURE(fusion_name(f));
    auto c = toy_config(f);
    Model<float> a(c), b(c);
    auto sa = a.state(), sb = b.state();
    REQUIRE(sa.size() == sb.size());
    std::set<std::string> names;
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(sa[i].name == sb[i].name);
      CHECK(sa[i].tensor.values() == sb[i].tensor.values());
      names.insert(sa[i].name);
    }
    CHECK(names.size() == sa.size());
    c.seed = 12;
    Model<float> other(c);
    bool differs = false;
    auto so = other.state();
    for (std::size_t i = 0; i < sa.size(); ++i) differs |= sa[i].tensor.values() != so[i].tensor.values();
    CHECK(differs);
  }
}

TEST_CASE("every head yields finite logits and one map per placement") {
  std::mt19937_64 rng(5);
  auto image = random_t<float>({2, 1, 16, 16, 8}, rng);
  auto ehr = random_t<float>({2, 3}, rng);
  for (Fusion f : kAllFusions) {
    CAPTURE(fusion_name(f));
    auto c = toy_config(f);
    if (f == Fusion::multihead_gmu) c.heads = 3;
    if (is_bimodal(f)) c.attention_placements = std::vector<std::size_t>{1, 3};
    Model<float> m(c);
    auto out = m.forward_batch(image, ehr);
    CHECK(out.logits.shape() == Shape{2, 2});
    for (float v : out.logits.values()) CHECK(std::isfinite(v));
    if (is_bimodal(f)) {
      REQUIRE(out.attention.size() == 2);
      CHECK(out.attention[0].shape() == Shape{2, 1, 8, 8, 4});
      CHECK(out.attention[1].shape() == Shape{2, 1, 2, 2, 1});
      for (const auto& q : out.attention)
        for (float v : q.values()) CHECK((v >= 0.0f && v <= 1.0f));
    } else {
      CHECK(out.attention.empty());
    }
  }
}

TEST_CASE("batched forward agrees with per-sample forward in eval mode") {
  std::mt19937_64 rng(6);
  auto c = toy_config(Fusion::multihead_gmu);
  c.heads = 2;
  Model<double> m(c);
  m.set_mode(Mode::eval);
  auto image = random_t<double>({3, 1, 16, 16, 8}, rng);
  auto ehr = random_t<double>({3, 3}, rng);
  auto out = m.forward_batch(image, ehr);
  const std::size_t vol = 16 * 16 * 8;
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> iv(image.values().begin() + b * vol, image.values().begin() + (b + 1) * vol);
    std::vector<double> ev(ehr.values().begin() + b * 3, ehr.values().begin() + (b + 1) * 3);
    auto [logits, maps] = model_forward(m, TD::from({1, 16, 16, 8}, iv), TD::from({3}, ev));
    for (std::size_t k = 0; k < 2; ++k) CHECK(logits[k] == doctest::Approx(out.logits[b * 2 + k]).epsilon(1e-12));
  }
}

TEST_CASE("multihead with one head is bitwise the GMU model") {
  std::mt19937_64 rng(7);
  auto image = random_t<float>({2, 1, 16, 16, 8}, rng);
  auto ehr = random_t<float>({2, 3}, rng);
  auto cg = toy_config(Fusion::gmu);
  auto cm = toy_config(Fusion::multihead_gmu);
  Model<float> g(cg), mh(cm);
  CHECK(g.forward_batch(image, ehr).logits.values() == mh.forward_batch(image, ehr).logits.values());
}

TEST_CASE("unimodal models ignore the other modality") {
  std::mt19937_64 rng(8);
  auto image = random_t<double>({1, 16, 16, 8}, rng);
  auto ehr = random_t<double>({3}, rng);

  Model<double> e(toy_config(Fusion::ehr_only));
  e.set_mode(Mode::eval);
  auto base = model_forward(e, image, ehr).first;
  auto shuffled = image.values();
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(same_values(base, model_forward(e, TD::from(image.shape(), shuffled), ehr).first));
  CHECK(same_values(base, model_forward(e, TD::zeros(image.shape()), ehr).first));

  Model<double> im(toy_config(Fusion::image_only));
  im.set_mode(Mode::eval);
  auto ib = model_forward(im, image, ehr).first;
  CHECK(same_values(ib, model_forward(im, image, random_t<double>({3}, rng)).first));
}

TEST_CASE("nearest-neighbour upsampling") {
  auto q = TF::from({1, 2, 2, 1}, {0.1f, 0.2f, 0.3f, 0.4f});
  auto up = upsample_nearest(q, {4, 4, 2});
  CHECK(up.shape() == Shape{1, 4, 4, 2});
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 4; ++w)
      for (std::size_t d = 0; d < 2; ++d) CHECK(up[(h * 4 + w) * 2 + d] == q[(h / 2) * 2 + w / 2]);
  auto flat = upsample_nearest(TF::full({1, 3, 2, 1}, 0.7f), {7, 5, 3});
  for (float v : flat.values()) CHECK(v == 0.7f);
  CHECK_THROWS_AS(upsample_nearest(TF::zeros({2, 2, 2, 1}), {4, 4, 2}), ShapeError);
}

TEST_CASE("extract_attention resizes maps and needs an attention module") {
  std::mt19937_64 rng(9);
  auto image = random_t<float>({1, 16, 16, 8}, rng);
  auto ehr = random_t<float>({3}, rng);
  auto c = toy_config(Fusion::concat);
  c.attention_placements = std::vector<std::size_t>{2, 3};
  Model<float> m(c);
  auto maps = extract_attention(m, image, ehr);
  REQUIRE(maps.size() == 2);
  for (const auto& q : maps) {
    CHECK(q.shape() == Shape{1, 16, 16, 8});
    for (float v : q.values()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK(m.mode() == Mode::train);
  Model<float> img(toy_config(Fusion::image_only));
  try {
    extract_attention(img, image, ehr);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()) == "model has no attention module");
  }
}

TEST_CASE("full-model gradient check on a toy volume") {
  // Central differences are only compared where the +-h evaluations stay on
  // the same side of every relu and keep the same min-max winners.
  std::mt19937_64 rng(21);
  for (Fusion f : {Fusion::gmu, Fusion::concat}) {
    CAPTURE(fusion_name(f));
    auto c = toy_config(f);
    c.stage_channels = {2, 2, 3, 3};
    c.attention_placements = std::vector<std::size_t>{2, 3};
    Model<double> m(c);
    auto image = random_t<double>({2, 1, 16, 16, 8}, rng);
    auto ehr = random_t<double>({2, 3}, rng);
    std::vector<std::size_t> labels{0, 1};
    auto loss = [&] { return cross_entropy(m.forward_batch(image, ehr).logits, labels); };
    std::vector<TD> inputs;
    for (const auto& e : m.state())
      if (e.trainable && e.name.find("score.bias") == std::string::npos) inputs.push_back(e.tensor);
    inputs.push_back(ehr);
    auto rep = grad_check_piecewise(loss, inputs);
    CAPTURE(rep.worst_input);
    CAPTURE(rep.worst_coord);
    CAPTURE(rep.worst_fd);
    CAPTURE(rep.worst_ad);
    CAPTURE(rep.skipped);
    CHECK(rep.coords > 0);
    CHECK(rep.skipped * 10 < rep.coords);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}

}  // TEST_SUITE

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mmfuse/error.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/grad_check.hpp"
#include "oracles.hpp"

using namespace mmfuse;
using TD = Tensor<double>;

namespace {

TD random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false) {
  auto v = oracle::random_vector(shape_numel(shape), rng);
  return TD::from(std::move(shape), std::move(v), requires_grad);
}

void fill_random(Linear<double>& l, std::mt19937_64& rng) {
  for (auto& v : l.weight.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (auto& v : l.bias.data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
}

void set_all(Linear<double>& l, double w, double b) {
  for (auto& v : l.weight.data()) v = w;
  for (auto& v : l.bias.data()) v = b;
}

// Voxel-by-voxel evaluation of the attention equations with plain loops.
struct AttentionOracle {
  std::vector<double> q, out;
};

AttentionOracle attention_oracle(const AttentionParams<double>& p, const TD& image, const TD& ehr) {
  const std::size_t c1 = image.dim(0), ci = p.c_int(), cm = ehr.size();
  const std::size_t vol = image.size() / c1;
  std::vector<double> ehr_term(ci);
  for (std::size_t c = 0; c < ci; ++c) {
    double acc = p.ehr_proj.bias[c];
    for (std::size_t j = 0; j < cm; ++j) acc += p.ehr_proj.weight[c * cm + j] * ehr[j];
    ehr_term[c] = acc;
  }
  std::vector<double> raw(vol);
  for (std::size_t v = 0; v < vol; ++v) {
    double score = p.score.bias[0];
    for (std::size_t c = 0; c < ci; ++c) {
      double acc = p.image_proj.bias[c] + ehr_term[c];
      for (std::size_t k = 0; k < c1; ++k) acc += p.image_proj.weight[c * c1 + k] * image[k * vol + v];
      score += p.score.weight[c] * std::max(0.0, acc);
    }
    raw[v] = score;
  }
  const auto [mn, mx] = std::minmax_element(raw.begin(), raw.end());
  AttentionOracle o;
  o.q.resize(vol);
  for (std::size_t v = 0; v < vol; ++v)
    o.q[v] = (*mx - *mn > 1e-12) ? (raw[v] - *mn) / (*mx - *mn) : 1.0;
  o.out.resize(image.size());
  for (std::size_t k = 0; k < c1; ++k)
    for (std::size_t v = 0; v < vol; ++v) o.out[k * vol + v] = image[k * vol + v] * o.q[v];
  return o;
}

std::vector<double> gmu_oracle(const GmuParams<double>& p, const TD& img, const TD& ehr) {
  const std::size_t c1 = img.size(), cm = ehr.size(), ci = p.c_int();
  std::vector<double> out(ci);
  for (std::size_t c = 0; c < ci; ++c) {
    double a = p.image_proj.bias[c], b = p.ehr_proj.bias[c], z = p.gate.bias[c];
    for (std::size_t k = 0; k < c1; ++k) {
      a += p.image_proj.weight[c * c1 + k] * img[k];
      z += p.gate.weight[c * (c1 + cm) + k] * img[k];
    }
    for (std::size_t k = 0; k < cm; ++k) {
      b += p.ehr_proj.weight[c * cm + k] * ehr[k];
      z += p.gate.weight[c * (c1 + cm) + c1 + k] * ehr[k];
    }
    const double g = 1.0 / (1.0 + std::exp(-z));
    out[c] = g * std::tanh(a) + (1 - g) * std::tanh(b);
  }
  return out;
}

AttentionParams<double> random_attention(std::size_t c1, std::size_t cm, std::size_t ci,
                                         std::mt19937_64& rng) {
  AttentionParams<double> p(c1, cm, ci);
  fill_random(p.image_proj, rng);
  fill_random(p.ehr_proj, rng);
  fill_random(p.score, rng);
  return p;
}

GmuParams<double> random_gmu(std::size_t c1, std::size_t cm, std::size_t ci, std::mt19937_64& rng) {
  GmuParams<double> p(c1, cm, ci);
  fill_random(p.image_proj, rng);
  fill_random(p.ehr_proj, rng);
  fill_random(p.gate, rng);
  return p;
}

}  // namespace

TEST_SUITE("fusion") {

TEST_CASE("c_int_rule") {
  CHECK(c_int_rule(128, 21) == 37);
  CHECK(c_int_rule(512, 10) == 130);
  CHECK(c_int_rule(1, 1) == 1);
  CHECK(c_int_rule(64, 21) == 21);
  CHECK_THROWS_AS(c_int_rule(0, 3), ValueError);
}

TEST_CASE("minmax_normalize examples") {
  CHECK(minmax_normalize(TD::from({3}, {2, 4, 6})).values() == std::vector<double>{0, 0.5, 1});
  CHECK(minmax_normalize(TD::from({3}, {5, 5, 5})).values() == std::vector<double>{1, 1, 1});
  CHECK(minmax_normalize(TD::from({2}, {0, 1})).values() == std::vector<double>{0, 1});
  CHECK(minmax_normalize(TD::from({2}, {1.0, 1.0 + 1e-13})).values() == std::vector<double>{1, 1});
}

TEST_CASE("minmax_normalize is invariant under positive affine maps") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_tensor({1, 3, 2, 2}, rng);
    const double a = std::uniform_real_distribution<double>(0.1, 10)(rng);
    const double c = std::uniform_real_distribution<double>(-5, 5)(rng);
    auto base = minmax_normalize(q);
    auto moved = minmax_normalize(add(scale(q, a), c));
    for (std::size_t i = 0; i < q.size(); ++i) CHECK(moved[i] == doctest::Approx(base[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention with zero score layer passes features through") {
  std::mt19937_64 rng(1);
  auto p = random_attention(3, 4, 2, rng);
  set_all(p.score, 0.0, 0.0);
  auto img = random_tensor({3, 2, 3, 2}, rng);
  auto ehr = random_tensor({4}, rng);
  auto out = mm_attention_forward(p, img, ehr);
  for (double q : out.attention.values()) CHECK(q == 1.0);
  CHECK(out.features.values() == img.values());
}

TEST_CASE("forced Q of ones is the identity and Q gates channels homogeneously") {
  std::mt19937_64 rng(2);
  auto img = random_tensor({4, 2, 2, 3}, rng);
  auto ones = TD::full({1, 2, 2, 3}, 1.0);
  CHECK(attention_gate(img, ones).values() == img.values());

  auto q = minmax_normalize(random_tensor({1, 2, 2, 3}, rng));
  auto base = attention_gate(img, q);
  auto scaled = img.detach();
  const double lambda = 2.75;
  const std::size_t vol = 12, ch = 2;
  for (std::size_t v = 0; v < vol; ++v) scaled.data()[ch * vol + v] *= lambda;
  auto gated = attention_gate(scaled, q);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t v = 0; v < vol; ++v) {
      const double expect = c == ch ? lambda * base[c * vol + v] : base[c * vol + v];
      CHECK(gated[c * vol + v] == doctest::Approx(expect).epsilon(1e-14));
    }
  CHECK_THROWS_AS(attention_gate(img, TD::full({1, 2, 2, 2}, 1.0)), ShapeError);
}

TEST_CASE("hand-traced attention example") {
  AttentionParams<double> p(1, 1, 1);
  set_all(p.image_proj, 1.0, 0.0);
  set_all(p.ehr_proj, 1.0, 0.0);
  set_all(p.score, 1.0, 0.0);
  auto img = TD::from({1, 1, 1, 2}, {1, 3});
  auto ehr = TD::from({1}, {1});
  auto out = mm_attention_forward(p, img, ehr);
  CHECK(out.raw_score.values() == std::vector<double>{2, 4});
  CHECK(out.attention.values() == std::vector<double>{0, 1});
  CHECK(out.features.values() == std::vector<double>{0, 3});
  auto o = attention_oracle(p, img, ehr);
  CHECK(o.out == out.features.values());
}

TEST_CASE("attention matches the voxel-loop oracle and Q spans [0,1]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    std::uniform_int_distribution<std::size_t> ext(1, 4), ch(1, 6);
    const std::size_t c1 = ch(rng), cm = ch(rng);
    auto p = random_attention(c1, cm, c_int_rule(c1, cm), rng);
    auto img = random_tensor({c1, ext(rng), ext(rng), 1 + ext(rng)}, rng);
    auto ehr = random_tensor({cm}, rng);
    auto out = mm_attention_forward(p, img, ehr);
    auto o = attention_oracle(p, img, ehr);
    CHECK(out.attention.shape() == Shape{1, img.dim(1), img.dim(2), img.dim(3)});
    for (std::size_t i = 0; i < o.q.size(); ++i) CHECK(out.attention[i] == doctest::Approx(o.q[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < o.out.size(); ++i) CHECK(out.features[i] == doctest::Approx(o.out[i]).epsilon(1e-12));
    const auto& q = out.attention.values();
    CHECK(*std::min_element(q.begin(), q.end()) >= 0.0);
    CHECK(*std::max_element(q.begin(), q.end()) <= 1.0);
    const auto& raw = out.raw_score.values();
    auto [mn, mx] = std::minmax_element(raw.begin(), raw.end());
    if (*mx - *mn > 1e-12) {
      CHECK(std::count(q.begin(), q.end(), 0.0) >= 1);
      CHECK(std::count(q.begin(), q.end(), 1.0) >= 1);
    }
  }
}

TEST_CASE("attention rejects mismatched or non-finite inputs") {
  std::mt19937_64 rng(4);
  auto p = random_attention(2, 3, 1, rng);
  CHECK_THROWS_AS(mm_attention_forward(p, TD::zeros({3, 2, 2, 2}), TD::zeros({3})), ShapeError);
  CHECK_THROWS_AS(mm_attention_forward(p, TD::zeros({2, 2, 2, 2}), TD::zeros({4})), ShapeError);
  auto bad = TD::zeros({2, 2, 2, 2});
  bad.data()[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(mm_attention_forward(p, bad, TD::zeros({3})), ValueError);
}

TEST_CASE("GMU gate examples") {
  std::mt19937_64 rng(5);
  auto p = random_gmu(3, 2, 4, rng);
  auto img = random_tensor({3}, rng);
  auto ehr = random_tensor({2}, rng);

  set_all(p.gate, 0.0, 0.0);
  auto half = gmu_forward_detailed(p, img, ehr);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(half.gate[i] == 0.5);
    CHECK(half.fused[i] == doctest::Approx((half.h_image[i] + half.h_ehr[i]) / 2).epsilon(1e-15));
  }
  set_all(p.gate, 0.0, 20.0);
  auto hi = gmu_forward_detailed(p, img, ehr);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(hi.fused[i] - hi.h_image[i]) <= 1e-8);
  set_all(p.gate, 0.0, -20.0);
  auto lo = gmu_forward_detailed(p, img, ehr);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(lo.fused[i] - lo.h_ehr[i]) <= 1e-8);

  GmuParams<double> zero(3, 2, 4);
  auto fused_zero = gmu_forward(zero, img, ehr);
  for (double v : fused_zero.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(gmu_forward(zero, TD::zeros({4}), ehr), ShapeError);
}

TEST_CASE("GMU matches oracle and is a convex blend") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> ch(1, 8);
    const std::size_t c1 = ch(rng), cm = ch(rng), ci = ch(rng);
    auto p = random_gmu(c1, cm, ci, rng);
    auto img = random_tensor({c1}, rng);
    auto ehr = random_tensor({cm}, rng);
    auto out = gmu_forward_detailed(p, img, ehr);
    auto ref = gmu_oracle(p, img, ehr);
    for (std::size_t i = 0; i < ci; ++i) {
      CHECK(out.fused[i] == doctest::Approx(ref[i]).epsilon(1e-12));
      const double lo = std::min(out.h_image[i], out.h_ehr[i]);
      const double hi = std::max(out.h_image[i], out.h_ehr[i]);
      const double slack = 4 * std::numeric_limits<double>::epsilon();
      CHECK(out.fused[i] >= lo - slack);
      CHECK(out.fused[i] <= hi + slack);
    }
  }
}

TEST_CASE("multi-head GMU") {
  std::mt19937_64 rng(7);
  auto img = random_tensor({5}, rng);
  auto ehr = random_tensor({3}, rng);

  MultiHeadGmu<double> one(1, 5, 3, 2);
  Rng r(3);
  one.init(r);
  CHECK(multihead_gmu_forward(one, img, ehr).values() == gmu_forward(one.heads[0], img, ehr).values());

  MultiHeadGmu<double> four(4, 128, 21, c_int_rule(128, 21));
  CHECK(four.output_dim() == 148);
  CHECK(multihead_gmu_forward(four, TD::zeros({128}), TD::zeros({21})).size() == 148);

  MultiHeadGmu<double> twin(2, 5, 3, 2);
  twin.heads[0] = random_gmu(5, 3, 2, rng);
  twin.heads[1] = twin.heads[0];
  auto out = multihead_gmu_forward(twin, img, ehr).values();
  auto head = gmu_forward(twin.heads[0], img, ehr).values();
  CHECK(std::vector<double>(out.begin(), out.begin() + 2) == head);
  CHECK(std::vector<double>(out.begin() + 2, out.end()) == head);

  CHECK_THROWS_AS(MultiHeadGmu<double>(0, 5, 3, 2), ValueError);
}

TEST_CASE("concatenation and linear-sum baselines") {
  auto c = concat_fusion(TD::from({2}, {1, 2}), TD::from({1}, {3}));
  CHECK(c.values() == std::vector<double>{1, 2, 3});
  CHECK(concat_fusion(TD::zeros({128}), TD::zeros({21})).size() == 149);
  CHECK_THROWS_AS(TD::zeros({0}), ShapeError);

  LinearSumParams<double> ls(1, 1, 1);
  auto one = TD::from({1}, {1});
  CHECK(linear_sum_fusion(ls, one, one).item() == 0.0);
  set_all(ls.image_proj, 2.0, 0.0);
  set_all(ls.ehr_proj, 3.0, 0.0);
  CHECK(linear_sum_fusion(ls, one, one).item() == 5.0);

  std::mt19937_64 rng(8);
  LinearSumParams<double> img_only(4, 3, 2);
  fill_random(img_only.image_proj, rng);
  auto img = random_tensor({4}, rng);
  CHECK(linear_sum_fusion(img_only, img, random_tensor({3}, rng)).values() ==
        img_only.image_proj.forward(img).values());
}

TEST_CASE("grad_check through attention, GMU and multi-head GMU") {
  // Probe weights are O(1e-2) so that f itself is small: the score layer's
  // scale and shift drop out of the min-max normalization, their exact
  // gradient is 0, and central-difference rounding noise scales with |f|.
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 10 && seed < 60; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(1000 + seed);
    std::uniform_int_distribution<std::size_t> ch(1, 5), ext(1, 3);
    const std::size_t c1 = ch(rng), cm = ch(rng);
    const std::size_t ci = c_int_rule(c1, cm);

    auto att = random_attention(c1, cm, ci, rng);
    auto img = random_tensor({c1, ext(rng), ext(rng), 1 + ext(rng)}, rng, true);
    auto ehr = random_tensor({cm}, rng, true);
    auto w = scale(random_tensor(img.shape(), rng), 1e-2);
    auto att_loss = [&] { return sum(mul(mm_attention_forward(att, img, ehr).features, w)); };
    if (nonsmooth_margin(att_loss()) < 1e-3) continue;
    ++checked;
    auto rep = grad_check(att_loss, {img, ehr, att.image_proj.weight, att.image_proj.bias,
                                     att.ehr_proj.weight, att.ehr_proj.bias, att.score.weight,
                                     att.score.bias});
    CAPTURE(rep.worst_input);
    CAPTURE(rep.worst_fd);
    CAPTURE(rep.worst_ad);
    CHECK(rep.max_rel_error <= 1e-4);

    auto gmu = random_gmu(c1, cm, ci, rng);
    auto pooled = random_tensor({c1}, rng, true);
    rep = grad_check([&] { return sum(gmu_forward(gmu, pooled, ehr)); },
                     {pooled, ehr, gmu.image_proj.weight, gmu.ehr_proj.bias, gmu.gate.weight,
                      gmu.gate.bias});
    CHECK(rep.max_rel_error <= 1e-4);

    for (std::size_t n : {1u, 3u}) {
      MultiHeadGmu<double> mh(n, c1, cm, ci);
      for (auto& h : mh.heads) h = random_gmu(c1, cm, ci, rng);
      auto wv = random_tensor({mh.output_dim()}, rng);
      std::vector<TD> inputs{pooled, ehr};
      for (auto& h : mh.heads) {
        inputs.push_back(h.image_proj.weight);
        inputs.push_back(h.gate.weight);
        inputs.push_back(h.ehr_proj.bias);
      }
      rep = grad_check([&] { return sum(mul(multihead_gmu_forward(mh, pooled, ehr), wv)); },
                       inputs);
      CHECK(rep.max_rel_error <= 1e-4);
    }
  }
  CHECK(checked == 10);
}

}  // TEST_SUITE

#include "mmfuse/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "mmfuse/error.hpp"

namespace mmfuse {

std::size_t c_int_rule(std::size_t image_channels, std::size_t ehr_dim) {
  if (image_channels == 0 || ehr_dim == 0)
    throw ValueError("c_int_rule: channel counts must be positive");
  return std::max<std::size_t>(1, (image_channels + ehr_dim) / 4);
}

namespace {

template <Real T>
void require_vector(const Tensor<T>& t, std::size_t n, const char* what, const char* op) {
  if (t.ndim() != 1 || t.dim(0) != n)
    throw ShapeError(std::string(op) + ": " + what + " must have shape [" + std::to_string(n) +
                     "], got " + shape_str(t.shape()));
}

// Fusion heads take a single feature vector [n] or a batch [B x n]; image
// and EHR inputs must agree on the batch size.
template <Real T>
void require_features(const Tensor<T>& image, std::size_t c1, const Tensor<T>& ehr,
                      std::size_t cm, const char* op) {
  const bool ok = image.ndim() == ehr.ndim() && image.shape().back() == c1 &&
                  ehr.shape().back() == cm &&
                  (image.ndim() == 1 || (image.ndim() == 2 && image.dim(0) == ehr.dim(0)));
  if (!ok)
    throw ShapeError(std::string(op) + ": expected image [" + std::to_string(c1) + "] and EHR [" +
                     std::to_string(cm) + "] (optionally batched), got " +
                     shape_str(image.shape()) + " and " + shape_str(ehr.shape()));
}

template <Real T>
void require_finite(const Tensor<T>& t, const char* what, const char* op) {
  if (!all_finite(t)) throw ValueError(std::string(op) + ": non-finite values in " + what);
}

// [out x in] linear weight viewed as a 1x1x1 convolution kernel.
template <Real T>
Tensor<T> as_pointwise_kernel(const Tensor<T>& weight) {
  return reshape(weight, {weight.dim(0), weight.dim(1), 1, 1, 1});
}

}  // namespace

template <Real T>
Tensor<T> minmax_normalize(const Tensor<T>& q) {
  const auto& v = q.values();
  if (v.empty()) throw ShapeError("minmax_normalize: empty input");
  std::size_t lo = 0, hi = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] < v[lo]) lo = i;
    if (v[i] > v[hi]) hi = i;
  }
  const T range = v[hi] - v[lo];
  const bool degenerate = !(static_cast<double>(range) > kMinMaxEps);
  std::vector<T> out(v.size(), T(1));
  if (!degenerate)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - v[lo]) / range;
  return make_result<T>(q.shape(), std::move(out), "minmax_normalize", {q},
                        [lo, hi, range, degenerate](Node<T>& n) {
                          auto g = n.parents[0]->ensure_grad();
                          if (degenerate) return;
                          T to_min = 0, to_max = 0;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T gi = n.grad[i];
                            g[i] += gi / range;
                            to_min += gi * (n.data[i] - T(1));
                            to_max -= gi * n.data[i];
                          }
                          g[lo] += to_min / range;
                          g[hi] += to_max / range;
                        });
}

// ---------------------------------------------------------------------------

template <Real T>
AttentionParams<T>::AttentionParams(std::size_t image_channels, std::size_t ehr_dim,
                                    std::size_t c_int)
    : image_proj(image_channels, c_int), ehr_proj(ehr_dim, c_int), score(c_int, 1) {}

template <Real T>
void AttentionParams<T>::init(Rng& rng) {
  init_params(image_proj, InitScheme::xavier, rng);
  init_params(ehr_proj, InitScheme::xavier, rng);
  init_params(score, InitScheme::xavier, rng);
}

template <Real T>
void AttentionParams<T>::collect(StateList<T>& out, const std::string& prefix) const {
  image_proj.collect(out, prefix + ".image_proj");
  ehr_proj.collect(out, prefix + ".ehr_proj");
  score.collect(out, prefix + ".score");
}

template <Real T>
Tensor<T> attention_gate(const Tensor<T>& image, const Tensor<T>& q) {
  if (image.ndim() != 4 || q.ndim() != 4 || q.dim(0) != 1 ||
      !std::equal(image.shape().begin() + 1, image.shape().end(), q.shape().begin() + 1))
    throw ShapeError("attention_gate: image " + shape_str(image.shape()) +
                     " incompatible with attention map " + shape_str(q.shape()));
  if (image.dim(0) == 1) return mul(image, q);
  std::vector<Tensor<T>> copies(image.dim(0), q);
  return mul(image, concat(copies, 0));
}

template <Real T>
AttentionOutput<T> mm_attention_forward(const AttentionParams<T>& params, const Tensor<T>& image,
                                        const Tensor<T>& ehr) {
  constexpr const char* op = "mm_attention";
  if (image.ndim() != 4 || image.dim(0) != params.image_channels())
    throw ShapeError(std::string(op) + ": image must be [" +
                     std::to_string(params.image_channels()) + ",H,W,D], got " +
                     shape_str(image.shape()));
  require_vector(ehr, params.ehr_dim(), "EHR vector", op);
  require_finite(image, "image features", op);
  require_finite(ehr, "EHR vector", op);

  const std::array<std::size_t, 3> spatial{image.dim(1), image.dim(2), image.dim(3)};
  auto image_term = conv3d(image, as_pointwise_kernel(params.image_proj.weight),
                           params.image_proj.bias);
  auto ehr_term = broadcast_expand(params.ehr_proj.forward(ehr), spatial);
  auto hidden = relu(add(image_term, ehr_term));
  auto raw = conv3d(hidden, as_pointwise_kernel(params.score.weight), params.score.bias);
  auto q = minmax_normalize(raw);
  return {attention_gate(image, q), q, raw};
}

// ---------------------------------------------------------------------------

template <Real T>
GmuParams<T>::GmuParams(std::size_t image_channels, std::size_t ehr_dim, std::size_t c_int)
    : image_proj(image_channels, c_int),
      ehr_proj(ehr_dim, c_int),
      gate(image_channels + ehr_dim, c_int) {}

template <Real T>
void GmuParams<T>::init(Rng& rng) {
  init_params(image_proj, InitScheme::xavier, rng);
  init_params(ehr_proj, InitScheme::xavier, rng);
  init_params(gate, InitScheme::xavier, rng);
}

template <Real T>
void GmuParams<T>::collect(StateList<T>& out, const std::string& prefix) const {
  image_proj.collect(out, prefix + ".image_proj");
  ehr_proj.collect(out, prefix + ".ehr_proj");
  gate.collect(out, prefix + ".gate");
}

template <Real T>
GmuOutput<T> gmu_forward_detailed(const GmuParams<T>& params, const Tensor<T>& image,
                                  const Tensor<T>& ehr) {
  require_features(image, params.image_proj.in_features(), ehr, params.ehr_proj.in_features(),
                   "gmu");
  auto h_image = tanh(params.image_proj.forward(image));
  auto h_ehr = tanh(params.ehr_proj.forward(ehr));
  auto z = sigmoid(params.gate.forward(concat<T>({image, ehr}, image.ndim() - 1)));
  auto fused = add(mul(z, h_image), mul(rsub(T(1), z), h_ehr));
  return {fused, h_image, h_ehr, z};
}

template <Real T>
Tensor<T> gmu_forward(const GmuParams<T>& params, const Tensor<T>& image, const Tensor<T>& ehr) {
  return gmu_forward_detailed(params, image, ehr).fused;
}

template <Real T>
MultiHeadGmu<T>::MultiHeadGmu(std::size_t n, std::size_t image_channels, std::size_t ehr_dim,
                              std::size_t c_int) {
  if (n == 0) throw ValueError("multi-head GMU needs at least one head");
  heads.reserve(n);
  for (std::size_t k = 0; k < n; ++k) heads.emplace_back(image_channels, ehr_dim, c_int);
}

template <Real T>
void MultiHeadGmu<T>::init(Rng& rng) {
  for (auto& h : heads) h.init(rng);
}

template <Real T>
void MultiHeadGmu<T>::collect(StateList<T>& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < heads.size(); ++k)
    heads[k].collect(out, prefix + ".head" + std::to_string(k));
}

template <Real T>
Tensor<T> multihead_gmu_forward(const MultiHeadGmu<T>& mh, const Tensor<T>& image,
                                const Tensor<T>& ehr) {
  if (mh.heads.empty()) throw ValueError("multi-head GMU needs at least one head");
  std::vector<Tensor<T>> outs;
  outs.reserve(mh.heads.size());
  for (const auto& head : mh.heads) outs.push_back(gmu_forward(head, image, ehr));
  return concat(outs, image.ndim() - 1);
}

// ---------------------------------------------------------------------------

template <Real T>
Tensor<T> concat_fusion(const Tensor<T>& image, const Tensor<T>& ehr) {
  if (image.ndim() != ehr.ndim() || image.ndim() < 1 || image.ndim() > 2 ||
      (image.ndim() == 2 && image.dim(0) != ehr.dim(0)))
    throw ShapeError("concat_fusion: expected vectors or equal-sized batches, got " +
                     shape_str(image.shape()) + " and " + shape_str(ehr.shape()));
  return concat<T>({image, ehr}, image.ndim() - 1);
}

template <Real T>
LinearSumParams<T>::LinearSumParams(std::size_t image_channels, std::size_t ehr_dim,
                                    std::size_t c_int)
    : image_proj(image_channels, c_int), ehr_proj(ehr_dim, c_int) {}

template <Real T>
void LinearSumParams<T>::init(Rng& rng) {
  init_params(image_proj, InitScheme::xavier, rng);
  init_params(ehr_proj, InitScheme::xavier, rng);
}

template <Real T>
void LinearSumParams<T>::collect(StateList<T>& out, const std::string& prefix) const {
  image_proj.collect(out, prefix + ".image_proj");
  ehr_proj.collect(out, prefix + ".ehr_proj");
}

template <Real T>
Tensor<T> linear_sum_fusion(const LinearSumParams<T>& params, const Tensor<T>& image,
                            const Tensor<T>& ehr) {
  require_features(image, params.image_proj.in_features(), ehr, params.ehr_proj.in_features(),
                   "linear_sum");
  return add(params.image_proj.forward(image), params.ehr_proj.forward(ehr));
}

#define MMFUSE_INSTANTIATE_FUSION(T)                                                          \
  template Tensor<T> minmax_normalize(const Tensor<T>&);                                      \
  template struct AttentionParams<T>;                                                         \
  template AttentionOutput<T> mm_attention_forward(const AttentionParams<T>&,                 \
                                                   const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> attention_gate(const Tensor<T>&, const Tensor<T>&);                      \
  template struct GmuParams<T>;                                                               \
  template GmuOutput<T> gmu_forward_detailed(const GmuParams<T>&, const Tensor<T>&,           \
                                             const Tensor<T>&);                               \
  template Tensor<T> gmu_forward(const GmuParams<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template struct MultiHeadGmu<T>;                                                            \
  template Tensor<T> multihead_gmu_forward(const MultiHeadGmu<T>&, const Tensor<T>&,          \
                                           const Tensor<T>&);                                 \
  template Tensor<T> concat_fusion(const Tensor<T>&, const Tensor<T>&);                       \
  template struct LinearSumParams<T>;                                                         \
  template Tensor<T> linear_sum_fusion(const LinearSumParams<T>&, const Tensor<T>&,           \
                                       const Tensor<T>&);

MMFUSE_INSTANTIATE_FUSION(float)
MMFUSE_INSTANTIATE_FUSION(double)

}  // namespace mmfuse

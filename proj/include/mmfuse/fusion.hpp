#pragma once

#include <cstddef>
#include <vector>

#include "mmfuse/nn.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

// Hidden width of the fusion modules: (C1 + C_M) / 4, at least 1.
std::size_t c_int_rule(std::size_t image_channels, std::size_t ehr_dim);

// Guard on the min-max denominator.
inline constexpr double kMinMaxEps = 1e-12;

// (q - min) / (max - min) over all entries of q. When max - min <= 1e-12 the
// output is all ones, so a flat score map passes features through unchanged.
// The backward pass differentiates through the first argmin and argmax.
template <Real T>
Tensor<T> minmax_normalize(const Tensor<T>& q);

// EHR-conditioned spatial attention. Projections are applied per voxel.
//   F   = ReLU(A_I I + b_I + expand(A_M M + b_M))       [C_int x H x W x D]
//   raw = A_F F + b_F                                   [1 x H x W x D]
//   Q   = minmax_normalize(raw)
//   I'  = I * Q  (Q shared by every channel)
template <Real T>
struct AttentionParams {
  Linear<T> image_proj;  // C1 -> C_int
  Linear<T> ehr_proj;    // C_M -> C_int
  Linear<T> score;       // C_int -> 1

  AttentionParams() = default;
  AttentionParams(std::size_t image_channels, std::size_t ehr_dim, std::size_t c_int);

  std::size_t image_channels() const { return image_proj.in_features(); }
  std::size_t ehr_dim() const { return ehr_proj.in_features(); }
  std::size_t c_int() const { return image_proj.out_features(); }

  void init(Rng& rng);
  void collect(StateList<T>& out, const std::string& prefix) const;
};

template <Real T>
struct AttentionOutput {
  Tensor<T> features;   // I', [C1 x H x W x D]
  Tensor<T> attention;  // Q, [1 x H x W x D]
  Tensor<T> raw_score;  // pre-normalization score map
};

template <Real T>
AttentionOutput<T> mm_attention_forward(const AttentionParams<T>& params, const Tensor<T>& image,
                                        const Tensor<T>& ehr);

// I * Q with q [1 x H x W x D] repeated over the channels of image.
template <Real T>
Tensor<T> attention_gate(const Tensor<T>& image, const Tensor<T>& q);

// Gated multimodal unit on pooled image features I [C1] and EHR M [C_M]:
//   h_I = tanh(A_I I + b_I), h_M = tanh(A_M M + b_M)
//   z   = sigmoid(A_F [I; M] + b_F)
//   F   = z * h_I + (1 - z) * h_M
template <Real T>
struct GmuParams {
  Linear<T> image_proj;  // C1 -> C_int
  Linear<T> ehr_proj;    // C_M -> C_int
  Linear<T> gate;        // C1 + C_M -> C_int

  GmuParams() = default;
  GmuParams(std::size_t image_channels, std::size_t ehr_dim, std::size_t c_int);

  std::size_t c_int() const { return image_proj.out_features(); }
  void init(Rng& rng);
  void collect(StateList<T>& out, const std::string& prefix) const;
};

template <Real T>
struct GmuOutput {
  Tensor<T> fused;
  Tensor<T> h_image;
  Tensor<T> h_ehr;
  Tensor<T> gate;
};

template <Real T>
GmuOutput<T> gmu_forward_detailed(const GmuParams<T>& params, const Tensor<T>& image,
                                  const Tensor<T>& ehr);
template <Real T>
Tensor<T> gmu_forward(const GmuParams<T>& params, const Tensor<T>& image, const Tensor<T>& ehr);

// n independent GMUs; the output concatenates the heads in index order.
template <Real T>
struct MultiHeadGmu {
  std::vector<GmuParams<T>> heads;

  MultiHeadGmu() = default;
  MultiHeadGmu(std::size_t n, std::size_t image_channels, std::size_t ehr_dim, std::size_t c_int);

  std::size_t output_dim() const { return heads.size() * heads.front().c_int(); }
  void init(Rng& rng);
  void collect(StateList<T>& out, const std::string& prefix) const;
};

template <Real T>
Tensor<T> multihead_gmu_forward(const MultiHeadGmu<T>& mh, const Tensor<T>& image,
                                const Tensor<T>& ehr);

// Baseline: [I; M].
template <Real T>
Tensor<T> concat_fusion(const Tensor<T>& image, const Tensor<T>& ehr);

// Baseline: (A_I I + b_I) + (A_M M + b_M).
template <Real T>
struct LinearSumParams {
  Linear<T> image_proj;
  Linear<T> ehr_proj;

  LinearSumParams() = default;
  LinearSumParams(std::size_t image_channels, std::size_t ehr_dim, std::size_t c_int);

  std::size_t c_int() const { return image_proj.out_features(); }
  void init(Rng& rng);
  void collect(StateList<T>& out, const std::string& prefix) const;
};

template <Real T>
Tensor<T> linear_sum_fusion(const LinearSumParams<T>& params, const Tensor<T>& image,
                            const Tensor<T>& ehr);

}  // namespace mmfuse

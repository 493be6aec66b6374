#pragma once

#include <random>
#include <string>
#include <vector>

#include "mmfuse/ops.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

using Rng = std::mt19937_64;

// A named model tensor. Buffers (batch-norm running statistics) are saved
// in checkpoints but never optimized.
template <Real T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <Real T>
using StateList = std::vector<NamedTensor<T>>;

enum class InitScheme { he, xavier };

// y = x W^T + b for x [in] or [batch x in].
template <Real T>
struct Linear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out);

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(StateList<T>& out, const std::string& prefix) const;
};

// Dense 3D convolution layer. Bias-free convs (followed by batch norm) keep a
// constant zero bias that is not registered as a parameter.
template <Real T>
struct Conv3d {
  Tensor<T> weight;  // [C_out x C_in x k x k x k]
  Tensor<T> bias;    // [C_out]
  Conv3dOptions options;
  bool has_bias = true;

  Conv3d() = default;
  Conv3d(std::size_t in, std::size_t out, std::size_t k, Conv3dOptions opt, bool with_bias);

  Tensor<T> forward(const Tensor<T>& x) const { return conv3d(x, weight, bias, options); }
  void collect(StateList<T>& out, const std::string& prefix) const;
};

template <Real T>
void init_params(Linear<T>& layer, InitScheme scheme, Rng& rng);
template <Real T>
void init_params(Conv3d<T>& layer, InitScheme scheme, Rng& rng);

enum class Mode { train, eval };

template <Real T>
struct BatchNorm3d {
  Tensor<T> gamma, beta;                  // trainable, [C]
  Tensor<T> running_mean, running_var;    // buffers, [C]
  T momentum = T(0.1);
  T eps = T(1e-5);
  Mode mode = Mode::train;

  BatchNorm3d() = default;
  explicit BatchNorm3d(std::size_t channels);

  std::size_t channels() const { return gamma.size(); }
  // x is [B x C x H x W x D] (or unbatched [C x H x W x D]). Train mode
  // normalizes by batch statistics (biased variance) and folds them into the
  // running estimates (unbiased variance); eval mode uses the running estimates.
  Tensor<T> forward(const Tensor<T>& x);
  void collect(StateList<T>& out, const std::string& prefix) const;
};

// Basic two-convolution residual block:
//   ReLU(BN(conv3x3(ReLU(BN(conv3x3(x))))) + shortcut(x))
// The shortcut is the identity when shapes already match, otherwise a
// 1x1x1 strided projection followed by batch norm.
template <Real T>
struct ResidualBlock3d {
  Conv3d<T> conv1, conv2;
  BatchNorm3d<T> bn1, bn2;
  bool projection = false;
  Conv3d<T> proj;
  BatchNorm3d<T> proj_bn;

  ResidualBlock3d() = default;
  ResidualBlock3d(std::size_t in, std::size_t out, std::size_t stride);

  Tensor<T> forward(const Tensor<T>& x);
  void set_mode(Mode m);
  void init(Rng& rng);
  void collect(StateList<T>& out, const std::string& prefix) const;
};

}  // namespace mmfuse

#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

enum class Unary { relu, tanh, sigmoid };
enum class Binary { add, sub, mul };

// Elementwise ops. Binary forms require identical shapes; the scalar forms
// are the only implicit broadcast.
template <Real T> Tensor<T> relu(const Tensor<T>& a);
template <Real T> Tensor<T> tanh(const Tensor<T>& a);
template <Real T> Tensor<T> sigmoid(const Tensor<T>& a);
template <Real T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> add(const Tensor<T>& a, T s);
template <Real T> Tensor<T> scale(const Tensor<T>& a, T s);
// s - a
template <Real T> Tensor<T> rsub(T s, const Tensor<T>& a);

template <Real T> Tensor<T> apply(Unary kind, const Tensor<T>& a);
template <Real T> Tensor<T> apply(Binary kind, const Tensor<T>& a, const Tensor<T>& b);

// [m x k] x [k x n] -> [m x n]
template <Real T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> transpose(const Tensor<T>& a);
template <Real T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

struct Conv3dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  // Strict mode rejects (extent + 2*pad - k) not divisible by stride. Floor
  // mode drops the trailing partial window instead; strided downsampling in
  // the backbone uses it so that even extents halve.
  bool floor_mode = false;
};

// Cross-correlation. x is [C_in x H x W x D] or batched [B x C_in x H x W x D];
// w is [C_out x C_in x k x k x k]; b is [C_out].
template <Real T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 Conv3dOptions opt = {});
std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                            bool floor_mode = false);

// [C x H x W x D] -> [C], or [B x C x H x W x D] -> [B x C].
template <Real T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// v [C] -> [C x H x W x D]; every spatial location holds a copy of v.
template <Real T>
Tensor<T> broadcast_expand(const Tensor<T>& v, std::array<std::size_t, 3> dims);
// v [n] -> [rows x n]
template <Real T> Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t rows);

template <Real T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Half-open range [begin, end) along axis.
template <Real T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <Real T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis,
                             const std::vector<std::size_t>& sizes);

template <Real T> Tensor<T> sum(const Tensor<T>& a);
template <Real T> Tensor<T> mean(const Tensor<T>& a);

}  // namespace mmfuse

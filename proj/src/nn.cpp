#include "mmfuse/nn.hpp"

#include <cmath>

#include "mmfuse/error.hpp"

namespace mmfuse {

template <Real T>
Linear<T>::Linear(std::size_t in, std::size_t out)
    : weight(Tensor<T>::zeros({out, in}, true)), bias(Tensor<T>::zeros({out}, true)) {}

template <Real T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  const std::size_t in = in_features();
  if (x.ndim() == 1) {
    if (x.dim(0) != in)
      throw ShapeError("linear: input " + shape_str(x.shape()) + " but layer expects " +
                       std::to_string(in) + " features");
    auto y = matmul(weight, reshape(x, {in, 1}));
    return add(reshape(y, {out_features()}), bias);
  }
  if (x.ndim() == 2) {
    if (x.dim(1) != in)
      throw ShapeError("linear: input " + shape_str(x.shape()) + " but layer expects " +
                       std::to_string(in) + " features");
    return add(matmul(x, transpose(weight)), broadcast_rows(bias, x.dim(0)));
  }
  throw ShapeError("linear: expected [in] or [batch x in], got " + shape_str(x.shape()));
}

template <Real T>
void Linear<T>::collect(StateList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

template <Real T>
Conv3d<T>::Conv3d(std::size_t in, std::size_t out, std::size_t k, Conv3dOptions opt, bool with_bias)
    : weight(Tensor<T>::zeros({out, in, k, k, k}, true)),
      bias(Tensor<T>::zeros({out}, with_bias)),
      options(opt),
      has_bias(with_bias) {}

template <Real T>
void Conv3d<T>::collect(StateList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (has_bias) out.push_back({prefix + ".bias", bias, true});
}

namespace {

template <Real T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

double init_std(InitScheme scheme, double fan_in, double fan_out) {
  return scheme == InitScheme::he ? std::sqrt(2.0 / fan_in) : std::sqrt(2.0 / (fan_in + fan_out));
}

}  // namespace

template <Real T>
void init_params(Linear<T>& layer, InitScheme scheme, Rng& rng) {
  const double fan_in = static_cast<double>(layer.in_features());
  const double fan_out = static_cast<double>(layer.out_features());
  fill_normal(layer.weight, init_std(scheme, fan_in, fan_out), rng);
  for (auto& v : layer.bias.data()) v = T(0);
}

template <Real T>
void init_params(Conv3d<T>& layer, InitScheme scheme, Rng& rng) {
  const auto& s = layer.weight.shape();
  const double k3 = static_cast<double>(s[2] * s[3] * s[4]);
  fill_normal(layer.weight, init_std(scheme, s[1] * k3, s[0] * k3), rng);
  for (auto& v : layer.bias.data()) v = T(0);
}

// ---------------------------------------------------------------------------

template <Real T>
BatchNorm3d<T>::BatchNorm3d(std::size_t channels)
    : gamma(Tensor<T>::full({channels}, T(1), true)),
      beta(Tensor<T>::zeros({channels}, true)),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::full({channels}, T(1))) {}

template <Real T>
Tensor<T> BatchNorm3d<T>::forward(const Tensor<T>& x) {
  const bool batched = x.ndim() == 5;
  if (!batched && x.ndim() != 4)
    throw ShapeError("batchnorm: expected [B,C,H,W,D] or [C,H,W,D], got " + shape_str(x.shape()));
  const std::size_t off = batched ? 1 : 0;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(off);
  if (c != channels())
    throw ShapeError("batchnorm: input has " + std::to_string(c) + " channels, layer has " +
                     std::to_string(channels()));
  const std::size_t vol = x.dim(off + 1) * x.dim(off + 2) * x.dim(off + 3);
  const std::size_t count = batch * vol;
  const bool training = mode == Mode::train;
  if (training && count < 2)
    throw ValueError("batchnorm: train mode needs at least 2 values per channel, got " +
                     std::to_string(count));

  const T* xs = x.data().data();
  std::vector<T> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0, ss = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = xs + (b * c + ch) * vol;
        for (std::size_t i = 0; i < vol; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = xs + (b * c + ch) * vol;
        for (std::size_t i = 0; i < vol; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / static_cast<double>(count);
      mu[ch] = static_cast<T>(m);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = ss / static_cast<double>(count - 1);
      auto rm = running_mean.data();
      auto rv = running_var.data();
      rm[ch] = static_cast<T>((1 - momentum) * rm[ch] + momentum * m);
      rv[ch] = static_cast<T>((1 - momentum) * rv[ch] + momentum * unbiased);
    } else {
      mu[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }

  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * vol;
      const T g = gamma[ch], be = beta[ch];
      for (std::size_t i = 0; i < vol; ++i) {
        const T h = (xs[base + i] - mu[ch]) * inv_std[ch];
        xhat[base + i] = h;
        out[base + i] = g * h + be;
      }
    }

  return make_result<T>(
      x.shape(), std::move(out), "batchnorm", {x, gamma, beta},
      [batch, c, vol, count, training, inv_std, xhat = std::move(xhat)](Node<T>& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * vol;
            for (std::size_t i = 0; i < vol; ++i) {
              sum_dy[ch] += n.grad[base + i];
              sum_dy_xhat[ch] += n.grad[base + i] * xhat[base + i];
            }
          }
        if (pg->requires_grad) {
          auto g = pg->ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(sum_dy_xhat[ch]);
        }
        if (pb->requires_grad) {
          auto g = pb->ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(sum_dy[ch]);
        }
        if (!px->requires_grad) return;
        auto gx = px->ensure_grad();
        const double inv_count = 1.0 / static_cast<double>(count);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * vol;
            const T gam = pg->data[ch];
            const T k = gam * inv_std[ch];
            if (training) {
              const T mean_dy = static_cast<T>(sum_dy[ch] * inv_count);
              const T mean_dy_xhat = static_cast<T>(sum_dy_xhat[ch] * inv_count);
              for (std::size_t i = 0; i < vol; ++i)
                gx[base + i] += k * (n.grad[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
            } else {
              for (std::size_t i = 0; i < vol; ++i) gx[base + i] += k * n.grad[base + i];
            }
          }
      });
}

template <Real T>
void BatchNorm3d<T>::collect(StateList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

// ---------------------------------------------------------------------------

template <Real T>
ResidualBlock3d<T>::ResidualBlock3d(std::size_t in, std::size_t out, std::size_t stride)
    : conv1(in, out, 3, {stride, 1, true}, false),
      conv2(out, out, 3, {1, 1, false}, false),
      bn1(out),
      bn2(out),
      projection(in != out || stride != 1) {
  if (projection) {
    proj = Conv3d<T>(in, out, 1, {stride, 0, true}, false);
    proj_bn = BatchNorm3d<T>(out);
  }
}

template <Real T>
Tensor<T> ResidualBlock3d<T>::forward(const Tensor<T>& x) {
  const std::size_t off = x.ndim() == 5 ? 1 : 0;
  if (x.ndim() < 4 || x.dim(off) != conv1.weight.dim(1))
    throw ShapeError("residual block: input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(conv1.weight.dim(1)) + " channels");
  auto main = relu(bn1.forward(conv1.forward(x)));
  main = bn2.forward(conv2.forward(main));
  auto shortcut = projection ? proj_bn.forward(proj.forward(x)) : x;
  return relu(add(main, shortcut));
}

template <Real T>
void ResidualBlock3d<T>::set_mode(Mode m) {
  bn1.mode = bn2.mode = m;
  if (projection) proj_bn.mode = m;
}

template <Real T>
void ResidualBlock3d<T>::init(Rng& rng) {
  init_params(conv1, InitScheme::he, rng);
  init_params(conv2, InitScheme::he, rng);
  if (projection) init_params(proj, InitScheme::he, rng);
}

template <Real T>
void ResidualBlock3d<T>::collect(StateList<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  bn1.collect(out, prefix + ".bn1");
  conv2.collect(out, prefix + ".conv2");
  bn2.collect(out, prefix + ".bn2");
  if (projection) {
    proj.collect(out, prefix + ".proj");
    proj_bn.collect(out, prefix + ".proj_bn");
  }
}

#define MMFUSE_INSTANTIATE_NN(T)                                   \
  template struct Linear<T>;                                       \
  template struct Conv3d<T>;                                       \
  template struct BatchNorm3d<T>;                                  \
  template struct ResidualBlock3d<T>;                              \
  template void init_params<T>(Linear<T>&, InitScheme, Rng&);      \
  template void init_params<T>(Conv3d<T>&, InitScheme, Rng&);

MMFUSE_INSTANTIATE_NN(float)
MMFUSE_INSTANTIATE_NN(double)

}  // namespace mmfuse

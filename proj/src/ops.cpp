#include "mmfuse/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "mmfuse/error.hpp"

namespace mmfuse {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <Real T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad;
}

template <Real T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <Real T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <Real T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_result<T>(a.shape(), std::move(out), "relu", {a}, [](Node<T>& n) {
    auto& p = n.parents[0];
    auto g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p->data[i] > T(0)) g[i] += n.grad[i];
  });
}

template <Real T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return make_result<T>(a.shape(), std::move(out), "tanh", {a}, [](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (T(1) - n.data[i] * n.data[i]);
  });
}

template <Real T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  return make_result<T>(a.shape(), std::move(out), "sigmoid", {a}, [](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.data[i] * (T(1) - n.data[i]);
  });
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& n) {
    for (auto& p : n.parents) {
      if (!wants_grad(p)) continue;
      auto g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& n) {
    if (wants_grad(n.parents[0])) {
      auto g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n.parents[1])) {
      auto g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    // Read both operands before writing: a and b may be the same node.
    if (wants_grad(pa)) {
      auto g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->data[i];
    }
    if (wants_grad(pb)) {
      auto g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->data[i];
    }
  });
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return make_result<T>(a.shape(), std::move(out), "add_scalar", {a}, [](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result<T>(a.shape(), std::move(out), "scale", {a}, [s](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
}

template <Real T>
Tensor<T> rsub(T s, const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s - a[i];
  return make_result<T>(a.shape(), std::move(out), "rsub", {a}, [](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
  });
}

template <Real T>
Tensor<T> apply(Unary kind, const Tensor<T>& a) {
  switch (kind) {
    case Unary::relu: return relu(a);
    case Unary::tanh: return tanh(a);
    case Unary::sigmoid: return sigmoid(a);
  }
  throw ValueError("unknown unary op");
}

template <Real T>
Tensor<T> apply(Binary kind, const Tensor<T>& a, const Tensor<T>& b) {
  switch (kind) {
    case Binary::add: return add(a, b);
    case Binary::sub: return sub(a, b);
    case Binary::mul: return mul(a, b);
  }
  throw ValueError("unknown binary op");
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& node) {
    auto& pa = node.parents[0];
    auto& pb = node.parents[1];
    ConstMatMap<T> g(node.grad.data(), m, n);
    if (wants_grad(pa)) {
      MatMap<T>(pa->ensure_grad().data(), m, k).noalias() +=
          g * ConstMatMap<T>(pb->data.data(), k, n).transpose();
    }
    if (wants_grad(pb)) {
      MatMap<T>(pb->ensure_grad().data(), k, n).noalias() +=
          ConstMatMap<T>(pa->data.data(), m, k).transpose() * g;
    }
  });
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return make_result<T>({n, m}, std::move(out), "transpose", {a}, [m, n](Node<T>& node) {
    auto g = node.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += node.grad[j * m + i];
  });
}

template <Real T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  return make_result<T>(std::move(shape), a.values(), "reshape", {a}, [](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                            bool floor_mode) {
  if (stride == 0) throw ShapeError("conv3d: stride must be positive");
  const std::size_t padded = in + 2 * pad;
  if (k > padded)
    throw ShapeError("conv3d: kernel " + std::to_string(k) + " does not fit padded extent " +
                     std::to_string(padded));
  if (!floor_mode && (padded - k) % stride != 0)
    throw ShapeError("conv3d: non-integral output extent for input " + std::to_string(in) +
                     ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                     ", pad " + std::to_string(pad));
  return (padded - k) / stride + 1;
}

namespace {

struct ConvGeom {
  std::size_t batch, c_in, h, w, d;
  std::size_t c_out, k, stride, pad;
  std::size_t ho, wo, dout;
  std::size_t in_vol() const { return h * w * d; }
  std::size_t out_vol() const { return ho * wo * dout; }
  std::size_t patch() const { return c_in * k * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output positions od whose input index od*stride - pad + kd falls inside
// [0, d): a contiguous range [lo, hi).
inline std::pair<long, long> valid_range(long n_out, long n_in, long stride, long pad, long k) {
  long lo = 0;
  while (lo < n_out && lo * stride - pad + k < 0) ++lo;
  long hi = n_out;
  while (hi > lo && (hi - 1) * stride - pad + k >= n_in) --hi;
  return {lo, hi};
}

// cols is [C_in*k^3 x out_vol], row index (c, kh, kw, kd).
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const long pad = static_cast<long>(g.pad);
  const long st = static_cast<long>(g.stride);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const T* xc = x + c * g.in_vol();
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw)
        for (std::size_t kd = 0; kd < g.k; ++kd, ++row) {
          T* out = cols + row * g.out_vol();
          const auto [lo, hi] = valid_range(static_cast<long>(g.dout), static_cast<long>(g.d), st,
                                            pad, static_cast<long>(kd));
          const long shift = static_cast<long>(kd) - pad;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh) * st - pad + static_cast<long>(kh);
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long iw = static_cast<long>(ow) * st - pad + static_cast<long>(kw);
              T* o = out + (oh * g.wo + ow) * g.dout;
              if (ih < 0 || ih >= static_cast<long>(g.h) || iw < 0 ||
                  iw >= static_cast<long>(g.w)) {
                std::fill(o, o + g.dout, T(0));
                continue;
              }
              const T* xr = xc + (static_cast<std::size_t>(ih) * g.w + iw) * g.d;
              std::fill(o, o + lo, T(0));
              if (st == 1) {
                std::copy(xr + lo + shift, xr + hi + shift, o + lo);
              } else {
                for (long od = lo; od < hi; ++od) o[od] = xr[od * st + shift];
              }
              std::fill(o + hi, o + g.dout, T(0));
            }
          }
        }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const long pad = static_cast<long>(g.pad);
  const long st = static_cast<long>(g.stride);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    T* xc = dx + c * g.in_vol();
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw)
        for (std::size_t kd = 0; kd < g.k; ++kd, ++row) {
          const T* in = cols + row * g.out_vol();
          const auto [lo, hi] = valid_range(static_cast<long>(g.dout), static_cast<long>(g.d), st,
                                            pad, static_cast<long>(kd));
          const long shift = static_cast<long>(kd) - pad;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long ih = static_cast<long>(oh) * st - pad + static_cast<long>(kh);
            if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long iw = static_cast<long>(ow) * st - pad + static_cast<long>(kw);
              if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
              const T* o = in + (oh * g.wo + ow) * g.dout;
              T* xr = xc + (static_cast<std::size_t>(ih) * g.w + iw) * g.d;
              for (long od = lo; od < hi; ++od) xr[od * st + shift] += o[od];
            }
          }
        }
  }
}


// Stride-1 path. Input and output live on the zero-padded grid, where each
// kernel tap is a constant offset into the flat array. Columns are gathered a
// chunk of positions at a time with plain copies and fed to small GEMMs.
struct PadGrid {
  std::size_t hp, wp, dp;
  std::size_t vol() const { return hp * wp * dp; }
  std::size_t span(const ConvGeom& g) const { return ((g.ho - 1) * wp + (g.wo - 1)) * dp + g.dout; }
  std::size_t at(std::size_t h, std::size_t w, std::size_t d) const { return (h * wp + w) * dp + d; }
};

constexpr std::size_t kChunk = 256;

template <typename T>
void pad_input(const T* x, const ConvGeom& g, const PadGrid& p, T* xp) {
  std::fill(xp, xp + g.c_in * p.vol(), T(0));
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t h = 0; h < g.h; ++h)
      for (std::size_t w = 0; w < g.w; ++w) {
        const T* src = x + ((c * g.h + h) * g.w + w) * g.d;
        std::copy(src, src + g.d, xp + c * p.vol() + p.at(h + g.pad, w + g.pad, g.pad));
      }
}

std::vector<std::size_t> tap_offsets(const ConvGeom& g, const PadGrid& p) {
  std::vector<std::size_t> offs;
  offs.reserve(g.patch());
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw)
        for (std::size_t kd = 0; kd < g.k; ++kd) offs.push_back(c * p.vol() + p.at(kh, kw, kd));
  return offs;
}

template <typename T>
void gather_cols(const T* xp, const std::vector<std::size_t>& offs, std::size_t i0, std::size_t n,
                 T* cols) {
  for (std::size_t r = 0; r < offs.size(); ++r) std::copy_n(xp + offs[r] + i0, n, cols + r * n);
}

template <Real T>
Tensor<T> conv3d_direct(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                        const ConvGeom& g, Shape shape) {
  const PadGrid p{g.h + 2 * g.pad, g.w + 2 * g.pad, g.d + 2 * g.pad};
  const auto offs = tap_offsets(g, p);
  const std::size_t len = p.span(g);
  const std::size_t in_stride = g.c_in * g.in_vol();
  const std::size_t out_stride = g.c_out * g.out_vol();
  std::vector<T> out(g.batch * out_stride);
  std::vector<T> xp(g.c_in * p.vol());
  std::vector<T> acc(g.c_out * len);
  std::vector<T> cols(g.patch() * kChunk);
  ConstMatMap<T> wm(w.data().data(), g.c_out, g.patch());
  for (std::size_t s = 0; s < g.batch; ++s) {
    pad_input(x.data().data() + s * in_stride, g, p, xp.data());
    for (std::size_t i0 = 0; i0 < len; i0 += kChunk) {
      const std::size_t n = std::min(kChunk, len - i0);
      gather_cols(xp.data(), offs, i0, n, cols.data());
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                 Eigen::OuterStride<>>(acc.data() + i0, g.c_out, n, Eigen::OuterStride<>(len))
          .noalias() = wm * ConstMatMap<T>(cols.data(), g.patch(), n);
    }
    T* o = out.data() + s * out_stride;
    for (std::size_t co = 0; co < g.c_out; ++co)
      for (std::size_t h = 0; h < g.ho; ++h)
        for (std::size_t ww = 0; ww < g.wo; ++ww) {
          const T* a = acc.data() + co * len + p.at(h, ww, 0);
          for (std::size_t d = 0; d < g.dout; ++d) *o++ = a[d] + b[co];
        }
  }
  return make_result<T>(std::move(shape), std::move(out), "conv3d", {x, w, b}, [g, p, offs](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pw = n.parents[1];
    auto& pb = n.parents[2];
    using Strided = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                               0, Eigen::OuterStride<>>;
    const std::size_t in_stride = g.c_in * g.in_vol();
    const std::size_t out_stride = g.c_out * g.out_vol();
    const std::size_t len = p.span(g);
    const bool need_x = wants_grad(px), need_w = wants_grad(pw);
    std::vector<T> xp(need_w ? g.c_in * p.vol() : 0);
    std::vector<T> dxp(need_x ? g.c_in * p.vol() : 0);
    std::vector<T> gp(g.c_out * len);
    std::vector<T> cols(g.patch() * kChunk);
    ConstMatMap<T> wm(pw->data.data(), g.c_out, g.patch());
    for (std::size_t s = 0; s < g.batch; ++s) {
      const T* gs = n.grad.data() + s * out_stride;
      if (wants_grad(pb)) {
        auto gb = pb->ensure_grad();
        for (std::size_t c = 0; c < g.c_out; ++c)
          for (std::size_t i = 0; i < g.out_vol(); ++i) gb[c] += gs[c * g.out_vol() + i];
      }
      if (!need_x && !need_w) continue;
      // Output gradient on the padded grid, zero off the output positions.
      std::fill(gp.begin(), gp.end(), T(0));
      for (std::size_t c = 0; c < g.c_out; ++c)
        for (std::size_t h = 0; h < g.ho; ++h)
          for (std::size_t w = 0; w < g.wo; ++w)
            std::copy_n(gs + ((c * g.ho + h) * g.wo + w) * g.dout, g.dout,
                        gp.data() + c * len + p.at(h, w, 0));
      if (need_w) pad_input(px->data.data() + s * in_stride, g, p, xp.data());
      if (need_x) std::fill(dxp.begin(), dxp.end(), T(0));
      for (std::size_t i0 = 0; i0 < len; i0 += kChunk) {
        const std::size_t cn = std::min(kChunk, len - i0);
        Strided gm(gp.data() + i0, g.c_out, cn, Eigen::OuterStride<>(len));
        if (need_w) {
          gather_cols(xp.data(), offs, i0, cn, cols.data());
          MatMap<T>(pw->ensure_grad().data(), g.c_out, g.patch()).noalias() +=
              gm * ConstMatMap<T>(cols.data(), g.patch(), cn).transpose();
        }
        if (need_x) {
          MatMap<T>(cols.data(), g.patch(), cn).noalias() = wm.transpose() * gm;
          for (std::size_t r = 0; r < offs.size(); ++r) {
            T* dst = dxp.data() + offs[r] + i0;
            const T* src = cols.data() + r * cn;
            for (std::size_t i = 0; i < cn; ++i) dst[i] += src[i];
          }
        }
      }
      if (need_x) {
        T* dx = px->ensure_grad().data() + s * in_stride;
        for (std::size_t c = 0; c < g.c_in; ++c)
          for (std::size_t h = 0; h < g.h; ++h)
            for (std::size_t w = 0; w < g.w; ++w) {
              const T* src = dxp.data() + c * p.vol() + p.at(h + g.pad, w + g.pad, g.pad);
              T* dst = dx + ((c * g.h + h) * g.w + w) * g.d;
              for (std::size_t d = 0; d < g.d; ++d) dst[d] += src[d];
            }
      }
    }
  });
}

}  // namespace

template <Real T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv3dOptions opt) {
  const bool batched = x.ndim() == 5;
  if (!batched && x.ndim() != 4)
    throw ShapeError("conv3d: input must be [C,H,W,D] or [B,C,H,W,D], got " + shape_str(x.shape()));
  if (w.ndim() != 5 || w.dim(2) != w.dim(3) || w.dim(2) != w.dim(4))
    throw ShapeError("conv3d: weight must be [C_out,C_in,k,k,k], got " + shape_str(w.shape()));
  const std::size_t off = batched ? 1 : 0;
  ConvGeom g{};
  g.batch = batched ? x.dim(0) : 1;
  g.c_in = x.dim(off);
  g.h = x.dim(off + 1);
  g.w = x.dim(off + 2);
  g.d = x.dim(off + 3);
  g.c_out = w.dim(0);
  g.k = w.dim(2);
  g.stride = opt.stride;
  g.pad = opt.pad;
  if (w.dim(1) != g.c_in)
    throw ShapeError("conv3d: weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(1)) + " input channels, input " + shape_str(x.shape()));
  if (b.ndim() != 1 || b.dim(0) != g.c_out)
    throw ShapeError("conv3d: bias " + shape_str(b.shape()) + " does not match " +
                     std::to_string(g.c_out) + " output channels");
  g.ho = conv_out_extent(g.h, g.k, g.stride, g.pad, opt.floor_mode);
  g.wo = conv_out_extent(g.w, g.k, g.stride, g.pad, opt.floor_mode);
  g.dout = conv_out_extent(g.d, g.k, g.stride, g.pad, opt.floor_mode);

  if (g.stride == 1 && !g.pointwise()) {
    Shape shape = batched ? Shape{g.batch, g.c_out, g.ho, g.wo, g.dout}
                          : Shape{g.c_out, g.ho, g.wo, g.dout};
    return conv3d_direct(x, w, b, g, std::move(shape));
  }
  const std::size_t in_stride = g.c_in * g.in_vol();
  const std::size_t out_stride = g.c_out * g.out_vol();
  std::vector<T> out(g.batch * out_stride);
  // Keep the columns of every sample when the weight gradient will need them.
  const bool keep = !g.pointwise() && grad_mode_enabled() && w.requires_grad();
  const std::size_t col_size = g.pointwise() ? 0 : g.patch() * g.out_vol();
  auto cols = std::make_shared<std::vector<T>>(keep ? g.batch * col_size : col_size);
  ConstMatMap<T> wm(w.data().data(), g.c_out, g.patch());
  for (std::size_t s = 0; s < g.batch; ++s) {
    const T* xs = x.data().data() + s * in_stride;
    const T* colp = xs;
    if (!g.pointwise()) {
      T* dst = cols->data() + (keep ? s * col_size : 0);
      im2col(xs, g, dst);
      colp = dst;
    }
    MatMap<T> om(out.data() + s * out_stride, g.c_out, g.out_vol());
    om.noalias() = wm * ConstMatMap<T>(colp, g.patch(), g.out_vol());
    for (std::size_t c = 0; c < g.c_out; ++c) om.row(c).array() += b[c];
  }

  Shape shape = batched ? Shape{g.batch, g.c_out, g.ho, g.wo, g.dout}
                        : Shape{g.c_out, g.ho, g.wo, g.dout};
  if (!keep) cols.reset();
  return make_result<T>(std::move(shape), std::move(out), "conv3d", {x, w, b}, [g, cols](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pw = n.parents[1];
    auto& pb = n.parents[2];
    const std::size_t in_stride = g.c_in * g.in_vol();
    const std::size_t out_stride = g.c_out * g.out_vol();
    const std::size_t col_size = g.pointwise() ? 0 : g.patch() * g.out_vol();
    std::vector<T> scratch(cols || g.pointwise() ? 0 : col_size);
    std::vector<T> dcols(wants_grad(px) && !g.pointwise() ? g.patch() * g.out_vol() : 0);
    ConstMatMap<T> wm(pw->data.data(), g.c_out, g.patch());
    for (std::size_t s = 0; s < g.batch; ++s) {
      ConstMatMap<T> gm(n.grad.data() + s * out_stride, g.c_out, g.out_vol());
      if (wants_grad(pb)) {
        auto gb = pb->ensure_grad();
        // Plain loop: Eigen's vectorized sum peels by pointer alignment, which
        // would make the rounding depend on where the heap put the buffer.
        for (std::size_t c = 0; c < g.c_out; ++c) {
          const T* row = n.grad.data() + s * out_stride + c * g.out_vol();
          T acc = 0;
          for (std::size_t i = 0; i < g.out_vol(); ++i) acc += row[i];
          gb[c] += acc;
        }
      }
      if (wants_grad(pw)) {
        const T* xs = px->data.data() + s * in_stride;
        const T* colp = xs;
        if (cols) {
          colp = cols->data() + s * col_size;
        } else if (!g.pointwise()) {
          im2col(xs, g, scratch.data());
          colp = scratch.data();
        }
        MatMap<T>(pw->ensure_grad().data(), g.c_out, g.patch()).noalias() +=
            gm * ConstMatMap<T>(colp, g.patch(), g.out_vol()).transpose();
      }
      if (wants_grad(px)) {
        T* dx = px->ensure_grad().data() + s * in_stride;
        if (g.pointwise()) {
          MatMap<T>(dx, g.c_in, g.in_vol()).noalias() += wm.transpose() * gm;
        } else {
          MatMap<T>(dcols.data(), g.patch(), g.out_vol()).noalias() = wm.transpose() * gm;
          col2im(dcols.data(), g, dx);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling, broadcasting, concatenation

template <Real T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const bool batched = x.ndim() == 5;
  if (!batched && x.ndim() != 4)
    throw ShapeError("global_avg_pool: expected [C,H,W,D] or [B,C,H,W,D], got " +
                     shape_str(x.shape()));
  const std::size_t off = batched ? 1 : 0;
  const std::size_t rows = (batched ? x.dim(0) : 1) * x.dim(off);
  const std::size_t vol = x.dim(off + 1) * x.dim(off + 2) * x.dim(off + 3);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    const T* p = x.data().data() + r * vol;
    for (std::size_t i = 0; i < vol; ++i) acc += p[i];
    out[r] = acc / static_cast<T>(vol);
  }
  Shape shape = batched ? Shape{x.dim(0), x.dim(1)} : Shape{x.dim(0)};
  return make_result<T>(std::move(shape), std::move(out), "global_avg_pool", {x},
                        [rows, vol](Node<T>& n) {
                          auto g = n.parents[0]->ensure_grad();
                          const T inv = T(1) / static_cast<T>(vol);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T gr = n.grad[r] * inv;
                            for (std::size_t i = 0; i < vol; ++i) g[r * vol + i] += gr;
                          }
                        });
}

template <Real T>
Tensor<T> broadcast_expand(const Tensor<T>& v, std::array<std::size_t, 3> dims) {
  if (v.ndim() != 1) throw ShapeError("broadcast_expand: expected a vector, got " + shape_str(v.shape()));
  for (auto e : dims)
    if (e == 0) throw ShapeError("broadcast_expand: spatial dims must be positive");
  const std::size_t c = v.dim(0);
  const std::size_t vol = dims[0] * dims[1] * dims[2];
  std::vector<T> out(c * vol);
  for (std::size_t i = 0; i < c; ++i) std::fill_n(out.begin() + i * vol, vol, v[i]);
  return make_result<T>({c, dims[0], dims[1], dims[2]}, std::move(out), "broadcast_expand", {v},
                        [c, vol](Node<T>& n) {
                          auto g = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < c; ++i) {
                            T acc = 0;
                            for (std::size_t s = 0; s < vol; ++s) acc += n.grad[i * vol + s];
                            g[i] += acc;
                          }
                        });
}

template <Real T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t rows) {
  if (v.ndim() != 1) throw ShapeError("broadcast_rows: expected a vector, got " + shape_str(v.shape()));
  if (rows == 0) throw ShapeError("broadcast_rows: rows must be positive");
  const std::size_t c = v.dim(0);
  std::vector<T> out(rows * c);
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.data().begin(), v.data().end(), out.begin() + r * c);
  return make_result<T>({rows, c}, std::move(out), "broadcast_rows", {v}, [rows, c](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[r * c + j];
  });
}

template <Real T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.ndim() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) ok = false;
    if (!ok)
      throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " +
                       shape_str(p.shape()) + " on axis " + std::to_string(axis));
    shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  const std::size_t out_row = shape[axis] * inner;

  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);

  std::vector<T> out(outer * out_row);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k], widths[k], out.begin() + o * out_row + col);
    col += widths[k];
  }
  return make_result<T>(std::move(shape), std::move(out), "concat", parts,
                        [outer, out_row, widths](Node<T>& n) {
                          std::size_t col = 0;
                          for (std::size_t k = 0; k < n.parents.size(); ++k) {
                            auto& p = n.parents[k];
                            if (wants_grad(p)) {
                              auto g = p->ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < widths[k]; ++i)
                                  g[o * widths[k] + i] += n.grad[o * out_row + col + i];
                            }
                            col += widths[k];
                          }
                        });
}

template <Real T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.ndim() || begin >= end || end > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  const std::size_t in_row = x.dim(axis) * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t first = begin * inner;
  std::vector<T> out(outer * width);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + o * in_row + first, width, out.begin() + o * width);
  Shape shape = x.shape();
  shape[axis] = end - begin;
  return make_result<T>(std::move(shape), std::move(out), "slice", {x},
                        [outer, in_row, width, first](Node<T>& n) {
                          auto g = n.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < width; ++i)
                              g[o * in_row + first + i] += n.grad[o * width + i];
                        });
}

template <Real T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis,
                             const std::vector<std::size_t>& sizes) {
  if (axis >= x.ndim()) throw ShapeError("split: axis out of range for " + shape_str(x.shape()));
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != x.dim(axis))
    throw ShapeError("split: sizes do not sum to extent " + std::to_string(x.dim(axis)));
  std::vector<Tensor<T>> parts;
  std::size_t at = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, at, at + s));
    at += s;
  }
  return parts;
}

template <Real T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>({1}, {acc}, "sum", {a}, [](Node<T>& n) {
    auto g = n.parents[0]->ensure_grad();
    for (auto& gi : g) gi += n.grad[0];
  });
}

template <Real T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

#define MMFUSE_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> relu(const Tensor<T>&);                                               \
  template Tensor<T> tanh(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add(const Tensor<T>&, T);                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> rsub(T, const Tensor<T>&);                                            \
  template Tensor<T> apply(Unary, const Tensor<T>&);                                       \
  template Tensor<T> apply(Binary, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> transpose(const Tensor<T>&);                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                            Conv3dOptions);                                                \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                    \
  template Tensor<T> broadcast_expand(const Tensor<T>&, std::array<std::size_t, 3>);       \
  template Tensor<T> broadcast_rows(const Tensor<T>&, std::size_t);                        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                   \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);       \
  template std::vector<Tensor<T>> split(const Tensor<T>&, std::size_t,                     \
                                        const std::vector<std::size_t>&);                  \
  template Tensor<T> sum(const Tensor<T>&);                                                \
  template Tensor<T> mean(const Tensor<T>&);

MMFUSE_INSTANTIATE_OPS(float)
MMFUSE_INSTANTIATE_OPS(double)

}  // namespace mmfuse

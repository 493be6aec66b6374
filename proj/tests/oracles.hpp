#pragma once

// Independent reference implementations used only by tests. None of these
// call into the library code paths they check.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

// Direct nested-loop cross-correlation. x is [C_in][H][W][D] flat,
// w is [C_out][C_in][k][k][k] flat, floor semantics on the output extent.
inline std::vector<double> conv3d(const std::vector<double>& x, std::size_t c_in, std::size_t h,
                                  std::size_t w, std::size_t d, const std::vector<double>& wt,
                                  std::size_t c_out, std::size_t k, const std::vector<double>& b,
                                  std::size_t stride, std::size_t pad, std::size_t* out_dims) {
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t dout = (d + 2 * pad - k) / stride + 1;
  out_dims[0] = ho;
  out_dims[1] = wo;
  out_dims[2] = dout;
  std::vector<double> out(c_out * ho * wo * dout, 0.0);
  for (std::size_t co = 0; co < c_out; ++co)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow)
        for (std::size_t od = 0; od < dout; ++od) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t bb = 0; bb < k; ++bb)
                for (std::size_t c = 0; c < k; ++c) {
                  const long ih = static_cast<long>(oh * stride + a) - static_cast<long>(pad);
                  const long iw = static_cast<long>(ow * stride + bb) - static_cast<long>(pad);
                  const long id = static_cast<long>(od * stride + c) - static_cast<long>(pad);
                  if (ih < 0 || iw < 0 || id < 0 || ih >= static_cast<long>(h) ||
                      iw >= static_cast<long>(w) || id >= static_cast<long>(d))
                    continue;
                  acc += wt[(((co * c_in + ci) * k + a) * k + bb) * k + c] *
                         x[((ci * h + ih) * w + iw) * d + id];
                }
          out[((co * ho + oh) * wo + ow) * dout + od] = acc;
        }
  return out;
}

// P(score+ > score-) + 0.5 P(tie) over all positive/negative pairs.
inline double mann_whitney_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

}  // namespace oracle

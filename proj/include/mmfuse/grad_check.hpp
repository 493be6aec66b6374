#pragma once

#include <functional>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;  // index into the checked tensors
  std::size_t worst_coord = 0;
  double worst_fd = 0.0;
  double worst_ad = 0.0;
  std::size_t coords = 0;
  std::size_t skipped = 0;  // grad_check_piecewise only
};

// Compares autodiff against central differences for every coordinate of
// every tensor in `inputs`. `f` must rebuild the graph from the current
// values of `inputs` on each call and return a scalar.
//   err_i = |fd - ad| / max(1e-8, |fd| + |ad|)
GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> inputs, double h = 1e-4);

// Distance from the current point to the nearest non-differentiable point of
// the graph behind `root`: the smallest |input| of any relu, and the smallest
// gap between the extreme and runner-up entries of any min-max normalization.
// Central differences straddling such a point are meaningless, so checks
// should only be run when this exceeds the expected perturbation.
double nonsmooth_margin(const Tensor<double>& root);

// Which side of every non-smooth point the graph behind `root` is on: the
// sign of each relu input and the winning indices of each min-max
// normalization.
std::vector<std::size_t> nonsmooth_pattern(const Tensor<double>& root);

// grad_check restricted to coordinates whose +h and -h evaluations keep the
// pattern of the unperturbed point, so the difference quotient never spans a
// kink. Coordinates left out are counted in `skipped`.
GradCheckReport grad_check_piecewise(const std::function<Tensor<double>()>& f,
                                     std::vector<Tensor<double>> inputs, double h = 1e-4);

inline double grad_check(const std::function<Tensor<double>()>& f, Tensor<double> x,
                         double h = 1e-4) {
  return grad_check(f, std::vector<Tensor<double>>{std::move(x)}, h).max_rel_error;
}

}  // namespace mmfuse

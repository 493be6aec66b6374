#include "mmfuse/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mmfuse/error.hpp"

namespace mmfuse {

GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> inputs, double h) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tensor<double> loss = f();
  if (loss.size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  backward(loss);

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    std::vector<double> ad(x.size(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), ad.begin());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i];
      double up, down;
      {
        NoGradGuard guard;
        x.data()[i] = saved + h;
        up = f().item();
        x.data()[i] = saved - h;
        down = f().item();
        x.data()[i] = saved;
      }
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(fd - ad[i]) / std::max(1e-8, std::abs(fd) + std::abs(ad[i]));
      ++report.coords;
      if (err > report.max_rel_error || report.coords == 1) {
        report.max_rel_error = err;
        report.worst_input = k;
        report.worst_coord = i;
        report.worst_fd = fd;
        report.worst_ad = ad[i];
      }
    }
  }
  return report;
}

double nonsmooth_margin(const Tensor<double>& root) {
  double margin = std::numeric_limits<double>::infinity();
  for (Node<double>* node : topological_order(root)) {
    if (node->parents.empty()) continue;
    const auto& in = node->parents[0]->data;
    const std::string op = node->op;
    if (op == "relu") {
      for (double v : in) margin = std::min(margin, std::abs(v));
    } else if (op == "minmax_normalize" && in.size() > 1) {
      std::vector<double> sorted(in);
      std::sort(sorted.begin(), sorted.end());
      margin = std::min({margin, sorted[1] - sorted[0],
                         sorted[sorted.size() - 1] - sorted[sorted.size() - 2]});
    }
  }
  return margin;
}

std::vector<std::size_t> nonsmooth_pattern(const Tensor<double>& root) {
  std::vector<std::size_t> pattern;
  for (Node<double>* node : topological_order(root)) {
    if (node->parents.empty()) continue;
    const auto& in = node->parents[0]->data;
    if (node->op == "relu") {
      for (double v : in) pattern.push_back(v > 0.0 ? 1 : 0);
    } else if (node->op == "minmax_normalize" && !in.empty()) {
      const auto [mn, mx] = std::minmax_element(in.begin(), in.end());
      pattern.push_back(static_cast<std::size_t>(mn - in.begin()));
      pattern.push_back(static_cast<std::size_t>(mx - in.begin()));
    }
  }
  return pattern;
}

GradCheckReport grad_check_piecewise(const std::function<Tensor<double>()>& f,
                                     std::vector<Tensor<double>> inputs, double h) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tensor<double> loss = f();
  if (loss.size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  const auto base = nonsmooth_pattern(loss);
  backward(loss);

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    std::vector<double> ad(x.size(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), ad.begin());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i];
      x.data()[i] = saved + h;
      Tensor<double> up = f();
      const bool same_up = nonsmooth_pattern(up) == base;
      x.data()[i] = saved - h;
      Tensor<double> down = f();
      const bool same_down = nonsmooth_pattern(down) == base;
      x.data()[i] = saved;
      if (!same_up || !same_down) {
        ++report.skipped;
        continue;
      }
      const double fd = (up.item() - down.item()) / (2.0 * h);
      const double err = std::abs(fd - ad[i]) / std::max(1e-8, std::abs(fd) + std::abs(ad[i]));
      ++report.coords;
      if (err > report.max_rel_error || report.coords == 1) {
        report.max_rel_error = err;
        report.worst_input = k;
        report.worst_coord = i;
        report.worst_fd = fd;
        report.worst_ad = ad[i];
      }
    }
  }
  return report;
}

}  // namespace mmfuse

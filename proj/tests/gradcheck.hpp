#pragma once

// Central finite-difference oracle for reverse-mode gradients. Test-only:
// re-evaluates the loss builder from scratch for every perturbed entry, so it
// never reuses the autodiff path it is checking.

#include <functional>
#include <vector>

#include "aswap/tensor.hpp"

namespace aswap::testing {

// Builds a scalar loss from graph tensors created over the given values.
// Called many times; must be a pure function of the inputs.
using LossBuilder =
    std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradcheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

inline GradcheckResult gradcheck(const LossBuilder& build,
                                 std::vector<Mat<double>> inputs,
                                 double step = 1e-6) {
  // Reverse-mode gradients.
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (auto& m : inputs) leaves.push_back(Tensor<double>::from(m, true));
  Tensor<double> loss = build(leaves);
  backward(loss);
  std::vector<Mat<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad()
                           ? leaf.grad()
                           : Mat<double>::Zero(leaf.rows(), leaf.cols()));
  }

  auto eval = [&](const std::vector<Mat<double>>& xs) {
    std::vector<Tensor<double>> ts;
    ts.reserve(xs.size());
    for (const auto& m : xs) ts.push_back(Tensor<double>::from(m, false));
    return build(ts).value()(0, 0);
  };

  GradcheckResult res;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    for (Index i = 0; i < inputs[p].rows(); ++i) {
      for (Index j = 0; j < inputs[p].cols(); ++j) {
        std::vector<Mat<double>> probe = inputs;
        probe[p](i, j) += step;
        const double up = eval(probe);
        probe[p](i, j) -= 2 * step;
        const double down = eval(probe);
        const double fd = (up - down) / (2 * step);
        const double ad = analytic[p](i, j);
        const double denom = std::max({1.0, std::abs(fd), std::abs(ad)});
        res.max_rel_error = std::max(res.max_rel_error, std::abs(fd - ad) / denom);
        ++res.checked;
      }
    }
  }
  return res;
}

}  // namespace aswap::testing

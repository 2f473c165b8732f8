#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace hcm {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;    // worst element over all inputs
  int worst_input = -1;        // which input held the worst element
  std::vector<double> per_input;  // max relative error per input tensor
  std::string message;
};

// Central-difference gradient verification, run in 64-bit.
//
// f must be a pure function of `inputs` returning a scalar tensor. The
// analytic pass runs once under a fresh tape with every input marked
// grad-carrying; each element is then perturbed by h = 1e-4 * max(1, |x|)
// and the centered difference is compared against the analytic gradient.
// Relative error uses max(1, |analytic|, |numeric|) as the denominator.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double tol = 1e-4) {
  GradCheckReport rep;
  rep.per_input.assign(inputs.size(), 0.0);

  std::vector<std::vector<double>> analytic(inputs.size());
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    for (auto& in : inputs) in.set_requires_grad(true);
    Tensor<double> loss = f(inputs);
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("grad_check: f must return a scalar tensor");
    tape.backward(loss);
    for (size_t i = 0; i < inputs.size(); ++i)
      analytic[i] = inputs[i].has_grad() ? inputs[i].grad()
                                         : std::vector<double>(inputs[i].numel(), 0.0);
    for (auto& in : inputs) {
      in.zero_grad();
      in.set_requires_grad(false);
    }
  }

  auto eval = [&]() -> double {
    Tensor<double> y = f(inputs);
    return y.item();
  };

  for (size_t i = 0; i < inputs.size(); ++i) {
    double* p = inputs[i].mutable_data();
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      double x0 = p[j];
      double h = 1e-4 * std::max(1.0, std::abs(x0));
      p[j] = x0 + h;
      double fp = eval();
      p[j] = x0 - h;
      double fm = eval();
      p[j] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.pass = false;
        rep.message = "non-finite output while perturbing input " + std::to_string(i) +
                      " element " + std::to_string(j);
        return rep;
      }
      double num = (fp - fm) / (2.0 * h);
      double ana = analytic[i][static_cast<size_t>(j)];
      double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      rep.per_input[i] = std::max(rep.per_input[i], rel);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = static_cast<int>(i);
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  if (!rep.pass && rep.message.empty())
    rep.message = "max relative error " + std::to_string(rep.max_rel_err) + " on input " +
                  std::to_string(rep.worst_input) + " exceeds tol " + std::to_string(tol);
  return rep;
}

}  // namespace hcm

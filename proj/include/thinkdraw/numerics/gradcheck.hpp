#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "thinkdraw/numerics/autograd.hpp"

namespace thinkdraw {

using ScalarFn = std::function<double(const Tensor<double>&)>;

// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate.
// Throws NonFiniteError if f returns a non-finite value.
Tensor<double> finite_diff_grad(const ScalarFn& f, const Tensor<double>& x, double h = 1e-5);

struct GradCheckEntry {
  std::size_t input = 0;  // which input tensor
  std::size_t index = 0;  // flat coordinate within it
  double analytic = 0;
  double numeric = 0;
  double error = 0;  // |analytic - numeric| / max(1, |numeric|)
  bool ok = true;
};

struct GradCheckReport {
  bool pass = true;
  double max_error = 0;
  std::vector<GradCheckEntry> entries;

  std::vector<GradCheckEntry> failures() const;
  std::string summary() const;
};

using GraphFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Compares reverse-mode gradients of `f` against finite differences for every
// coordinate of every input. Failures are report entries, never exceptions.
GradCheckReport check_gradients(const GraphFn& f, const std::vector<Tensor<double>>& inputs,
                                double rel_tol, double h = 1e-5);

// Same comparison against a caller-supplied analytic gradient; lets tests
// inject faults into the analytic side.
GradCheckReport compare_gradients(const std::vector<Tensor<double>>& analytic,
                                  const std::vector<Tensor<double>>& numeric, double rel_tol);

}  // namespace thinkdraw

#include "thinkdraw/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace thinkdraw {

Tensor<double> finite_diff_grad(const ScalarFn& f, const Tensor<double>& x, double h) {
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double fp = f(probe);
    probe[k] = x[k] - h;
    const double fm = f(probe);
    probe[k] = x[k];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("finite_diff_grad: function returned a non-finite value at coordinate " +
                           std::to_string(k));
    }
    g[k] = (fp - fm) / (2 * h);
  }
  return g;
}

std::vector<GradCheckEntry> GradCheckReport::failures() const {
  std::vector<GradCheckEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [](const GradCheckEntry& e) { return !e.ok; });
  return out;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (pass ? "pass" : "FAIL") << " max_err=" << max_error << " coords=" << entries.size();
  for (const auto& e : failures()) {
    os << "\n  input " << e.input << " coord " << e.index << ": analytic=" << e.analytic
       << " numeric=" << e.numeric << " err=" << e.error;
  }
  return os.str();
}

GradCheckReport compare_gradients(const std::vector<Tensor<double>>& analytic,
                                  const std::vector<Tensor<double>>& numeric, double rel_tol) {
  if (analytic.size() != numeric.size()) throw ShapeError("compare_gradients: input count mismatch");
  GradCheckReport report;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (analytic[i].size() != numeric[i].size()) throw ShapeError("compare_gradients: size mismatch");
    for (std::size_t k = 0; k < analytic[i].size(); ++k) {
      GradCheckEntry e;
      e.input = i;
      e.index = k;
      e.analytic = analytic[i][k];
      e.numeric = numeric[i][k];
      e.error = std::abs(e.analytic - e.numeric) / std::max(1.0, std::abs(e.numeric));
      e.ok = e.error <= rel_tol;
      report.max_error = std::max(report.max_error, e.error);
      report.pass = report.pass && e.ok;
      report.entries.push_back(e);
    }
  }
  return report;
}

GradCheckReport check_gradients(const GraphFn& f, const std::vector<Tensor<double>>& inputs,
                                double rel_tol, double h) {
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(leaf(t, true));
  backward(f(vars));
  std::vector<Tensor<double>> analytic;
  for (const auto& v : vars) analytic.push_back(v.grad());

  std::vector<Tensor<double>> numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ScalarFn fi = [&](const Tensor<double>& xi) {
      NoGradGuard guard;
      std::vector<Var<double>> args;
      for (std::size_t j = 0; j < inputs.size(); ++j) args.push_back(constant(j == i ? xi : inputs[j]));
      return f(args).item();
    };
    numeric.push_back(finite_diff_grad(fi, inputs[i], h));
  }
  return compare_gradients(analytic, numeric, rel_tol);
}

}  // namespace thinkdraw

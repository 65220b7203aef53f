// SPDX-License-Identifier: Apache-2.0
#include "dvp/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace dvp {
namespace {

double evaluate(const LossBuilder& loss) {
  Tape tape;
  const double v = loss(tape).value()[0];
  if (!std::isfinite(v)) throw Error("grad_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss, std::span<Tensor* const> params,
                           double h, double tol) {
  if (!(h >= 1e-8 && h <= 1e-2)) throw Error("grad_check: step h out of range");

  std::vector<std::vector<double>> analytic(params.size());
  {
    std::vector<bool> saved(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      saved[p] = params[p]->requires_grad();
      params[p]->set_requires_grad(true);
    }
    Tape tape;
    Var root = loss(tape);
    if (!std::isfinite(root.value()[0])) throw Error("grad_check: loss is not finite");
    tape.backward(root);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto g = tape.grad(tape.param(*params[p]));
      analytic[p].assign(params[p]->size(), 0.0);
      std::copy(g.begin(), g.end(), analytic[p].begin());
      params[p]->set_requires_grad(saved[p]);
    }
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = evaluate(loss);
      t[i] = orig - h;
      const double down = evaluate(loss);
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = std::to_string(p) + "[" + std::to_string(i) + "]";
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace dvp

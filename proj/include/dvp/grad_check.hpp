// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>

#include "dvp/autograd.hpp"

namespace dvp {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param index>[<coordinate>]" of the largest error
  bool passed = false;
};

/// Builds a scalar loss on the given tape. Parameters must be bound with
/// Tape::param so their gradients can be read back.
using LossBuilder = std::function<Var(Tape&)>;

/// Central finite differences for every coordinate of `params` compared
/// with the tape gradient. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
///
/// Throws dvp::Error if the loss is non-finite or h is outside [1e-8, 1e-2].
GradCheckReport grad_check(const LossBuilder& loss, std::span<Tensor* const> params,
                           double h, double tol);

}  // namespace dvp

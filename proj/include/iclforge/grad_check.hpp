#pragma once

// Central-difference gradient verification for scalar-valued functions.

#include <functional>

#include "iclforge/tensor.hpp"

namespace iclforge {

// Perturbs each entry of x by +/-eps, compares (f(x+)-f(x-))/2eps against the
// analytic gradient, and returns the worst relative error
//   |numeric - analytic| / max(1e-8, |numeric| + |analytic|, scale)
// where scale is the largest analytic gradient magnitude in x, so entries on
// structurally flat directions are measured against the gradient's scale
// rather than their own rounding noise.
double grad_check(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                  const Tensor& analytic, double eps = 1e-3);

}  // namespace iclforge

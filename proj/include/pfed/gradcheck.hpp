#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>

#include "pfed/rng.hpp"
#include "pfed/tensor.hpp"

namespace pfed {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t coords = 0;
};

// Relative error with a floored denominator so coordinates whose true
// gradient is tiny are judged on an absolute scale of 1e-4.
inline double grad_rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4});
}

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h against an
// analytic gradient, over all coordinates or a seeded sample of them.
template <class F>
GradCheckResult finite_diff_check(F&& f, const Tensor& x, const Tensor& analytic, double h,
                                  std::size_t max_coords = 50, std::uint64_t seed = 0xc0ffee) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  if (!x.same_shape(analytic))
    throw std::invalid_argument("finite_diff_check: gradient shape " + shape_str(analytic.shape()) +
                                " does not match input " + shape_str(x.shape()));
  std::vector<std::size_t> coords;
  if (x.numel() <= max_coords) {
    coords.resize(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  } else {
    Rng rng(seed);
    coords = rng.permutation(x.numel());
    coords.resize(max_coords);
  }

  Tensor xp = x;
  GradCheckResult res;
  for (std::size_t i : coords) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(static_cast<const Tensor&>(xp));
    xp[i] = orig - h;
    const double fm = f(static_cast<const Tensor&>(xp));
    xp[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    res.max_rel_err = std::max(res.max_rel_err, grad_rel_err(analytic[i], fd));
    ++res.coords;
  }
  return res;
}

}  // namespace pfed

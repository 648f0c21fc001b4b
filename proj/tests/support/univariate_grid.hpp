#pragma once

// Brute-force oracle: maximise the quadrature expected ELBO over (μ, σ²)
// by repeated grid refinement. Knows nothing about the closed form.

#include <cmath>

#include "condgap/analytic_gap.hpp"

namespace condgap::testing {

struct GridOptimum {
  double mean = 0.0;
  double var = 1.0;
  double value = -INFINITY;
};

inline GridOptimum grid_search_univariate_q(const UnivariateModel& m, const GaussHermiteRule& rule,
                                            double mean_lo = -1.0, double mean_hi = 1.0, double var_lo = 1e-4,
                                            double var_hi = 2.0, int levels = 8) {
  GridOptimum best;
  int nm = 41, nv = 201;
  double lo_m = mean_lo, hi_m = mean_hi, lo_lv = std::log(var_lo), hi_lv = std::log(var_hi);
  for (int level = 0; level < levels; ++level) {
    const double dm = (hi_m - lo_m) / (nm - 1), dlv = (hi_lv - lo_lv) / (nv - 1);
    for (int i = 0; i < nm; ++i)
      for (int j = 0; j < nv; ++j) {
        const double mu = lo_m + i * dm, var = std::exp(lo_lv + j * dlv);
        const double v = expected_elbo_univariate(m, DiagGaussian::scalar(mu, var), rule);
        if (v > best.value) best = {mu, var, v};
      }
    // zoom to ±2 cells around the incumbent, clipped to the original box
    lo_m = std::max(mean_lo, best.mean - 2 * dm);
    hi_m = std::min(mean_hi, best.mean + 2 * dm);
    lo_lv = std::max(std::log(var_lo), std::log(best.var) - 2 * dlv);
    hi_lv = std::min(std::log(var_hi), std::log(best.var) + 2 * dlv);
    nm = nv = 21;
  }
  return best;
}

}  // namespace condgap::testing

#pragma once

// Central finite-difference oracle used by the gradient tests. It only sees
// a scalar loss as a function of a flat parameter vector.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace psse::fd {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Relative error |a - n| / max(1, |a|, |n|) per coordinate; the floor of 1
/// keeps near-zero components from dominating.
inline GradCheckResult compare_gradients(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  GradCheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({1.0, std::abs(analytic[i]), std::abs(numeric[i])});
    const double rel = std::abs(analytic[i] - numeric[i]) / scale;
    if (rel > r.max_rel_error) r = {rel, i, analytic[i], numeric[i]};
  }
  return r;
}

}  // namespace psse::fd

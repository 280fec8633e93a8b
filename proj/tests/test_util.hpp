#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bitbudget/rng.hpp"
#include "bitbudget/tensor.hpp"

namespace bitbudget::testutil {

// Central finite difference of f at x along coordinate i.
inline double central_diff(const std::function<double(const std::vector<double>&)>& f,
                           std::vector<double> x, std::size_t i, double step) {
  x[i] += step;
  const double fp = f(x);
  x[i] -= 2.0 * step;
  const double fm = f(x);
  return (fp - fm) / (2.0 * step);
}

inline double rel_err(double got, double want) {
  const double denom = std::max(std::fabs(want), 1e-12);
  return std::fabs(got - want) / denom;
}

inline Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.next_gaussian();
  return t;
}

}  // namespace bitbudget::testutil

#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

namespace lskld {

struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  int n_evals = 0;
  bool converged = false;
};

/// Downhill simplex minimizer with the classic coefficients
/// (reflection 1, expansion 2, contraction 0.5, shrink 0.5).
/// Initial simplex: x0 plus init_scale along each coordinate.
/// Stops when the simplex value spread falls below ftol or the
/// evaluation budget runs out. Fully deterministic.
inline NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                    const Eigen::VectorXd& x0, double init_scale,
                                    int max_evals, double ftol) {
  const int n = static_cast<int>(x0.size());
  NelderMeadResult res;
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++evals;
    const double v = f(x);
    return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
  };

  std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(n) + 1);
  std::vector<double> fs(static_cast<std::size_t>(n) + 1);
  xs[0] = x0;
  fs[0] = eval(x0);
  for (int i = 0; i < n; ++i) {
    xs[static_cast<std::size_t>(i) + 1] = x0;
    xs[static_cast<std::size_t>(i) + 1][i] += init_scale;
    fs[static_cast<std::size_t>(i) + 1] = eval(xs[static_cast<std::size_t>(i) + 1]);
  }

  std::vector<int> order(xs.size());
  auto sort_order = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return fs[static_cast<std::size_t>(a)] < fs[static_cast<std::size_t>(b)];
    });
  };

  while (evals < max_evals) {
    sort_order();
    const int ibest = order.front(), iworst = order.back();
    const int isecond = order[order.size() - 2];
    const double spread = fs[static_cast<std::size_t>(iworst)] - fs[static_cast<std::size_t>(ibest)];
    if (std::isfinite(spread) && spread <= ftol) {
      res.converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i : order)
      if (i != iworst) centroid += xs[static_cast<std::size_t>(i)];
    centroid /= static_cast<double>(n);

    const Eigen::VectorXd xr = centroid + (centroid - xs[static_cast<std::size_t>(iworst)]);
    const double fr = eval(xr);
    if (fr < fs[static_cast<std::size_t>(ibest)]) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - xs[static_cast<std::size_t>(iworst)]);
      const double fe = eval(xe);
      if (fe < fr) {
        xs[static_cast<std::size_t>(iworst)] = xe;
        fs[static_cast<std::size_t>(iworst)] = fe;
      } else {
        xs[static_cast<std::size_t>(iworst)] = xr;
        fs[static_cast<std::size_t>(iworst)] = fr;
      }
      continue;
    }
    if (fr < fs[static_cast<std::size_t>(isecond)]) {
      xs[static_cast<std::size_t>(iworst)] = xr;
      fs[static_cast<std::size_t>(iworst)] = fr;
      continue;
    }
    // contraction: outside when the reflection helped at least the worst
    // point, inside otherwise
    if (fr < fs[static_cast<std::size_t>(iworst)]) {
      const Eigen::VectorXd xc = centroid + 0.5 * (xr - centroid);
      const double fc = eval(xc);
      if (fc <= fr) {
        xs[static_cast<std::size_t>(iworst)] = xc;
        fs[static_cast<std::size_t>(iworst)] = fc;
        continue;
      }
    } else {
      const Eigen::VectorXd xc = centroid - 0.5 * (centroid - xs[static_cast<std::size_t>(iworst)]);
      const double fc = eval(xc);
      if (fc < fs[static_cast<std::size_t>(iworst)]) {
        xs[static_cast<std::size_t>(iworst)] = xc;
        fs[static_cast<std::size_t>(iworst)] = fc;
        continue;
      }
    }
    // shrink toward the best vertex
    for (int i : order) {
      if (i == ibest) continue;
      xs[static_cast<std::size_t>(i)] =
          xs[static_cast<std::size_t>(ibest)] +
          0.5 * (xs[static_cast<std::size_t>(i)] - xs[static_cast<std::size_t>(ibest)]);
      fs[static_cast<std::size_t>(i)] = eval(xs[static_cast<std::size_t>(i)]);
      if (evals >= max_evals) break;
    }
  }

  sort_order();
  res.x = xs[static_cast<std::size_t>(order.front())];
  res.value = fs[static_cast<std::size_t>(order.front())];
  res.n_evals = evals;
  return res;
}

}  // namespace lskld

#include <catch2/catch_amalgamated.hpp>

#include "lskld/nelder_mead.hpp"

using namespace lskld;

TEST_CASE("quadratic bowl", "[nelder-mead]") {
  auto f = [](const Eigen::VectorXd& x) {
    return (x[0] - 1.0) * (x[0] - 1.0) + 2.0 * (x[1] + 0.5) * (x[1] + 0.5);
  };
  const NelderMeadResult r = nelder_mead(f, Eigen::Vector2d(3.0, 3.0), 0.5, 500, 1e-12);
  REQUIRE(r.converged);
  REQUIRE(r.x[0] == Catch::Approx(1.0).margin(1e-4));
  REQUIRE(r.x[1] == Catch::Approx(-0.5).margin(1e-4));
  REQUIRE(r.value == Catch::Approx(0.0).margin(1e-8));
}

TEST_CASE("rosenbrock valley", "[nelder-mead]") {
  auto f = [](const Eigen::VectorXd& x) {
    const double a = 1.0 - x[0];
    const double b = x[1] - x[0] * x[0];
    return a * a + 100.0 * b * b;
  };
  const NelderMeadResult r = nelder_mead(f, Eigen::Vector2d(-1.2, 1.0), 0.5, 2000, 1e-14);
  REQUIRE(r.x[0] == Catch::Approx(1.0).margin(1e-3));
  REQUIRE(r.x[1] == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("budget is respected and runs are deterministic", "[nelder-mead]") {
  int calls = 0;
  auto f = [&calls](const Eigen::VectorXd& x) {
    ++calls;
    return x.squaredNorm();
  };
  const NelderMeadResult r1 = nelder_mead(f, Eigen::Vector3d(5.0, -3.0, 2.0), 1.0, 40, 1e-16);
  REQUIRE(calls <= 41);
  const int first_calls = calls;
  calls = 0;
  const NelderMeadResult r2 = nelder_mead(f, Eigen::Vector3d(5.0, -3.0, 2.0), 1.0, 40, 1e-16);
  REQUIRE(calls == first_calls);
  REQUIRE(r1.value == r2.value);
  REQUIRE(r1.x == r2.x);
}

TEST_CASE("infinite objective values are rejected, not propagated", "[nelder-mead]") {
  auto f = [](const Eigen::VectorXd& x) {
    if (x[0] < 0.0) return std::numeric_limits<double>::infinity();
    return (x[0] - 2.0) * (x[0] - 2.0);
  };
  const NelderMeadResult r = nelder_mead(f, Eigen::VectorXd::Ones(1), 0.5, 200, 1e-12);
  REQUIRE(r.x[0] == Catch::Approx(2.0).margin(1e-4));
  REQUIRE(std::isfinite(r.value));
}

#include <catch2/catch_amalgamated.hpp>

#include "lskld/rng.hpp"
#include "lskld/trajectory_model.hpp"

using namespace lskld;

TEST_CASE("polynomial basis evaluation", "[trajectory]") {
  const BasisSpec quad{BasisSpec::Kind::polynomial, 2};
  REQUIRE(quad.q() == 3);

  Eigen::VectorXd g = eval_basis(0.0, quad);
  REQUIRE(g[0] == 1.0);
  REQUIRE(g[1] == 0.0);
  REQUIRE(g[2] == 0.0);

  g = eval_basis(2.0, quad);
  REQUIRE(g[0] == 1.0);
  REQUIRE(g[1] == 2.0);
  REQUIRE(g[2] == 4.0);

  g = eval_basis(7.0, quad);
  REQUIRE(g[1] == 7.0);
  REQUIRE(g[2] == 49.0);

  REQUIRE_THROWS_AS(eval_basis(1.0, BasisSpec{BasisSpec::Kind::polynomial, 0}),
                    std::invalid_argument);
}

TEST_CASE("design matrix rows are basis evaluations", "[trajectory]") {
  const BasisSpec quad{BasisSpec::Kind::polynomial, 2};
  Eigen::VectorXd times(2);
  times << 0.0, 1.0;
  const Eigen::MatrixXd g = design_matrix(times, quad);
  REQUIRE(g.rows() == 2);
  REQUIRE(g.cols() == 3);
  REQUIRE(g(0, 0) == 1.0);
  REQUIRE(g(0, 1) == 0.0);
  REQUIRE(g(1, 2) == 1.0);

  Eigen::VectorXd grid(8);
  for (int j = 0; j < 8; ++j) grid[j] = j;
  const Eigen::MatrixXd g8 = design_matrix(grid, quad);
  REQUIRE(g8.rows() == 8);
  for (int j = 0; j < 8; ++j) REQUIRE(g8(j, 2) == static_cast<double>(j * j));

  REQUIRE_THROWS_AS(design_matrix(Eigen::VectorXd(), quad), std::invalid_argument);
}

TEST_CASE("design matrix times coefficients equals pointwise polynomial", "[trajectory]") {
  const BasisSpec quad{BasisSpec::Kind::polynomial, 2};
  rng::Engine eng(991);
  Eigen::VectorXd times(5);
  times << 0.0, 0.5, 1.0, 3.0, 7.0;
  const Eigen::MatrixXd g = design_matrix(times, quad);
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::VectorXd c = eng.normal_vector(3);
    const Eigen::VectorXd lhs = g * c;
    for (Eigen::Index j = 0; j < times.size(); ++j) {
      const double t = times[j];
      const double direct = c[0] * 1.0 + c[1] * t + c[2] * (t * t);
      REQUIRE(lhs[j] == Catch::Approx(direct).margin(1e-12));
    }
  }
}

TEST_CASE("mean trajectory matches hand arithmetic and is affine in w", "[trajectory]") {
  const BasisSpec quad{BasisSpec::Kind::polynomial, 2};
  GroupParams g;
  g.beta = Eigen::Vector3d(20.0, 3.0, -0.5);
  g.gamma = Eigen::Vector3d::Zero();
  g.d = Eigen::Matrix3d::Identity();
  g.sigma2 = 1.0;
  REQUIRE(mean_trajectory(g, 0.0, 0.0, quad) == Catch::Approx(20.0));
  REQUIRE(mean_trajectory(g, 0.0, 7.0, quad) == Catch::Approx(16.5));

  g.gamma = Eigen::Vector3d(0.0, 1.0, 0.0);
  const double at0 = mean_trajectory(g, 0.0, 1.0, quad);
  const double at1 = mean_trajectory(g, 1.0, 1.0, quad);
  REQUIRE(at1 - at0 == Catch::Approx(1.0).margin(1e-12));

  rng::Engine eng(7);
  for (int rep = 0; rep < 50; ++rep) {
    GroupParams r = g;
    r.beta = eng.normal_vector(3);
    r.gamma = eng.normal_vector(3);
    const double w1 = eng.normal(), w2 = eng.normal(), t = eng.normal();
    const double lhs = mean_trajectory(r, w1, t, quad) + mean_trajectory(r, w2, t, quad);
    const double rhs = mean_trajectory(r, 0.0, t, quad) + mean_trajectory(r, w1 + w2, t, quad);
    REQUIRE(lhs == Catch::Approx(rhs).margin(1e-9));
  }
}

TEST_CASE("record and trial validation", "[trajectory]") {
  SubjectRecord s;
  s.id = "a";
  s.group = 1;
  s.times = Eigen::Vector2d(0.0, 1.0);
  s.outcomes = Eigen::Vector2d(1.0, 2.0);
  s.covariates = Eigen::VectorXd::Zero(2);
  REQUIRE_NOTHROW(s.validate());

  SubjectRecord bad = s;
  bad.times = Eigen::Vector2d(1.0, 1.0);
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = s;
  bad.group = 3;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  TrialData data;
  data.p = 2;
  data.design_times = Eigen::Vector2d(0.0, 1.0);
  data.subjects = {s};
  REQUIRE_THROWS_AS(data.validate(), std::invalid_argument);  // missing group 2
  SubjectRecord s2 = s;
  s2.id = "b";
  s2.group = 2;
  data.subjects.push_back(s2);
  REQUIRE_NOTHROW(data.validate());
}

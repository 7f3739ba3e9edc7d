#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "lskld/rng.hpp"
#include "lskld/trajectory_model.hpp"

namespace lskld {

/// Coefficients of the subject-level purity quadratic
/// q(w) = a1 + a2 w + a3 w^2.
struct PurityCoeffs {
  double a1 = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;
};

namespace detail {

/// Cholesky of a symmetric positive definite matrix, with a cheap
/// conditioning guard: reject when (max diag(L) / min diag(L))^2
/// exceeds 1e12, since downstream inverses become meaningless there.
inline Eigen::LLT<Eigen::MatrixXd> chol_spd(const Eigen::MatrixXd& s, const char* what) {
  if (s.rows() != s.cols()) throw std::invalid_argument(std::string(what) + ": matrix not square");
  const double scale = s.cwiseAbs().maxCoeff();
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-8 * std::max(scale, 1.0))
    throw std::invalid_argument(std::string(what) + ": matrix not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument(std::string(what) + ": matrix not positive definite");
  const auto diag = llt.matrixLLT().diagonal();
  const double dmin = diag.minCoeff(), dmax = diag.maxCoeff();
  if (!(dmin > 0.0) || (dmax / dmin) * (dmax / dmin) > 1e12)
    throw std::runtime_error(std::string(what) + ": matrix too ill-conditioned");
  return llt;
}

inline double logdet_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

/// KL(N(m1,s1) || N(m2,s2)) in closed form. Nonnegative; tiny negative
/// roundoff is clamped at zero.
inline double kld_gaussian(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1,
                           const Eigen::VectorXd& m2, const Eigen::MatrixXd& s2) {
  const auto d = m1.size();
  if (m2.size() != d || s1.rows() != d || s2.rows() != d)
    throw std::invalid_argument("kld_gaussian: dimension mismatch");
  const auto llt1 = detail::chol_spd(s1, "kld_gaussian: s1");
  const auto llt2 = detail::chol_spd(s2, "kld_gaussian: s2");
  const double trace = llt2.solve(s1).trace();
  const Eigen::VectorXd dm = m2 - m1;
  const double quad = dm.dot(llt2.solve(dm));
  const double logdets = detail::logdet_from_llt(llt2) - detail::logdet_from_llt(llt1);
  return std::max(0.0, 0.5 * (trace + quad - static_cast<double>(d) + logdets));
}

/// Symmetrized divergence KL(F1||F2) + KL(F2||F1).
inline double sym_kld(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1,
                      const Eigen::VectorXd& m2, const Eigen::MatrixXd& s2) {
  return kld_gaussian(m1, s1, m2, s2) + kld_gaussian(m2, s2, m1, s1);
}

/// Closed-form coefficients of the purity quadratic for the coefficient
/// distributions N(beta_k + gamma_k w, D_k), k = 1,2:
///   a1 = -q + tr(D1^-1 D2)/2 + tr(D2^-1 D1)/2 + (b1-b2)'M(b1-b2)/2
///   a2 = (g1-g2)'M(b1-b2)
///   a3 = (g1-g2)'M(g1-g2)/2,       M = D1^-1 + D2^-1.
/// The constant is -q (the coefficient dimension): the pair of
/// q-dimensional Gaussian divergences each carry -q/2.
inline PurityCoeffs purity_coeffs(const GroupParams& g1, const GroupParams& g2) {
  const int q = g1.q();
  if (g2.q() != q) throw std::invalid_argument("purity_coeffs: dimension mismatch");
  const auto llt1 = detail::chol_spd(g1.d, "purity_coeffs: D1");
  const auto llt2 = detail::chol_spd(g2.d, "purity_coeffs: D2");
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(q, q);
  const Eigen::MatrixXd m = llt1.solve(eye) + llt2.solve(eye);
  const Eigen::VectorXd db = g1.beta - g2.beta;
  const Eigen::VectorXd dg = g1.gamma - g2.gamma;
  PurityCoeffs c;
  c.a1 = -static_cast<double>(q) + 0.5 * llt1.solve(g2.d).trace() +
         0.5 * llt2.solve(g1.d).trace() + 0.5 * db.dot(m * db);
  c.a2 = dg.dot(m * db);
  c.a3 = 0.5 * dg.dot(m * dg);
  return c;
}

/// Subject-level purity at index value w.
inline double subject_purity(const PurityCoeffs& c, double w) {
  return c.a1 + c.a2 * w + c.a3 * w * w;
}

/// Population purity Q(alpha) = a1 + a2 mu'alpha + a3 alpha'(mu mu' + Sigma)alpha.
inline double population_purity(const PurityCoeffs& c, const CovariateMoments& m,
                                const Eigen::VectorXd& alpha) {
  if (m.mu.size() != alpha.size() || m.sigma.rows() != alpha.size())
    throw std::invalid_argument("population_purity: dimension mismatch");
  const double s = m.mu.dot(alpha);
  return c.a1 + c.a2 * s + c.a3 * (s * s + alpha.dot(m.sigma * alpha));
}

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of the population purity: draws the index value
/// w from its implied Gaussian and averages the full symmetric-KLD
/// computation (never the closed-form quadratic), so it stays an
/// independent check on purity_coeffs / population_purity.
inline McEstimate mc_purity_oracle(const GroupParams& g1, const GroupParams& g2,
                                   const CovariateMoments& m, const Eigen::VectorXd& alpha,
                                   long n_draws, std::uint64_t seed) {
  if (n_draws < 10000) throw std::invalid_argument("mc_purity_oracle: n_draws must be >= 1e4");
  const double mu_w = m.mu.dot(alpha);
  const double var_w = std::max(0.0, alpha.dot(m.sigma * alpha));
  const double sd_w = std::sqrt(var_w);
  rng::Engine eng(rng::derive(seed, rng::tag(rng::Stream::oracle)));
  double mean = 0.0, m2 = 0.0;
  for (long i = 0; i < n_draws; ++i) {
    const double w = mu_w + sd_w * eng.normal();
    const double v = sym_kld(g1.beta + g1.gamma * w, g1.d, g2.beta + g2.gamma * w, g2.d);
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v - mean);
  }
  McEstimate out;
  out.estimate = mean;
  out.std_error = std::sqrt(m2 / static_cast<double>(n_draws - 1) / static_cast<double>(n_draws));
  return out;
}

}  // namespace lskld

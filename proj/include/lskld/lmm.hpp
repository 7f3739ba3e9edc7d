#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lskld/mvn_kld.hpp"
#include "lskld/trajectory_model.hpp"

namespace lskld {

struct LmmFitOptions {
  enum class Optimizer { em, direct };

  int max_iter = 500;
  double loglik_tol = 1e-8;    // stop when the loglik improvement drops below this
  double variance_floor = 1e-6;  // lower bound on sigma2 and on diag(chol(D))
  Optimizer optimizer = Optimizer::em;

  void validate() const {
    if (max_iter < 1) throw std::invalid_argument("LmmFitOptions: max_iter must be >= 1");
    if (!(loglik_tol > 0.0) || !(variance_floor > 0.0))
      throw std::invalid_argument("LmmFitOptions: tolerances must be positive");
  }
};

struct GroupFit {
  GroupParams params;
  double loglik = 0.0;
  int n_iter = 0;
  bool converged = false;
  std::vector<double> loglik_path;  // one entry per accepted iterate, starting at init
};

/// Design pair for one subject at index vector alpha:
/// random = G(t_i), fixed = [G | G * (alpha'x)] so the stacked fixed
/// coefficient is (beta; gamma).
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> subject_design(const SubjectRecord& s,
                                                                  const Eigen::VectorXd& alpha,
                                                                  const BasisSpec& spec) {
  if (s.covariates.size() != alpha.size())
    throw std::invalid_argument("subject_design: covariate/index dimension mismatch");
  const Eigen::MatrixXd g = design_matrix(s.times, spec);
  const double w = alpha.dot(s.covariates);
  Eigen::MatrixXd fixed(g.rows(), 2 * g.cols());
  fixed << g, g * w;
  return {fixed, g};
}

namespace detail {

constexpr double kLog2Pi = 1.8378770664093454836;

/// SPD factorization for the fit internals. Unlike the purity-side
/// chol_spd this carries no conditioning guard: posterior precisions
/// are legitimately stiff when variance components approach their floor.
inline Eigen::LLT<Eigen::MatrixXd> chol_or_throw(const Eigen::MatrixXd& s, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument(std::string(what) + ": matrix not positive definite");
  return llt;
}

/// Subjects sharing an observation-time pattern share G and G'G; the
/// marginal covariance and the random-effect posterior depend on the
/// pattern only. Caching them makes repeated fits (one per candidate
/// index in the outer search) cheap.
struct TimePattern {
  Eigen::MatrixXd g;
  Eigen::MatrixXd gtg;
  int m = 0;
};

struct SubjectStats {
  int pattern = 0;
  int m = 0;
  double w = 0.0;  // alpha' x, refreshed by set_index
  double yty = 0.0;
  Eigen::VectorXd gty;
};

struct PreparedGroup {
  int q = 0;
  long n_obs = 0;
  std::vector<TimePattern> patterns;
  std::vector<SubjectStats> subjects;
  std::vector<Eigen::VectorXd> covariates;

  static PreparedGroup build(const std::vector<const SubjectRecord*>& subs,
                             const BasisSpec& spec) {
    spec.validate();
    PreparedGroup prep;
    prep.q = spec.q();
    std::map<std::vector<double>, int> seen;
    for (const SubjectRecord* s : subs) {
      s->validate();
      std::vector<double> key(s->times.data(), s->times.data() + s->times.size());
      auto it = seen.find(key);
      int pat;
      if (it == seen.end()) {
        pat = static_cast<int>(prep.patterns.size());
        seen.emplace(std::move(key), pat);
        TimePattern tp;
        tp.g = design_matrix(s->times, spec);
        tp.gtg = tp.g.transpose() * tp.g;
        tp.m = static_cast<int>(s->times.size());
        prep.patterns.push_back(std::move(tp));
      } else {
        pat = it->second;
      }
      SubjectStats st;
      st.pattern = pat;
      st.m = static_cast<int>(s->times.size());
      st.yty = s->outcomes.squaredNorm();
      st.gty = prep.patterns[static_cast<std::size_t>(pat)].g.transpose() * s->outcomes;
      prep.subjects.push_back(std::move(st));
      prep.covariates.push_back(s->covariates);
      prep.n_obs += s->times.size();
    }
    return prep;
  }

  void set_index(const Eigen::VectorXd& alpha) {
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      if (covariates[i].size() != alpha.size())
        throw std::invalid_argument("set_index: covariate/index dimension mismatch");
      subjects[i].w = alpha.dot(covariates[i]);
    }
  }
};

/// Marginal loglik via the Woodbury identity. With V = sigma2 I + G D G',
///   V^-1  = (I - G C G'/sigma2)/sigma2,  C = (D^-1 + G'G/sigma2)^-1,
///   logdet V = m log sigma2 + logdet D + logdet C^-1,
/// so each subject costs O(q^2) given the pattern caches.
inline double marginal_loglik_prepared(const PreparedGroup& prep, const GroupParams& params) {
  params.validate();
  if (params.q() != prep.q) throw std::invalid_argument("marginal_loglik: q mismatch");
  const double sig2 = params.sigma2;
  const auto llt_d = chol_or_throw(params.d, "marginal_loglik: D");
  const double logdet_d = logdet_from_llt(llt_d);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(prep.q, prep.q);
  const Eigen::MatrixXd d_inv = llt_d.solve(eye);

  std::vector<Eigen::MatrixXd> post_cov(prep.patterns.size());
  std::vector<double> logdet_v(prep.patterns.size());
  for (std::size_t k = 0; k < prep.patterns.size(); ++k) {
    const auto& tp = prep.patterns[k];
    const Eigen::MatrixXd c_inv = d_inv + tp.gtg / sig2;
    const auto llt_c = chol_or_throw(c_inv, "marginal_loglik: posterior precision");
    post_cov[k] = llt_c.solve(eye);
    logdet_v[k] = tp.m * std::log(sig2) + logdet_d + logdet_from_llt(llt_c);
  }

  double ll = 0.0;
  for (const auto& s : prep.subjects) {
    const auto& tp = prep.patterns[static_cast<std::size_t>(s.pattern)];
    const Eigen::VectorXd c = params.beta + params.gamma * s.w;
    const double rtr = s.yty - 2.0 * s.gty.dot(c) + c.dot(tp.gtg * c);
    const Eigen::VectorXd h = s.gty - tp.gtg * c;
    const double quad =
        (rtr - h.dot(post_cov[static_cast<std::size_t>(s.pattern)] * h) / sig2) / sig2;
    ll += -0.5 * (s.m * kLog2Pi + logdet_v[static_cast<std::size_t>(s.pattern)] + quad);
  }
  if (!std::isfinite(ll)) throw std::runtime_error("marginal_loglik: not finite");
  return ll;
}

/// Clamp the Cholesky diagonal of an SPD candidate from below;
/// falls back to an eigenvalue clip when the factorization fails.
inline Eigen::MatrixXd spd_floor(const Eigen::MatrixXd& d, double floor) {
  Eigen::LLT<Eigen::MatrixXd> llt(d);
  if (llt.info() == Eigen::Success) {
    Eigen::MatrixXd l = llt.matrixL();
    if (l.diagonal().minCoeff() >= floor) return d;
    for (Eigen::Index j = 0; j < l.rows(); ++j) l(j, j) = std::max(l(j, j), floor);
    return l * l.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(d);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor * floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Normal-equation matrix of the stacked fixed design [G | G w]; it
/// depends on the index only through per-pattern (count, sum w, sum w^2),
/// so it is constant across EM iterations.
inline Eigen::MatrixXd fixed_normal_matrix(const PreparedGroup& prep) {
  const int q = prep.q;
  std::vector<double> cnt(prep.patterns.size(), 0.0), sw(prep.patterns.size(), 0.0),
      sww(prep.patterns.size(), 0.0);
  for (const auto& s : prep.subjects) {
    const auto k = static_cast<std::size_t>(s.pattern);
    cnt[k] += 1.0;
    sw[k] += s.w;
    sww[k] += s.w * s.w;
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * q, 2 * q);
  for (std::size_t k = 0; k < prep.patterns.size(); ++k) {
    const auto& gtg = prep.patterns[k].gtg;
    a.topLeftCorner(q, q) += cnt[k] * gtg;
    a.topRightCorner(q, q) += sw[k] * gtg;
    a.bottomRightCorner(q, q) += sww[k] * gtg;
  }
  a.bottomLeftCorner(q, q) = a.topRightCorner(q, q);
  return a;
}

inline Eigen::VectorXd solve_normal(const Eigen::MatrixXd& a, const Eigen::VectorXd& rhs) {
  Eigen::VectorXd theta = a.ldlt().solve(rhs);
  if (!theta.allFinite()) {
    // singular stacked design (e.g., constant index values): fall back to
    // a ridge-stabilized solve
    const double ridge = 1e-8 * (1.0 + a.trace() / static_cast<double>(a.rows()));
    Eigen::MatrixXd ar = a;
    ar.diagonal().array() += ridge;
    theta = ar.ldlt().solve(rhs);
  }
  if (!theta.allFinite()) throw std::runtime_error("lmm: fixed-effect solve failed");
  return theta;
}

struct InitState {
  Eigen::VectorXd beta, gamma;
  Eigen::MatrixXd d;
  double sigma2 = 0.0;
};

/// OLS on the stacked fixed design for (beta, gamma); D starts at 0.1 I
/// and sigma2 at the OLS residual variance.
inline InitState initial_state(const PreparedGroup& prep, const Eigen::MatrixXd& a,
                               double floor) {
  const int q = prep.q;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * q);
  for (const auto& s : prep.subjects) {
    rhs.head(q) += s.gty;
    rhs.tail(q) += s.w * s.gty;
  }
  const Eigen::VectorXd theta = solve_normal(a, rhs);
  InitState st;
  st.beta = theta.head(q);
  st.gamma = theta.tail(q);
  double rss = 0.0;
  for (const auto& s : prep.subjects) {
    const auto& gtg = prep.patterns[static_cast<std::size_t>(s.pattern)].gtg;
    const Eigen::VectorXd c = st.beta + st.gamma * s.w;
    rss += s.yty - 2.0 * s.gty.dot(c) + c.dot(gtg * c);
  }
  st.sigma2 = std::max(rss / static_cast<double>(prep.n_obs), floor);
  st.d = 0.1 * Eigen::MatrixXd::Identity(q, q);
  return st;
}

/// EM over the random effects with closed-form conditional M-steps
/// (fixed effects, then D, then sigma2); the marginal loglik is
/// non-decreasing across iterations up to roundoff.
///
/// The loglik at the current parameters shares every factorization with
/// the E-step, so both are produced by a single pass over patterns and
/// subjects; this loop dominates the cost of the whole index search.
inline GroupFit fit_em(const PreparedGroup& prep, const LmmFitOptions& opts) {
  const int q = prep.q;
  const std::size_t n_sub = prep.subjects.size();
  const std::size_t n_pat = prep.patterns.size();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(q, q);
  const Eigen::MatrixXd a = fixed_normal_matrix(prep);

  std::vector<double> pat_count(n_pat, 0.0);
  for (const auto& s : prep.subjects) pat_count[static_cast<std::size_t>(s.pattern)] += 1.0;

  InitState st = initial_state(prep, a, opts.variance_floor);
  GroupParams cur{st.beta, st.gamma, st.d, st.sigma2};

  GroupFit fit;
  std::vector<Eigen::MatrixXd> post_cov(n_pat, Eigen::MatrixXd(q, q));
  std::vector<double> tr_gtg_c(n_pat), logdet_v(n_pat);
  std::vector<Eigen::VectorXd> bhat(n_sub, Eigen::VectorXd(q));
  Eigen::MatrixXd d_inv(q, q), c_inv(q, q), d_new(q, q);
  Eigen::VectorXd c(q), gc(q), h(q), u(q), rhs(2 * q);
  Eigen::LLT<Eigen::MatrixXd> llt(q);

  for (int iter = 0;; ++iter) {
    // E-step factorizations; the same pass yields the marginal loglik at
    // the current parameters via the Woodbury identities
    const double sig2 = cur.sigma2;
    llt.compute(cur.d);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("fit_group: D not positive definite");
    const double logdet_d = logdet_from_llt(llt);
    d_inv = llt.solve(eye);
    for (std::size_t k = 0; k < n_pat; ++k) {
      c_inv = d_inv + prep.patterns[k].gtg / sig2;
      llt.compute(c_inv);
      if (llt.info() != Eigen::Success)
        throw std::invalid_argument("fit_group: posterior precision not positive definite");
      post_cov[k] = llt.solve(eye);
      tr_gtg_c[k] = prep.patterns[k].gtg.cwiseProduct(post_cov[k]).sum();
      logdet_v[k] = prep.patterns[k].m * std::log(sig2) + logdet_d + logdet_from_llt(llt);
    }
    double ll = 0.0;
    for (std::size_t i = 0; i < n_sub; ++i) {
      const auto& s = prep.subjects[i];
      const auto k = static_cast<std::size_t>(s.pattern);
      const auto& gtg = prep.patterns[k].gtg;
      c = cur.beta + cur.gamma * s.w;
      gc.noalias() = gtg * c;
      h = s.gty - gc;
      const double rtr = s.yty - 2.0 * s.gty.dot(c) + c.dot(gc);
      bhat[i].noalias() = post_cov[k] * h;
      ll += -0.5 * (s.m * kLog2Pi + logdet_v[k] + (rtr - h.dot(bhat[i]) / sig2) / sig2);
      bhat[i] /= sig2;
    }
    if (!std::isfinite(ll)) throw std::runtime_error("fit_group: log-likelihood not finite");
    const bool first = fit.loglik_path.empty();
    const double gain = first ? 0.0 : ll - fit.loglik_path.back();
    fit.loglik_path.push_back(ll);
    fit.n_iter = iter;
    if (!first && gain < opts.loglik_tol) {
      fit.converged = true;
      break;
    }
    if (iter >= opts.max_iter) break;

    // M-step: fixed effects, then D, then sigma2
    rhs.setZero();
    for (std::size_t i = 0; i < n_sub; ++i) {
      const auto& s = prep.subjects[i];
      gc.noalias() = prep.patterns[static_cast<std::size_t>(s.pattern)].gtg * bhat[i];
      u = s.gty - gc;
      rhs.head(q) += u;
      rhs.tail(q) += s.w * u;
    }
    const Eigen::VectorXd theta = solve_normal(a, rhs);
    cur.beta = theta.head(q);
    cur.gamma = theta.tail(q);

    d_new.setZero();
    for (std::size_t i = 0; i < n_sub; ++i)
      d_new.noalias() += bhat[i] * bhat[i].transpose();
    for (std::size_t k = 0; k < n_pat; ++k) d_new += pat_count[k] * post_cov[k];
    cur.d = spd_floor(d_new / static_cast<double>(n_sub), opts.variance_floor);

    double rss = 0.0;
    for (std::size_t i = 0; i < n_sub; ++i) {
      const auto& s = prep.subjects[i];
      const auto k = static_cast<std::size_t>(s.pattern);
      c = cur.beta + cur.gamma * s.w + bhat[i];
      gc.noalias() = prep.patterns[k].gtg * c;
      rss += s.yty - 2.0 * s.gty.dot(c) + c.dot(gc) + tr_gtg_c[k];
    }
    cur.sigma2 = std::max(rss / static_cast<double>(prep.n_obs), opts.variance_floor);
  }
  fit.params = cur;
  fit.loglik = fit.loglik_path.back();
  return fit;
}

// ---- direct path: quasi-Newton on (chol(D), log sigma2), fixed effects
// profiled out by GLS ----

struct VarParams {
  Eigen::MatrixXd chol_l;
  double sigma2 = 0.0;
};

inline int n_var_params(int q) { return q * (q + 1) / 2 + 1; }

inline Eigen::VectorXd pack_var_params(const Eigen::MatrixXd& l, double sigma2) {
  const int q = static_cast<int>(l.rows());
  Eigen::VectorXd phi(n_var_params(q));
  int k = 0;
  for (int i = 0; i < q; ++i)
    for (int j = 0; j <= i; ++j) phi[k++] = (i == j) ? std::log(l(i, i)) : l(i, j);
  phi[k] = std::log(sigma2);
  return phi;
}

/// Variance parameters never drop below the floor during optimization:
/// the profile loglik is unbounded as sigma2 -> 0 on noiseless data, so
/// the floor doubles as the boundary of the search region.
inline VarParams unpack_var_params(const Eigen::VectorXd& phi, int q, double floor) {
  const double lo = std::log(floor);
  VarParams vp;
  vp.chol_l = Eigen::MatrixXd::Zero(q, q);
  int k = 0;
  for (int i = 0; i < q; ++i)
    for (int j = 0; j <= i; ++j) {
      if (i == j)
        vp.chol_l(i, i) = std::exp(std::clamp(phi[k++], lo, 40.0));
      else
        vp.chol_l(i, j) = phi[k++];
    }
  vp.sigma2 = std::exp(std::clamp(phi[k], lo, 40.0));
  return vp;
}

struct ProfileEval {
  double negll = std::numeric_limits<double>::infinity();
  Eigen::VectorXd grad;
  Eigen::VectorXd theta;
};

inline ProfileEval profile_negll(const PreparedGroup& prep, const Eigen::VectorXd& phi,
                                 double floor, bool want_grad) {
  const int q = prep.q;
  const VarParams vp = unpack_var_params(phi, q, floor);
  const Eigen::MatrixXd d = vp.chol_l * vp.chol_l.transpose();
  const double sig2 = vp.sigma2;
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(q, q);

  ProfileEval out;
  Eigen::LLT<Eigen::MatrixXd> llt_d(d);
  if (llt_d.info() != Eigen::Success) return out;  // treated as -inf loglik
  const double logdet_d = logdet_from_llt(llt_d);
  const Eigen::MatrixXd d_inv = llt_d.solve(eye);

  const std::size_t npat = prep.patterns.size();
  std::vector<Eigen::MatrixXd> post_cov(npat), s_pat(npat);
  std::vector<double> logdet_v(npat), tr_vinv(npat);
  for (std::size_t k = 0; k < npat; ++k) {
    const auto& tp = prep.patterns[k];
    const Eigen::MatrixXd c_inv = d_inv + tp.gtg / sig2;
    Eigen::LLT<Eigen::MatrixXd> llt_c(c_inv);
    if (llt_c.info() != Eigen::Success) return out;
    post_cov[k] = llt_c.solve(eye);
    logdet_v[k] = tp.m * std::log(sig2) + logdet_d + logdet_from_llt(llt_c);
    s_pat[k] = (tp.gtg - tp.gtg * post_cov[k] * tp.gtg / sig2) / sig2;  // G'V^-1 G
    tr_vinv[k] = (tp.m - (post_cov[k] * tp.gtg).trace() / sig2) / sig2;
  }

  // GLS for the stacked fixed effects
  std::vector<double> cnt(npat, 0.0), sw(npat, 0.0), sww(npat, 0.0);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * q);
  for (const auto& s : prep.subjects) {
    const auto k = static_cast<std::size_t>(s.pattern);
    cnt[k] += 1.0;
    sw[k] += s.w;
    sww[k] += s.w * s.w;
    const Eigen::VectorXd u = (s.gty - prep.patterns[k].gtg * (post_cov[k] * s.gty) / sig2) / sig2;
    rhs.head(q) += u;
    rhs.tail(q) += s.w * u;
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * q, 2 * q);
  for (std::size_t k = 0; k < npat; ++k) {
    a.topLeftCorner(q, q) += cnt[k] * s_pat[k];
    a.topRightCorner(q, q) += sw[k] * s_pat[k];
    a.bottomRightCorner(q, q) += sww[k] * s_pat[k];
  }
  a.bottomLeftCorner(q, q) = a.topRightCorner(q, q);
  const Eigen::VectorXd theta = solve_normal(a, rhs);
  const Eigen::VectorXd beta = theta.head(q), gamma = theta.tail(q);

  double ll = 0.0;
  Eigen::MatrixXd grad_d = Eigen::MatrixXd::Zero(q, q);
  double tr_sum = 0.0, vsq_sum = 0.0;
  for (const auto& s : prep.subjects) {
    const auto k = static_cast<std::size_t>(s.pattern);
    const auto& tp = prep.patterns[k];
    const Eigen::VectorXd c = beta + gamma * s.w;
    const double rtr = s.yty - 2.0 * s.gty.dot(c) + c.dot(tp.gtg * c);
    const Eigen::VectorXd h = s.gty - tp.gtg * c;  // G' r
    const Eigen::VectorXd ch = post_cov[k] * h;
    ll += -0.5 * (s.m * kLog2Pi + logdet_v[k] + (rtr - h.dot(ch) / sig2) / sig2);
    if (want_grad) {
      const Eigen::VectorXd u_r = (h - tp.gtg * ch / sig2) / sig2;  // G'V^-1 r
      grad_d += s_pat[k];
      grad_d.noalias() -= u_r * u_r.transpose();
      tr_sum += tr_vinv[k];
      const Eigen::VectorXd av = ch / sig2;
      vsq_sum += (rtr - 2.0 * av.dot(h) + av.dot(tp.gtg * av)) / (sig2 * sig2);
    }
  }
  if (!std::isfinite(ll)) return out;
  out.negll = -ll;
  out.theta = theta;
  if (want_grad) {
    // d(negll)/dD = (sum_i S_i - u_i u_i')/2, chained through D = L L';
    // coordinates pinned at the floor clamp get a zero gradient so the
    // line search does not chase the flat region below it
    const double lo = std::log(floor);
    // minimizing F: a positive component at the boundary points into the
    // clamped region and is projected out
    auto at_boundary = [&](int idx, double g) { return phi[idx] <= lo && g > 0.0 ? 0.0 : g; };
    const Eigen::MatrixXd gl = grad_d * vp.chol_l;  // = 2 (dF/dD) L with dF/dD = grad_d / 2
    out.grad.resize(phi.size());
    int idx = 0;
    for (int i = 0; i < q; ++i)
      for (int j = 0; j <= i; ++j) {
        if (i == j)
          out.grad[idx] = at_boundary(idx, gl(i, j) * vp.chol_l(i, i));
        else
          out.grad[idx] = gl(i, j);
        ++idx;
      }
    out.grad[idx] = at_boundary(idx, 0.5 * sig2 * (tr_sum - vsq_sum));
  }
  return out;
}

inline GroupFit fit_direct(const PreparedGroup& prep, const LmmFitOptions& opts) {
  const int q = prep.q;
  const Eigen::MatrixXd a = fixed_normal_matrix(prep);
  InitState st = initial_state(prep, a, opts.variance_floor);
  Eigen::MatrixXd l0 = Eigen::LLT<Eigen::MatrixXd>(st.d).matrixL();
  Eigen::VectorXd phi = pack_var_params(l0, st.sigma2);

  const int np = n_var_params(q);
  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(np, np);
  ProfileEval cur = profile_negll(prep, phi, opts.variance_floor, true);
  if (!std::isfinite(cur.negll)) throw std::runtime_error("fit_group: initial loglik not finite");

  GroupFit fit;
  fit.loglik_path.push_back(-cur.negll);
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    Eigen::VectorXd dir = -h_inv * cur.grad;
    if (dir.dot(cur.grad) >= 0.0) dir = -cur.grad;  // reset on loss of descent
    double step = 1.0;
    ProfileEval next;
    bool accepted = false;
    const double slope = cur.grad.dot(dir);
    for (int ls = 0; ls < 40; ++ls) {
      next = profile_negll(prep, phi + step * dir, opts.variance_floor, true);
      if (std::isfinite(next.negll) && next.negll <= cur.negll + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      fit.converged = true;  // line search exhausted: stationary within precision
      break;
    }
    const Eigen::VectorXd s = step * dir;
    const Eigen::VectorXd y = next.grad - cur.grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(np, np);
      h_inv = (eye - rho * s * y.transpose()) * h_inv * (eye - rho * y * s.transpose()) +
              rho * s * s.transpose();
    }
    phi += s;
    const double gain = cur.negll - next.negll;
    cur = next;
    fit.loglik_path.push_back(-cur.negll);
    fit.n_iter = iter;
    if (gain < opts.loglik_tol) {
      fit.converged = true;
      break;
    }
  }

  VarParams vp = unpack_var_params(phi, q, opts.variance_floor);
  for (int j = 0; j < q; ++j) vp.chol_l(j, j) = std::max(vp.chol_l(j, j), opts.variance_floor);
  fit.params.d = vp.chol_l * vp.chol_l.transpose();
  fit.params.sigma2 = std::max(vp.sigma2, opts.variance_floor);
  fit.params.beta = cur.theta.head(q);
  fit.params.gamma = cur.theta.tail(q);
  fit.loglik = marginal_loglik_prepared(prep, fit.params);
  return fit;
}

inline GroupFit fit_prepared(const PreparedGroup& prep, const LmmFitOptions& opts) {
  opts.validate();
  const int q = prep.q;
  if (static_cast<int>(prep.subjects.size()) < 2 * q + 2)
    throw std::invalid_argument("fit_group: insufficient data (need >= 2q+2 subjects)");
  bool any_rich = false;
  for (const auto& s : prep.subjects) any_rich |= s.m >= q;
  if (!any_rich)
    throw std::invalid_argument("fit_group: insufficient data (no subject with >= q observations)");
  return opts.optimizer == LmmFitOptions::Optimizer::em ? fit_em(prep, opts)
                                                        : fit_direct(prep, opts);
}

inline std::vector<const SubjectRecord*> as_views(const std::vector<SubjectRecord>& subjects) {
  std::vector<const SubjectRecord*> v;
  v.reserve(subjects.size());
  for (const auto& s : subjects) v.push_back(&s);
  return v;
}

}  // namespace detail

/// Sum over subjects of the log density of the observed outcome vector
/// under N([G | G w](beta; gamma), G D G' + sigma2 I); rows a subject is
/// missing are simply absent from the product.
inline double marginal_loglik(const GroupParams& params,
                              const std::vector<SubjectRecord>& subjects,
                              const Eigen::VectorXd& alpha, const BasisSpec& spec) {
  auto prep = detail::PreparedGroup::build(detail::as_views(subjects), spec);
  prep.set_index(alpha);
  return detail::marginal_loglik_prepared(prep, params);
}

/// Maximum-likelihood fit of one arm's mixed model at a fixed index
/// vector. optimizer = em uses conditional closed-form updates;
/// optimizer = direct runs BFGS on (chol(D), log sigma2) with the fixed
/// effects profiled out.
inline GroupFit fit_group(const std::vector<SubjectRecord>& subjects,
                          const Eigen::VectorXd& alpha, const BasisSpec& spec,
                          const LmmFitOptions& opts = {}) {
  auto prep = detail::PreparedGroup::build(detail::as_views(subjects), spec);
  prep.set_index(alpha);
  return detail::fit_prepared(prep, opts);
}

}  // namespace lskld

#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lskld/biosignature_search.hpp"
#include "lskld/evaluation.hpp"
#include "lskld/lmm.hpp"
#include "lskld/sim_harness.hpp"
#include "lskld/trajectory_model.hpp"

namespace lskld {

/// Configuration or schema problem; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace io {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Write the whole file via a temporary in the same directory plus a
/// rename, so readers never observe a partial file.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    os << content;
    if (!os.good()) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e || !std::isfinite(v))
    throw std::runtime_error(where + ": malformed number '" + s + "'");
  return v;
}

inline long parse_int(const std::string& s, const std::string& where) {
  long v = 0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e)
    throw std::runtime_error(where + ": malformed integer '" + s + "'");
  return v;
}

}  // namespace io

/// Long-format export: outcomes as subject_id,group,time,outcome rows and
/// covariates as subject_id,x1..xp rows, 17 significant digits so values
/// survive a round trip exactly.
inline void save_trial(const TrialData& data, const std::filesystem::path& outcomes_path,
                       const std::filesystem::path& covariates_path) {
  std::ostringstream oc;
  oc << "subject_id,group,time,outcome\n";
  for (const auto& s : data.subjects)
    for (Eigen::Index j = 0; j < s.times.size(); ++j)
      oc << s.id << ',' << s.group << ',' << io::fmt_double(s.times[j]) << ','
         << io::fmt_double(s.outcomes[j]) << '\n';
  std::ostringstream cv;
  cv << "subject_id";
  for (int j = 1; j <= data.p; ++j) cv << ",x" << j;
  cv << '\n';
  for (const auto& s : data.subjects) {
    cv << s.id;
    for (Eigen::Index j = 0; j < s.covariates.size(); ++j)
      cv << ',' << io::fmt_double(s.covariates[j]);
    cv << '\n';
  }
  io::atomic_write_file(outcomes_path, oc.str());
  io::atomic_write_file(covariates_path, cv.str());
}

/// Load and join the two long-format files. Subjects keep their first
/// appearance order from the outcomes file; times are sorted per subject;
/// the design grid is the sorted union of observed times.
inline TrialData load_trial(const std::filesystem::path& outcomes_path,
                            const std::filesystem::path& covariates_path) {
  const auto olines = io::read_lines(outcomes_path);
  if (olines.empty() || olines[0] != "subject_id,group,time,outcome")
    throw std::runtime_error(outcomes_path.string() +
                             ": expected header 'subject_id,group,time,outcome'");

  struct Obs {
    double time;
    double outcome;
  };
  std::vector<std::string> order;
  std::map<std::string, int> groups;
  std::map<std::string, std::vector<Obs>> obs;
  for (std::size_t ln = 1; ln < olines.size(); ++ln) {
    if (olines[ln].empty()) continue;
    const std::string where = outcomes_path.string() + ":" + std::to_string(ln + 1);
    const auto f = io::split_csv_line(olines[ln]);
    if (f.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
    if (f[0].empty()) throw std::runtime_error(where + ": empty subject_id");
    const long g = io::parse_int(f[1], where);
    if (g != 1 && g != 2)
      throw std::runtime_error(where + ": unknown group code '" + f[1] + "'");
    const double t = io::parse_double(f[2], where);
    const double y = io::parse_double(f[3], where);
    auto it = groups.find(f[0]);
    if (it == groups.end()) {
      groups.emplace(f[0], static_cast<int>(g));
      order.push_back(f[0]);
    } else if (it->second != g) {
      throw std::runtime_error(where + ": subject '" + f[0] + "' has conflicting group codes");
    }
    for (const auto& o : obs[f[0]])
      if (o.time == t)
        throw std::runtime_error(where + ": duplicate time " + f[2] + " for subject '" + f[0] +
                                 "'");
    obs[f[0]].push_back({t, y});
  }

  const auto clines = io::read_lines(covariates_path);
  if (clines.empty())
    throw std::runtime_error(covariates_path.string() + ": empty file");
  const auto header = io::split_csv_line(clines[0]);
  if (header.size() < 2 || header[0] != "subject_id")
    throw std::runtime_error(covariates_path.string() +
                             ": expected header 'subject_id,x1,...,xp'");
  const int p = static_cast<int>(header.size()) - 1;
  for (int j = 1; j <= p; ++j)
    if (header[static_cast<std::size_t>(j)] != "x" + std::to_string(j))
      throw std::runtime_error(covariates_path.string() + ": covariate column " +
                               std::to_string(j) + " must be named x" + std::to_string(j));
  std::map<std::string, Eigen::VectorXd> covs;
  for (std::size_t ln = 1; ln < clines.size(); ++ln) {
    if (clines[ln].empty()) continue;
    const std::string where = covariates_path.string() + ":" + std::to_string(ln + 1);
    const auto f = io::split_csv_line(clines[ln]);
    if (static_cast<int>(f.size()) != p + 1)
      throw std::runtime_error(where + ": expected " + std::to_string(p + 1) + " fields");
    if (covs.count(f[0]))
      throw std::runtime_error(where + ": duplicate covariate row for subject '" + f[0] + "'");
    Eigen::VectorXd x(p);
    for (int j = 0; j < p; ++j)
      x[j] = io::parse_double(f[static_cast<std::size_t>(j) + 1], where);
    covs.emplace(f[0], std::move(x));
  }

  for (const auto& [id, x] : covs)
    if (!groups.count(id))
      throw std::runtime_error("subject '" + id + "' present in covariates but not in outcomes");

  TrialData data;
  data.p = p;
  std::set<double> grid;
  for (const auto& id : order) {
    auto it = covs.find(id);
    if (it == covs.end())
      throw std::runtime_error("subject '" + id + "' present in outcomes but not in covariates");
    SubjectRecord s;
    s.id = id;
    s.group = groups[id];
    s.covariates = it->second;
    auto& rows = obs[id];
    std::sort(rows.begin(), rows.end(), [](const Obs& a, const Obs& b) { return a.time < b.time; });
    s.times.resize(static_cast<Eigen::Index>(rows.size()));
    s.outcomes.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j) {
      s.times[static_cast<Eigen::Index>(j)] = rows[j].time;
      s.outcomes[static_cast<Eigen::Index>(j)] = rows[j].outcome;
      grid.insert(rows[j].time);
    }
    data.subjects.push_back(std::move(s));
  }
  data.design_times.resize(static_cast<Eigen::Index>(grid.size()));
  Eigen::Index k = 0;
  for (double t : grid) data.design_times[k++] = t;
  data.validate();
  return data;
}

// ---- run configuration ----

struct RunConfig {
  std::uint64_t seed = 17;
  int degree = 2;
  int n_reps = 50;
  int n_train_per_group = 100;
  int n_test = 1000;
  std::vector<double> theta_deg{0.0, 1.0, 5.0};
  std::vector<int> p_values{2, 10};
  std::vector<std::string> missingness{"none", "mcar", "dropout"};
  struct Cell {
    double theta_deg = 0.0;
    int p = 2;
    std::string missingness = "none";
  };
  // the desk-scale grid carries one extra dropout cell so the
  // missing-data comparison at a small tilt is part of the default run
  std::vector<Cell> extra_cells{{2.0, 10, "dropout"}};
  int search_n_restarts = 2;
  int search_max_evals = 0;  // 0: auto, 100 + 30 p
  double simplex_init_scale = 0.5;
  double purity_tol = 1e-5;
  int lmm_max_iter = 150;
  double lmm_loglik_tol = 1e-6;
  double variance_floor = 1e-6;
  std::string lmm_optimizer = "em";
  std::vector<std::string> methods{"ls-kld", "changescore"};

  LmmFitOptions lmm_options() const {
    LmmFitOptions o;
    o.max_iter = lmm_max_iter;
    o.loglik_tol = lmm_loglik_tol;
    o.variance_floor = variance_floor;
    if (lmm_optimizer == "em")
      o.optimizer = LmmFitOptions::Optimizer::em;
    else if (lmm_optimizer == "direct")
      o.optimizer = LmmFitOptions::Optimizer::direct;
    else
      throw ConfigError("lmm.optimizer must be 'em' or 'direct'");
    return o;
  }

  SearchOptions search_options(int p) const {
    SearchOptions s;
    s.n_restarts = search_n_restarts;
    s.max_evals = search_max_evals > 0 ? search_max_evals : 100 + 30 * p;
    s.simplex_init_scale = simplex_init_scale;
    s.purity_tol = purity_tol;
    s.seed = rng::derive(seed, rng::tag(rng::Stream::search_start));
    return s;
  }

  /// Expand the grid (cross product plus extra cells) into scenarios,
  /// each with a seed derived from the master seed and its cell index.
  std::vector<Scenario> scenarios() const {
    std::vector<Scenario> out;
    auto add = [&](double th, int p, const std::string& miss) {
      Scenario s;
      s.theta_deg = th;
      s.p = p;
      s.missingness = missingness_from_string(miss);
      s.n_train_per_group = n_train_per_group;
      s.n_test = n_test;
      s.n_reps = n_reps;
      s.seed = rng::derive(seed, static_cast<std::uint64_t>(out.size()));
      out.push_back(s);
    };
    for (double th : theta_deg)
      for (int p : p_values)
        for (const auto& miss : missingness) add(th, p, miss);
    for (const auto& c : extra_cells) add(c.theta_deg, c.p, c.missingness);
    return out;
  }

  static RunConfig full_grid(std::uint64_t master_seed) {
    RunConfig c;
    c.seed = master_seed;
    c.theta_deg = {0.0, 1.0, 2.0, 5.0};
    c.p_values = {2, 10, 20, 30};
    c.n_reps = 200;
    c.extra_cells.clear();
    return c;
  }
};

namespace io {

using nlohmann::json;

inline void require_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": bad value for '" + std::string(key) + "': " + e.what());
  }
}

inline json config_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["degree"] = c.degree;
  j["n_reps"] = c.n_reps;
  j["n_train_per_group"] = c.n_train_per_group;
  j["n_test"] = c.n_test;
  j["theta_deg"] = c.theta_deg;
  j["p"] = c.p_values;
  j["missingness"] = c.missingness;
  json cells = json::array();
  for (const auto& cell : c.extra_cells)
    cells.push_back({{"theta_deg", cell.theta_deg}, {"p", cell.p}, {"missingness", cell.missingness}});
  j["extra_cells"] = cells;
  j["search"] = {{"n_restarts", c.search_n_restarts},
                 {"max_evals", c.search_max_evals},
                 {"simplex_init_scale", c.simplex_init_scale},
                 {"purity_tol", c.purity_tol}};
  j["lmm"] = {{"max_iter", c.lmm_max_iter},
              {"loglik_tol", c.lmm_loglik_tol},
              {"variance_floor", c.variance_floor},
              {"optimizer", c.lmm_optimizer}};
  j["methods"] = c.methods;
  return j;
}

inline RunConfig parse_config(const json& j) {
  RunConfig c;
  require_keys(j, {"seed", "degree", "n_reps", "n_train_per_group", "n_test", "theta_deg", "p",
                   "missingness", "extra_cells", "search", "lmm", "methods"},
               "config");
  read_key(j, "seed", c.seed, "config");
  read_key(j, "degree", c.degree, "config");
  read_key(j, "n_reps", c.n_reps, "config");
  read_key(j, "n_train_per_group", c.n_train_per_group, "config");
  read_key(j, "n_test", c.n_test, "config");
  read_key(j, "theta_deg", c.theta_deg, "config");
  read_key(j, "p", c.p_values, "config");
  read_key(j, "missingness", c.missingness, "config");
  if (j.contains("extra_cells")) {
    c.extra_cells.clear();
    if (!j.at("extra_cells").is_array()) throw ConfigError("config: extra_cells must be an array");
    for (const auto& jc : j.at("extra_cells")) {
      require_keys(jc, {"theta_deg", "p", "missingness"}, "config.extra_cells[]");
      RunConfig::Cell cell;
      read_key(jc, "theta_deg", cell.theta_deg, "config.extra_cells[]");
      read_key(jc, "p", cell.p, "config.extra_cells[]");
      read_key(jc, "missingness", cell.missingness, "config.extra_cells[]");
      c.extra_cells.push_back(cell);
    }
  }
  if (j.contains("search")) {
    const auto& js = j.at("search");
    require_keys(js, {"n_restarts", "max_evals", "simplex_init_scale", "purity_tol"},
                 "config.search");
    read_key(js, "n_restarts", c.search_n_restarts, "config.search");
    read_key(js, "max_evals", c.search_max_evals, "config.search");
    read_key(js, "simplex_init_scale", c.simplex_init_scale, "config.search");
    read_key(js, "purity_tol", c.purity_tol, "config.search");
  }
  if (j.contains("lmm")) {
    const auto& jl = j.at("lmm");
    require_keys(jl, {"max_iter", "loglik_tol", "variance_floor", "optimizer"}, "config.lmm");
    read_key(jl, "max_iter", c.lmm_max_iter, "config.lmm");
    read_key(jl, "loglik_tol", c.lmm_loglik_tol, "config.lmm");
    read_key(jl, "variance_floor", c.variance_floor, "config.lmm");
    read_key(jl, "optimizer", c.lmm_optimizer, "config.lmm");
  }
  read_key(j, "methods", c.methods, "config");

  // fail fast on values that would only explode later
  if (c.degree < 1) throw ConfigError("config: degree must be >= 1");
  if (c.n_reps < 1 || c.n_train_per_group < 1 || c.n_test < 1)
    throw ConfigError("config: sizes must be >= 1");
  for (double th : c.theta_deg)
    if (th < 0.0) throw ConfigError("config: theta_deg must be >= 0");
  for (int p : c.p_values)
    if (p < 1) throw ConfigError("config: p must be >= 1");
  for (const auto& m : c.missingness) missingness_from_string(m);
  for (const auto& cell : c.extra_cells) missingness_from_string(cell.missingness);
  for (const auto& m : c.methods)
    if (m != "ls-kld" && m != "changescore")
      throw ConfigError("config: unknown method '" + m + "' (expected ls-kld or changescore)");
  c.lmm_options();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_config(j);
}

// ---- result serialization ----

inline std::vector<double> to_vec(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

inline json to_json_matrix(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline json group_params_json(const GroupParams& g) {
  return {{"beta", to_vec(g.beta)},
          {"gamma", to_vec(g.gamma)},
          {"d", to_json_matrix(g.d)},
          {"sigma2", g.sigma2}};
}

inline json fitted_model_json(const FittedModel& m, const json& metadata) {
  json j;
  j["format_version"] = 1;
  j["metadata"] = metadata;
  j["alpha"] = to_vec(m.alpha);
  j["groups"] = json::array({group_params_json(m.group1), group_params_json(m.group2)});
  j["moments"] = {{"mu", to_vec(m.moments.mu)}, {"sigma", to_json_matrix(m.moments.sigma)}};
  j["loglik"] = m.loglik;
  j["purity"] = m.purity;
  return j;
}

inline const char* kResultsCsvHeader =
    "theta_deg,p,missingness,n_train_per_group,n_test,n_reps,seed,method,mean_pcd,sd_pcd,n_ok,"
    "n_fail";

inline std::string results_csv(const std::vector<ScenarioResult>& results) {
  std::ostringstream os;
  os << kResultsCsvHeader << '\n';
  for (const auto& r : results)
    for (const auto& m : r.methods)
      os << fmt_double(r.scenario.theta_deg) << ',' << r.scenario.p << ','
         << to_string(r.scenario.missingness) << ',' << r.scenario.n_train_per_group << ','
         << r.scenario.n_test << ',' << r.scenario.n_reps << ',' << r.scenario.seed << ','
         << m.method << ',' << fmt_double(m.mean_pcd) << ',' << fmt_double(m.sd_pcd) << ','
         << m.n_ok << ',' << m.n_fail << '\n';
  return os.str();
}

inline json results_json(const std::vector<ScenarioResult>& results, const json& metadata) {
  json rows = json::array();
  for (const auto& r : results)
    for (const auto& m : r.methods)
      rows.push_back({{"theta_deg", r.scenario.theta_deg},
                      {"p", r.scenario.p},
                      {"missingness", to_string(r.scenario.missingness)},
                      {"n_train_per_group", r.scenario.n_train_per_group},
                      {"n_test", r.scenario.n_test},
                      {"n_reps", r.scenario.n_reps},
                      {"seed", r.scenario.seed},
                      {"method", m.method},
                      {"mean_pcd", m.mean_pcd},
                      {"sd_pcd", m.sd_pcd},
                      {"n_ok", m.n_ok},
                      {"n_fail", m.n_fail}});
  json j;
  j["format_version"] = 1;
  j["metadata"] = metadata;
  j["results"] = rows;
  return j;
}

inline const char* kCvCsvHeader = "method,repeat,fold,ipwe,n_matched";

inline std::string cv_csv(const std::vector<std::pair<std::string, CvResult>>& per_method) {
  std::ostringstream os;
  os << kCvCsvHeader << '\n';
  for (const auto& [name, res] : per_method)
    for (const auto& f : res.folds)
      os << name << ',' << f.repeat << ',' << f.fold << ',' << fmt_double(f.value) << ','
         << f.n_matched << '\n';
  return os.str();
}

}  // namespace io
}  // namespace lskld

#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lskld/builders.hpp"
#include "lskld/io.hpp"
#include "lskld/oracle_check.hpp"
#include "lskld/parallel.hpp"
#include "lskld/sim_harness.hpp"

namespace lskld {

/// Default index-search options for the fit/evaluate commands: library
/// defaults with an evaluation budget that grows with p. Kept as a
/// named helper so in-process runs can reproduce CLI results exactly.
inline SearchOptions cli_search_options(int p, std::uint64_t seed) {
  SearchOptions s;
  s.max_evals = std::max(200, 100 + 30 * p);
  s.seed = seed;
  return s;
}

namespace cli_detail {

inline int run_simulate(const std::string& config_path, bool full_grid, const std::string& out_dir,
                        int threads) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : io::load_config(config_path);
  if (full_grid) {
    cfg.theta_deg = {0.0, 1.0, 2.0, 5.0};
    cfg.p_values = {2, 10, 20, 30};
    cfg.missingness = {"none", "mcar", "dropout"};
    cfg.n_reps = 200;
    cfg.extra_cells.clear();
  }
  const BasisSpec spec{BasisSpec::Kind::polynomial, cfg.degree};
  std::vector<NamedRuleBuilder> methods;
  for (const auto& name : cfg.methods) {
    if (name == "ls-kld") {
      methods.push_back({"ls-kld", [cfg, spec](const TrialData& train) -> TrainedRule {
                           const auto model = std::make_shared<FittedModel>(estimate_alpha(
                               train, spec, cfg.search_options(train.p), cfg.lmm_options()));
                           const double t0 = train.design_times[0];
                           const double t1 = train.design_times[train.design_times.size() - 1];
                           return [model, spec, t0, t1](const Eigen::VectorXd& x) {
                             return decide(*model, x, spec, t0, t1).assignment;
                           };
                         }});
    } else if (name == "changescore") {
      methods.push_back({"changescore", make_changescore_builder()});
    } else {
      throw ConfigError("unknown method '" + name + "'");
    }
  }
  const auto scenarios = cfg.scenarios();
  const auto results = run_grid(scenarios, methods, cfg.lmm_options(), threads);

  nlohmann::json metadata;
  metadata["command"] = "simulate";
  metadata["seed"] = cfg.seed;
  metadata["config"] = io::config_json(cfg);
  const std::filesystem::path dir(out_dir);
  io::atomic_write_file(dir / "results.csv", io::results_csv(results));
  io::atomic_write_file(dir / "results.json", io::results_json(results, metadata).dump(2) + "\n");
  std::cout << "wrote " << (dir / "results.csv").string() << " and results.json ("
            << results.size() << " scenarios x " << (methods.size() + 1) << " methods)\n";
  return 0;
}

inline int run_fit(const std::string& outcomes, const std::string& covariates, int degree,
                   std::uint64_t seed, const std::string& out_path) {
  const TrialData data = load_trial(outcomes, covariates);
  const BasisSpec spec{BasisSpec::Kind::polynomial, degree};
  const SearchOptions search = cli_search_options(data.p, seed);
  const LmmFitOptions lmm;
  const FittedModel model = estimate_alpha(data, spec, search, lmm);

  nlohmann::json metadata;
  metadata["command"] = "fit";
  metadata["outcomes"] = outcomes;
  metadata["covariates"] = covariates;
  metadata["degree"] = degree;
  metadata["seed"] = seed;
  metadata["search"] = {{"n_restarts", search.n_restarts},
                        {"max_evals", search.max_evals},
                        {"simplex_init_scale", search.simplex_init_scale},
                        {"purity_tol", search.purity_tol}};
  metadata["lmm"] = {{"max_iter", lmm.max_iter},
                     {"loglik_tol", lmm.loglik_tol},
                     {"variance_floor", lmm.variance_floor},
                     {"optimizer", "em"}};
  io::atomic_write_file(out_path, io::fitted_model_json(model, metadata).dump(2) + "\n");
  std::cout << "fit: purity=" << model.purity << " loglik=" << model.loglik << " -> " << out_path
            << "\n";
  return 0;
}

inline int run_evaluate(const std::string& outcomes, const std::string& covariates, int folds,
                        int repeats, std::uint64_t seed, const std::string& out_path) {
  const TrialData data = load_trial(outcomes, covariates);
  const BasisSpec spec{BasisSpec::Kind::polynomial, 2};
  CvPlan plan;
  plan.n_folds = folds;
  plan.n_repeats = repeats;
  plan.seed = seed;
  const SearchOptions search = cli_search_options(data.p, rng::derive(seed, 1));
  const LmmFitOptions lmm;

  std::vector<std::pair<std::string, RuleBuilder>> builders{
      {"ls-kld", make_lskld_builder(spec, search, lmm)},
      {"changescore", make_changescore_builder()},
      {"all-1", make_constant_builder(1)},
      {"all-2", make_constant_builder(2)}};
  std::vector<std::pair<std::string, CvResult>> per_method;
  for (const auto& [name, builder] : builders)
    per_method.emplace_back(name, cross_validate(data, builder, plan));

  io::atomic_write_file(out_path, io::cv_csv(per_method));
  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["metadata"] = {{"command", "evaluate"}, {"outcomes", outcomes}, {"covariates", covariates},
                      {"n_folds", folds},      {"n_repeats", repeats}, {"seed", seed}};
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [name, res] : per_method) {
    summary.push_back({{"method", name},
                       {"mean_ipwe", res.mean},
                       {"sd_ipwe", res.sd},
                       {"n_folds_ok", res.folds.size()},
                       {"n_failed", res.n_failed},
                       {"n_missing_last", res.n_missing_last}});
    std::cout << name << ": mean IPWE " << res.mean << " (sd " << res.sd << ", "
              << res.folds.size() << " folds, " << res.n_failed << " skipped)\n";
  }
  meta["summary"] = summary;
  io::atomic_write_file(out_path + ".meta.json", meta.dump(2) + "\n");
  return 0;
}

}  // namespace cli_detail

/// Entry point behind the lskld binary; args exclude the program name.
/// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage
/// error. Diagnostics go to standard error.
inline int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"Longitudinal single-index treatment decision rules via KL-divergence purity"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "run the scenario grid and write PCD tables");
  std::string sim_config, sim_out;
  bool sim_full = false;
  int sim_threads = 0;
  sim->add_option("--config", sim_config, "RunConfig JSON file (defaults to the desk-scale grid)");
  sim->add_flag("--full-grid", sim_full, "use the full 48-cell grid with 200 replications");
  sim->add_option("--out", sim_out, "output directory")->required();
  sim->add_option("--threads", sim_threads, "worker threads (default: TRAJKLD_THREADS or cores)");

  auto* fit = app.add_subcommand("fit", "estimate the index on a trial and write the model JSON");
  std::string fit_outcomes, fit_covariates, fit_out;
  int fit_degree = 2;
  std::uint64_t fit_seed = 0;
  fit->add_option("--outcomes", fit_outcomes, "long-format outcomes CSV")->required();
  fit->add_option("--covariates", fit_covariates, "covariates CSV")->required();
  fit->add_option("--degree", fit_degree, "polynomial basis degree");
  fit->add_option("--seed", fit_seed, "search restart seed");
  fit->add_option("--out", fit_out, "output model JSON path")->required();

  auto* ev = app.add_subcommand("evaluate", "cross-validated IPWE comparison of decision rules");
  std::string ev_outcomes, ev_covariates, ev_out;
  int ev_folds = 10, ev_repeats = 100;
  std::uint64_t ev_seed = 0;
  ev->add_option("--outcomes", ev_outcomes, "long-format outcomes CSV")->required();
  ev->add_option("--covariates", ev_covariates, "covariates CSV")->required();
  ev->add_option("--folds", ev_folds, "number of CV folds");
  ev->add_option("--repeats", ev_repeats, "number of repeated splits");
  ev->add_option("--seed", ev_seed, "fold shuffling seed");
  ev->add_option("--out", ev_out, "output fold-level IPWE CSV path")->required();

  auto* oc = app.add_subcommand("oracle-check", "closed-form purity vs Monte-Carlo self check");
  std::uint64_t oc_seed = 12345;
  oc->add_option("--seed", oc_seed, "oracle seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);  // CLI11's vector overload expects reversed args
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (sim->parsed()) return cli_detail::run_simulate(sim_config, sim_full, sim_out, sim_threads);
    if (fit->parsed()) return cli_detail::run_fit(fit_outcomes, fit_covariates, fit_degree,
                                                  fit_seed, fit_out);
    if (ev->parsed())
      return cli_detail::run_evaluate(ev_outcomes, ev_covariates, ev_folds, ev_repeats, ev_seed,
                                      ev_out);
    if (oc->parsed()) {
      const bool ok = run_oracle_check(oc_seed, std::cout);
      std::cout << (ok ? "PASS" : "FAIL") << "\n";
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand given\n";
  return 2;
}

}  // namespace lskld

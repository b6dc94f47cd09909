#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "tvlab/analysis.hpp"
#include "tvlab/checks.hpp"
#include "tvlab/io.hpp"
#include "tvlab/taskvector.hpp"

namespace fs = std::filesystem;

namespace tvlab::cli {

namespace {

// Thrown for bad input files; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json load_json(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw UsageError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

ModelParams load_params(const fs::path& run) {
  const fs::path file = fs::is_directory(run) ? run / "params.json" : run;
  try {
    return params_from_json(load_json(file));
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(file.string() + ": " + e.what());
  }
}

std::string metrics_csv(const std::vector<CurvePoint>& curve) {
  std::string out = csv_row({"step", "train_risk", "eval_risk", "grad_norm", "l1_norm"});
  for (const auto& p : curve)
    out += csv_row({std::to_string(p.step), format_double(p.train_risk), format_double(p.eval_risk),
                    format_double(p.grad_norm), format_double(p.l1_norm)});
  return out;
}

nlohmann::json structure_report(const ModelParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  if (p.config.format == PromptFormat::Single) return layers;
  for (const auto& l : p.layers) {
    const StructuredDecomposition s = project_Sp(l.D, p.config.format);
    nlohmann::json j = to_json(s);
    j["d_norm"] = l.D.norm();
    if (p.config.format == PromptFormat::Triplet) {
      const Lambda4Metrics m = lambda4_orthonormality(s.lambda4);
      j["lambda4_offdiag_ratio"] = m.offdiag_ratio;
      j["lambda4_lastrow_ratio"] = m.lastrow_ratio;
      j["lambda4_lambda_hat"] = m.lambda_hat;
    }
    layers.push_back(std::move(j));
  }
  return layers;
}

// "5..30" or a single integer.
std::pair<int, int> parse_range(const std::string& s) {
  const auto dots = s.find("..");
  try {
    if (dots == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, dots)), std::stoi(s.substr(dots + 2))};
  } catch (const std::exception&) {
    throw UsageError("bad range '" + s + "', expected LO..HI");
  }
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty())
    out << text;
  else
    write_file(path, text);
}

// ---- train ----

struct TrainArgs {
  std::string config, out, format;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig c;
  try {
    c = train_config_from_json(load_json(a.config));
    if (a.seed) c.seed = *a.seed;
    if (!a.format.empty()) c.format = parse_format(a.format);
    c.validate();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const RunResult r = train(c, [&](const CurvePoint& p) {
    err << "step " << p.step << " eval " << format_double(p.eval_risk) << "\n";
  });
  RunDirectory dir(a.out);
  dir.write_json("config.json", to_json(c));
  dir.write_json("params.json", to_json(r.best_params));
  dir.write("metrics.csv", metrics_csv(r.curve));
  for (std::size_t l = 0; l < r.best_params.layers.size(); ++l)
    dir.write("matrices/D_" + std::to_string(l + 1) + ".csv", matrix_csv(r.best_params.layers[l].D));
  dir.write_json("reports/run.json", {{"best_risk", r.best_risk},
                                      {"final_risk", r.final_risk},
                                      {"status", to_string(r.status)},
                                      {"message", r.message},
                                      {"seed", c.seed}});
  dir.write_json("reports/structure.json", structure_report(r.best_params));
  dir.commit({{"command", "train"}});
  out << "best_risk " << format_double(r.best_risk) << " status " << to_string(r.status) << "\n";
  return r.status == RunStatus::Ok ? kOk : kDiverged;
}

// ---- sweep ----

struct SweepArgs {
  std::string config, out;
  int seeds = 40;
  int threads = 0;
  std::optional<std::uint64_t> seed;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  nlohmann::json grid_json = load_json(a.config);
  if (a.seed) grid_json["base"]["seed"] = *a.seed;
  std::vector<TrainConfig> grid;
  try {
    grid = grid_from_json(grid_json);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  const auto cells = sweep(grid, a.seeds, resolve_threads(a.threads), [&](std::size_t cell, int s, const RunResult& r) {
    err << to_string(grid[cell].format) << " L=" << grid[cell].L << " n=" << grid[cell].n << " seed " << s << " risk "
        << format_double(r.best_risk) << " " << to_string(r.status) << "\n";
  });
  if (!a.out.empty()) write_sweep_dir(a.out, grid_json, a.seeds, cells);
  out << sweep_csv(cells);
  for (const auto& c : cells)
    if (c.failures == static_cast<int>(c.seed_risks.size())) return kDiverged;
  return kOk;
}

// ---- tv ----

struct TvArgs {
  std::vector<std::string> runs;
  std::string n_range = "5..30";
  std::string wstyle = "rank_one";
  std::string out;
  int trials = 1000;
  int L = 2;
  bool compare_full_rank = false;
  std::uint64_t seed = 0;
};

// A run directory, a params file, or a sweep directory (every triplet cell at L).
std::vector<std::pair<int, ModelParams>> collect_models(const TvArgs& a, int lo, int hi) {
  std::vector<ModelParams> loaded;
  for (const auto& r : a.runs) {
    const fs::path p(r);
    if (fs::is_directory(p / "params") && !fs::exists(p / "params.json")) {
      for (const auto& e : fs::directory_iterator(p / "params")) {
        ModelParams m = load_params(e.path());
        if (m.config.format == PromptFormat::Triplet && m.config.layers == a.L) loaded.push_back(std::move(m));
      }
      if (loaded.empty()) throw UsageError(r + ": no triplet models with L=" + std::to_string(a.L));
    } else {
      loaded.push_back(load_params(p));
    }
  }
  for (const auto& m : loaded)
    if (m.config.format != PromptFormat::Triplet)
      throw UsageError("tv needs triplet params, got " + to_string(m.config.format));
  std::vector<std::pair<int, ModelParams>> models;
  if (loaded.size() == 1) {
    if (hi > loaded[0].config.n) throw UsageError("n range exceeds the model's n=" + std::to_string(loaded[0].config.n));
    for (int n = lo; n <= hi; ++n) models.emplace_back(n, loaded[0]);
  } else {
    for (auto& m : loaded)
      if (m.config.n >= lo && m.config.n <= hi) models.emplace_back(m.config.n, m);
    std::sort(models.begin(), models.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  }
  if (models.empty()) throw UsageError("no model falls inside the n range");
  return models;
}

int cmd_tv(const TvArgs& a, std::ostream& out, std::ostream& err) {
  if (a.runs.empty()) throw UsageError("tv needs --run");
  const auto [lo, hi] = parse_range(a.n_range);
  if (lo < 1 || hi < lo) throw UsageError("bad n range " + a.n_range);
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  const auto models = collect_models(a, lo, hi);
  TvEvalOptions o;
  o.trials = a.trials;
  o.seed = a.seed;
  try {
    o.wstyle = parse_wstyle(a.wstyle);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const TvEvalTable t = tv_eval(models, o);
  if (t.untrained) err << "warning: a model has all-zero position matrices\n";
  if (!a.compare_full_rank) {
    emit(tv_eval_csv(t), a.out, out);
    err << "mean_tv " << format_double(t.mean_tv()) << " mean_oneshot " << format_double(t.mean_oneshot()) << "\n";
    return kOk;
  }
  o.wstyle = WStyle::GaussianIdentity;
  const TvEvalTable f = tv_eval(models, o);
  std::string csv = csv_row({"n", "tv_risk", "oneshot_risk", "tv_risk_full_rank", "oneshot_risk_full_rank"});
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    csv += csv_row({std::to_string(t.rows[i].n), format_double(t.rows[i].tv_risk), format_double(t.rows[i].oneshot_risk),
                    format_double(f.rows[i].tv_risk), format_double(f.rows[i].oneshot_risk)});
  emit(csv, a.out, out);
  err << "mean_tv " << format_double(t.mean_tv()) << " mean_tv_full_rank " << format_double(f.mean_tv()) << "\n";
  return kOk;
}

// ---- check ----

struct CheckArgs {
  std::string which, run, format = "pair", out = ".";
  std::uint64_t seed = 0;
  bool spd = false, perturb = false;
  int trials = 0, batch = 0;
};

int cmd_check(const CheckArgs& a, std::ostream& out, std::ostream&) {
  if (!is_check(a.which)) throw UsageError("unknown check '" + a.which + "'");
  CheckOptions o;
  o.seed = a.seed;
  o.spd_sigma = a.spd;
  o.perturb = a.perturb;
  o.trials = a.trials;
  o.batch = a.batch;
  try {
    o.format = parse_format(a.format);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  std::optional<ModelParams> params;
  if (!a.run.empty()) {
    params = load_params(a.run);
    o.params = &*params;
    o.params_ref = a.run;
  }
  CheckReport r;
  try {
    r = run_check(a.which, o);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const nlohmann::json j = to_json(r);
  write_file(fs::path(a.out) / "reports" / (a.which + ".json"), j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return r.pass ? kOk : kCheckFailed;
}

// ---- weights ----

struct WeightsArgs {
  std::string run, out;
  int n = 0, trials = 64, tasks = 16;
  double keep = 0.9;
  std::uint64_t seed = 0;
};

int cmd_weights(const WeightsArgs& a, std::ostream& out, std::ostream& err) {
  const ModelParams p = load_params(a.run);
  if (p.config.format != PromptFormat::Triplet) throw UsageError("weights needs triplet params");
  const int n = a.n > 0 ? a.n : p.config.n;
  if (n > p.config.n) throw UsageError("--n exceeds the model's n");
  if (a.trials < 1 || a.tasks < 1) throw UsageError("--trials and --tasks must be >= 1");
  const int d = p.config.d;

  Vector empirical = Vector::Zero(n);
  Rng rng(a.seed, 41);
  PerturbOptions po;
  po.trials = a.trials;
  for (int k = 0; k < a.tasks; ++k) {
    const RegressionTask t = sample_task(d, n, Matrix::Identity(d, d), WStyle::RankOne, rng);
    po.seed = a.seed + k;
    empirical += perturbation_weights(p, t, po);
  }
  if (empirical.sum() > 0.0) empirical /= empirical.sum();

  Vector predicted = Vector::Ones(n);
  if (n > 1) {
    const auto& l = p.layers.front();
    const DropoutCoefficients c = dropout_coefficients(l.a, l.b, l.c, a.keep, n, d);
    const DropoutResult res = dropout_optimize(DropoutObjective::from(c), n, true, 5, 5000, a.seed);
    for (int i = 0; i < n; ++i) predicted(i) = std::abs(res.lambda(i, n));
  }
  predicted /= predicted.sum();

  std::string csv = csv_row({"i", "empirical_weight", "predicted_weight"});
  for (int i = 0; i < n; ++i)
    csv += csv_row({std::to_string(i + 1), format_double(empirical(i)), format_double(predicted(i))});
  Vector idx(n);
  for (int i = 0; i < n; ++i) idx(i) = i + 1;
  const bool ranked = n > 1 && empirical.maxCoeff() > empirical.minCoeff();
  const double rho_emp = ranked ? spearman(idx, empirical) : 0.0;
  const double rho_pred = n > 1 && predicted.maxCoeff() > predicted.minCoeff() ? spearman(idx, predicted) : 0.0;
  emit(csv, a.out, out);
  err << "spearman_empirical " << format_double(rho_emp) << " spearman_predicted " << format_double(rho_pred) << "\n";
  return kOk;
}

}  // namespace

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("TVLAB_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

std::vector<TrainConfig> grid_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("grid must be a JSON object");
  const nlohmann::json base = j.value("base", nlohmann::json::object());
  std::vector<nlohmann::json> cells;
  if (j.contains("cells")) {
    for (const auto& c : j.at("cells")) {
      nlohmann::json m = base;
      m.update(c);
      cells.push_back(std::move(m));
    }
  } else {
    for (const auto& f : j.at("formats"))
      for (const auto& L : j.at("L"))
        for (const auto& n : j.at("n")) {
          nlohmann::json m = base;
          m["format"] = f;
          m["L"] = L;
          m["n"] = n;
          cells.push_back(std::move(m));
        }
  }
  for (const auto& [key, _] : j.items())
    if (key != "base" && key != "cells" && key != "formats" && key != "L" && key != "n")
      throw std::invalid_argument("unknown grid key '" + key + "'");
  std::vector<TrainConfig> grid;
  for (const auto& c : cells) grid.push_back(train_config_from_json(c));
  if (grid.empty()) throw std::invalid_argument("grid has no cells");
  return grid;
}

fs::path sweep_params_path(const fs::path& dir, PromptFormat format, int L, int n) {
  return dir / "params" / (to_string(format) + "_L" + std::to_string(L) + "_n" + std::to_string(n) + ".json");
}

void write_sweep_dir(const fs::path& out, const nlohmann::json& grid, int seeds, const std::vector<SweepCell>& cells) {
  RunDirectory dir(out);
  dir.write_json("config.json", {{"grid", grid}, {"seeds", seeds}});
  dir.write("sweep.csv", sweep_csv(cells));
  nlohmann::json report = nlohmann::json::array();
  for (const auto& c : cells) {
    const auto rel = fs::relative(sweep_params_path(out, c.config.format, c.config.L, c.config.n), out);
    if (c.best_params.layers.size()) dir.write_json(rel.generic_string(), to_json(c.best_params));
    nlohmann::json risks = nlohmann::json::array();
    for (double r : c.seed_risks) risks.push_back(std::isfinite(r) ? nlohmann::json(r) : nlohmann::json(nullptr));
    report.push_back({{"config", to_json(c.config)},
                      {"min_risk", c.min_risk},
                      {"best_seed", c.best_seed},
                      {"failures", c.failures},
                      {"status", c.status},
                      {"seed_risks", risks}});
  }
  dir.write_json("reports/sweep.json", report);
  dir.commit({{"command", "sweep"}});
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Linear-attention task-vector laboratory"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train one model and write a run directory");
  train_cmd->add_option("--config", ta.config, "Training config JSON")->required();
  train_cmd->add_option("--out", ta.out, "Run directory")->required();
  train_cmd->add_option("--seed", ta.seed, "Override the config seed");
  train_cmd->add_option("--format", ta.format, "single, pair, triplet or insep");
  int ignored_threads = 0;
  train_cmd->add_option("--threads", ignored_threads, "Accepted for symmetry; training is single threaded");

  SweepArgs sa;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train a grid over several seeds");
  sweep_cmd->add_option("--config", sa.config, "Grid JSON")->required();
  sweep_cmd->add_option("--out", sa.out, "Sweep directory");
  sweep_cmd->add_option("--seeds", sa.seeds, "Seeds per cell")->capture_default_str();
  sweep_cmd->add_option("--threads", sa.threads, "Worker threads (TVLAB_THREADS)");
  sweep_cmd->add_option("--seed", sa.seed, "Base seed");

  TvArgs tv;
  auto* tv_cmd = app.add_subcommand("tv", "Task-vector versus one-shot risk");
  tv_cmd->add_option("--run", tv.runs, "Run dir, params file or sweep dir (repeatable)")->required();
  tv_cmd->add_option("--n-range", tv.n_range, "LO..HI")->capture_default_str();
  tv_cmd->add_option("--trials", tv.trials)->capture_default_str();
  tv_cmd->add_option("--wstyle", tv.wstyle, "rank_one, gaussian or gaussian_inv_sigma")->capture_default_str();
  tv_cmd->add_option("--L", tv.L, "Layer count to pick from a sweep dir")->capture_default_str();
  tv_cmd->add_flag("--compare-full-rank", tv.compare_full_rank, "Add full-rank Gaussian W columns");
  tv_cmd->add_option("--seed", tv.seed);
  tv_cmd->add_option("--out", tv.out, "CSV path (stdout if absent)");

  CheckArgs ca;
  auto* check_cmd = app.add_subcommand("check", "Run a named verification");
  auto* which = check_cmd->add_option("--which", ca.which, "Check name");
  check_cmd->add_option("--check", ca.which, "Alias of --which")->excludes(which);
  check_cmd->add_option("--run", ca.run, "Params for lambda4 and structure");
  check_cmd->add_option("--format", ca.format, "critpoint format")->capture_default_str();
  check_cmd->add_option("--seed", ca.seed);
  check_cmd->add_flag("--spd", ca.spd, "critpoint: random SPD covariance");
  check_cmd->add_flag("--perturb", ca.perturb, "critpoint: off-support perturbation (negative control)");
  check_cmd->add_option("--trials", ca.trials);
  check_cmd->add_option("--batch", ca.batch);
  check_cmd->add_option("--out", ca.out, "Directory receiving reports/<which>.json")->capture_default_str();

  WeightsArgs wa;
  auto* weights_cmd = app.add_subcommand("weights", "Perturbation weights against predicted weights");
  weights_cmd->add_option("--run", wa.run, "Run dir or params file")->required();
  weights_cmd->add_option("--n", wa.n, "Demonstrations (default: the model's n)");
  weights_cmd->add_option("--trials", wa.trials)->capture_default_str();
  weights_cmd->add_option("--tasks", wa.tasks)->capture_default_str();
  weights_cmd->add_option("--keep", wa.keep, "Dropout keep probability for the prediction")->capture_default_str();
  weights_cmd->add_option("--seed", wa.seed);
  weights_cmd->add_option("--out", wa.out, "CSV path (stdout if absent)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  if (check_cmd->parsed() && ca.which.empty()) {
    err << "check needs --which\n";
    return kUsage;
  }
  try {
    if (train_cmd->parsed()) return cmd_train(ta, out, err);
    if (sweep_cmd->parsed()) return cmd_sweep(sa, out, err);
    if (tv_cmd->parsed()) return cmd_tv(tv, out, err);
    if (check_cmd->parsed()) return cmd_check(ca, out, err);
    if (weights_cmd->parsed()) return cmd_weights(wa, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const EvaluationError& e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, out, err);
}

}  // namespace tvlab::cli

#include "tvlab/checks.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tvlab/training.hpp"

namespace tvlab {

namespace {

const PromptFormat kFormats[] = {PromptFormat::Single, PromptFormat::Pairwise, PromptFormat::Triplet,
                                 PromptFormat::InseparablePairwise};

Matrix gaussian(Index r, Index c, Rng& rng, double s = 1.0) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
  return m;
}

Matrix random_spd(int d, Rng& rng) {
  const Matrix g = gaussian(d, d, rng);
  return g * g.transpose() / d + 0.5 * Matrix::Identity(d, d);
}

ModelParams random_params(PromptFormat fmt, int L, int d, int n, Rng& rng, double scale = 0.4) {
  ModelParams p = identity_params(make_config(fmt, L, d, n));
  for (auto& l : p.layers) {
    l.a = scale * rng.normal();
    l.b = scale * rng.normal();
    l.c = scale * rng.normal();
    l.D = gaussian(p.config.dp, p.config.dp, rng, scale);
    if (l.variant == LayerVariant::InseparableFirst) l.D = l.D.cwiseProduct(inseparable_row_mask(p.config.dp));
  }
  return p;
}

int or_default(int v, int fallback) { return v > 0 ? v : fallback; }

CheckReport report(const std::string& name, const CheckOptions& o) {
  CheckReport r;
  r.check = name;
  r.params_ref = o.params_ref;
  return r;
}

const ModelParams& require_params(const CheckOptions& o, const std::string& name) {
  if (!o.params) throw ContractError(name + " needs trained parameters");
  return *o.params;
}

}  // namespace

const std::vector<std::string>& check_names() {
  static const std::vector<std::string> names{"gradcheck", "construction",     "risk_identity", "critpoint", "lambda4",    "structure",
                                              "bijection",    "dropout_weights",  "eos",  "gdpp",      "structural"};
  return names;
}

bool is_check(const std::string& name) {
  const auto& n = check_names();
  return std::find(n.begin(), n.end(), name) != n.end();
}

CheckReport run_check(const std::string& name, const CheckOptions& opts) {
  using Fn = CheckReport (*)(const CheckOptions&);
  static const std::map<std::string, Fn> table{{"gradcheck", check_gradients},
                                               {"construction", check_single_layer_construction},
                                               {"risk_identity", check_reformulated_risk},
                                               {"critpoint", check_critical_point},
                                               {"lambda4", check_lambda4},
                                               {"structure", check_structure},
                                               {"bijection", check_rank_one_bijection},
                                               {"dropout_weights", check_decaying_weights},
                                               {"eos", check_eos_equivalence},
                                               {"gdpp", check_gd_decomposition},
                                               {"structural", check_structural_equivalence}};
  const auto it = table.find(name);
  if (it == table.end()) throw ContractError("unknown check '" + name + "'");
  return it->second(opts);
}

CheckReport check_gradients(const CheckOptions& o) {
  constexpr double kTol = 1e-5;
  const int trials = or_default(o.trials, 20);
  Rng rng(o.seed, 101);
  CheckReport r = report("gradcheck", o);
  double worst = 0.0;
  nlohmann::json per_format = nlohmann::json::object();
  for (PromptFormat fmt : kFormats) {
    double fmt_worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      const int L = 1 + t % 3, d = 2, n = 3, count = 3;
      const ModelParams p = random_params(fmt, L, d, n, rng);
      std::vector<RegressionTask> tasks;
      for (int k = 0; k < count; ++k)
        tasks.push_back(sample_task(d, n, Matrix::Identity(d, d), WStyle::GaussianIdentity, rng));
      const TaskBatch batch = build_batch(tasks, fmt);
      // Dense A, B, C, D per layer so every entry is differentiated.
      std::vector<Matrix> theta;
      for (const auto& l : p.layers) {
        theta.push_back(l.a * Matrix::Identity(d, d) + 0.1 * gaussian(d, d, rng));
        theta.push_back(l.b * Matrix::Identity(d, d) + 0.1 * gaussian(d, d, rng));
        theta.push_back(l.c * Matrix::Identity(d, d) + 0.1 * gaussian(d, d, rng));
        theta.push_back(l.D);
      }
      const ad::ScalarFn<double> f = [&](Tape& tape, const std::vector<Var>& leaves) {
        std::vector<LayerNodes> nodes;
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
          LayerNodes ln;
          ln.A = leaves[4 * l];
          ln.B = leaves[4 * l + 1];
          ln.C = leaves[4 * l + 2];
          ln.D = leaves[4 * l + 3];
          ln.variant = p.layers[l].variant;
          nodes.push_back(ln);
        }
        const ForwardGraph g = build_forward(tape, nodes, p.config, batch.prompts);
        return risk_node(tape, g, batch.targets, count);
      };
      fmt_worst = std::max(fmt_worst, ad::grad_check(f, theta));
    }
    per_format[to_string(fmt)] = fmt_worst;
    worst = std::max(worst, fmt_worst);
  }
  r.metrics = {{"max_rel_error", worst}, {"per_format", per_format}, {"trials_per_format", trials}};
  r.thresholds = {{"max_rel_error", kTol}};
  r.pass = worst <= kTol;
  return r;
}

CheckReport check_single_layer_construction(const CheckOptions& o) {
  constexpr double kTol = 1e-12;
  const int trials = or_default(o.trials, 100);
  const int d = 4, n = 10;
  Rng rng(o.seed, 102);
  ModelParams p = identity_params(make_config(PromptFormat::Single, 1, d, n));
  p.layers[0].a = 0.0;
  p.layers[0].b = 1.0;
  p.layers[0].c = -1.0;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const RegressionTask task = sample_task(d, n, Matrix::Identity(d, d), WStyle::GaussianIdentity, rng);
    const Vector want = -(1.0 / n) * task.y() * task.x.transpose() * task.x_test;
    const Vector got = predict(p, build_prompt(task, PromptFormat::Single));
    worst = std::max(worst, (got - want).lpNorm<Eigen::Infinity>());
  }
  CheckReport r = report("construction", o);
  r.metrics = {{"max_abs_error", worst}, {"trials", trials}};
  r.thresholds = {{"max_abs_error", kTol}};
  r.pass = worst <= kTol;
  return r;
}

CheckReport check_reformulated_risk(const CheckOptions& o) {
  constexpr double kTol = 1e-10;
  const int trials = or_default(o.trials, 100);
  Rng rng(o.seed, 103);
  double worst = 0.0;
  for (PromptFormat fmt : kFormats)
    for (int t = 0; t < trials; ++t) {
      const int L = 1 + t % 3, d = 1 + t % 4, n = 1 + t % 6;
      const ModelParams p = random_params(fmt, L, d, n, rng);
      const RegressionTask task = sample_task(d, n, Matrix::Identity(d, d), WStyle::GaussianIdentity, rng);
      const Prompt pr = build_prompt(task, fmt);
      const double direct = icl_risk_per_sample(p, {pr}, {task})[0];
      const double reform = risk_reformulated(p, fill_label(pr, task));
      worst = std::max(worst, std::abs(direct - reform));
    }
  CheckReport r = report("risk_identity", o);
  r.metrics = {{"max_abs_difference", worst}, {"trials_per_format", trials}};
  r.thresholds = {{"max_abs_difference", kTol}};
  r.pass = worst <= kTol;
  return r;
}

ModelParams structured_test_params(PromptFormat format, int layers, int d, int n, const Matrix& sigma, Rng& rng) {
  std::vector<CriticalBlocks> blocks;
  for (int l = 0; l < layers; ++l) {
    CriticalBlocks b;
    if (format == PromptFormat::Triplet) {
      b.lambda1 = Matrix::Zero(3, 3);
      b.lambda2 = Matrix::Zero(3, 3);
      for (int i : {0, 2})
        for (int j : {0, 2}) {
          b.lambda1(i, j) = 0.5 * rng.normal();
          b.lambda2(i, j) = 0.5 * rng.normal();
        }
      b.lambda3 = 0.5 * rng.normal();
      b.lambda4 = Matrix::Zero(n + 1, n + 1);
      b.lambda5 = Vector::Zero(2);
    } else {
      b.lambda1 = gaussian(2, 2, rng, 0.5);
      b.lambda2 = gaussian(2, 2, rng, 0.5);
      if (format == PromptFormat::InseparablePairwise && l == 0) {
        b.lambda1.row(1).setZero();
        b.lambda2.row(1).setZero();
      }
    }
    blocks.push_back(std::move(b));
  }
  ModelParams p = construct_critical_params(format, layers, d, n, 0.5, blocks, sigma.inverse());
  for (auto& l : p.layers) {
    l.a = 0.5 + 0.5 * rng.uniform();
    l.b = 0.5 + 0.5 * rng.uniform();
    l.c = -(0.2 + 0.5 * rng.uniform());
  }
  return p;
}

CheckReport check_critical_point(const CheckOptions& o) {
  const int d = 4, n = 6, L = 2;
  const int trials = or_default(o.trials, 10);
  if (o.format == PromptFormat::Single) throw ContractError("critpoint needs a format with position blocks");
  Rng rng(o.seed, 104);
  const Matrix sigma = o.spd_sigma ? random_spd(d, rng) : Matrix::Identity(d, d);
  ModelParams p = structured_test_params(o.format, L, d, n, sigma, rng);
  if (o.perturb) {
    for (auto& l : p.layers) {
      Matrix noise = gaussian(l.D.rows(), l.D.cols(), rng, 0.3);
      noise -= project_Sp(noise, o.format).reconstruction;
      if (l.variant == LayerVariant::InseparableFirst) noise = noise.cwiseProduct(inseparable_row_mask(p.config.dp));
      l.D += noise;
    }
  }
  MonteCarloOptions mc;
  mc.batch = or_default(o.batch, 200000);
  mc.chunk = std::min(5000, mc.batch);
  mc.sigma = sigma;
  mc.seed = o.seed;
  std::vector<Selector> selectors;
  for (int l = 0; l < L; ++l)
    for (BlockKind k : {BlockKind::A, BlockKind::B, BlockKind::C, BlockKind::D}) selectors.push_back({k, l});
  const auto rows = criticality_symmetry_check(p, selectors, trials, mc);
  int violations = 0;
  double worst_z = 0.0;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& row : rows) {
    violations += !row.within();
    if (row.stderr_ > 0.0) worst_z = std::max(worst_z, std::abs(row.diff) / row.stderr_);
    table.push_back({{"selector", to_string(row.selector.kind)},
                     {"layer", row.selector.layer + 1},
                     {"d_R", row.d_R},
                     {"d_Rt", row.d_Rt},
                     {"diff", row.diff},
                     {"stderr", row.stderr_}});
  }
  CheckReport r = report("critpoint", o);
  r.metrics = {{"format", to_string(o.format)},
               {"sigma", o.spd_sigma ? "spd" : "identity"},
               {"perturbed", o.perturb},
               {"batch", mc.batch},
               {"violations", violations},
               {"max_abs_z", worst_z},
               {"rows", table}};
  r.thresholds = {{"rule", "|diff| <= 3 stderr + 1e-6"}, {"violations", 0}};
  r.pass = violations == 0;
  return r;
}

CheckReport check_lambda4(const CheckOptions& o) {
  constexpr double kOffdiag = 0.15, kLastRow = 0.1;
  const ModelParams& p = require_params(o, "lambda4");
  if (p.config.format != PromptFormat::Triplet) throw ContractError("lambda4 needs a triplet model");
  const StructuredDecomposition s = project_Sp(p.layers.front().D, PromptFormat::Triplet);
  const Lambda4Metrics m = lambda4_orthonormality(s.lambda4);
  CheckReport r = report("lambda4", o);
  r.metrics = {{"offdiag_ratio", m.offdiag_ratio},
               {"lastrow_ratio", m.lastrow_ratio},
               {"lambda_hat", m.lambda_hat},
               {"degenerate", m.degenerate},
               {"layer", 1},
               {"lambda4", matrix_to_json(s.lambda4)},
               {"gram", matrix_to_json(s.lambda4 * s.lambda4.transpose())}};
  r.thresholds = {{"offdiag_ratio", kOffdiag}, {"lastrow_ratio", kLastRow}};
  r.pass = !m.degenerate && m.offdiag_ratio <= kOffdiag && m.lastrow_ratio <= kLastRow;
  return r;
}

CheckReport check_structure(const CheckOptions& o) {
  constexpr double kRelative = 0.15;
  const ModelParams& p = require_params(o, "structure");
  if (p.config.format == PromptFormat::Single) throw ContractError("structure needs a format with position blocks");
  double largest = 0.0;
  for (const auto& l : p.layers) largest = std::max(largest, l.D.norm());
  bool pass = true;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const Matrix& D = p.layers[i].D;
    const StructuredDecomposition s = project_Sp(D, p.config.format);
    const bool negligible = D.norm() <= kNegligibleLayer * largest;
    const bool ok = negligible || s.relative_residual <= kRelative;
    pass = pass && ok;
    layers.push_back({{"layer", i + 1},
                      {"norm", D.norm()},
                      {"residual", s.residual},
                      {"relative_residual", s.relative_residual},
                      {"negligible", negligible},
                      {"pass", ok}});
  }
  CheckReport r = report("structure", o);
  r.metrics = {{"format", to_string(p.config.format)}, {"layers", layers}};
  r.thresholds = {{"relative_residual", kRelative}, {"negligible_fraction", kNegligibleLayer}};
  r.pass = pass;
  return r;
}

CheckReport check_rank_one_bijection(const CheckOptions& o) {
  constexpr double kEquation = 1e-12;
  const int trials = or_default(o.trials, 10000);
  Rng rng(o.seed, 105);
  const int dims[] = {2, 4, 8};
  int disagreements = 0, feasible = 0;
  double worst_equation = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int d = dims[t % 3];
    const Vector x = gaussian(d, 1, rng);
    Vector y;
    switch ((t / 3) % 5) {
      case 0: y = x; break;
      case 1: y = -x; break;
      case 2: y = 1.5 * x; break;                       // parallel but not a bijection
      case 3: y = x + 0.1 * gaussian(d, 1, rng); break;  // near miss
      default: y = gaussian(d, 1, rng); break;
    }
    const BijectionResult b = rank_one_bijection_feasible(x, y, 1e-9, o.seed + t);
    disagreements += b.feasible != b.als_feasible;
    if (b.feasible) {
      ++feasible;
      worst_equation = std::max({worst_equation, (*b.W * x - y).norm(), (*b.W * y - x).norm()});
    }
  }
  CheckReport r = report("bijection", o);
  r.metrics = {{"trials", trials},
               {"feasible", feasible},
               {"disagreements", disagreements},
               {"max_equation_residual", worst_equation}};
  r.thresholds = {{"disagreements", 0}, {"max_equation_residual", kEquation}};
  r.pass = disagreements == 0 && worst_equation <= kEquation;
  return r;
}

CheckReport check_decaying_weights(const CheckOptions& o) {
  constexpr double kSpearman = 0.9;
  const int n = 10, d = 4;
  const int restarts = or_default(o.trials, 5);
  const DropoutCoefficients c = dropout_coefficients(1, 1, 1, 0.9, n, d);
  const DropoutResult res = dropout_optimize(DropoutObjective::from(c), n, true, restarts, 5000, o.seed);
  Vector idx(n), w(n);
  for (int i = 0; i < n; ++i) {
    idx(i) = i + 1;
    w(i) = std::abs(res.lambda(i, n));
  }
  const double rho = spearman(idx, w);
  CheckReport r = report("dropout_weights", o);
  r.metrics = {{"spearman", rho},
               {"objective", res.objective},
               {"converged", res.converged},
               {"restarts", restarts},
               {"last_column", std::vector<double>(w.data(), w.data() + n)},
               {"coefficients", {c.c0, c.c1, c.c2, c.c3, c.c4, c.c5, c.c6}}};
  r.thresholds = {{"spearman", kSpearman}};
  r.pass = rho >= kSpearman;
  return r;
}

CheckReport check_eos_equivalence(const CheckOptions& o) {
  constexpr double kTol = 1e-10;
  const int trials = or_default(o.trials, 100);
  Rng rng(o.seed, 106);
  double worst = 0.0, largest = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int d = 1 + t % 4, dp = 2 + t % 7, L = 1 + t % 3;
    std::vector<Matrix> V, Q, P;
    // Scaled so each layer's update stays O(1).
    for (int l = 0; l < L; ++l) {
      V.push_back(gaussian(d, d, rng, 0.5 / std::sqrt(double(d))));
      Q.push_back(gaussian(d, d, rng, 0.5 / d));
      P.push_back(gaussian(dp + 1, dp + 1, rng, 0.5 / dp));
    }
    const Matrix Z = gaussian(d, dp, rng);
    worst = std::max(worst, eos_equivalence_check(V, Q, P, {Z}));
    largest = std::max(largest, eos_single_head(V, Q, P, Z).norm());
  }
  CheckReport r = report("eos", o);
  r.metrics = {{"max_deviation", worst}, {"max_output_norm", largest}, {"trials", trials}};
  r.thresholds = {{"max_deviation", kTol}};
  r.pass = worst <= kTol;
  return r;
}

CheckReport check_gd_decomposition(const CheckOptions& o) {
  constexpr double kTol = 1e-12;
  const int trials = or_default(o.trials, 20);
  Rng rng(o.seed, 107);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int d = 1 + t % 4, n = 1 + t % 6, dp = 2 * n + 2;
    const double lambda = 0.1 + rng.uniform();
    CriticalBlocks b;
    b.lambda1 = gaussian(2, 2, rng);
    b.lambda2 = gaussian(2, 2, rng);
    const ModelParams p =
        construct_critical_params(PromptFormat::Pairwise, 1, d, n, lambda, {b}, Matrix::Identity(d, d));
    const RegressionTask task = sample_task(d, n, Matrix::Identity(d, d), WStyle::GaussianIdentity, rng);
    const Matrix Z = build_prompt(task, PromptFormat::Pairwise).z0;
    const Matrix X = Z.topRows(d);
    // Preconditioned gradient step plus the per-demonstration concatenation.
    const Matrix step = -(lambda / n) * Z * mask(dp) * X.transpose() * X;
    Matrix concat = Matrix::Zero(2 * d, dp);
    for (int i = 0; i < n; ++i) concat.middleCols(2 * i, 2) = Z.middleCols(2 * i, 2) * b.lambda1;
    Matrix keep_first = Matrix::Zero(2, 2);
    keep_first(0, 0) = 1.0;
    concat.rightCols(2) = Z.rightCols(2) * keep_first * b.lambda2;
    const Matrix want = Z + step + concat / n;
    worst = std::max(worst, (forward(p, Z).z - want).lpNorm<Eigen::Infinity>() / std::max(1.0, want.norm()));
  }
  CheckReport r = report("gdpp", o);
  r.metrics = {{"max_rel_error", worst}, {"trials", trials}};
  r.thresholds = {{"max_rel_error", kTol}};
  r.pass = worst <= kTol;
  return r;
}

CheckReport check_structural_equivalence(const CheckOptions& o) {
  constexpr double kTol = 1e-12;
  const int trials = or_default(o.trials, 50);
  Rng rng(o.seed, 108);
  double worst = 0.0;
  for (PromptFormat fmt : kFormats)
    for (int t = 0; t < trials; ++t) {
      const int L = 1 + t % 3, d = 1 + t % 3, n = 1 + t % 4;
      const ModelParams p = random_params(fmt, L, d, n, rng);
      const RegressionTask task = sample_task(d, n, Matrix::Identity(d, d), WStyle::GaussianIdentity, rng);
      const Prompt pr = build_prompt(task, fmt);
      std::vector<Matrix> V, Q;
      embed_generic(p, V, Q);
      const Matrix generic = forward_generic(V, Q, pr.z0, Matrix::Identity(pr.dp, pr.dp), 1.0 / n);
      const Matrix fast = forward(p, pr.z0).z;
      worst = std::max(worst, (generic - fast).lpNorm<Eigen::Infinity>() /
                                  std::max(1.0, fast.lpNorm<Eigen::Infinity>()));
    }
  CheckReport r = report("structural", o);
  r.metrics = {{"max_rel_error", worst}, {"trials_per_format", trials}};
  r.thresholds = {{"max_rel_error", kTol}};
  r.pass = worst <= kTol;
  return r;
}

}  // namespace tvlab

#include "tvlab/training.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tvlab/io.hpp"

namespace tvlab {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("invalid train config: " + m); };
  if (steps < 0) fail("steps must be >= 0");
  if (batch < 1) fail("batch must be >= 1");
  if (!(lr >= 0.0)) fail("lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (l1_delay < 0) fail("l1_delay must be >= 0");
  if (!(init_std >= 0.0)) fail("init_std must be >= 0");
  if (d < 1 || n < 1 || L < 1) fail("d, n and L must be >= 1");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (lr_schedule != "constant" && lr_schedule != "cosine") fail("lr_schedule must be constant or cosine");
  if (sigma.size() && (sigma.rows() != d || sigma.cols() != d)) fail("sigma must be d x d");
}

double TrainConfig::lr_at(int step) const {
  if (lr_schedule == "constant" || steps == 0) return lr;
  return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * step / steps));
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {
      {"steps", c.steps},
      {"batch", c.batch},
      {"lr", c.lr},
      {"lr_schedule", c.lr_schedule},
      {"betas", {c.beta1, c.beta2}},
      {"eps", c.eps},
      {"weight_decay", c.weight_decay},
      {"l1", c.l1},
      {"l1_delay", c.l1_delay},
      {"init_std", c.init_std},
      {"seed", c.seed},
      {"d", c.d},
      {"n", c.n},
      {"L", c.L},
      {"format", to_string(c.format)},
      {"wstyle", to_string(c.wstyle)},
      {"eval_every", c.eval_every},
      {"eval_batch", c.eval_size()},
      {"eval_seed", c.eval_seed},
      {"divergence_threshold", c.divergence_threshold},
  };
  if (c.sigma.size()) j["sigma"] = matrix_to_json(c.sigma);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "steps") c.steps = v.get<int>();
    else if (key == "batch") c.batch = v.get<int>();
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "lr_schedule") c.lr_schedule = v.get<std::string>();
    else if (key == "betas") {
      c.beta1 = v.at(0).get<double>();
      c.beta2 = v.at(1).get<double>();
    } else if (key == "eps") c.eps = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "l1") c.l1 = v.get<double>();
    else if (key == "l1_delay") c.l1_delay = v.get<int>();
    else if (key == "init_std") c.init_std = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "d") c.d = v.get<int>();
    else if (key == "n") c.n = v.get<int>();
    else if (key == "L") c.L = v.get<int>();
    else if (key == "format") c.format = parse_format(v.get<std::string>());
    else if (key == "wstyle") c.wstyle = parse_wstyle(v.get<std::string>());
    else if (key == "eval_every") c.eval_every = v.get<int>();
    else if (key == "eval_batch") c.eval_batch = v.get<int>();
    else if (key == "eval_seed") c.eval_seed = v.get<std::uint64_t>();
    else if (key == "divergence_threshold") c.divergence_threshold = v.get<double>();
    else if (key == "sigma") c.sigma = matrix_from_json(v);
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Ok: return "ok";
    case RunStatus::Diverged: return "diverged";
    case RunStatus::Failed: return "failed";
  }
  return "?";
}

void adamw_step(AdamState& st, const std::vector<Matrix>& grads, std::vector<Matrix>& theta, const AdamConfig& c,
                const std::vector<bool>& l1_mask) {
  if (grads.size() != theta.size() || l1_mask.size() != theta.size())
    throw DimensionError("adamw_step: parameter lists differ in length");
  if (st.m.empty()) {
    for (const auto& t : theta) {
      st.m.push_back(Matrix::Zero(t.rows(), t.cols()));
      st.v.push_back(Matrix::Zero(t.rows(), t.cols()));
    }
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (grads[i].rows() != theta[i].rows() || grads[i].cols() != theta[i].cols() || st.m[i].rows() != theta[i].rows() ||
        st.m[i].cols() != theta[i].cols())
      throw DimensionError("adamw_step: moment shapes do not match parameters");
    if (!grads[i].allFinite()) throw EvaluationError("adamw_step: non-finite gradient in tensor " + std::to_string(i));
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    Matrix g = grads[i];
    if (l1_mask[i] && c.l1 != 0.0) g += c.l1 * theta[i].cwiseSign();
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g.cwiseProduct(g);
    theta[i] *= 1.0 - c.lr * c.weight_decay;
    theta[i].array() -= c.lr * (st.m[i].array() / bc1) / ((st.v[i].array() / bc2).sqrt() + c.eps);
  }
}

std::vector<Matrix> pack(const ModelParams& p) {
  std::vector<Matrix> out;
  for (const auto& l : p.layers) {
    out.push_back(Matrix::Constant(1, 1, l.a));
    out.push_back(Matrix::Constant(1, 1, l.b));
    out.push_back(Matrix::Constant(1, 1, l.c));
    out.push_back(l.D);
  }
  return out;
}

void unpack(const std::vector<Matrix>& theta, ModelParams& p) {
  if (theta.size() != 4 * p.layers.size()) throw DimensionError("unpack: wrong tensor count");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    p.layers[l].a = theta[4 * l](0, 0);
    p.layers[l].b = theta[4 * l + 1](0, 0);
    p.layers[l].c = theta[4 * l + 2](0, 0);
    p.layers[l].D = theta[4 * l + 3];
  }
}

ModelParams initial_params(const TrainConfig& c) {
  ModelConfig mc = make_config(c.format, c.L, c.d, c.n);
  ModelParams p = identity_params(mc);
  Rng rng(c.seed, 2);
  const double sd = c.init_std > 0.0 ? c.init_std : 1.0 / std::sqrt(static_cast<double>(mc.dp));
  for (auto& l : p.layers) {
    for (Index i = 0; i < l.D.size(); ++i) l.D.data()[i] = sd * rng.normal();
    if (l.variant == LayerVariant::InseparableFirst) l.D = l.D.cwiseProduct(inseparable_row_mask(mc.dp));
  }
  return p;
}

TaskBatch build_batch(const std::vector<RegressionTask>& tasks, PromptFormat format) {
  std::vector<Prompt> prompts;
  prompts.reserve(tasks.size());
  for (const auto& t : tasks) prompts.push_back(build_prompt(t, format));
  return {stack_prompts(prompts), stack_targets(tasks)};
}

TaskBatch sample_batch(const TrainConfig& c, int count, Rng& rng) {
  const Matrix sigma = c.covariance();
  const Matrix chol = cholesky_lower(sigma);
  std::vector<RegressionTask> tasks;
  tasks.reserve(count);
  for (int k = 0; k < count; ++k) tasks.push_back(sample_task(c.d, c.n, sigma, chol, c.wstyle, rng));
  return build_batch(tasks, c.format);
}

double risk_and_gradient(const ModelParams& p, const TaskBatch& batch, std::vector<Matrix>* grads) {
  Tape tape;
  ScalarLeaves leaves;
  const auto nodes = scalar_leaf_nodes(tape, p, leaves);
  GraphOptions opts;
  opts.output_only = true;
  const ForwardGraph g = build_forward(tape, nodes, p.config, batch.prompts, opts);
  const Var risk = risk_node(tape, g, batch.targets, batch.prompts.count);
  if (grads) {
    tape.backward(risk);
    grads->clear();
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      grads->push_back(leaves.a[l].grad());
      grads->push_back(leaves.b[l].grad());
      grads->push_back(leaves.c[l].grad());
      grads->push_back(leaves.D[l].grad());
    }
  }
  return risk.value()(0, 0);
}

double evaluate_risk(const ModelParams& p, const TaskBatch& batch) {
  const Matrix pred = predict_batch(p, batch.prompts);
  const Eigen::Map<const Matrix> target(batch.targets.data(), pred.rows(), pred.cols());
  return (pred + target).squaredNorm() / static_cast<double>(pred.rows());
}

namespace {

// Every step allocates and frees the same multi-megabyte temporaries. Past
// glibc's mmap threshold each one costs fresh page faults, so keep them on
// the heap.
void keep_large_blocks_on_heap() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

}  // namespace

RunResult train(const TrainConfig& c, const ProgressFn& progress) {
  c.validate();
  keep_large_blocks_on_heap();
  RunResult r;
  r.seed = c.seed;
  ModelParams params = initial_params(c);
  std::vector<Matrix> theta = pack(params);
  std::vector<bool> l1_mask(theta.size(), false);
  for (std::size_t i = 3; i < theta.size(); i += 4) l1_mask[i] = true;
  AdamConfig ac{c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.l1};
  AdamState state;

  Rng eval_rng(c.eval_seed, 7);
  const TaskBatch eval = sample_batch(c, c.eval_size(), eval_rng);
  Rng data_rng(c.seed, 1);

  r.best_risk = std::numeric_limits<double>::infinity();
  auto record = [&](int step, double train_risk, double grad_norm) {
    CurvePoint pt;
    pt.step = step;
    pt.train_risk = train_risk;
    pt.eval_risk = evaluate_risk(params, eval);
    pt.grad_norm = grad_norm;
    for (const auto& l : params.layers) pt.l1_norm += l.D.lpNorm<1>();
    r.curve.push_back(pt);
    if (std::isfinite(pt.eval_risk) && pt.eval_risk < r.best_risk) {
      r.best_risk = pt.eval_risk;
      r.best_params = params;
    }
    if (progress) progress(pt);
    return pt.eval_risk;
  };

  std::vector<Matrix> grads;
  double last_train = std::numeric_limits<double>::quiet_NaN();
  double last_grad_norm = 0.0;
  for (int step = 0; step < c.steps; ++step) {
    const TaskBatch batch = sample_batch(c, c.batch, data_rng);
    const double risk = risk_and_gradient(params, batch, &grads);
    double gn = 0.0;
    for (const auto& g : grads) gn += g.squaredNorm();
    gn = std::sqrt(gn);
    last_train = risk;
    last_grad_norm = gn;
    if (!std::isfinite(risk) || risk > c.divergence_threshold) {
      r.status = RunStatus::Diverged;
      r.message = "training risk " + format_double(risk) + " exceeded the divergence threshold at step " +
                  std::to_string(step);
      break;
    }
    if (step % c.eval_every == 0) record(step, risk, gn);
    ac.lr = c.lr_at(step);
    ac.l1 = step < c.l1_delay ? 0.0 : c.l1;
    try {
      adamw_step(state, grads, theta, ac, l1_mask);
    } catch (const EvaluationError& e) {
      r.status = RunStatus::Diverged;
      r.message = std::string(e.what()) + " at step " + std::to_string(step);
      break;
    }
    unpack(theta, params);
  }
  r.final_risk = record(r.status == RunStatus::Ok ? c.steps : static_cast<int>(r.curve.empty() ? 0 : r.curve.back().step),
                        last_train, last_grad_norm);
  if (r.status == RunStatus::Ok && !std::isfinite(r.final_risk)) {
    r.status = RunStatus::Diverged;
    r.message = "non-finite evaluation risk";
  }
  if (!std::isfinite(r.best_risk)) r.best_params = params;
  return r;
}

std::vector<SweepCell> sweep(const std::vector<TrainConfig>& grid, int seeds, int threads,
                             const std::function<void(std::size_t, int, const RunResult&)>& on_run) {
  if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
  if (seeds < 1) throw std::invalid_argument("sweep needs at least one seed");
  std::vector<SweepCell> cells(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    cells[i].config = grid[i];
    cells[i].seed_risks.assign(seeds, std::numeric_limits<double>::quiet_NaN());
  }
  std::vector<std::vector<RunResult>> results(grid.size(), std::vector<RunResult>(seeds));
  const std::size_t jobs = grid.size() * static_cast<std::size_t>(seeds);
  std::atomic<std::size_t> next{0};
  std::mutex callback_lock;
  auto worker = [&] {
    for (std::size_t job; (job = next++) < jobs;) {
      const std::size_t cell = job / seeds;
      const int s = static_cast<int>(job % seeds);
      TrainConfig c = grid[cell];
      c.seed = grid[cell].seed + static_cast<std::uint64_t>(s);
      RunResult rr;
      try {
        rr = train(c);
      } catch (const std::exception& e) {
        rr.status = RunStatus::Failed;
        rr.message = e.what();
        rr.seed = c.seed;
        rr.best_risk = std::numeric_limits<double>::quiet_NaN();
      }
      if (on_run) {
        std::lock_guard<std::mutex> g(callback_lock);
        on_run(cell, s, rr);
      }
      results[cell][s] = std::move(rr);
    }
  };
  const int nt = std::max(1, threads);
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  // Reduce in seed order so ties resolve the same way regardless of threads.
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto& cell = cells[i];
    cell.min_risk = std::numeric_limits<double>::quiet_NaN();
    for (int s = 0; s < seeds; ++s) {
      const RunResult& rr = results[i][s];
      if (rr.status != RunStatus::Ok) {
        ++cell.failures;
        continue;
      }
      cell.seed_risks[s] = rr.best_risk;
      if (std::isnan(cell.min_risk) || rr.best_risk < cell.min_risk) {
        cell.min_risk = rr.best_risk;
        cell.best_seed = rr.seed;
        cell.best_params = rr.best_params;
      }
    }
    if (cell.failures == 0) cell.status = "ok";
    else if (cell.failures == seeds) cell.status = "failed";
    else cell.status = "partial:" + std::to_string(cell.failures) + "_failed";
  }
  return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::string out = csv_row({"format", "L", "n", "min_risk", "status", "best_seed", "seeds"});
  for (const auto& c : cells)
    out += csv_row({to_string(c.config.format), std::to_string(c.config.L), std::to_string(c.config.n),
                    format_double(c.min_risk), c.status, std::to_string(c.best_seed),
                    std::to_string(c.seed_risks.size())});
  return out;
}

}  // namespace tvlab

#include "tvlab/taskvector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tvlab/io.hpp"

namespace tvlab {

namespace {

constexpr int kChunk = 2000;

void require_triplet(const Prompt& p) {
  if (p.format != PromptFormat::Triplet) throw ContractError("task vectors need a triplet prompt");
}

void require_layer(const ModelParams& params, int layer) {
  if (layer < 1 || layer > params.config.layers)
    throw ContractError("layer must lie in 1.." + std::to_string(params.config.layers));
}

PromptBatch slice(const PromptBatch& b, int start, int count) {
  PromptBatch part;
  part.count = count;
  part.d = b.d;
  part.dp = b.dp;
  part.x = b.x.middleRows(Index(start) * b.d, Index(count) * b.d);
  part.y = b.y.middleRows(Index(start) * b.d, Index(count) * b.d);
  return part;
}

// Last-arrow task vectors of a batch of same-length triplet prompts, one row
// of 2d entries per prompt.
Matrix last_arrow_states(const ModelParams& params, const PromptBatch& batch, int layer) {
  const PromptBatch h = hidden_after(params, batch, layer);
  const int d = batch.d;
  const Index arrow = batch.dp - 2;
  Matrix out(batch.count, 2 * d);
  for (int k = 0; k < batch.count; ++k) {
    out.row(k).head(d) = h.x.block(Index(k) * d, arrow, d, 1).transpose();
    out.row(k).tail(d) = h.y.block(Index(k) * d, arrow, d, 1).transpose();
  }
  return out;
}

Vector unit(const Vector& v) {
  const double n = v.norm();
  if (!(n > 0.0)) throw ContractError("cannot normalize a zero vector");
  return v / n;
}

bool all_positions_zero(const ModelParams& p) {
  return std::all_of(p.layers.begin(), p.layers.end(),
                     [](const LayerParams& l) { return l.D.size() == 0 || l.D.isZero(0.0); });
}

Vector query_output(const Matrix& z, int d) { return z.block(d, z.cols() - 1, d, 1); }

TvEvalRow eval_one(const ModelParams& params, int n, const TvEvalOptions& o) {
  if (params.config.format != PromptFormat::Triplet) throw ContractError("tv_eval needs a triplet model");
  if (n < 1) throw ContractError("tv_eval needs n >= 1");
  if (token_count(PromptFormat::Triplet, n) > params.config.dp)
    throw DimensionError("n=" + std::to_string(n) + " does not fit the model's positions");
  if (o.trials < 1) throw ContractError("tv_eval needs at least one trial");
  const int d = params.config.d;
  const Matrix sigma = o.sigma.size() ? o.sigma : Matrix::Identity(d, d);
  const Matrix chol = cholesky_lower(sigma);
  Rng rng(o.seed, static_cast<std::uint64_t>(n));

  std::vector<Prompt> source;
  std::vector<Matrix> zero_shot_x;
  std::vector<Vector> fresh_y;
  std::vector<Prompt> oneshot;
  for (int t = 0; t < o.trials; ++t) {
    const RegressionTask task = sample_task(d, n, sigma, chol, o.wstyle, rng);
    source.push_back(build_prompt(task, PromptFormat::Triplet));
    // Fresh query plus one fresh demonstration for the 1-shot baseline.
    RegressionTask one;
    one.d = d;
    one.n = 1;
    one.sigma = sigma;
    one.w = task.w;
    one.x = chol * Matrix(Vector::NullaryExpr(d, [&] { return rng.normal(); }));
    one.x_test = chol * Vector::NullaryExpr(d, [&] { return rng.normal(); });
    one.y_test = one.w * one.x_test;
    oneshot.push_back(build_prompt(one, PromptFormat::Triplet));
    zero_shot_x.push_back(one.x_test);
    fresh_y.push_back(one.y_test);
  }

  TvEvalRow row;
  row.n = n;
  row.trials = o.trials;
  double tv_sum = 0.0, one_sum = 0.0;
  int scored = 0;
  for (int start = 0; start < o.trials; start += kChunk) {
    const int m = std::min(kChunk, o.trials - start);
    std::vector<Prompt> part(source.begin() + start, source.begin() + start + m);
    const Matrix tvs = last_arrow_states(params, stack_prompts(part), o.layer);
    std::vector<Matrix> zs;
    zs.reserve(m);
    for (int k = 0; k < m; ++k) {
      Matrix z = Matrix::Zero(2 * d, 3);
      z.block(0, 0, d, 1) = zero_shot_x[start + k];
      const Vector v = tvs.row(k).transpose();
      if (v.norm() > 0.0) z.col(1) = v / v.norm();
      zs.push_back(std::move(z));
    }
    const Matrix tv_pred = predict_batch(params, stack_z(zs, d));
    std::vector<Prompt> one_part(oneshot.begin() + start, oneshot.begin() + start + m);
    const Matrix one_pred = predict_batch(params, stack_prompts(one_part));
    for (int k = 0; k < m; ++k) {
      const Vector tp = tv_pred.row(k).transpose(), op = one_pred.row(k).transpose();
      // A zero prediction has no direction; such trials are counted, not scored.
      if (tp.norm() > 0.0 && op.norm() > 0.0) {
        tv_sum += normalized_risk(tp, fresh_y[start + k]);
        one_sum += normalized_risk(op, fresh_y[start + k]);
        ++scored;
      } else {
        ++row.degenerate;
      }
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  row.tv_risk = scored ? tv_sum / scored : nan;
  row.oneshot_risk = scored ? one_sum / scored : nan;
  return row;
}

}  // namespace

PromptBatch hidden_after(const ModelParams& params, const PromptBatch& batch, int layer) {
  require_layer(params, layer);
  ModelParams head = params;
  head.layers.resize(layer);
  head.config.layers = layer;
  PromptBatch out;
  out.count = batch.count;
  out.d = batch.d;
  out.dp = batch.dp;
  out.x.resize(batch.x.rows(), batch.dp);
  out.y.resize(batch.y.rows(), batch.dp);
  for (int start = 0; start < batch.count; start += kChunk) {
    const int m = std::min(kChunk, batch.count - start);
    Tape tape;
    const auto nodes = constant_nodes(tape, head);
    const ForwardGraph g = build_forward(tape, nodes, head.config, slice(batch, start, m));
    out.x.middleRows(Index(start) * batch.d, Index(m) * batch.d) = g.x.back().value();
    out.y.middleRows(Index(start) * batch.d, Index(m) * batch.d) = g.y.back().value();
  }
  return out;
}

std::vector<TaskVector> extract_tv(const ModelParams& params, const Prompt& prompt, int layer, ArrowSelect which) {
  require_triplet(prompt);
  require_layer(params, layer);
  const int d = prompt.d;
  const PromptBatch h = hidden_after(params, stack_prompts({prompt}), layer);
  std::vector<TaskVector> out;
  auto take = [&](int col) {
    TaskVector tv;
    tv.v.resize(2 * d);
    tv.v.head(d) = h.x.col(col);
    tv.v.tail(d) = h.y.col(col);
    tv.source_layer = layer;
    tv.source_arrow = col;
    out.push_back(std::move(tv));
  };
  if (which == ArrowSelect::LastArrow)
    take(prompt.arrow_cols.back());
  else
    for (int c : prompt.arrow_cols) take(c);
  return out;
}

TaskVector normalize(const TaskVector& tv) {
  TaskVector out = tv;
  out.v = unit(tv.v);
  out.normalized = true;
  return out;
}

Vector inject_zero_shot(const ModelParams& params, const Vector& x_test, const TaskVector& tv) {
  const int d = params.config.d;
  if (x_test.size() != d || tv.v.size() != 2 * d) throw DimensionError("injection vector sizes do not match the model");
  Matrix z = Matrix::Zero(2 * d, 3);
  z.block(0, 0, d, 1) = x_test;
  z.col(1) = tv.v;
  return predict_batch(params, stack_z({z}, d)).row(0).transpose();
}

Vector inject_multi(const ModelParams& params, const Prompt& fewshot, const std::vector<TaskVector>& tvs) {
  require_triplet(fewshot);
  if (tvs.size() != fewshot.arrow_cols.size())
    throw ContractError("need one task vector per arrow (" + std::to_string(fewshot.arrow_cols.size()) + ")");
  Matrix z = fewshot.z0;
  for (std::size_t i = 0; i < tvs.size(); ++i) {
    if (tvs[i].v.size() != z.rows()) throw DimensionError("task vector size does not match the prompt");
    z.col(fewshot.arrow_cols[i]) = tvs[i].v;
  }
  return predict_batch(params, stack_z({z}, fewshot.d)).row(0).transpose();
}

Vector inject_at_layer(const ModelParams& params, const Prompt& prompt, const std::vector<TaskVector>& tvs,
                       int layer) {
  require_triplet(prompt);
  require_layer(params, layer);
  if (tvs.size() != prompt.arrow_cols.size()) throw ContractError("need one task vector per arrow");
  const int d = prompt.d;
  const PromptBatch h = hidden_after(params, stack_prompts({prompt}), layer);
  Matrix z(2 * d, prompt.dp);
  z << h.x, h.y;
  for (std::size_t i = 0; i < tvs.size(); ++i) z.col(prompt.arrow_cols[i]) = tvs[i].v;
  if (layer == params.config.layers) return query_output(z, d);
  return query_output(forward_from(params, z, layer), d);
}

double normalized_risk(const Vector& y_hat, const Vector& y) {
  if (y_hat.size() != y.size()) throw DimensionError("normalized_risk size mismatch");
  return (unit(y_hat) + unit(y)).norm();
}

double TvEvalTable::mean_tv() const {
  if (rows.empty()) throw ContractError("empty table");
  double s = 0.0;
  for (const auto& r : rows) s += r.tv_risk;
  return s / rows.size();
}

double TvEvalTable::mean_oneshot() const {
  if (rows.empty()) throw ContractError("empty table");
  double s = 0.0;
  for (const auto& r : rows) s += r.oneshot_risk;
  return s / rows.size();
}

TvEvalTable tv_eval(const ModelParams& params, const std::vector<int>& n_list, const TvEvalOptions& opts) {
  std::vector<std::pair<int, ModelParams>> models;
  for (int n : n_list) models.emplace_back(n, params);
  return tv_eval(models, opts);
}

TvEvalTable tv_eval(const std::vector<std::pair<int, ModelParams>>& models, const TvEvalOptions& opts) {
  TvEvalTable table;
  for (const auto& [n, params] : models) {
    table.rows.push_back(eval_one(params, n, opts));
    table.untrained = table.untrained || all_positions_zero(params);
  }
  return table;
}

std::string tv_eval_csv(const TvEvalTable& table) {
  std::string out = csv_row({"n", "tv_risk", "oneshot_risk", "trials", "degenerate"});
  for (const auto& r : table.rows)
    out += csv_row({std::to_string(r.n), format_double(r.tv_risk), format_double(r.oneshot_risk),
                    std::to_string(r.trials), std::to_string(r.degenerate)});
  return out;
}

Vector perturbation_weights(const ModelParams& params, const RegressionTask& task, const PerturbOptions& o) {
  const int d = task.d, n = task.n;
  if (n < 1) throw ContractError("perturbation_weights needs n >= 1");
  if (o.trials < 1) throw ContractError("perturbation_weights needs at least one trial");
  const Matrix chol = cholesky_lower(task.sigma.size() ? task.sigma : Matrix::Identity(d, d));
  Rng rng(o.seed, 11);
  auto draw = [&] { return Vector(Vector::NullaryExpr(d, [&] { return rng.normal(); })); };

  const Prompt base = build_prompt(task, PromptFormat::Triplet);
  const Vector tv0 = last_arrow_states(params, stack_prompts({base}), o.layer).row(0).transpose();

  std::vector<Prompt> perturbed;
  perturbed.reserve(std::size_t(o.trials) * n);
  for (int t = 0; t < o.trials; ++t) {
    Vector dx, dy;
    if (o.mode == PerturbMode::Resample) {
      dx = chol * draw();
      dy = task.w * dx;
    } else {
      dx = o.noise * draw();
      dy = o.noise * draw();
    }
    for (int i = 0; i < n; ++i) {
      Prompt p = base;
      if (o.mode == PerturbMode::Resample) {
        p.z0.block(0, 3 * i, d, 1) = dx;
        p.z0.block(d, 3 * i + 2, d, 1) = dy;
      } else {
        p.z0.block(0, 3 * i, d, 1) += dx;
        p.z0.block(d, 3 * i + 2, d, 1) += dy;
      }
      perturbed.push_back(std::move(p));
    }
  }
  const Matrix tvs = last_arrow_states(params, stack_prompts(perturbed), o.layer);
  Vector w = Vector::Zero(n);
  for (int t = 0; t < o.trials; ++t)
    for (int i = 0; i < n; ++i) {
      const std::size_t k = std::size_t(t) * n + i;
      if (perturbed[k].z0 != base.z0) w(i) += (tvs.row(Index(k)).transpose() - tv0).norm();
    }
  w /= o.trials;
  const double total = w.sum();
  if (total > 0.0) w /= total;
  return w;
}

}  // namespace tvlab

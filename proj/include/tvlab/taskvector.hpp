#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tvlab/model.hpp"

namespace tvlab {

struct TaskVector {
  Vector v;  // 2d entries: x rows then y rows
  int source_layer = 1;
  int source_arrow = 0;  // column in the source prompt
  bool normalized = false;
};

enum class ArrowSelect { LastArrow, AllArrows };

// Hidden state after `layer` layers (1-based) for a batch of prompts.
PromptBatch hidden_after(const ModelParams& params, const PromptBatch& batch, int layer);

// Columns of the layer-`layer` hidden state at the arrow tokens.
std::vector<TaskVector> extract_tv(const ModelParams& params, const Prompt& prompt, int layer = 1,
                                   ArrowSelect which = ArrowSelect::LastArrow);
TaskVector normalize(const TaskVector& tv);

// Runs the full model on [x_test; 0 | tv | 0] and returns the query output.
Vector inject_zero_shot(const ModelParams& params, const Vector& x_test, const TaskVector& tv);

// Replaces every arrow column of the few-shot prompt with tvs (one per
// arrow, in order) and runs the full model.
Vector inject_multi(const ModelParams& params, const Prompt& fewshot, const std::vector<TaskVector>& tvs);

// Replaces the arrow columns of the layer-`layer` hidden state with tvs and
// runs the remaining layers. Returns the query output.
Vector inject_at_layer(const ModelParams& params, const Prompt& prompt, const std::vector<TaskVector>& tvs,
                       int layer);

// ‖ŷ/‖ŷ‖ + y/‖y‖‖, zero for a perfect prediction under the negated-output
// convention.
double normalized_risk(const Vector& y_hat, const Vector& y);

struct TvEvalOptions {
  int trials = 1000;
  WStyle wstyle = WStyle::RankOne;
  Matrix sigma;  // empty means identity
  std::uint64_t seed = 0;
  int layer = 1;
};

struct TvEvalRow {
  int n = 0;
  double tv_risk = 0.0;  // NaN when every trial is degenerate
  double oneshot_risk = 0.0;
  int trials = 0;
  int degenerate = 0;  // trials with a zero prediction, left out of both means
};

struct TvEvalTable {
  std::vector<TvEvalRow> rows;
  bool untrained = false;  // some model had every position matrix zero
  double mean_tv() const;
  double mean_oneshot() const;
};

// Uses one model for every n; each n must fit the model's positions.
TvEvalTable tv_eval(const ModelParams& params, const std::vector<int>& n_list, const TvEvalOptions& opts);
// One model per n, each evaluated at its own n.
TvEvalTable tv_eval(const std::vector<std::pair<int, ModelParams>>& models, const TvEvalOptions& opts);

std::string tv_eval_csv(const TvEvalTable& table);

enum class PerturbMode { Resample, AddNoise };

struct PerturbOptions {
  PerturbMode mode = PerturbMode::Resample;
  double noise = 1.0;  // AddNoise standard deviation
  int trials = 64;
  std::uint64_t seed = 0;
  int layer = 1;
};

// Mean ‖Δtv‖ at the last arrow when demonstration i is perturbed, scaled to
// sum to one. Each trial applies the same draw to every i. All zero when no
// perturbation moves the task vector.
Vector perturbation_weights(const ModelParams& params, const RegressionTask& task, const PerturbOptions& opts);

}  // namespace tvlab

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/model.hpp"

namespace tvlab {

struct TrainConfig {
  int steps = 20000;
  int batch = 1000;
  double lr = 1e-3;
  std::string lr_schedule = "constant";  // or "cosine": lr * (1 + cos(pi t / steps)) / 2
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double l1 = 1e-4;
  int l1_delay = 0;  // steps before the l1 term switches on
  double init_std = 1.0;  // D entries ~ N(0, init_std²); 0 means 1/sqrt(dp)
  std::uint64_t seed = 0;
  int d = 4;
  int n = 10;
  int L = 2;
  PromptFormat format = PromptFormat::Triplet;
  WStyle wstyle = WStyle::GaussianIdentity;
  Matrix sigma;  // empty means identity
  int eval_every = 100;
  int eval_batch = 0;  // 0 means 10 * batch
  std::uint64_t eval_seed = 0x5eedULL;
  double divergence_threshold = 1e6;

  void validate() const;
  Matrix covariance() const { return sigma.size() ? sigma : Matrix::Identity(d, d); }
  int eval_size() const { return eval_batch > 0 ? eval_batch : 10 * batch; }
  double lr_at(int step) const;
};

nlohmann::json to_json(const TrainConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

enum class RunStatus { Ok, Diverged, Failed };
std::string to_string(RunStatus s);

struct CurvePoint {
  int step = 0;
  double train_risk = 0.0;
  double eval_risk = 0.0;
  double grad_norm = 0.0;
  double l1_norm = 0.0;
};

struct RunResult {
  double final_risk = 0.0;
  double best_risk = 0.0;
  std::vector<CurvePoint> curve;
  ModelParams best_params;
  std::string params_path;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::Ok;
  std::string message;
};

struct AdamState {
  std::vector<Matrix> m, v;
  long t = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double l1 = 0.0;
};

// l1_mask marks the tensors that receive l1 * sign(theta).
void adamw_step(AdamState& state, const std::vector<Matrix>& grads, std::vector<Matrix>& theta,
                const AdamConfig& config, const std::vector<bool>& l1_mask);

// Flattened trainable tensors: per layer a, b, c (1x1) and D.
std::vector<Matrix> pack(const ModelParams& p);
void unpack(const std::vector<Matrix>& theta, ModelParams& p);

ModelParams initial_params(const TrainConfig& c);

// Row-stacked prompts and targets for a batch of freshly sampled tasks.
struct TaskBatch {
  PromptBatch prompts;
  Matrix targets;
};
TaskBatch sample_batch(const TrainConfig& c, int count, Rng& rng);
TaskBatch build_batch(const std::vector<RegressionTask>& tasks, PromptFormat format);

// Mean risk and gradients (packed like pack()).
double risk_and_gradient(const ModelParams& p, const TaskBatch& batch, std::vector<Matrix>* grads);
double evaluate_risk(const ModelParams& p, const TaskBatch& batch);

using ProgressFn = std::function<void(const CurvePoint&)>;
RunResult train(const TrainConfig& config, const ProgressFn& progress = {});

struct SweepCell {
  TrainConfig config;
  double min_risk = 0.0;
  std::uint64_t best_seed = 0;
  ModelParams best_params;
  int failures = 0;
  std::string status;
  std::vector<double> seed_risks;
};

// Seeds run as config.seed + 0 .. seeds-1.
std::vector<SweepCell> sweep(const std::vector<TrainConfig>& grid, int seeds, int threads = 1,
                             const std::function<void(std::size_t cell, int seed, const RunResult&)>& on_run = {});

std::string sweep_csv(const std::vector<SweepCell>& cells);

}  // namespace tvlab

#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "tvlab/rng.hpp"
#include "tvlab/taskgen.hpp"
#include "tvlab/tensor.hpp"

namespace tvlab {

using Tape = ad::Tape<double>;
using Var = ad::Var<double>;

enum class LayerVariant { Standard, InseparableFirst };

struct LayerParams {
  double a = 1.0;
  double b = 1.0;
  double c = 0.0;
  Matrix D;
  LayerVariant variant = LayerVariant::Standard;
};

struct ModelConfig {
  int layers = 1;
  int d = 4;
  int n = 10;
  int dp = 11;
  PromptFormat format = PromptFormat::Single;
  Matrix c_basis;
  bool include_inv_n_scale = true;
  std::optional<double> dropout_p;

  double attention_scale() const { return include_inv_n_scale ? 1.0 / std::max(n, 1) : 1.0; }
};

ModelConfig make_config(PromptFormat format, int layers, int d, int n);

struct ModelParams {
  ModelConfig config;
  std::vector<LayerParams> layers;

  void validate() const;
};

// Every layer with a=b=1, c=0, D=0; attention is inactive.
ModelParams identity_params(const ModelConfig& config);

// Rows 2i (1-based) of the first inseparable layer are pinned to zero.
Matrix inseparable_row_mask(int dp);

// Prompts with fewer tokens than the model use the trailing positions.
Matrix position_block(const Matrix& D, int dp);

// Row-stacked batch: sample k occupies rows [k*d, (k+1)*d) of x and y.
struct PromptBatch {
  int count = 0;
  int d = 0;
  int dp = 0;
  Matrix x;
  Matrix y;
};

PromptBatch stack_prompts(const std::vector<Prompt>& prompts);
PromptBatch stack_z(const std::vector<Matrix>& zs, int d);
// W x_test per sample, stacked into a (count*d) x 1 column.
Matrix stack_targets(const std::vector<RegressionTask>& tasks);

struct LayerNodes {
  Var A, B, C, D;
  LayerVariant variant = LayerVariant::Standard;
};

// Scalar leaves for training: A = a I, B = b I, C = c basis.
struct ScalarLeaves {
  std::vector<Var> a, b, c, D;
};

std::vector<LayerNodes> constant_nodes(Tape& tape, const ModelParams& params);
std::vector<LayerNodes> scalar_leaf_nodes(Tape& tape, const ModelParams& params, ScalarLeaves& leaves);
// A, B, C, D are dense leaves so their gradients are full matrices.
std::vector<LayerNodes> block_leaf_nodes(Tape& tape, const ModelParams& params);

struct GraphOptions {
  bool output_only = false;  // last layer only computes the query column of Y
  int first_layer = 0;       // start from the hidden state entering this layer
  const std::vector<Matrix>* dropout = nullptr;  // per layer, count x dp keep masks
};

struct ForwardGraph {
  std::vector<Var> x, y;  // hidden states; index 0 is the input
  Var out;                // (count*d) x 1 query-column output
};

ForwardGraph build_forward(Tape& tape, const std::vector<LayerNodes>& layers, const ModelConfig& config,
                           const PromptBatch& batch, const GraphOptions& opts = {});

// Mean over the batch of ‖out + W x_test‖².
Var risk_node(Tape& tape, const ForwardGraph& graph, const Matrix& targets, int count);

std::vector<Matrix> sample_dropout(const ModelConfig& config, int count, int dp, Rng& rng);

struct ForwardResult {
  Matrix z;                    // Z_L
  std::vector<Matrix> hidden;  // Z_0 .. Z_L
};

ForwardResult forward(const ModelParams& params, const Matrix& z0, Rng* rng = nullptr);
// Runs layers first_layer.. from a given hidden state.
Matrix forward_from(const ModelParams& params, const Matrix& z, int first_layer);

Vector predict(const ModelParams& params, const Prompt& prompt);
Matrix predict_batch(const ModelParams& params, const PromptBatch& batch);  // count x d

std::vector<double> icl_risk_per_sample(const ModelParams& params, const std::vector<Prompt>& prompts,
                                        const std::vector<RegressionTask>& tasks);
double icl_risk(const ModelParams& params, const std::vector<Prompt>& prompts,
                const std::vector<RegressionTask>& tasks);
double risk_reformulated(const ModelParams& params, const Prompt& filled);

// Unconstrained evaluator: Z <- Z + scale * V Z M [Zᵀ Pᵀ] Q [Z; P].
Matrix forward_generic(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const Matrix& z0,
                       const Matrix& P, double scale);
void embed_generic(const ModelParams& params, std::vector<Matrix>& V, std::vector<Matrix>& Q);

struct CriticalBlocks {
  Matrix lambda1;   // 2x2 pairwise, 3x3 corner-masked triplet
  Matrix lambda2;
  double lambda3 = 0.0;
  Matrix lambda4;   // (n+1) x (n+1)
  Vector lambda5;   // entries (1,2) and (3,2) of the 3x3 block
};

Matrix assemble_D(PromptFormat format, int n, const CriticalBlocks& blocks);
// blocks has one entry per layer or a single entry shared by all layers.
ModelParams construct_critical_params(PromptFormat format, int layers, int d, int n, double lambda,
                                      const std::vector<CriticalBlocks>& blocks, const Matrix& c_basis);

nlohmann::json to_json(const ModelParams& params);
ModelParams params_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace tvlab

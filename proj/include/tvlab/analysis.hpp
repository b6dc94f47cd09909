#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/model.hpp"

namespace tvlab {

// Structured part of a learned position matrix. Pairwise uses lambda1 and
// lambda2 as 2x2 blocks; triplet fills every field.
struct StructuredDecomposition {
  PromptFormat format = PromptFormat::Pairwise;
  int n = 0;
  Matrix lambda1, lambda2;
  double lambda3 = 0.0;
  Matrix lambda4;
  Vector lambda5;  // unit norm, first nonzero entry positive
  Matrix reconstruction;
  double residual = 0.0;
  double relative_residual = 0.0;
};

StructuredDecomposition project_Sp(const Matrix& D, PromptFormat format);

struct Lambda4Metrics {
  double offdiag_ratio = 0.0;
  double lastrow_ratio = 0.0;
  double lambda_hat = 0.0;
  bool degenerate = false;  // lambda_hat <= 0; ratios are +inf
};

Lambda4Metrics lambda4_orthonormality(const Matrix& lambda4);

enum class BlockKind { A, B, C, D };
std::string to_string(BlockKind k);

struct Selector {
  BlockKind kind = BlockKind::A;
  int layer = 0;  // 0-based
};

// Monte-Carlo settings for risk derivatives. Samples are drawn in chunks;
// the standard error comes from the spread of the chunk means.
struct MonteCarloOptions {
  int batch = 200000;
  int chunk = 5000;
  Matrix sigma;  // empty means identity
  WStyle wstyle = WStyle::GaussianInvSigma;
  std::uint64_t seed = 0;
};

struct Estimate {
  double value = 0.0;
  double stderr_ = 0.0;
};

// Per-chunk gradients of the risk with respect to dense A, B, C, D of every
// layer. Index as grads[chunk][4 * layer + kind].
std::vector<std::vector<Matrix>> risk_gradient_chunks(const ModelParams& params, const MonteCarloOptions& opts);

Estimate directional_derivative(const ModelParams& params, const Selector& sel, const Matrix& R,
                                const MonteCarloOptions& opts);

// The symmetrized direction used by the critical-point proofs. For D in
// triplet format the arrow-column part is dropped (Λ4 = 0 sets).
Matrix structured_direction(BlockKind kind, const Matrix& R, PromptFormat format, const Matrix& sigma, int n);

struct SymmetryRow {
  Selector selector;
  double d_R = 0.0;
  double d_Rt = 0.0;
  double diff = 0.0;
  double stderr_ = 0.0;
  bool within() const;  // |diff| <= 3 stderr + 1e-6
};

// `trials` random unit directions per selector, all evaluated on the same
// Monte-Carlo chunks.
std::vector<SymmetryRow> criticality_symmetry_check(const ModelParams& params, const std::vector<Selector>& selectors,
                                                    int trials, const MonteCarloOptions& opts);

struct DropoutCoefficients {
  double c0 = 0, c1 = 0, c2 = 0, c3 = 0, c4 = 0, c5 = 0, c6 = 0;
};

DropoutCoefficients dropout_coefficients(double a, double b, double c, double p, int n, int d);

// Weights of the sphere objective s1‖Λ‖₄⁴ + s2 Σ row‖²² + s3 Σ col‖²² + s4 ‖ΛΛᵀ‖²_F.
struct DropoutObjective {
  double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
  static DropoutObjective from(const DropoutCoefficients& c) { return {c.c3, c.c4, c.c5, c.c2}; }
  double value(const Matrix& lambda) const;
  Matrix gradient(const Matrix& lambda) const;
};

struct DropoutResult {
  Matrix lambda;  // n x (n+1), unit Frobenius norm
  double objective = 0.0;
  bool converged = false;
  std::vector<double> trace;  // objective after each accepted step of the best restart
};

DropoutResult dropout_optimize(const DropoutObjective& obj, int n, bool causal, int restarts, int iters,
                             std::uint64_t seed);

// Spearman rank correlation with average ranks for ties.
double spearman(const Vector& a, const Vector& b);

struct BijectionResult {
  bool feasible = false;
  std::optional<Matrix> W;
  double als_residual = 0.0;  // min over rank-one W of ‖Wx − y‖² + ‖Wy − x‖²
  bool als_feasible = false;  // als_residual <= 1e-8 ‖y‖²
};

double als_rank_one_residual(const Vector& x, const Vector& y, int iters = 500, int restarts = 8,
                             std::uint64_t seed = 0);
BijectionResult rank_one_bijection_feasible(const Vector& x, const Vector& y, double tol = 1e-9,
                                            std::uint64_t seed = 0);

// Single-head model with a trailing zero token; returns its final column.
// V, Q are d x d, P is (dp+1) x (dp+1), Z is d x dp.
Vector eos_single_head(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                       const Matrix& Z);
// The equivalent two-head 2d-dimensional model without the extra token.
Vector eos_two_head(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                    const Matrix& Z);
double eos_equivalence_check(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                             const std::vector<Matrix>& Zs);

struct CheckReport {
  std::string check;
  std::string params_ref;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json thresholds = nlohmann::json::object();
  bool pass = false;
};

nlohmann::json to_json(const CheckReport& r);
nlohmann::json to_json(const StructuredDecomposition& s);

}  // namespace tvlab

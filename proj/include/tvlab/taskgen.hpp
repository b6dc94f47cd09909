#pragma once

#include <string>
#include <vector>

#include "tvlab/rng.hpp"
#include "tvlab/tensor.hpp"

namespace tvlab {

enum class PromptFormat { Single, Pairwise, Triplet, InseparablePairwise };
enum class WStyle { GaussianInvSigma, GaussianIdentity, RankOne };

std::string to_string(PromptFormat f);
std::string to_string(WStyle w);
PromptFormat parse_format(const std::string& s);
WStyle parse_wstyle(const std::string& s);

struct DecompositionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RegressionTask {
  int d = 0;
  int n = 0;
  Matrix sigma;
  Matrix x;  // d x n
  Matrix w;  // d x d
  Vector x_test;
  Vector y_test;

  Matrix y() const { return w * x; }
};

struct Prompt {
  Matrix z0;  // 2d x dp
  PromptFormat format = PromptFormat::Single;
  int d = 0;
  int n = 0;
  int dp = 0;
  std::vector<int> arrow_cols;  // 0-based, triplet only
  int label_col = 0;            // 0-based; label slot is rows d..2d of this column
};

int token_count(PromptFormat format, int n);

// Lower Cholesky factor; throws DecompositionError when sigma is not SPD.
Matrix cholesky_lower(const Matrix& sigma);

RegressionTask sample_task(int d, int n, const Matrix& sigma, WStyle wstyle, Rng& rng);
// Reuses an existing Cholesky factor of sigma.
RegressionTask sample_task(int d, int n, const Matrix& sigma, const Matrix& chol, WStyle wstyle, Rng& rng);

Prompt build_prompt(const RegressionTask& task, PromptFormat format);
Matrix mask(int dp);
Prompt fill_label(const Prompt& prompt, const RegressionTask& task);

// Demonstration-order permutation: task.x columns reordered by perm.
RegressionTask permute_demos(const RegressionTask& task, const std::vector<int>& perm);

}  // namespace tvlab

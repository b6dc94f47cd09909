#include "tvlab/taskgen.hpp"

#include <Eigen/Cholesky>

namespace tvlab {

std::string to_string(PromptFormat f) {
  switch (f) {
    case PromptFormat::Single: return "single";
    case PromptFormat::Pairwise: return "pair";
    case PromptFormat::Triplet: return "triplet";
    case PromptFormat::InseparablePairwise: return "insep";
  }
  return "?";
}

std::string to_string(WStyle w) {
  switch (w) {
    case WStyle::GaussianInvSigma: return "gaussian_inv_sigma";
    case WStyle::GaussianIdentity: return "gaussian";
    case WStyle::RankOne: return "rank_one";
  }
  return "?";
}

PromptFormat parse_format(const std::string& s) {
  if (s == "single") return PromptFormat::Single;
  if (s == "pair" || s == "pairwise") return PromptFormat::Pairwise;
  if (s == "triplet") return PromptFormat::Triplet;
  if (s == "insep" || s == "inseparable") return PromptFormat::InseparablePairwise;
  throw std::invalid_argument("unknown format '" + s + "'");
}

WStyle parse_wstyle(const std::string& s) {
  if (s == "gaussian_inv_sigma") return WStyle::GaussianInvSigma;
  if (s == "gaussian" || s == "full_rank") return WStyle::GaussianIdentity;
  if (s == "rank_one") return WStyle::RankOne;
  throw std::invalid_argument("unknown wstyle '" + s + "'");
}

int token_count(PromptFormat format, int n) {
  switch (format) {
    case PromptFormat::Single: return n + 1;
    case PromptFormat::Pairwise:
    case PromptFormat::InseparablePairwise: return 2 * n + 2;
    case PromptFormat::Triplet: return 3 * n + 3;
  }
  return 0;
}

Matrix cholesky_lower(const Matrix& sigma) {
  if (sigma.rows() != sigma.cols()) throw DecompositionError("covariance must be square");
  if (!sigma.isApprox(sigma.transpose(), 1e-12)) throw DecompositionError("covariance must be symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw DecompositionError("covariance is not positive definite");
  return llt.matrixL();
}

namespace {

Matrix standard_normal(Index r, Index c, Rng& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

RegressionTask sample_task(int d, int n, const Matrix& sigma, WStyle wstyle, Rng& rng) {
  return sample_task(d, n, sigma, cholesky_lower(sigma), wstyle, rng);
}

RegressionTask sample_task(int d, int n, const Matrix& sigma, const Matrix& chol, WStyle wstyle, Rng& rng) {
  if (d < 1 || n < 0) throw ContractError("sample_task needs d >= 1 and n >= 0");
  if (sigma.rows() != d || chol.rows() != d) throw DimensionError("covariance dimension mismatch");
  RegressionTask t;
  t.d = d;
  t.n = n;
  t.sigma = sigma;
  switch (wstyle) {
    case WStyle::GaussianInvSigma: {
      // Rows of L^{-T} z have covariance (L L^T)^{-1}.
      const Matrix z = standard_normal(d, d, rng);
      Matrix lt = chol.transpose();
      t.w = lt.triangularView<Eigen::Upper>().solve(z.transpose()).transpose();
      break;
    }
    case WStyle::GaussianIdentity:
      t.w = standard_normal(d, d, rng);
      break;
    case WStyle::RankOne: {
      const Vector w1 = standard_normal(d, 1, rng);
      const Vector w2 = standard_normal(d, 1, rng);
      t.w = w1 * w2.transpose();
      break;
    }
  }
  t.x = chol * standard_normal(d, n, rng);
  t.x_test = chol * Vector(standard_normal(d, 1, rng));
  t.y_test = t.w * t.x_test;
  return t;
}

Prompt build_prompt(const RegressionTask& task, PromptFormat format) {
  const int d = task.d, n = task.n;
  Prompt p;
  p.format = format;
  p.d = d;
  p.n = n;
  p.dp = token_count(format, n);
  p.label_col = p.dp - 1;
  p.z0 = Matrix::Zero(2 * d, p.dp);
  const Matrix y = task.y();
  auto top = [&](int col, const auto& v) { p.z0.block(0, col, d, 1) = v; };
  auto bottom = [&](int col, const auto& v) { p.z0.block(d, col, d, 1) = v; };
  switch (format) {
    case PromptFormat::Single:
      for (int i = 0; i < n; ++i) {
        top(i, task.x.col(i));
        bottom(i, y.col(i));
      }
      top(n, task.x_test);
      break;
    case PromptFormat::Pairwise:
      for (int i = 0; i < n; ++i) {
        top(2 * i, task.x.col(i));
        bottom(2 * i + 1, y.col(i));
      }
      top(2 * n, task.x_test);
      break;
    case PromptFormat::Triplet:
      for (int i = 0; i < n; ++i) {
        top(3 * i, task.x.col(i));
        bottom(3 * i + 2, y.col(i));
      }
      top(3 * n, task.x_test);
      for (int i = 0; i <= n; ++i) p.arrow_cols.push_back(3 * i + 1);
      break;
    case PromptFormat::InseparablePairwise:
      for (int i = 0; i < n; ++i) {
        bottom(2 * i, task.x.col(i));
        bottom(2 * i + 1, y.col(i));
      }
      bottom(2 * n, task.x_test);
      break;
  }
  return p;
}

Matrix mask(int dp) {
  if (dp < 1) throw ContractError("mask needs dp >= 1");
  Matrix m = Matrix::Identity(dp, dp);
  m(dp - 1, dp - 1) = 0.0;
  return m;
}

Prompt fill_label(const Prompt& prompt, const RegressionTask& task) {
  Prompt out = prompt;
  out.z0.block(prompt.d, prompt.label_col, prompt.d, 1) = task.y_test;
  return out;
}

RegressionTask permute_demos(const RegressionTask& task, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != task.n) throw ContractError("permutation length must equal n");
  RegressionTask out = task;
  for (int i = 0; i < task.n; ++i) out.x.col(i) = task.x.col(perm[i]);
  return out;
}

}  // namespace tvlab

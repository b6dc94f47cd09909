#include "tvlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tvlab/training.hpp"

namespace tvlab {

namespace {

bool is_corner(int i, int j) { return i != 1 && j != 1; }

Matrix corner_masked(const Matrix& block) {
  Matrix out = Matrix::Zero(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (is_corner(i, j)) out(i, j) = block(i, j);
  return out;
}

int demos_for(PromptFormat format, Index dp) {
  switch (format) {
    case PromptFormat::Pairwise:
    case PromptFormat::InseparablePairwise:
      if (dp < 2 || dp % 2) break;
      return static_cast<int>(dp / 2 - 1);
    case PromptFormat::Triplet:
      if (dp < 3 || dp % 3) break;
      return static_cast<int>(dp / 3 - 1);
    case PromptFormat::Single:
      throw ContractError("single-token prompts have no structured position matrix");
  }
  throw ContractError("position matrix size " + std::to_string(dp) + " does not match the " + to_string(format) +
                      " format");
}

Matrix sigma_or_identity(const Matrix& sigma, int d) { return sigma.size() ? sigma : Matrix::Identity(d, d); }

Matrix spd_power(const Matrix& s, double power) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0)
    throw DecompositionError("covariance is not positive definite");
  const Eigen::VectorXd ev = es.eigenvalues().array().pow(power);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Matrix random_unit(Index r, Index c, Rng& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m / m.norm();
}

double inner(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b).sum(); }

Estimate chunk_stats(const std::vector<double>& v) {
  Estimate e;
  const double k = static_cast<double>(v.size());
  e.value = std::accumulate(v.begin(), v.end(), 0.0) / k;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - e.value) * (x - e.value);
    e.stderr_ = std::sqrt(ss / (k - 1.0) / k);
  }
  return e;
}

const Matrix& block_of(const ModelParams& p, const Selector& s, Matrix& scratch) {
  const LayerParams& l = p.layers.at(s.layer);
  const int d = p.config.d;
  switch (s.kind) {
    case BlockKind::A:
      scratch = l.a * Matrix::Identity(d, d);
      return scratch;
    case BlockKind::B:
      scratch = l.b * Matrix::Identity(d, d);
      return scratch;
    case BlockKind::C:
      scratch = l.c * (p.config.c_basis.size() ? p.config.c_basis : Matrix::Identity(d, d));
      return scratch;
    case BlockKind::D:
      return l.D;
  }
  return l.D;
}

Vector ranks(const Vector& v) {
  const Index n = v.size();
  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) { return v(a) < v(b); });
  Vector r(n);
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j + 1 < n && v(idx[j + 1]) == v(idx[i])) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (Index k = i; k <= j; ++k) r(idx[k]) = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

StructuredDecomposition project_Sp(const Matrix& D, PromptFormat format) {
  if (D.rows() != D.cols()) throw ContractError("position matrix must be square");
  const int n = demos_for(format, D.rows());
  StructuredDecomposition s;
  s.format = format;
  s.n = n;
  CriticalBlocks blocks;
  if (format == PromptFormat::Triplet) {
    s.lambda1 = Matrix::Zero(3, 3);
    for (int i = 0; i < n; ++i) s.lambda1 += corner_masked(D.block(3 * i, 3 * i, 3, 3));
    if (n > 0) s.lambda1 /= n;
    s.lambda2 = corner_masked(D.block(3 * n, 3 * n, 3, 3));
    for (int i = 0; i <= n; ++i) s.lambda3 += D(3 * i + 1, 3 * i + 1);
    s.lambda3 /= n + 1;
    // Rows are vec(E_x) and vec(E_y); the leading singular pair gives Λ5 ⊗ Λ4.
    const int m = n + 1;
    Eigen::MatrixXd E(2, m * m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        E(0, i * m + j) = D(3 * i, 3 * j + 1);
        E(1, i * m + j) = D(3 * i + 2, 3 * j + 1);
      }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(E, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::Vector2d u = svd.matrixU().col(0);
    Eigen::VectorXd v = svd.singularValues()(0) * svd.matrixV().col(0);
    const Index lead = std::abs(u(0)) > 0.0 ? 0 : 1;
    if (u(lead) < 0.0) {
      u = -u;
      v = -v;
    }
    s.lambda5 = u;
    s.lambda4.resize(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) s.lambda4(i, j) = v(i * m + j);
    blocks = {s.lambda1, s.lambda2, s.lambda3, s.lambda4, s.lambda5};
  } else {
    s.lambda1 = Matrix::Zero(2, 2);
    for (int i = 0; i < n; ++i) s.lambda1 += D.block(2 * i, 2 * i, 2, 2);
    if (n > 0) s.lambda1 /= n;
    s.lambda2 = D.block(2 * n, 2 * n, 2, 2);
    blocks.lambda1 = s.lambda1;
    blocks.lambda2 = s.lambda2;
  }
  s.reconstruction = assemble_D(format, n, blocks);
  s.residual = (D - s.reconstruction).norm();
  const double total = D.norm();
  s.relative_residual = total > 0.0 ? s.residual / total : 0.0;
  return s;
}

Lambda4Metrics lambda4_orthonormality(const Matrix& L4) {
  if (L4.rows() != L4.cols() || L4.rows() < 2) throw ContractError("Lambda4 must be (n+1)x(n+1) with n >= 1");
  const Index n = L4.rows() - 1;
  const Matrix G = L4 * L4.transpose();
  Lambda4Metrics m;
  m.lambda_hat = G.diagonal().head(n).mean();
  if (!(m.lambda_hat > 0.0)) {
    m.degenerate = true;
    m.offdiag_ratio = m.lastrow_ratio = std::numeric_limits<double>::infinity();
    return m;
  }
  m.offdiag_ratio = (G.topLeftCorner(n, n) - m.lambda_hat * Matrix::Identity(n, n)).norm() /
                    (m.lambda_hat * std::sqrt(double(n)));
  m.lastrow_ratio = L4.row(n).norm() / L4.norm();
  return m;
}

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::A: return "A";
    case BlockKind::B: return "B";
    case BlockKind::C: return "C";
    case BlockKind::D: return "D";
  }
  return "?";
}

std::vector<std::vector<Matrix>> risk_gradient_chunks(const ModelParams& params, const MonteCarloOptions& o) {
  params.validate();
  if (o.batch < 1 || o.chunk < 1) throw ContractError("Monte-Carlo batch and chunk must be positive");
  const ModelConfig& cfg = params.config;
  const Matrix sigma = sigma_or_identity(o.sigma, cfg.d);
  const Matrix chol = cholesky_lower(sigma);
  Rng rng(o.seed, 3);
  std::vector<std::vector<Matrix>> out;
  for (int start = 0; start < o.batch; start += o.chunk) {
    const int m = std::min(o.chunk, o.batch - start);
    std::vector<RegressionTask> tasks;
    tasks.reserve(m);
    for (int k = 0; k < m; ++k) tasks.push_back(sample_task(cfg.d, cfg.n, sigma, chol, o.wstyle, rng));
    const TaskBatch batch = build_batch(tasks, cfg.format);
    Tape tape;
    const auto nodes = block_leaf_nodes(tape, params);
    GraphOptions g;
    g.output_only = true;
    const ForwardGraph fg = build_forward(tape, nodes, cfg, batch.prompts, g);
    const Var risk = risk_node(tape, fg, batch.targets, m);
    tape.backward(risk);
    std::vector<Matrix> grads;
    for (const auto& n : nodes) {
      grads.push_back(n.A.grad());
      grads.push_back(n.B.grad());
      grads.push_back(n.C.grad());
      grads.push_back(n.D.grad());
    }
    out.push_back(std::move(grads));
  }
  return out;
}

Estimate directional_derivative(const ModelParams& params, const Selector& sel, const Matrix& R,
                                const MonteCarloOptions& opts) {
  Matrix scratch;
  const Matrix& target = block_of(params, sel, scratch);
  if (R.rows() != target.rows() || R.cols() != target.cols()) throw DimensionError("direction shape mismatch");
  const auto chunks = risk_gradient_chunks(params, opts);
  std::vector<double> v;
  for (const auto& g : chunks) v.push_back(inner(g[4 * sel.layer + static_cast<int>(sel.kind)], R));
  return chunk_stats(v);
}

Matrix structured_direction(BlockKind kind, const Matrix& R, PromptFormat format, const Matrix& sigma_in, int n) {
  if (R.rows() != R.cols()) throw DimensionError("direction must be square");
  const int d = static_cast<int>(R.rows());
  switch (kind) {
    case BlockKind::A:
    case BlockKind::B:
      return (R.trace() / d) * Matrix::Identity(d, d);
    case BlockKind::C: {
      const Matrix sigma = sigma_or_identity(sigma_in, d);
      if (sigma.rows() != d) throw DimensionError("covariance size mismatch");
      const Matrix half = spd_power(sigma, 0.5);
      return ((half * R * half).trace() / d) * spd_power(sigma, -1.0);
    }
    case BlockKind::D:
      break;
  }
  if (demos_for(format, R.rows()) != n) throw DimensionError("direction size does not match n");
  if (format != PromptFormat::Triplet) return project_Sp(R, format).reconstruction;
  Matrix r1 = Matrix::Zero(3, 3);
  for (int i = 0; i < n; ++i) r1 += corner_masked(R.block(3 * i, 3 * i, 3, 3));
  if (n > 0) r1 /= n;
  double r3 = 0.0;
  for (int i = 0; i <= n; ++i) r3 += R(3 * i + 1, 3 * i + 1);
  r3 /= n + 1;
  CriticalBlocks b{r1, corner_masked(R.block(3 * n, 3 * n, 3, 3)), r3, Matrix::Zero(n + 1, n + 1),
                   Vector::Zero(2)};
  return assemble_D(format, n, b);
}

bool SymmetryRow::within() const { return std::abs(diff) <= 3.0 * stderr_ + 1e-6; }

std::vector<SymmetryRow> criticality_symmetry_check(const ModelParams& params, const std::vector<Selector>& selectors,
                                                    int trials, const MonteCarloOptions& opts) {
  if (trials < 1) throw ContractError("need at least one direction");
  const auto chunks = risk_gradient_chunks(params, opts);
  Rng rng(opts.seed, 5);
  std::vector<SymmetryRow> rows;
  for (const Selector& sel : selectors) {
    if (sel.layer < 0 || sel.layer >= params.config.layers) throw ContractError("selector layer out of range");
    Matrix scratch;
    const Matrix& target = block_of(params, sel, scratch);
    for (int t = 0; t < trials; ++t) {
      const Matrix R = random_unit(target.rows(), target.cols(), rng);
      const Matrix Rt = structured_direction(sel.kind, R, params.config.format,
                                             sigma_or_identity(opts.sigma, params.config.d), params.config.n);
      std::vector<double> a, b, diff;
      for (const auto& g : chunks) {
        const Matrix& G = g[4 * sel.layer + static_cast<int>(sel.kind)];
        a.push_back(inner(G, R));
        b.push_back(inner(G, Rt));
        diff.push_back(a.back() - b.back());
      }
      SymmetryRow row;
      row.selector = sel;
      row.d_R = chunk_stats(a).value;
      row.d_Rt = chunk_stats(b).value;
      const Estimate e = chunk_stats(diff);
      row.diff = e.value;
      row.stderr_ = e.stderr_;
      rows.push_back(row);
    }
  }
  return rows;
}

DropoutCoefficients dropout_coefficients(double a, double b, double c, double p, int n, int d) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("p must lie in [0, 1]");
  const double p3 = p * p * p, p4 = p3 * p, p5 = p4 * p, p6 = p5 * p;
  DropoutCoefficients k;
  k.c0 = 1 + n * (2 + d) * p3 * (a * a + b * b) + 2 * n * p3 * (a + b) + 2 * n * (2 + d) * p4 * a * b +
         n * (n - 1) * p6 * (a + b) * (a + b);
  k.c1 = 2 * (a + b) * c * (p4 + (n - 1) * p6 + (1 + d) * p4) + 2 * c * p3;
  k.c2 = c * c * (p4 + d * p6);
  k.c3 = c * c * (1 + d) * (p3 - p4 - p5 + p6);
  k.c4 = c * c * ((1 + d) * (p4 - p6) + (p3 - p4));
  k.c5 = c * c * (1 + d) * (p5 - p6);
  k.c6 = c * c * p6;
  return k;
}

double DropoutObjective::value(const Matrix& L) const {
  const Matrix sq = L.cwiseAbs2();
  const Matrix G = L * L.transpose();
  return s1 * sq.cwiseAbs2().sum() + s2 * sq.rowwise().sum().squaredNorm() + s3 * sq.colwise().sum().squaredNorm() +
         s4 * G.squaredNorm();
}

Matrix DropoutObjective::gradient(const Matrix& L) const {
  const Matrix sq = L.cwiseAbs2();
  const Vector r = sq.rowwise().sum();
  const Vector c = sq.colwise().sum().transpose();
  Matrix g = 4.0 * s1 * L.cwiseProduct(sq);
  g += 4.0 * s2 * (r.asDiagonal() * L);
  g += 4.0 * s3 * (L * c.asDiagonal());
  g += 4.0 * s4 * (L * L.transpose() * L);
  return g;
}

DropoutResult dropout_optimize(const DropoutObjective& obj, int n, bool causal, int restarts, int iters,
                             std::uint64_t seed) {
  if (n < 1 || restarts < 1 || iters < 1) throw ContractError("dropout_optimize needs n, restarts, iters >= 1");
  Matrix mask = Matrix::Ones(n, n + 1);
  if (causal)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < i; ++j) mask(i, j) = 0.0;
  Rng rng(seed, 13);
  DropoutResult best;
  best.objective = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Matrix L = random_unit(n, n + 1, rng).cwiseProduct(mask);
    L /= L.norm();
    double f = obj.value(L);
    double eta = 0.1;
    bool converged = false;
    std::vector<double> trace{f};
    for (int it = 0; it < iters && !converged; ++it) {
      Matrix g = obj.gradient(L).cwiseProduct(mask);
      g -= inner(g, L) * L;  // tangent to the sphere
      if (g.norm() < 1e-12) {
        converged = true;
        break;
      }
      for (;;) {
        Matrix cand = L - eta * g;
        cand /= cand.norm();
        const double fc = obj.value(cand);
        if (fc < f) {
          L = std::move(cand);
          f = fc;
          trace.push_back(f);
          eta *= 1.1;
          break;
        }
        eta *= 0.5;
        if (eta < 1e-16) {
          converged = true;
          break;
        }
      }
    }
    if (f < best.objective) {
      best.lambda = L;
      best.objective = f;
      best.converged = converged;
      best.trace = std::move(trace);
    }
  }
  return best;
}

double spearman(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman needs two equal vectors of length >= 2");
  const Vector ra = ranks(a), rb = ranks(b);
  const Vector ca = ra.array() - ra.mean(), cb = rb.array() - rb.mean();
  const double den = ca.norm() * cb.norm();
  return den > 0.0 ? ca.dot(cb) / den : 0.0;
}

double als_rank_one_residual(const Vector& x, const Vector& y, int iters, int restarts, std::uint64_t seed) {
  const Index d = x.size();
  Rng rng(seed, 17);
  double best = std::numeric_limits<double>::infinity();
  auto residual = [&](const Vector& u, const Vector& v) {
    return (u * v.dot(x) - y).squaredNorm() + (u * v.dot(y) - x).squaredNorm();
  };
  Eigen::MatrixXd A(2, d);
  A.row(0) = x.transpose();
  A.row(1) = y.transpose();
  const auto solver = A.completeOrthogonalDecomposition();
  for (int r = 0; r < restarts; ++r) {
    Vector v = Vector::NullaryExpr(d, [&] { return rng.normal(); });
    Vector u = Vector::Zero(d);
    for (int it = 0; it < iters; ++it) {
      // u minimizes ‖u s1 − y‖² + ‖u s2 − x‖² for s1 = vᵀx, s2 = vᵀy.
      const double s1 = v.dot(x), s2 = v.dot(y);
      const double den = s1 * s1 + s2 * s2;
      if (den <= 0.0) break;
      u = (y * s1 + x * s2) / den;
      const double uu = u.squaredNorm();
      if (uu <= 0.0) break;
      // v minimizes the same residual: xᵀv = uᵀy/‖u‖², yᵀv = uᵀx/‖u‖².
      Eigen::Vector2d rhs(u.dot(y) / uu, u.dot(x) / uu);
      v = solver.solve(rhs);
    }
    best = std::min(best, residual(u, v));
  }
  return best;
}

BijectionResult rank_one_bijection_feasible(const Vector& x, const Vector& y, double tol, std::uint64_t seed) {
  if (x.size() != y.size()) throw DimensionError("x and y must have equal size");
  if (!(x.norm() > 0.0) || !(y.norm() > 0.0)) throw ContractError("x and y must be nonzero");
  BijectionResult r;
  const double scale = std::max(x.norm(), y.norm());
  const Matrix P = x * x.transpose() / x.squaredNorm();
  if ((x - y).norm() <= tol * scale) {
    r.feasible = true;
    r.W = P;
  } else if ((x + y).norm() <= tol * scale) {
    r.feasible = true;
    r.W = -P;
  }
  r.als_residual = als_rank_one_residual(x, y, 500, 8, seed);
  r.als_feasible = r.als_residual <= 1e-8 * y.squaredNorm();
  return r;
}

namespace {

void check_eos_shapes(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                      const Matrix& Z) {
  if (V.size() != Q.size() || V.size() != P.size()) throw ContractError("V, Q, P need one entry per layer");
  const Index d = Z.rows(), dp = Z.cols();
  for (std::size_t l = 0; l < V.size(); ++l) {
    if (V[l].rows() != d || V[l].cols() != d || Q[l].rows() != d || Q[l].cols() != d)
      throw DimensionError("V and Q must be d x d");
    if (P[l].rows() != dp + 1 || P[l].cols() != dp + 1) throw DimensionError("P must be (dp+1) x (dp+1)");
  }
}

}  // namespace

Vector eos_single_head(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                       const Matrix& Z) {
  check_eos_shapes(V, Q, P, Z);
  const Index d = Z.rows(), dp = Z.cols();
  Matrix z = Matrix::Zero(d, dp + 1);
  z.leftCols(dp) = Z;
  for (std::size_t l = 0; l < V.size(); ++l) {
    Matrix zm = z;
    zm.col(dp).setZero();
    z += V[l] * zm * (z.transpose() * Q[l] * z + P[l]);
  }
  return z.col(dp);
}

Vector eos_two_head(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                    const Matrix& Z) {
  check_eos_shapes(V, Q, P, Z);
  const Index d = Z.rows(), dp = Z.cols();
  Matrix z = Matrix::Zero(2 * d, dp);
  z.topRows(d) = Z;
  for (std::size_t l = 0; l < V.size(); ++l) {
    Matrix v1 = Matrix::Zero(2 * d, 2 * d), q1 = v1, v2 = v1, q2 = v1;
    v1.topLeftCorner(d, d) = V[l];
    q1.topLeftCorner(d, d) = Q[l];
    v2.bottomLeftCorner(d, d) = V[l];
    q2.topRightCorner(d, d) = Q[l];
    const Matrix p1 = P[l].topLeftCorner(dp, dp);
    Matrix p2 = Matrix::Zero(dp, dp);
    p2.col(dp - 1) = P[l].col(dp).head(dp);
    const Matrix zt = z.transpose();
    z += v1 * z * (zt * q1 * z + p1) + v2 * z * (zt * q2 * z + p2);
  }
  return z.block(d, dp - 1, d, 1);
}

double eos_equivalence_check(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const std::vector<Matrix>& P,
                             const std::vector<Matrix>& Zs) {
  double worst = 0.0;
  for (const Matrix& Z : Zs) worst = std::max(worst, (eos_single_head(V, Q, P, Z) - eos_two_head(V, Q, P, Z)).norm());
  return worst;
}

nlohmann::json to_json(const CheckReport& r) {
  return {{"check", r.check},
          {"params_ref", r.params_ref},
          {"metrics", r.metrics},
          {"thresholds", r.thresholds},
          {"pass", r.pass}};
}

nlohmann::json to_json(const StructuredDecomposition& s) {
  nlohmann::json j = {{"format", to_string(s.format)},
                      {"n", s.n},
                      {"lambda1", matrix_to_json(s.lambda1)},
                      {"lambda2", matrix_to_json(s.lambda2)},
                      {"residual", s.residual},
                      {"relative_residual", s.relative_residual}};
  if (s.format == PromptFormat::Triplet) {
    j["lambda3"] = s.lambda3;
    j["lambda4"] = matrix_to_json(s.lambda4);
    j["lambda5"] = {s.lambda5(0), s.lambda5(1)};
  }
  return j;
}

}  // namespace tvlab

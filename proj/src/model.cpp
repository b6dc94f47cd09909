#include "tvlab/model.hpp"

#include <algorithm>

namespace tvlab {

using ad::add;
using ad::batched_matmul;
using ad::batched_matmul_t;
using ad::block;
using ad::frobenius_sq;
using ad::hadamard;
using ad::matmul;
using ad::scale;
using ad::scale_by;
using ad::set_block;
using ad::shared_left_mul;

ModelConfig make_config(PromptFormat format, int layers, int d, int n) {
  ModelConfig c;
  c.layers = layers;
  c.d = d;
  c.n = n;
  c.dp = token_count(format, n);
  c.format = format;
  c.c_basis = Matrix::Identity(d, d);
  return c;
}

void ModelParams::validate() const {
  const auto& c = config;
  if (c.layers < 0 || static_cast<int>(layers.size()) != c.layers)
    throw ContractError("layer count does not match config");
  if (c.dp != token_count(c.format, c.n)) throw ContractError("dp inconsistent with format and n");
  if (c.c_basis.rows() != c.d || c.c_basis.cols() != c.d) throw DimensionError("c_basis must be d x d");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    if (p.D.rows() != c.dp || p.D.cols() != c.dp) throw DimensionError("D must be dp x dp");
    const bool insep_first = l == 0 && c.format == PromptFormat::InseparablePairwise;
    if ((p.variant == LayerVariant::InseparableFirst) != insep_first)
      throw ContractError("InseparableFirst must be exactly the first layer of an inseparable model");
  }
}

ModelParams identity_params(const ModelConfig& config) {
  ModelParams p;
  p.config = config;
  p.layers.resize(config.layers);
  for (auto& l : p.layers) l.D = Matrix::Zero(config.dp, config.dp);
  if (config.format == PromptFormat::InseparablePairwise && config.layers > 0)
    p.layers[0].variant = LayerVariant::InseparableFirst;
  return p;
}

Matrix inseparable_row_mask(int dp) {
  Matrix m = Matrix::Ones(dp, dp);
  for (int r = 1; r < dp; r += 2) m.row(r).setZero();
  return m;
}

Matrix position_block(const Matrix& D, int dp) {
  const Index off = D.rows() - dp;
  if (off < 0) throw DimensionError("prompt has more tokens than the model");
  return D.block(off, off, dp, dp);
}

PromptBatch stack_z(const std::vector<Matrix>& zs, int d) {
  if (zs.empty()) throw ContractError("empty batch");
  PromptBatch b;
  b.count = static_cast<int>(zs.size());
  b.d = d;
  b.dp = static_cast<int>(zs.front().cols());
  b.x.resize(Index(b.count) * d, b.dp);
  b.y.resize(Index(b.count) * d, b.dp);
  for (int k = 0; k < b.count; ++k) {
    if (zs[k].rows() != 2 * d || zs[k].cols() != b.dp) throw DimensionError("inconsistent prompt shapes in batch");
    b.x.middleRows(Index(k) * d, d) = zs[k].topRows(d);
    b.y.middleRows(Index(k) * d, d) = zs[k].bottomRows(d);
  }
  return b;
}

PromptBatch stack_prompts(const std::vector<Prompt>& prompts) {
  if (prompts.empty()) throw ContractError("empty batch");
  std::vector<Matrix> zs;
  zs.reserve(prompts.size());
  for (const auto& p : prompts) zs.push_back(p.z0);
  return stack_z(zs, prompts.front().d);
}

Matrix stack_targets(const std::vector<RegressionTask>& tasks) {
  if (tasks.empty()) throw ContractError("empty batch");
  const int d = tasks.front().d;
  Matrix t(Index(tasks.size()) * d, 1);
  for (std::size_t k = 0; k < tasks.size(); ++k) t.middleRows(Index(k) * d, d) = tasks[k].w * tasks[k].x_test;
  return t;
}

std::vector<LayerNodes> constant_nodes(Tape& tape, const ModelParams& params) {
  const int d = params.config.d;
  std::vector<LayerNodes> out;
  for (const auto& p : params.layers) {
    LayerNodes n;
    n.A = tape.constant(p.a * Matrix::Identity(d, d));
    n.B = tape.constant(p.b * Matrix::Identity(d, d));
    n.C = tape.constant(p.c * params.config.c_basis);
    n.D = tape.constant(p.D);
    n.variant = p.variant;
    out.push_back(n);
  }
  return out;
}

std::vector<LayerNodes> scalar_leaf_nodes(Tape& tape, const ModelParams& params, ScalarLeaves& leaves) {
  const int d = params.config.d;
  const Var eye = tape.constant(Matrix::Identity(d, d));
  const Var basis = tape.constant(params.config.c_basis);
  std::vector<LayerNodes> out;
  for (const auto& p : params.layers) {
    auto scalar = [&](double v) { return tape.leaf(Matrix::Constant(1, 1, v)); };
    leaves.a.push_back(scalar(p.a));
    leaves.b.push_back(scalar(p.b));
    leaves.c.push_back(scalar(p.c));
    leaves.D.push_back(tape.leaf(p.D));
    LayerNodes n;
    n.A = scale_by(leaves.a.back(), eye);
    n.B = scale_by(leaves.b.back(), eye);
    n.C = scale_by(leaves.c.back(), basis);
    n.D = leaves.D.back();
    n.variant = p.variant;
    out.push_back(n);
  }
  return out;
}

std::vector<LayerNodes> block_leaf_nodes(Tape& tape, const ModelParams& params) {
  const int d = params.config.d;
  std::vector<LayerNodes> out;
  for (const auto& p : params.layers) {
    LayerNodes n;
    n.A = tape.leaf(p.a * Matrix::Identity(d, d));
    n.B = tape.leaf(p.b * Matrix::Identity(d, d));
    n.C = tape.leaf(p.c * params.config.c_basis);
    n.D = tape.leaf(p.D);
    n.variant = p.variant;
    out.push_back(n);
  }
  return out;
}

namespace {

Matrix expand_rows(const Matrix& m, int d) {
  Matrix out(m.rows() * d, m.cols());
  for (Index k = 0; k < m.rows(); ++k) out.middleRows(k * d, d).rowwise() = m.row(k);
  return out;
}

}  // namespace

ForwardGraph build_forward(Tape& tape, const std::vector<LayerNodes>& layers, const ModelConfig& config,
                           const PromptBatch& batch, const GraphOptions& opts) {
  const int count = batch.count, d = batch.d, dp = batch.dp;
  if (d != config.d) throw DimensionError("prompt dimension does not match model");
  if (dp > config.dp || dp < 1) throw DimensionError("prompt token count does not fit the model");
  const Index rows = Index(count) * d;
  const double s = config.attention_scale();
  const int L = static_cast<int>(layers.size());
  if (opts.dropout && static_cast<int>(opts.dropout->size()) < L) throw ContractError("missing dropout masks");

  ForwardGraph g;
  g.x.push_back(tape.constant(batch.x));
  g.y.push_back(tape.constant(batch.y));
  const Var zero_col = tape.constant(Matrix::Zero(rows, 1));
  const Index off = config.dp - dp;

  for (int l = opts.first_layer; l < L; ++l) {
    const LayerNodes& p = layers[l];
    const Var X = g.x.back(), Y = g.y.back();
    const Var D = off == 0 ? p.D : block(p.D, off, config.dp, off, config.dp);
    const Var YM = set_block(Y, zero_col, 0, dp - 1);
    const bool last = l == L - 1;
    Var keep;
    if (opts.dropout) keep = tape.constant(expand_rows((*opts.dropout)[l], d));

    if (p.variant == LayerVariant::InseparableFirst) {
      const Var rowmask = tape.constant(position_block(inseparable_row_mask(config.dp), dp));
      Var Xn = add(X, scale(shared_left_mul(p.A, matmul(YM, hadamard(D, rowmask)), count), s));
      Var Yn = Y;
      if (keep.valid()) {
        Xn = hadamard(Xn, keep);
        Yn = hadamard(Yn, keep);
      }
      g.x.push_back(Xn);
      g.y.push_back(Yn);
      continue;
    }

    if (last && opts.output_only) {
      const Var xq = block(X, 0, rows, dp - 1, dp);
      const Var yq = block(Y, 0, rows, dp - 1, dp);
      const Var cxq = shared_left_mul(p.C, xq, count);
      const Var kq = add(batched_matmul(batched_matmul_t(YM, X, count), cxq, count),
                         matmul(YM, block(D, 0, dp, dp - 1, dp)));
      Var out = add(yq, scale(shared_left_mul(p.B, kq, count), s));
      if (keep.valid()) out = hadamard(out, tape.constant(expand_rows((*opts.dropout)[l].rightCols(1), d)));
      g.out = out;
      return g;
    }

    const Var XM = set_block(X, zero_col, 0, dp - 1);
    const Var kx = add(batched_matmul(matmul(batched_matmul_t(XM, X, count), p.C), X, count), matmul(XM, D));
    const Var ky = add(batched_matmul(matmul(batched_matmul_t(YM, X, count), p.C), X, count), matmul(YM, D));
    Var Xn = add(X, scale(shared_left_mul(p.A, kx, count), s));
    Var Yn = add(Y, scale(shared_left_mul(p.B, ky, count), s));
    if (keep.valid()) {
      Xn = hadamard(Xn, keep);
      Yn = hadamard(Yn, keep);
    }
    g.x.push_back(Xn);
    g.y.push_back(Yn);
  }
  g.out = block(g.y.back(), 0, rows, dp - 1, dp);
  return g;
}

Var risk_node(Tape& tape, const ForwardGraph& graph, const Matrix& targets, int count) {
  const Var r = add(graph.out, tape.constant(targets));
  return scale(frobenius_sq(r), 1.0 / count);
}

std::vector<Matrix> sample_dropout(const ModelConfig& config, int count, int dp, Rng& rng) {
  const double p = config.dropout_p.value_or(1.0);
  std::vector<Matrix> masks;
  for (int l = 0; l < config.layers; ++l) {
    Matrix m(count, dp);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(p) ? 1.0 : 0.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

ForwardResult forward(const ModelParams& params, const Matrix& z0, Rng* rng) {
  const int d = params.config.d;
  if (z0.rows() != 2 * d) throw DimensionError("Z0 must have 2d rows");
  Tape tape;
  const auto nodes = constant_nodes(tape, params);
  const PromptBatch batch = stack_z({z0}, d);
  std::vector<Matrix> masks;
  GraphOptions opts;
  if (rng && params.config.dropout_p) {
    masks = sample_dropout(params.config, 1, batch.dp, *rng);
    opts.dropout = &masks;
  }
  const ForwardGraph g = build_forward(tape, nodes, params.config, batch, opts);
  ForwardResult r;
  for (std::size_t l = 0; l < g.x.size(); ++l) {
    Matrix z(2 * d, batch.dp);
    z << g.x[l].value(), g.y[l].value();
    r.hidden.push_back(std::move(z));
  }
  r.z = r.hidden.back();
  return r;
}

Matrix forward_from(const ModelParams& params, const Matrix& z, int first_layer) {
  const int d = params.config.d;
  Tape tape;
  const auto nodes = constant_nodes(tape, params);
  GraphOptions opts;
  opts.first_layer = first_layer;
  const ForwardGraph g = build_forward(tape, nodes, params.config, stack_z({z}, d), opts);
  Matrix out(2 * d, z.cols());
  out << g.x.back().value(), g.y.back().value();
  return out;
}

Matrix predict_batch(const ModelParams& params, const PromptBatch& batch) {
  constexpr int kChunk = 2000;
  const int d = batch.d;
  Matrix out(batch.count, d);
  for (int start = 0; start < batch.count; start += kChunk) {
    const int m = std::min(kChunk, batch.count - start);
    PromptBatch part;
    part.count = m;
    part.d = d;
    part.dp = batch.dp;
    part.x = batch.x.middleRows(Index(start) * d, Index(m) * d);
    part.y = batch.y.middleRows(Index(start) * d, Index(m) * d);
    Tape tape;
    const auto nodes = constant_nodes(tape, params);
    GraphOptions opts;
    opts.output_only = true;
    const ForwardGraph g = build_forward(tape, nodes, params.config, part, opts);
    out.middleRows(start, m) = Eigen::Map<const Matrix>(g.out.value().data(), m, d);
  }
  return out;
}

Vector predict(const ModelParams& params, const Prompt& prompt) {
  return predict_batch(params, stack_z({prompt.z0}, prompt.d)).row(0).transpose();
}

std::vector<double> icl_risk_per_sample(const ModelParams& params, const std::vector<Prompt>& prompts,
                                        const std::vector<RegressionTask>& tasks) {
  if (prompts.empty() || prompts.size() != tasks.size()) throw ContractError("risk needs a nonempty matched batch");
  const Matrix pred = predict_batch(params, stack_prompts(prompts));
  std::vector<double> r(prompts.size());
  for (std::size_t k = 0; k < prompts.size(); ++k)
    r[k] = (pred.row(Index(k)).transpose() + tasks[k].w * tasks[k].x_test).squaredNorm();
  return r;
}

double icl_risk(const ModelParams& params, const std::vector<Prompt>& prompts,
                const std::vector<RegressionTask>& tasks) {
  const auto r = icl_risk_per_sample(params, prompts, tasks);
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

double risk_reformulated(const ModelParams& params, const Prompt& filled) {
  const int d = filled.d;
  const Matrix yl = forward(params, filled.z0).z.bottomRows(d);
  const int dp = filled.dp;
  const Matrix im = Matrix::Identity(dp, dp) - mask(dp);
  return (im * yl.transpose() * yl * im).trace();
}

Matrix forward_generic(const std::vector<Matrix>& V, const std::vector<Matrix>& Q, const Matrix& z0,
                       const Matrix& P, double scale) {
  if (V.size() != Q.size()) throw DimensionError("V and Q lists differ in length");
  const Index e = z0.rows(), dp = z0.cols();
  if (P.rows() != dp || P.cols() != dp) throw DimensionError("P must be dp x dp");
  const Matrix M = mask(static_cast<int>(dp));
  Matrix z = z0;
  for (std::size_t l = 0; l < V.size(); ++l) {
    if (V[l].rows() != e || V[l].cols() != e) throw DimensionError("V has wrong shape");
    if (Q[l].rows() != e + dp || Q[l].cols() != e + dp) throw DimensionError("Q has wrong shape");
    Matrix zp(e + dp, dp);
    zp << z, P;
    const Matrix attn = V[l] * z * M * (zp.transpose() * Q[l] * zp);
    z += scale * attn;
  }
  return z;
}

void embed_generic(const ModelParams& params, std::vector<Matrix>& V, std::vector<Matrix>& Q) {
  const int d = params.config.d, dp = params.config.dp;
  V.clear();
  Q.clear();
  for (const auto& p : params.layers) {
    Matrix v = Matrix::Zero(2 * d, 2 * d);
    Matrix q = Matrix::Zero(2 * d + dp, 2 * d + dp);
    if (p.variant == LayerVariant::InseparableFirst) {
      v.block(0, d, d, d) = p.a * Matrix::Identity(d, d);
      q.bottomRightCorner(dp, dp) = p.D.cwiseProduct(inseparable_row_mask(dp));
    } else {
      v.topLeftCorner(d, d) = p.a * Matrix::Identity(d, d);
      v.bottomRightCorner(d, d) = p.b * Matrix::Identity(d, d);
      q.topLeftCorner(d, d) = p.c * params.config.c_basis;
      q.bottomRightCorner(dp, dp) = p.D;
    }
    V.push_back(std::move(v));
    Q.push_back(std::move(q));
  }
}

namespace {

void require_corner_mask(const Matrix& m, const char* name) {
  if (m.rows() != 3 || m.cols() != 3) throw ContractError(std::string(name) + " must be 3x3");
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if ((i == 1 || j == 1) && m(i, j) != 0.0)
        throw ContractError(std::string(name) + " has an entry outside its corner mask");
}

}  // namespace

Matrix assemble_D(PromptFormat format, int n, const CriticalBlocks& b) {
  const int dp = token_count(format, n);
  Matrix D = Matrix::Zero(dp, dp);
  switch (format) {
    case PromptFormat::Single:
      break;
    case PromptFormat::Pairwise:
    case PromptFormat::InseparablePairwise:
      if (b.lambda1.rows() != 2 || b.lambda1.cols() != 2 || b.lambda2.rows() != 2 || b.lambda2.cols() != 2)
        throw ContractError("pairwise blocks must be 2x2");
      for (int i = 0; i < n; ++i) D.block(2 * i, 2 * i, 2, 2) = b.lambda1;
      D.block(2 * n, 2 * n, 2, 2) = b.lambda2;
      break;
    case PromptFormat::Triplet: {
      require_corner_mask(b.lambda1, "Lambda1");
      require_corner_mask(b.lambda2, "Lambda2");
      if (b.lambda4.rows() != n + 1 || b.lambda4.cols() != n + 1) throw ContractError("Lambda4 must be (n+1)x(n+1)");
      if (b.lambda5.size() != 2) throw ContractError("Lambda5 must have two entries");
      for (int i = 0; i < n; ++i) D.block(3 * i, 3 * i, 3, 3) = b.lambda1;
      D.block(3 * n, 3 * n, 3, 3) = b.lambda2;
      for (int i = 0; i <= n; ++i) D(3 * i + 1, 3 * i + 1) += b.lambda3;
      for (int i = 0; i <= n; ++i)
        for (int j = 0; j <= n; ++j) {
          D(3 * i, 3 * j + 1) += b.lambda4(i, j) * b.lambda5(0);
          D(3 * i + 2, 3 * j + 1) += b.lambda4(i, j) * b.lambda5(1);
        }
      break;
    }
  }
  return D;
}

ModelParams construct_critical_params(PromptFormat format, int layers, int d, int n, double lambda,
                                      const std::vector<CriticalBlocks>& blocks, const Matrix& c_basis) {
  if (format != PromptFormat::Single && blocks.size() != 1 && static_cast<int>(blocks.size()) != layers)
    throw ContractError("need one block set or one per layer");
  ModelConfig cfg = make_config(format, layers, d, n);
  cfg.c_basis = c_basis;
  ModelParams p = identity_params(cfg);
  for (int l = 0; l < layers; ++l) {
    auto& lp = p.layers[l];
    lp.a = 1.0;
    lp.b = 1.0;
    lp.c = -lambda;
    if (format == PromptFormat::Single) continue;
    const CriticalBlocks& b = blocks.size() == 1 ? blocks.front() : blocks[l];
    lp.D = assemble_D(format, n, b);
    if (lp.variant == LayerVariant::InseparableFirst &&
        lp.D.cwiseProduct(Matrix::Ones(cfg.dp, cfg.dp) - inseparable_row_mask(cfg.dp)).cwiseAbs().maxCoeff() != 0.0)
      throw ContractError("first inseparable layer needs zero second rows in Lambda1 and Lambda2");
  }
  return p;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("matrix must be a nested array");
  const Index r = static_cast<Index>(j.size());
  const Index c = r == 0 ? 0 : static_cast<Index>(j[0].size());
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i) {
    if (static_cast<Index>(j[i].size()) != c) throw std::invalid_argument("ragged matrix");
    for (Index k = 0; k < c; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

nlohmann::json to_json(const ModelParams& params) {
  const auto& c = params.config;
  nlohmann::json cfg = {
      {"layers", c.layers},
      {"d", c.d},
      {"n", c.n},
      {"dp", c.dp},
      {"format", to_string(c.format)},
      {"c_basis", matrix_to_json(c.c_basis)},
      {"include_inv_n_scale", c.include_inv_n_scale},
      {"dropout_p", c.dropout_p ? nlohmann::json(*c.dropout_p) : nlohmann::json(nullptr)},
  };
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : params.layers)
    layers.push_back({{"a", l.a},
                      {"b", l.b},
                      {"c", l.c},
                      {"D", matrix_to_json(l.D)},
                      {"variant", l.variant == LayerVariant::InseparableFirst ? "inseparable_first" : "standard"}});
  return {{"config", cfg}, {"layers", layers}};
}

ModelParams params_from_json(const nlohmann::json& j) {
  const auto& cj = j.at("config");
  ModelConfig c = make_config(parse_format(cj.at("format").get<std::string>()), cj.at("layers").get<int>(),
                              cj.at("d").get<int>(), cj.at("n").get<int>());
  if (cj.contains("c_basis")) c.c_basis = matrix_from_json(cj.at("c_basis"));
  c.include_inv_n_scale = cj.value("include_inv_n_scale", true);
  if (cj.contains("dropout_p") && !cj.at("dropout_p").is_null()) c.dropout_p = cj.at("dropout_p").get<double>();
  ModelParams p;
  p.config = c;
  for (const auto& lj : j.at("layers")) {
    LayerParams l;
    l.a = lj.at("a").get<double>();
    l.b = lj.at("b").get<double>();
    l.c = lj.at("c").get<double>();
    l.D = matrix_from_json(lj.at("D"));
    l.variant = lj.value("variant", std::string("standard")) == "inseparable_first" ? LayerVariant::InseparableFirst
                                                                                    : LayerVariant::Standard;
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

}  // namespace tvlab

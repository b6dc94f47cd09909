#include <doctest.h>

#include "tvlab/model.hpp"

using namespace tvlab;

namespace {

const PromptFormat kFormats[] = {PromptFormat::Single, PromptFormat::Pairwise, PromptFormat::Triplet,
                                 PromptFormat::InseparablePairwise};

Matrix gaussian(Index r, Index c, Rng& rng, double s = 1.0) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
  return m;
}

ModelParams random_params(PromptFormat fmt, int L, int d, int n, Rng& rng, double scale = 0.4) {
  ModelParams p = identity_params(make_config(fmt, L, d, n));
  for (auto& l : p.layers) {
    l.a = scale * rng.normal();
    l.b = scale * rng.normal();
    l.c = scale * rng.normal();
    l.D = gaussian(p.config.dp, p.config.dp, rng, scale);
    if (l.variant == LayerVariant::InseparableFirst) l.D = l.D.cwiseProduct(inseparable_row_mask(p.config.dp));
  }
  return p;
}

Matrix identity(int d) { return Matrix::Identity(d, d); }

}  // namespace

TEST_CASE("inactive attention leaves the prompt unchanged") {
  Rng rng(1);
  for (auto fmt : kFormats) {
    ModelParams p = random_params(fmt, 3, 3, 4, rng);
    for (auto& l : p.layers) {
      l.c = 0.0;
      l.D.setZero();
    }
    const auto t = sample_task(3, 4, identity(3), WStyle::GaussianIdentity, rng);
    const Prompt pr = build_prompt(t, fmt);
    CHECK(forward(p, pr.z0).z == pr.z0);
  }
}

TEST_CASE("dropout with keep probability one or zero") {
  Rng rng(2);
  ModelParams p = random_params(PromptFormat::Triplet, 2, 3, 4, rng);
  const auto t = sample_task(3, 4, identity(3), WStyle::GaussianIdentity, rng);
  const Prompt pr = build_prompt(t, PromptFormat::Triplet);
  const Matrix plain = forward(p, pr.z0).z;
  p.config.dropout_p = 1.0;
  Rng drop(5);
  CHECK(forward(p, pr.z0, &drop).z == plain);
  p.config.dropout_p = 0.0;
  CHECK(forward(p, pr.z0, &drop).z.isZero(0));
}

TEST_CASE("one-layer single-format construction computes -(1/n) Y X^T x_test") {
  Rng rng(3);
  const int d = 4, n = 10;
  ModelParams p = identity_params(make_config(PromptFormat::Single, 1, d, n));
  p.layers[0].a = 0.0;
  p.layers[0].b = 1.0;
  p.layers[0].c = -1.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
    const Vector want = -(1.0 / n) * t.y() * t.x.transpose() * t.x_test;
    const Vector got = predict(p, build_prompt(t, PromptFormat::Single));
    CHECK((got - want).lpNorm<Eigen::Infinity>() <= 1e-12 * std::max(1.0, want.norm()));
  }
}

TEST_CASE("structured forward agrees with the generic evaluator") {
  Rng rng(4);
  for (auto fmt : kFormats)
    for (int trial = 0; trial < 50; ++trial) {
      const int L = 1 + trial % 3, d = 1 + trial % 3, n = 1 + trial % 4;
      const ModelParams p = random_params(fmt, L, d, n, rng);
      const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
      const Prompt pr = build_prompt(t, fmt);
      std::vector<Matrix> V, Q;
      embed_generic(p, V, Q);
      const Matrix generic = forward_generic(V, Q, pr.z0, identity(pr.dp), 1.0 / n);
      const Matrix fast = forward(p, pr.z0).z;
      CHECK((generic - fast).lpNorm<Eigen::Infinity>() <= 1e-12 * std::max(1.0, fast.lpNorm<Eigen::Infinity>()));
      CHECK((predict(p, pr) - fast.block(d, pr.dp - 1, d, 1)).norm() <= 1e-12 * std::max(1.0, fast.norm()));
    }
}

TEST_CASE("generic evaluator by hand, d=1, dp=2") {
  Rng rng(5);
  const Matrix V = gaussian(2, 2, rng), Q = gaussian(4, 4, rng), z = gaussian(2, 2, rng);
  // With M = diag(1, 0) only the first token contributes as a key/value.
  Matrix zp(4, 2);
  zp << z, identity(2);
  const Matrix kernel = zp.transpose() * Q * zp;
  Matrix want = z;
  for (int j = 0; j < 2; ++j) want.col(j) += V * z.col(0) * kernel(0, j);
  CHECK((forward_generic({V}, {Q}, z, identity(2), 1.0) - want).norm() <= 1e-14);
  CHECK(forward_generic({Matrix::Zero(2, 2)}, {Q}, z, identity(2), 1.0) == z);
}

TEST_CASE("zero parameters predict zero") {
  Rng rng(6);
  for (auto fmt : kFormats) {
    ModelParams p = identity_params(make_config(fmt, 2, 3, 5));
    for (auto& l : p.layers) l.a = l.b = l.c = 0.0;
    const auto t = sample_task(3, 5, identity(3), WStyle::GaussianIdentity, rng);
    CHECK(predict(p, build_prompt(t, fmt)).isZero(0));
  }
}

TEST_CASE("zero-parameter risk equals E|Wx|^2 = d^2") {
  Rng rng(7);
  const int d = 4, n = 5, N = 20000;
  ModelParams p = identity_params(make_config(PromptFormat::Pairwise, 2, d, n));
  std::vector<Prompt> prompts;
  std::vector<RegressionTask> tasks;
  for (int k = 0; k < N; ++k) {
    tasks.push_back(sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng));
    prompts.push_back(build_prompt(tasks.back(), PromptFormat::Pairwise));
  }
  const auto r = icl_risk_per_sample(p, prompts, tasks);
  double mean = 0.0, sq = 0.0;
  for (double v : r) mean += v;
  mean /= N;
  for (double v : r) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / (N - 1) / N);
  CHECK(std::abs(mean - d * d) <= 3.0 * se);
  CHECK(icl_risk(p, prompts, tasks) == doctest::Approx(mean).epsilon(1e-12));
  CHECK_THROWS_AS(icl_risk(p, {}, {}), ContractError);
}

TEST_CASE("one-step construction beats the zero predictor at large n") {
  Rng rng(8);
  const int d = 4, n = 200, N = 400;
  ModelParams zero = identity_params(make_config(PromptFormat::Single, 1, d, n));
  zero.layers[0].a = zero.layers[0].b = 0.0;
  ModelParams gd = zero;
  gd.layers[0].b = 1.0;
  gd.layers[0].c = -1.0;
  std::vector<Prompt> prompts;
  std::vector<RegressionTask> tasks;
  for (int k = 0; k < N; ++k) {
    tasks.push_back(sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng));
    prompts.push_back(build_prompt(tasks.back(), PromptFormat::Single));
  }
  CHECK(icl_risk(gd, prompts, tasks) < 0.2 * icl_risk(zero, prompts, tasks));
}

TEST_CASE("reformulated risk matches the risk per sample") {
  Rng rng(9);
  for (auto fmt : kFormats)
    for (int trial = 0; trial < 100; ++trial) {
      const int L = trial % 4, d = 1 + trial % 4, n = 1 + trial % 5;
      const ModelParams p = random_params(fmt, L, d, n, rng);
      const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
      const Prompt pr = build_prompt(t, fmt);
      const double direct = icl_risk_per_sample(p, {pr}, {t})[0];
      const double reform = risk_reformulated(p, fill_label(pr, t));
      CHECK(std::abs(direct - reform) <= 1e-10 * std::max(1.0, direct));
    }
}

TEST_CASE("reformulated risk edge cases") {
  Rng rng(10);
  const auto t = sample_task(3, 4, identity(3), WStyle::GaussianIdentity, rng);
  ModelParams zero = identity_params(make_config(PromptFormat::Single, 2, 3, 4));
  for (auto& l : zero.layers) l.a = l.b = l.c = 0.0;
  const Prompt filled = fill_label(build_prompt(t, PromptFormat::Single), t);
  CHECK(risk_reformulated(zero, filled) == doctest::Approx(t.y_test.squaredNorm()).epsilon(1e-14));
  const ModelParams none = identity_params(make_config(PromptFormat::Triplet, 0, 3, 4));
  CHECK(risk_reformulated(none, fill_label(build_prompt(t, PromptFormat::Triplet), t)) ==
        doctest::Approx(t.y_test.squaredNorm()).epsilon(1e-14));
}

TEST_CASE("critical construction: pure preconditioned gradient step") {
  Rng rng(11);
  const int d = 3, n = 5;
  const double lambda = 0.7;
  CriticalBlocks b;
  b.lambda1 = Matrix::Zero(2, 2);
  b.lambda2 = Matrix::Zero(2, 2);
  const ModelParams p = construct_critical_params(PromptFormat::Pairwise, 1, d, n, lambda, {b}, identity(d));
  const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
  const Prompt pr = build_prompt(t, PromptFormat::Pairwise);
  const Matrix X = pr.z0.topRows(d);
  const Matrix want = pr.z0 - (lambda / n) * pr.z0 * mask(pr.dp) * X.transpose() * X;
  CHECK((forward(p, pr.z0).z - want).norm() <= 1e-12 * want.norm());
}

TEST_CASE("critical construction: gradient term plus embedding concatenation") {
  Rng rng(12);
  const int d = 3, n = 4, dp = 2 * n + 2;
  const double lambda = 0.4;
  CriticalBlocks b;
  b.lambda1 = gaussian(2, 2, rng);
  b.lambda2 = gaussian(2, 2, rng);
  const ModelParams p = construct_critical_params(PromptFormat::Pairwise, 1, d, n, lambda, {b}, identity(d));
  const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
  const Matrix Z = build_prompt(t, PromptFormat::Pairwise).z0;
  const Matrix X = Z.topRows(d);
  const Matrix gd = -(lambda / n) * Z * mask(dp) * X.transpose() * X;
  Matrix concat = Matrix::Zero(2 * d, dp);
  for (int i = 0; i < n; ++i) concat.middleCols(2 * i, 2) = Z.middleCols(2 * i, 2) * b.lambda1;
  Matrix keep_first = Matrix::Zero(2, 2);
  keep_first(0, 0) = 1.0;
  concat.rightCols(2) = Z.rightCols(2) * keep_first * b.lambda2;
  const Matrix want = Z + gd + concat / n;
  CHECK((forward(p, Z).z - want).norm() <= 1e-12 * want.norm());
}

TEST_CASE("critical construction: triplet arrows only self-magnify when Lambda4 vanishes") {
  Rng rng(13);
  const int d = 2, n = 3;
  CriticalBlocks b;
  b.lambda1 = Matrix::Zero(3, 3);
  b.lambda1(0, 2) = 0.8;
  b.lambda1(2, 0) = -0.3;
  b.lambda2 = Matrix::Zero(3, 3);
  b.lambda2(0, 0) = 0.5;
  b.lambda3 = 1.7;
  b.lambda4 = Matrix::Zero(n + 1, n + 1);
  b.lambda5 = Vector::Zero(2);
  b.lambda5(0) = 1.0;
  const ModelParams p = construct_critical_params(PromptFormat::Triplet, 1, d, n, 0.0, {b}, identity(d));
  const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
  Prompt pr = build_prompt(t, PromptFormat::Triplet);
  for (int c : pr.arrow_cols) pr.z0.col(c) = gaussian(2 * d, 1, rng);
  const Matrix z1 = forward(p, pr.z0).z;
  for (int c : pr.arrow_cols)
    CHECK((z1.col(c) - (1.0 + b.lambda3 / n) * pr.z0.col(c)).norm() <= 1e-12 * pr.z0.col(c).norm());
}

TEST_CASE("critical construction: zero blocks and zero step give the identity model") {
  Rng rng(14);
  for (auto fmt : {PromptFormat::Pairwise, PromptFormat::Triplet}) {
    CriticalBlocks b;
    const int k = fmt == PromptFormat::Triplet ? 3 : 2;
    b.lambda1 = Matrix::Zero(k, k);
    b.lambda2 = Matrix::Zero(k, k);
    b.lambda4 = Matrix::Zero(5, 5);
    b.lambda5 = Vector::Zero(2);
    const ModelParams p = construct_critical_params(fmt, 2, 3, 4, 0.0, {b}, identity(3));
    const auto t = sample_task(3, 4, identity(3), WStyle::GaussianIdentity, rng);
    const Prompt pr = build_prompt(t, fmt);
    CHECK(forward(p, pr.z0).z == pr.z0);
  }
}

TEST_CASE("critical construction rejects blocks outside their masks") {
  CriticalBlocks b;
  b.lambda1 = Matrix::Ones(3, 3);
  b.lambda2 = Matrix::Zero(3, 3);
  b.lambda4 = Matrix::Zero(3, 3);
  b.lambda5 = Vector::Zero(2);
  CHECK_THROWS_AS(construct_critical_params(PromptFormat::Triplet, 1, 2, 2, 0.1, {b}, identity(2)), ContractError);
  CriticalBlocks pb;
  pb.lambda1 = Matrix::Ones(2, 2);
  pb.lambda2 = Matrix::Zero(2, 2);
  CHECK_THROWS_AS(construct_critical_params(PromptFormat::InseparablePairwise, 2, 2, 2, 0.1, {pb}, identity(2)),
                  ContractError);
}

TEST_CASE("demonstration order does not matter at structured parameters") {
  Rng rng(15);
  const int d = 3, n = 5;
  CriticalBlocks b;
  b.lambda1 = Matrix::Zero(3, 3);
  b.lambda1(0, 2) = 0.6;
  b.lambda1(2, 2) = -0.2;
  b.lambda2 = Matrix::Zero(3, 3);
  b.lambda2(0, 2) = 0.3;
  b.lambda3 = 0.9;
  b.lambda4 = Matrix::Zero(n + 1, n + 1);
  b.lambda4.diagonal().setConstant(0.5);
  b.lambda5 = Vector::Zero(2);
  b.lambda5(1) = 1.0;
  const ModelParams p = construct_critical_params(PromptFormat::Triplet, 2, d, n, 0.3, {b}, identity(d));
  std::vector<Prompt> a, c;
  std::vector<RegressionTask> ta, tc;
  for (int k = 0; k < 20; ++k) {
    const auto t = sample_task(d, n, identity(d), WStyle::GaussianIdentity, rng);
    const auto tp = permute_demos(t, {4, 2, 0, 3, 1});
    CHECK((predict(p, build_prompt(t, PromptFormat::Triplet)) - predict(p, build_prompt(tp, PromptFormat::Triplet)))
              .norm() <= 1e-12);
    ta.push_back(t);
    tc.push_back(tp);
    a.push_back(build_prompt(t, PromptFormat::Triplet));
    c.push_back(build_prompt(tp, PromptFormat::Triplet));
  }
  CHECK(icl_risk(p, a, ta) == doctest::Approx(icl_risk(p, c, tc)).epsilon(1e-12));
}

TEST_CASE("the first inseparable layer never changes Y") {
  Rng rng(16);
  ModelParams p = random_params(PromptFormat::InseparablePairwise, 1, 3, 4, rng);
  const auto t = sample_task(3, 4, identity(3), WStyle::GaussianIdentity, rng);
  const Prompt pr = build_prompt(t, PromptFormat::InseparablePairwise);
  const auto r = forward(p, pr.z0);
  CHECK(r.z.bottomRows(3) == pr.z0.bottomRows(3));
  CHECK(!r.z.topRows(3).isZero(0));
}

TEST_CASE("shorter prompts use the trailing positions") {
  Rng rng(17);
  const ModelParams p = random_params(PromptFormat::Triplet, 2, 2, 4, rng);
  const auto t = sample_task(2, 1, identity(2), WStyle::GaussianIdentity, rng);
  const Prompt pr = build_prompt(t, PromptFormat::Triplet);
  ModelParams sub = p;
  for (auto& l : sub.layers) l.D = position_block(l.D, pr.dp);
  std::vector<Matrix> V, Q;
  embed_generic(sub, V, Q);
  // embed_generic sizes Q from config.dp, so rebuild at the prompt size.
  for (std::size_t l = 0; l < Q.size(); ++l) {
    Matrix q = Matrix::Zero(4 + pr.dp, 4 + pr.dp);
    q.topLeftCorner(2, 2) = Q[l].topLeftCorner(2, 2);
    q.bottomRightCorner(pr.dp, pr.dp) = sub.layers[l].D;
    Q[l] = q;
  }
  const Matrix generic = forward_generic(V, Q, pr.z0, identity(pr.dp), 1.0 / 4);
  CHECK((forward(p, pr.z0).z - generic).norm() <= 1e-12 * generic.norm());
}

TEST_CASE("replaying from a hidden state reproduces the full forward") {
  Rng rng(18);
  const ModelParams p = random_params(PromptFormat::Triplet, 3, 2, 3, rng);
  const auto t = sample_task(2, 3, identity(2), WStyle::GaussianIdentity, rng);
  const Prompt pr = build_prompt(t, PromptFormat::Triplet);
  const auto r = forward(p, pr.z0);
  CHECK(forward_from(p, r.hidden[1], 1) == r.z);
}

TEST_CASE("parameter JSON round-trips exactly") {
  Rng rng(19);
  ModelParams p = random_params(PromptFormat::InseparablePairwise, 2, 3, 4, rng);
  p.config.dropout_p = 0.9;
  const auto j = to_json(p);
  const ModelParams q = params_from_json(nlohmann::json::parse(j.dump()));
  CHECK(q.config.format == p.config.format);
  CHECK(q.config.dropout_p == p.config.dropout_p);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(q.layers[l].a == p.layers[l].a);
    CHECK(q.layers[l].c == p.layers[l].c);
    CHECK(q.layers[l].D == p.layers[l].D);
    CHECK(q.layers[l].variant == p.layers[l].variant);
  }
}

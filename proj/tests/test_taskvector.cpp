#include <doctest.h>

#include <cmath>

#include "tvlab/taskvector.hpp"

using namespace tvlab;

namespace {

constexpr int kD = 3;
constexpr int kN = 5;

// Triplet critical params with a generic Λ4 and c = -0.4.
ModelParams critical_triplet(int layers = 2, double a = 1.0) {
  Rng rng(21);
  CriticalBlocks b;
  b.lambda1 = Matrix::Zero(3, 3);
  b.lambda1(0, 0) = 0.3;
  b.lambda1(2, 2) = -0.2;
  b.lambda1(0, 2) = 0.1;
  b.lambda2 = Matrix::Zero(3, 3);
  b.lambda2(2, 0) = 0.5;
  b.lambda2(0, 2) = 0.4;
  b.lambda3 = 0.7;
  b.lambda4 = Matrix(kN + 1, kN + 1);
  for (Index i = 0; i < b.lambda4.size(); ++i) b.lambda4.data()[i] = rng.normal();
  b.lambda5 = Vector(2);
  b.lambda5 << 0.6, 0.8;
  ModelParams p = construct_critical_params(PromptFormat::Triplet, layers, kD, kN, 0.4, {b},
                                            Matrix::Identity(kD, kD));
  for (auto& l : p.layers) l.a = a;
  return p;
}

RegressionTask task(std::uint64_t seed, WStyle w = WStyle::RankOne) {
  Rng rng(seed);
  return sample_task(kD, kN, Matrix::Identity(kD, kD), w, rng);
}

}  // namespace

TEST_CASE("all-zero triplet prompt gives a zero task vector") {
  const ModelParams p = critical_triplet();
  Prompt pr = build_prompt(task(1), PromptFormat::Triplet);
  pr.z0.setZero();
  const auto tv = extract_tv(p, pr);
  REQUIRE(tv.size() == 1);
  CHECK(tv[0].v.isZero(0.0));
  CHECK(tv[0].source_arrow == 3 * kN + 1);
  CHECK(extract_tv(p, pr, 1, ArrowSelect::AllArrows).size() == kN + 1);
}

TEST_CASE("layer-1 task vector is the Λ4-weighted combination of demonstrations") {
  const double a = 1.3;
  const ModelParams p = critical_triplet(2, a);
  const RegressionTask t = task(2);
  const Prompt pr = build_prompt(t, PromptFormat::Triplet);
  const Matrix& D = p.layers[0].D;
  const double b = p.layers[0].b;
  // Top: (a/n) Σ_{i≤n} x_i D[3i, 3n+1]; bottom: (b/n) Σ_{i<n} y_i D[3i+2, 3n+1].
  Vector top = Vector::Zero(kD), bottom = Vector::Zero(kD);
  const Matrix y = t.y();
  for (int i = 0; i < kN; ++i) {
    top += t.x.col(i) * D(3 * i, 3 * kN + 1);
    bottom += y.col(i) * D(3 * i + 2, 3 * kN + 1);
  }
  top += t.x_test * D(3 * kN, 3 * kN + 1);
  top *= a / kN;
  bottom *= b / kN;
  const TaskVector tv = extract_tv(p, pr).front();
  CHECK((tv.v.head(kD) - top).norm() < 1e-12);
  CHECK((tv.v.tail(kD) - bottom).norm() < 1e-12);
}

TEST_CASE("extract_tv rejects other formats and bad layers") {
  const ModelParams p = critical_triplet();
  const Prompt pair = build_prompt(task(3), PromptFormat::Pairwise);
  CHECK_THROWS_AS(extract_tv(p, pair), ContractError);
  const Prompt trip = build_prompt(task(3), PromptFormat::Triplet);
  CHECK_THROWS_AS(extract_tv(p, trip, 0), ContractError);
  CHECK_THROWS_AS(extract_tv(p, trip, 3), ContractError);
  CHECK_NOTHROW(extract_tv(p, trip, 2));
}

TEST_CASE("layer-1 extraction is linear in the prompt when c1 = 0") {
  ModelParams p = critical_triplet();
  p.layers[0].c = 0.0;
  Prompt A = build_prompt(task(4), PromptFormat::Triplet);
  const Prompt B = build_prompt(task(5), PromptFormat::Triplet);
  Prompt S = A;
  S.z0 += B.z0;
  const Vector lhs = extract_tv(p, S).front().v;
  const Vector rhs = extract_tv(p, A).front().v + extract_tv(p, B).front().v;
  CHECK((lhs - rhs).norm() < 1e-12 * (1 + rhs.norm()));
}

TEST_CASE("normalize") {
  TaskVector tv;
  tv.v = Vector::Zero(4);
  CHECK_THROWS_AS(normalize(tv), ContractError);
  tv.v << 3, 0, 4, 0;
  const TaskVector u = normalize(tv);
  CHECK(u.normalized);
  CHECK(std::abs(u.v.norm() - 1.0) < 1e-12);
  CHECK((normalize(u).v - u.v).norm() < 1e-15);
  TaskVector scaled = tv;
  scaled.v *= 17.5;
  CHECK((normalize(scaled).v - u.v).norm() < 1e-15);
}

TEST_CASE("normalized risk reference values") {
  Vector y(3);
  y << 1, -2, 0.5;
  CHECK(normalized_risk(-2.0 * y, y) == doctest::Approx(0.0));
  CHECK(normalized_risk(y, y) == doctest::Approx(2.0));
  Vector perp(3);
  perp << 2, 1, 0;
  CHECK(normalized_risk(perp, y) == doctest::Approx(std::sqrt(2.0)));
  CHECK_THROWS_AS(normalized_risk(Vector::Zero(3), y), ContractError);
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    Vector a(3), b(3);
    for (int i = 0; i < 3; ++i) {
      a(i) = rng.normal();
      b(i) = rng.normal();
    }
    const double r = normalized_risk(a, b);
    CHECK(r >= 0.0);
    CHECK(r <= 2.0 + 1e-15);
  }
}

TEST_CASE("zero-shot injection") {
  const ModelParams p = critical_triplet();
  Vector x(kD);
  x << 0.3, -1.0, 2.0;
  TaskVector zero;
  zero.v = Vector::Zero(2 * kD);
  CHECK(inject_zero_shot(p, x, zero).isZero(0.0));

  const Prompt pr = build_prompt(task(7), PromptFormat::Triplet);
  const TaskVector tv = extract_tv(p, pr).front();
  TaskVector scaled = tv;
  scaled.v *= 4.0;
  const Vector o1 = inject_zero_shot(p, x, normalize(tv));
  const Vector o2 = inject_zero_shot(p, x, normalize(scaled));
  CHECK((o1 - o2).norm() < 1e-12 * (1 + o1.norm()));

  // Explicit three-token prompt through the ordinary forward pass.
  Matrix z = Matrix::Zero(2 * kD, 3);
  z.block(0, 0, kD, 1) = x;
  z.col(1) = normalize(tv).v;
  const Matrix out = forward(p, z).z;
  CHECK((out.block(kD, 2, kD, 1) - o1).norm() < 1e-12);
}

TEST_CASE("multi-vector injection") {
  const ModelParams p = critical_triplet();
  const Prompt pr = build_prompt(task(8), PromptFormat::Triplet);
  const auto tvs = extract_tv(p, pr, 1, ArrowSelect::AllArrows);
  std::vector<TaskVector> short_list(tvs.begin(), tvs.end() - 1);
  CHECK_THROWS_AS(inject_multi(p, pr, short_list), ContractError);

  // With no demonstrations the prompt is the zero-shot layout.
  RegressionTask t0 = task(9);
  t0.n = 0;
  t0.x = Matrix(kD, 0);
  const Prompt empty = build_prompt(t0, PromptFormat::Triplet);
  const TaskVector tv = normalize(tvs.back());
  CHECK((inject_multi(p, empty, {tv}) - inject_zero_shot(p, t0.x_test, tv)).norm() < 1e-12);

  // Re-injecting the prompt's own layer-1 arrow states replays the forward pass.
  const Vector replay = inject_at_layer(p, pr, tvs, 1);
  const Vector plain = predict(p, pr);
  CHECK((replay - plain).norm() < 1e-12 * (1 + plain.norm()));
}

TEST_CASE("perturbation weights") {
  const ModelParams p = critical_triplet();
  const RegressionTask t = task(10);
  PerturbOptions o;
  o.mode = PerturbMode::AddNoise;
  o.noise = 0.0;
  o.trials = 4;
  CHECK(perturbation_weights(p, t, o).isZero(0.0));

  o.noise = 0.5;
  o.trials = 16;
  const Vector w = perturbation_weights(p, t, o);
  CHECK(w.sum() == doctest::Approx(1.0));
  // Shared noise across demonstrations makes Δtv_i scale with |Λ4(i, n)|.
  const Matrix& D = p.layers[0].D;
  Vector expect(kN);
  for (int i = 0; i < kN; ++i) expect(i) = std::abs(D(3 * i, 3 * kN + 1));
  expect /= expect.sum();
  CHECK((w - expect).cwiseAbs().maxCoeff() < 1e-10);

  o.mode = PerturbMode::Resample;
  o.trials = 8;
  const Vector r = perturbation_weights(p, t, o);
  CHECK(r.sum() == doctest::Approx(1.0));
  CHECK((r.array() >= 0.0).all());
}

TEST_CASE("tv_eval smoke path") {
  const ModelParams p = critical_triplet();
  TvEvalOptions o;
  o.trials = 1;
  const TvEvalTable t = tv_eval(p, {1, 3, kN}, o);
  REQUIRE(t.rows.size() == 3);
  for (const auto& r : t.rows) {
    CHECK(std::isfinite(r.tv_risk));
    CHECK(std::isfinite(r.oneshot_risk));
    CHECK(r.degenerate == 0);
  }
  CHECK(!t.untrained);
  CHECK_THROWS_AS(tv_eval(p, {kN + 1}, o), DimensionError);
  const std::string csv = tv_eval_csv(t);
  CHECK(csv.rfind("n,tv_risk,oneshot_risk,trials,degenerate\r\n", 0) == 0);

  o.trials = 50;
  const TvEvalTable a = tv_eval(p, {kN}, o), b = tv_eval(p, {kN}, o);
  CHECK(a.rows[0].tv_risk == b.rows[0].tv_risk);
}

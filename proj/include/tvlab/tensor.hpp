#pragma once

// Dense reverse-mode autodiff over a tape of Eigen matrices.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tvlab {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Index = Eigen::Index;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace ad {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Scale,
  ScaleBy,
  Hadamard,
  Transpose,
  Block,
  ConcatCols,
  ConcatRows,
  SetBlock,
  FrobeniusSq,
  Sum,
  BatchedMatMul,
  BatchedMatMulT,
  SharedLeftMul,
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;

  std::size_t id() const { return id_; }
  Tape<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  const MatrixT<Scalar>& value() const { return tape_->node(id_).value; }
  // Zero-shaped until backward reaches this node.
  const MatrixT<Scalar>& grad() const { return tape_->node(id_).grad; }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* t, std::size_t id) : tape_(t), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = MatrixT<Scalar>;
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Node {
    Op op = Op::Leaf;
    std::size_t lhs = kNone;
    std::size_t rhs = kNone;
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Index i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    Scalar scalar = Scalar(0);
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(Mat value) { return push(Op::Leaf, std::move(value), kNone, kNone, true); }
  Var<Scalar> constant(Mat value) { return push(Op::Constant, std::move(value), kNone, kNone, false); }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Clears every gradient, then accumulates d(root)/d(node) into all nodes
  // that depend on a leaf.
  void backward(const Var<Scalar>& root);

  Var<Scalar> push(Op op, Mat value, std::size_t lhs, std::size_t rhs, bool needs_grad) {
    Node n;
    n.op = op;
    n.lhs = lhs;
    n.rhs = rhs;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, nodes_.size() - 1);
  }
  Node& mutable_node(std::size_t id) { return nodes_[id]; }
  bool needs(std::size_t id) const { return id != kNone && nodes_[id].needs_grad; }

 private:
  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad.noalias() = g;
    else
      n.grad.noalias() += g;
  }
  void accumulate(std::size_t id, Mat&& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = std::move(g);
    else
      n.grad += g;
  }
  template <typename Expr>
  void accumulate_block(std::size_t id, Index r, Index c, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad.block(r, c, g.rows(), g.cols()) += g;
  }
  void propagate(std::size_t id);

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return *a.tape();
}

inline std::string shape(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

// Small row-major kernels for the per-block products; Eigen's product
// dispatch costs more than the arithmetic at these sizes. Row strides equal
// the column counts. C is overwritten unless accumulate is set.
template <typename Scalar>
void kernel_nn(const Scalar* a, const Scalar* b, Scalar* c, Index m, Index k, Index n, bool accumulate = false) {
  for (Index i = 0; i < m; ++i) {
    Scalar* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, Scalar(0));
    for (Index p = 0; p < k; ++p) {
      const Scalar av = a[i * k + p];
      const Scalar* bp = b + p * n;
      for (Index j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (m x n) = a (m x k) * b^T with b stored n x k.
template <typename Scalar>
void kernel_nt(const Scalar* a, const Scalar* b, Scalar* c, Index m, Index k, Index n, bool accumulate = false) {
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      Scalar acc = accumulate ? c[i * n + j] : Scalar(0);
      const Scalar* ai = a + i * k;
      const Scalar* bj = b + j * k;
      for (Index p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] = acc;
    }
}

// c (m x n) = a^T * b with a stored k x m and b stored k x n.
template <typename Scalar>
void kernel_tn(const Scalar* a, const Scalar* b, Scalar* c, Index m, Index k, Index n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, Scalar(0));
  for (Index p = 0; p < k; ++p) {
    const Scalar* bp = b + p * n;
    for (Index i = 0; i < m; ++i) {
      const Scalar av = a[p * m + i];
      Scalar* ci = c + i * n;
      for (Index j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.cols() != b.rows())
    throw DimensionError("matmul " + detail::shape(a.rows(), a.cols()) + " * " + detail::shape(b.rows(), b.cols()));
  MatrixT<Scalar> v = a.value() * b.value();
  return t.push(Op::MatMul, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add shape mismatch");
  MatrixT<Scalar> v = a.value() + b.value();
  return t.push(Op::Add, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("sub shape mismatch");
  MatrixT<Scalar> v = a.value() - b.value();
  return t.push(Op::Sub, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto& t = *a.tape();
  MatrixT<Scalar> v = s * a.value();
  auto out = t.push(Op::Scale, std::move(v), a.id(), Tape<Scalar>::kNone, t.needs(a.id()));
  t.mutable_node(out.id()).scalar = s;
  return out;
}

// s is a 1x1 node; result is s * a.
template <typename Scalar>
Var<Scalar> scale_by(const Var<Scalar>& s, const Var<Scalar>& a) {
  auto& t = detail::same_tape(s, a);
  if (s.rows() != 1 || s.cols() != 1) throw DimensionError("scale_by needs a 1x1 factor");
  MatrixT<Scalar> v = s.value()(0, 0) * a.value();
  return t.push(Op::ScaleBy, std::move(v), s.id(), a.id(), t.needs(s.id()) || t.needs(a.id()));
}

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("hadamard shape mismatch");
  MatrixT<Scalar> v = a.value().cwiseProduct(b.value());
  return t.push(Op::Hadamard, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  auto& t = *a.tape();
  MatrixT<Scalar> v = a.value().transpose();
  return t.push(Op::Transpose, std::move(v), a.id(), Tape<Scalar>::kNone, t.needs(a.id()));
}

// Half-open ranges [r0, r1) x [c0, c1).
template <typename Scalar>
Var<Scalar> block(const Var<Scalar>& a, Index r0, Index r1, Index c0, Index c1) {
  auto& t = *a.tape();
  if (r0 < 0 || c0 < 0 || r1 < r0 || c1 < c0 || r1 > a.rows() || c1 > a.cols())
    throw DimensionError("block [" + std::to_string(r0) + "," + std::to_string(r1) + ")x[" + std::to_string(c0) +
                         "," + std::to_string(c1) + ") out of range for " + detail::shape(a.rows(), a.cols()));
  MatrixT<Scalar> v = a.value().block(r0, c0, r1 - r0, c1 - c0);
  auto out = t.push(Op::Block, std::move(v), a.id(), Tape<Scalar>::kNone, t.needs(a.id()));
  auto& n = t.mutable_node(out.id());
  n.i0 = r0;
  n.i1 = c0;
  return out;
}

template <typename Scalar>
Var<Scalar> concat_cols(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw DimensionError("concat_cols row mismatch");
  MatrixT<Scalar> v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  return t.push(Op::ConcatCols, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
}

template <typename Scalar>
Var<Scalar> concat_rows(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw DimensionError("concat_rows column mismatch");
  MatrixT<Scalar> v(a.rows() + b.rows(), a.cols());
  v << a.value(), b.value();
  return t.push(Op::ConcatRows, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
}

// Copy of a with the block at (r0, c0) overwritten by b.
template <typename Scalar>
Var<Scalar> set_block(const Var<Scalar>& a, const Var<Scalar>& b, Index r0, Index c0) {
  auto& t = detail::same_tape(a, b);
  if (r0 < 0 || c0 < 0 || r0 + b.rows() > a.rows() || c0 + b.cols() > a.cols())
    throw DimensionError("set_block out of range");
  MatrixT<Scalar> v = a.value();
  v.block(r0, c0, b.rows(), b.cols()) = b.value();
  auto out = t.push(Op::SetBlock, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
  auto& n = t.mutable_node(out.id());
  n.i0 = r0;
  n.i1 = c0;
  return out;
}

template <typename Scalar>
Var<Scalar> frobenius_sq(const Var<Scalar>& a) {
  auto& t = *a.tape();
  MatrixT<Scalar> v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return t.push(Op::FrobeniusSq, std::move(v), a.id(), Tape<Scalar>::kNone, t.needs(a.id()));
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto& t = *a.tape();
  MatrixT<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  return t.push(Op::Sum, std::move(v), a.id(), Tape<Scalar>::kNone, t.needs(a.id()));
}

// a and b hold `blocks` row-stacked matrices; block k of the result is
// a_k * b_k.
template <typename Scalar>
Var<Scalar> batched_matmul(const Var<Scalar>& a, const Var<Scalar>& b, Index blocks) {
  auto& t = detail::same_tape(a, b);
  if (blocks <= 0 || a.rows() % blocks || b.rows() % blocks) throw DimensionError("batched_matmul block count");
  const Index ra = a.rows() / blocks, rb = b.rows() / blocks;
  if (a.cols() != rb) throw DimensionError("batched_matmul inner dimension");
  MatrixT<Scalar> v(a.rows(), b.cols());
  const Index ca = a.cols(), cb = b.cols();
  for (Index k = 0; k < blocks; ++k)
    detail::kernel_nn(a.value().data() + k * ra * ca, b.value().data() + k * rb * cb, v.data() + k * ra * cb, ra, ca, cb);
  auto out = t.push(Op::BatchedMatMul, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
  t.mutable_node(out.id()).i0 = blocks;
  return out;
}

// Block k of the result is a_k * b_kᵀ.
template <typename Scalar>
Var<Scalar> batched_matmul_t(const Var<Scalar>& a, const Var<Scalar>& b, Index blocks) {
  auto& t = detail::same_tape(a, b);
  if (blocks <= 0 || a.rows() % blocks || b.rows() % blocks) throw DimensionError("batched_matmul_t block count");
  if (a.cols() != b.cols()) throw DimensionError("batched_matmul_t inner dimension");
  const Index ra = a.rows() / blocks, rb = b.rows() / blocks;
  MatrixT<Scalar> v(a.rows(), rb);
  const Index ca = a.cols();
  for (Index k = 0; k < blocks; ++k)
    detail::kernel_nt(a.value().data() + k * ra * ca, b.value().data() + k * rb * ca, v.data() + k * ra * rb, ra, ca, rb);
  auto out = t.push(Op::BatchedMatMulT, std::move(v), a.id(), b.id(), t.needs(a.id()) || t.needs(b.id()));
  t.mutable_node(out.id()).i0 = blocks;
  return out;
}

// Block k of the result is m * s_k with m shared across blocks.
template <typename Scalar>
Var<Scalar> shared_left_mul(const Var<Scalar>& m, const Var<Scalar>& s, Index blocks) {
  auto& t = detail::same_tape(m, s);
  if (blocks <= 0 || s.rows() % blocks) throw DimensionError("shared_left_mul block count");
  const Index rs = s.rows() / blocks;
  if (m.cols() != rs) throw DimensionError("shared_left_mul inner dimension");
  const Index rm = m.rows();
  MatrixT<Scalar> v(rm * blocks, s.cols());
  const Index cs = s.cols();
  for (Index k = 0; k < blocks; ++k)
    detail::kernel_nn(m.value().data(), s.value().data() + k * rs * cs, v.data() + k * rm * cs, rm, rs, cs);
  auto out = t.push(Op::SharedLeftMul, std::move(v), m.id(), s.id(), t.needs(m.id()) || t.needs(s.id()));
  t.mutable_node(out.id()).i0 = blocks;
  return out;
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return matmul(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& root) {
  if (root.tape() != this) throw ContractError("root belongs to another tape");
  if (root.rows() != 1 || root.cols() != 1) throw ContractError("backward needs a 1x1 root");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (nodes_[root.id()].needs_grad) {
    nodes_[root.id()].grad = Mat::Ones(1, 1);
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      if (nodes_[id].needs_grad && nodes_[id].grad.size() != 0) propagate(id);
    }
  }
  // Leaves that never received a contribution still report a zero gradient.
  for (auto& n : nodes_)
    if (n.needs_grad && n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
}

template <typename Scalar>
void Tape<Scalar>::propagate(std::size_t id) {
  const Node& n = nodes_[id];
  const Mat& g = n.grad;
  const std::size_t a = n.lhs, b = n.rhs;
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::MatMul:
      if (needs(a)) accumulate(a, g * nodes_[b].value.transpose());
      if (needs(b)) accumulate(b, nodes_[a].value.transpose() * g);
      break;
    case Op::Add:
      accumulate(a, g);
      accumulate(b, g);
      break;
    case Op::Sub:
      accumulate(a, g);
      if (needs(b)) accumulate(b, -g);
      break;
    case Op::Scale:
      if (needs(a)) accumulate(a, n.scalar * g);
      break;
    case Op::ScaleBy: {
      const Mat& x = nodes_[b].value;
      if (needs(a)) {
        Mat gs(1, 1);
        gs(0, 0) = g.cwiseProduct(x).sum();
        accumulate(a, std::move(gs));
      }
      if (needs(b)) accumulate(b, nodes_[a].value(0, 0) * g);
      break;
    }
    case Op::Hadamard:
      if (needs(a)) accumulate(a, g.cwiseProduct(nodes_[b].value));
      if (needs(b)) accumulate(b, g.cwiseProduct(nodes_[a].value));
      break;
    case Op::Transpose:
      if (needs(a)) accumulate(a, g.transpose());
      break;
    case Op::Block:
      accumulate_block(a, n.i0, n.i1, g);
      break;
    case Op::ConcatCols: {
      const Index ca = nodes_[a].value.cols();
      if (needs(a)) accumulate(a, g.leftCols(ca));
      if (needs(b)) accumulate(b, g.rightCols(g.cols() - ca));
      break;
    }
    case Op::ConcatRows: {
      const Index ra = nodes_[a].value.rows();
      if (needs(a)) accumulate(a, g.topRows(ra));
      if (needs(b)) accumulate(b, g.bottomRows(g.rows() - ra));
      break;
    }
    case Op::SetBlock: {
      const Mat& bv = nodes_[b].value;
      if (needs(a)) {
        Mat ga = g;
        ga.block(n.i0, n.i1, bv.rows(), bv.cols()).setZero();
        accumulate(a, std::move(ga));
      }
      if (needs(b)) accumulate(b, g.block(n.i0, n.i1, bv.rows(), bv.cols()));
      break;
    }
    case Op::FrobeniusSq:
      if (needs(a)) accumulate(a, (Scalar(2) * g(0, 0)) * nodes_[a].value);
      break;
    case Op::Sum:
      if (needs(a)) accumulate(a, Mat::Constant(nodes_[a].value.rows(), nodes_[a].value.cols(), g(0, 0)));
      break;
    case Op::BatchedMatMul: {
      const Mat& av = nodes_[a].value;
      const Mat& bv = nodes_[b].value;
      const Index k = n.i0, ra = av.rows() / k, rb = bv.rows() / k, ca = av.cols(), cb = bv.cols();
      if (needs(a)) {
        Mat ga(av.rows(), ca);
        for (Index i = 0; i < k; ++i)
          detail::kernel_nt(g.data() + i * ra * cb, bv.data() + i * rb * cb, ga.data() + i * ra * ca, ra, cb, ca);
        accumulate(a, std::move(ga));
      }
      if (needs(b)) {
        Mat gb(bv.rows(), cb);
        for (Index i = 0; i < k; ++i)
          detail::kernel_tn(av.data() + i * ra * ca, g.data() + i * ra * cb, gb.data() + i * rb * cb, ca, ra, cb);
        accumulate(b, std::move(gb));
      }
      break;
    }
    case Op::BatchedMatMulT: {
      const Mat& av = nodes_[a].value;
      const Mat& bv = nodes_[b].value;
      const Index k = n.i0, ra = av.rows() / k, rb = bv.rows() / k, c = av.cols();
      if (needs(a)) {
        Mat ga(av.rows(), c);
        for (Index i = 0; i < k; ++i)
          detail::kernel_nn(g.data() + i * ra * rb, bv.data() + i * rb * c, ga.data() + i * ra * c, ra, rb, c);
        accumulate(a, std::move(ga));
      }
      if (needs(b)) {
        Mat gb(bv.rows(), c);
        for (Index i = 0; i < k; ++i)
          detail::kernel_tn(g.data() + i * ra * rb, av.data() + i * ra * c, gb.data() + i * rb * c, rb, ra, c);
        accumulate(b, std::move(gb));
      }
      break;
    }
    case Op::SharedLeftMul: {
      const Mat& mv = nodes_[a].value;
      const Mat& sv = nodes_[b].value;
      const Index k = n.i0, rm = mv.rows(), rs = sv.rows() / k, c = sv.cols();
      if (needs(a)) {
        Mat gm = Mat::Zero(rm, rs);
        for (Index i = 0; i < k; ++i)
          detail::kernel_nt(g.data() + i * rm * c, sv.data() + i * rs * c, gm.data(), rm, c, rs, true);
        accumulate(a, std::move(gm));
      }
      if (needs(b)) {
        Mat gs(sv.rows(), c);
        for (Index i = 0; i < k; ++i)
          detail::kernel_tn(mv.data(), g.data() + i * rm * c, gs.data() + i * rs * c, rs, rm, c);
        accumulate(b, std::move(gs));
      }
      break;
    }
  }
}

// Builds f on a fresh tape from leaves holding theta.
template <typename Scalar>
using ScalarFn = std::function<Var<Scalar>(Tape<Scalar>&, const std::vector<Var<Scalar>>&)>;

template <typename Scalar>
Scalar evaluate(const ScalarFn<Scalar>& f, const std::vector<MatrixT<Scalar>>& theta) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> leaves;
  leaves.reserve(theta.size());
  for (const auto& m : theta) leaves.push_back(tape.constant(m));
  const Var<Scalar> out = f(tape, leaves);
  if (out.rows() != 1 || out.cols() != 1) throw ContractError("function must return a 1x1 node");
  const Scalar v = out.value()(0, 0);
  if (!std::isfinite(static_cast<double>(v))) throw EvaluationError("non-finite function value");
  return v;
}

template <typename Scalar>
std::vector<MatrixT<Scalar>> gradient(const ScalarFn<Scalar>& f, const std::vector<MatrixT<Scalar>>& theta) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> leaves;
  leaves.reserve(theta.size());
  for (const auto& m : theta) leaves.push_back(tape.leaf(m));
  const Var<Scalar> out = f(tape, leaves);
  if (!std::isfinite(static_cast<double>(out.value()(0, 0)))) throw EvaluationError("non-finite function value");
  tape.backward(out);
  std::vector<MatrixT<Scalar>> grads;
  grads.reserve(leaves.size());
  for (const auto& l : leaves) grads.push_back(l.grad());
  return grads;
}

// Max over parameter tensors of ‖autodiff − central difference‖_F /
// (‖central difference‖_F + 1e-8).
template <typename Scalar>
Scalar grad_check(const ScalarFn<Scalar>& f, std::vector<MatrixT<Scalar>> theta, Scalar step = Scalar(1e-5)) {
  if (!(step > Scalar(0))) throw ContractError("grad_check step must be positive");
  const auto analytic = gradient(f, theta);
  Scalar worst = Scalar(0);
  for (std::size_t p = 0; p < theta.size(); ++p) {
    MatrixT<Scalar> fd(theta[p].rows(), theta[p].cols());
    for (Index i = 0; i < theta[p].size(); ++i) {
      Scalar& x = theta[p].data()[i];
      const Scalar saved = x;
      x = saved + step;
      const Scalar up = evaluate(f, theta);
      x = saved - step;
      const Scalar down = evaluate(f, theta);
      x = saved;
      fd.data()[i] = (up - down) / (Scalar(2) * step);
    }
    const Scalar err = (analytic[p] - fd).norm() / (fd.norm() + Scalar(1e-8));
    if (err > worst) worst = err;
  }
  return worst;
}

}  // namespace ad
}  // namespace tvlab

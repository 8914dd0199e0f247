#pragma once

// Reverse-mode automatic differentiation on a flat tape of nodes.
//
// A Tape records every primitive as it is built; Var is a lightweight handle
// (tape pointer + node id).  backward() runs a single reverse sweep seeding
// one or more roots, accumulating gradients into every node that was marked
// as requiring them.  The forward pass for each node is a pure function of
// its inputs, so replay() can recompute the whole graph bit-identically from
// the current leaf values.
//
// All arithmetic is double precision.  Elementwise kernels and matrix
// products are routed through Eigen for vectorization; results do not depend
// on thread count because a tape is always evaluated by one thread.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/tensor.hpp"

namespace nf {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  scale,    // x * c0
  offset,   // x + c0
  clamp,    // min(max(x, c0), c1), pass-through gradient inside the range
  exp_op,
  log_op,
  sqrt_op,
  sin_op,
  cos_op,
  relu,
  softplus,
  sigmoid,
  matmul,   // optional transpose flags, rank-2 or batched rank-3
  affine,   // X*W + b with X rows flattened
  concat,
  slice,
  reshape,
  permute,
  repeat,   // tile n copies along an axis
  reduce_sum,
  reduce_mean,
  softmax,     // over last axis, optional key mask
  layer_norm,  // over last axis, learned gain/bias
  gather,      // select rows along axis 0
  bilinear,    // bilinear sample of a [H,W,C] grid at [N,2] pixel coords
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::scale: return "scale";
    case Op::offset: return "offset";
    case Op::clamp: return "clamp";
    case Op::exp_op: return "exp";
    case Op::log_op: return "log";
    case Op::sqrt_op: return "sqrt";
    case Op::sin_op: return "sin";
    case Op::cos_op: return "cos";
    case Op::relu: return "relu";
    case Op::softplus: return "softplus";
    case Op::sigmoid: return "sigmoid";
    case Op::matmul: return "matmul";
    case Op::affine: return "affine";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::reshape: return "reshape";
    case Op::permute: return "permute";
    case Op::repeat: return "repeat";
    case Op::reduce_sum: return "reduce_sum";
    case Op::reduce_mean: return "reduce_mean";
    case Op::softmax: return "softmax";
    case Op::layer_norm: return "layer_norm";
    case Op::gather: return "gather";
    case Op::bilinear: return "bilinear";
  }
  return "?";
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  const Tensor& value() const;
};

namespace detail {

using EMap = Eigen::Map<Eigen::ArrayXd>;
using CEMap = Eigen::Map<const Eigen::ArrayXd>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline EMap emap(Tensor& t) { return EMap(t.ptr(), t.numel()); }
inline CEMap emap(const Tensor& t) { return CEMap(t.ptr(), t.numel()); }

// C(m,n) = op(A) * op(B), row-major buffers; op transposes when the flag is
// set.  A is (ta ? k x m : m x k), B is (tb ? n x k : k x n).
inline void gemm(const double* A, const double* B, double* C, i64 m, i64 n, i64 k,
                 bool ta, bool tb, bool acc) {
  Eigen::Map<const RowMat> a(A, ta ? k : m, ta ? m : k);
  Eigen::Map<const RowMat> b(B, tb ? n : k, tb ? k : n);
  Eigen::Map<RowMat> c(C, m, n);
  if (!ta && !tb) {
    if (acc) c.noalias() += a * b; else c.noalias() = a * b;
  } else if (ta && !tb) {
    if (acc) c.noalias() += a.transpose() * b; else c.noalias() = a.transpose() * b;
  } else if (!ta && tb) {
    if (acc) c.noalias() += a * b.transpose(); else c.noalias() = a * b.transpose();
  } else {
    if (acc) c.noalias() += a.transpose() * b.transpose(); else c.noalias() = a.transpose() * b.transpose();
  }
}

}  // namespace detail

struct Node {
  Op op = Op::leaf;
  Shape shape;
  Tensor value;
  Tensor grad;              // allocated on demand during backward
  std::vector<int> inputs;
  bool needs_grad = false;  // true if this node or any ancestor wants gradients

  // op parameters
  double c0 = 0.0, c1 = 0.0;
  int axis = 0;
  i64 i0 = 0, i1 = 0;                       // slice start/length, repeat count in i0
  std::array<int, 4> perm{{0, 1, 2, 3}};
  bool ta = false, tb = false;              // matmul transpose flags
  std::shared_ptr<std::vector<std::uint8_t>> mask;  // softmax key mask, [groups, S_k]
  i64 mask_rows_per_group = 1;                      // logits rows covered by one mask row
  std::shared_ptr<std::vector<i64>> indices;        // gather row indices
  Tensor aux;                                       // layer_norm: per-row mean / inv-std
};

class Tape {
 public:
  // When set, every op validates that its output is finite and throws
  // otherwise.  On by default; training configs may disable it for speed.
  bool check_finite = true;

  i64 size() const { return i64(nodes_.size()); }

  const Node& node(int id) const { return nodes_[std::size_t(id)]; }

  const Tensor& value(Var v) const {
    check_var(v);
    return nodes_[std::size_t(v.id)].value;
  }

  const Shape& shape(Var v) const {
    check_var(v);
    return nodes_[std::size_t(v.id)].shape;
  }

  // Gradient accumulated by the last backward() call; zeros if none reached
  // the node.
  Tensor grad(Var v) const {
    check_var(v);
    const Node& n = nodes_[std::size_t(v.id)];
    if (has_buffer(n.grad, n.shape)) return n.grad;
    return Tensor::zeros(n.shape);
  }

  Var leaf(Tensor t, bool needs_grad = false) {
    Node n;
    n.op = Op::leaf;
    n.shape = t.shape;
    n.value = std::move(t);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  Var constant(Tensor t) { return leaf(std::move(t), false); }
  Var constant_scalar(double v) { return leaf(Tensor::scalar(v), false); }

  // ---- elementwise binary (shapes must match exactly) ----
  Var add(Var a, Var b) { return binary(Op::add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::mul, a, b); }
  Var div(Var a, Var b) { return binary(Op::div, a, b); }

  // ---- elementwise unary ----
  Var neg(Var a) { return unary(Op::neg, a); }
  Var exp(Var a) { return unary(Op::exp_op, a); }
  Var log(Var a) { return unary(Op::log_op, a); }
  Var sqrt(Var a) { return unary(Op::sqrt_op, a); }
  Var sin(Var a) { return unary(Op::sin_op, a); }
  Var cos(Var a) { return unary(Op::cos_op, a); }
  Var relu(Var a) { return unary(Op::relu, a); }
  Var softplus(Var a) { return unary(Op::softplus, a); }
  Var sigmoid(Var a) { return unary(Op::sigmoid, a); }

  // Scalar broadcast is supported through these; general shape broadcasting
  // is deliberately not.
  Var scale(Var a, double c) {
    Node n = make_unary(Op::scale, a);
    n.c0 = c;
    return push(std::move(n));
  }
  Var offset(Var a, double c) {
    Node n = make_unary(Op::offset, a);
    n.c0 = c;
    return push(std::move(n));
  }
  Var clamp(Var a, double lo, double hi) {
    NF_CHECK(lo <= hi);
    Node n = make_unary(Op::clamp, a);
    n.c0 = lo;
    n.c1 = hi;
    return push(std::move(n));
  }

  // ---- structure ----
  Var reshape(Var a, Shape s) {
    check_var(a);
    NF_CHECK(s.numel() == shape(a).numel(), "reshape " << shape(a).str() << " -> " << s.str());
    Node n;
    n.op = Op::reshape;
    n.shape = s;
    n.inputs = {a.id};
    n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
    n.value = nodes_[std::size_t(a.id)].value.reshaped(s);  // zero-copy
    return push(std::move(n));
  }

  Var concat(const std::vector<Var>& parts, int axis);
  Var slice(Var a, int axis, i64 start, i64 len);
  Var permute(Var a, std::array<int, 4> perm, int out_rank);
  Var repeat(Var a, int axis, i64 times);
  Var reduce_sum(Var a, int axis = -1);   // axis -1 reduces everything to a scalar
  Var reduce_mean(Var a, int axis = -1);
  Var gather(Var a, std::vector<i64> rows);

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var affine(Var x, Var w, Var b);

  // Softmax over the last axis.  When a mask is given, masked keys get
  // probability exactly 0; rows with no valid key fall back to uniform.
  // mask has one row of S_k flags per group of `rows_per_group` logit rows.
  Var softmax(Var a, std::shared_ptr<std::vector<std::uint8_t>> mask = nullptr,
              i64 rows_per_group = 1);

  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

  // Differentiable bilinear sampling.  grid is [H,W,C]; coords is [N,2]
  // pixel coordinates (u,v) where (0.5,0.5) is the center of pixel (0,0),
  // u along width and v along height.  Corner indices are clamped to the
  // image, matching edge-extension behavior.
  Var bilinear_sample_2d(Var grid, Var coords);

  // ---- reverse sweep ----
  // Seeds `root` with `seed` (or ones when omitted) and accumulates
  // gradients into every needs_grad node.  With release_buffers, value and
  // gradient storage of interior nodes is freed as the sweep passes them;
  // the tape cannot be replayed or re-read afterwards except at leaves.
  void backward(Var root, const Tensor& seed, bool release_buffers = false) {
    backward_multi({{root, seed}}, release_buffers);
  }
  void backward(Var root, bool release_buffers = false) {
    backward_multi({{root, Tensor::full(shape(root), 1.0)}}, release_buffers);
  }
  void backward_multi(const std::vector<std::pair<Var, Tensor>>& seeds,
                      bool release_buffers = false);

  // Recomputes every non-leaf value from current leaf contents, in id order.
  void replay();

  void zero_grads() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

 private:
  std::vector<Node> nodes_;

  // True when t's backing buffer is actually allocated for shape s (a
  // default Tensor has a scalar shape but an empty buffer).
  static bool has_buffer(const Tensor& t, const Shape& s) {
    return t.data && i64(t.data->size()) == s.numel();
  }

  void check_var(Var v) const {
    NF_CHECK(v.tape == this && v.id >= 0 && v.id < int(nodes_.size()), "invalid Var");
  }

  Var push(Node n) {
    if (n.op != Op::leaf) compute(n);
    if (check_finite) {
      NF_CHECK(detail::emap(n.value).allFinite(),
               "non-finite values out of op '" << op_name(n.op) << "' shape " << n.shape.str());
    }
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
  }

  Node make_unary(Op op, Var a) {
    check_var(a);
    Node n;
    n.op = op;
    n.shape = shape(a);
    n.inputs = {a.id};
    n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
    return n;
  }

  Var unary(Op op, Var a) { return push(make_unary(op, a)); }

  Var binary(Op op, Var a, Var b) {
    check_var(a);
    check_var(b);
    NF_CHECK(shape(a) == shape(b),
             op_name(op) << " shape mismatch " << shape(a).str() << " vs " << shape(b).str());
    Node n;
    n.op = op;
    n.shape = shape(a);
    n.inputs = {a.id, b.id};
    n.needs_grad = nodes_[std::size_t(a.id)].needs_grad || nodes_[std::size_t(b.id)].needs_grad;
    return push(std::move(n));
  }

  const Tensor& in_val(const Node& n, int i) const {
    return nodes_[std::size_t(n.inputs[std::size_t(i)])].value;
  }

  // Adds g into the gradient slot of node `id`.  `fresh` means g owns its
  // buffer uniquely, so an empty slot may adopt it without copying.
  void accumulate_grad(int id, Tensor&& g, bool fresh) {
    Node& n = nodes_[std::size_t(id)];
    if (!n.needs_grad) return;
    NF_CHECK(g.numel() == n.shape.numel(), "gradient numel mismatch at node " << id);
    if (!has_buffer(n.grad, n.shape)) {
      if (fresh) {
        n.grad = g.reshaped(n.shape);
      } else {
        n.grad = g.clone().reshaped(n.shape);
      }
    } else {
      detail::emap(n.grad) += detail::emap(g);
    }
  }

  void compute(Node& n);
  void backward_node(int id);
};

inline const Shape& Var::shape() const {
  NF_CHECK(tape != nullptr, "null Var");
  return tape->shape(*this);
}
inline const Tensor& Var::value() const {
  NF_CHECK(tape != nullptr, "null Var");
  return tape->value(*this);
}

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

inline Var Tape::concat(const std::vector<Var>& parts, int axis) {
  NF_CHECK(!parts.empty(), "concat of nothing");
  for (Var p : parts) check_var(p);
  const Shape& s0 = shape(parts[0]);
  NF_CHECK(axis >= 0 && axis < s0.rank, "concat axis " << axis << " out of rank " << s0.rank);
  Shape out = s0;
  bool ng = false;
  i64 total = 0;
  for (Var p : parts) {
    const Shape& s = shape(p);
    NF_CHECK(s.rank == s0.rank, "concat rank mismatch");
    for (int i = 0; i < s.rank; ++i)
      if (i != axis)
        NF_CHECK(s[i] == s0[i], "concat extent mismatch at dim " << i << ": " << s.str()
                                                                 << " vs " << s0.str());
    total += s[axis];
    ng = ng || nodes_[std::size_t(p.id)].needs_grad;
  }
  out.dim[std::size_t(axis)] = total;
  Node n;
  n.op = Op::concat;
  n.shape = out;
  n.axis = axis;
  n.needs_grad = ng;
  for (Var p : parts) n.inputs.push_back(p.id);
  return push(std::move(n));
}

inline Var Tape::slice(Var a, int axis, i64 start, i64 len) {
  check_var(a);
  const Shape& s = shape(a);
  NF_CHECK(axis >= 0 && axis < s.rank, "slice axis out of rank");
  NF_CHECK(start >= 0 && len >= 0 && start + len <= s[axis],
           "slice [" << start << "," << start + len << ") out of extent " << s[axis]);
  Node n;
  n.op = Op::slice;
  n.shape = s;
  n.shape.dim[std::size_t(axis)] = len;
  n.axis = axis;
  n.i0 = start;
  n.i1 = len;
  n.inputs = {a.id};
  n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::permute(Var a, std::array<int, 4> perm, int out_rank) {
  check_var(a);
  const Shape& s = shape(a);
  NF_CHECK(out_rank == s.rank, "permute must keep rank");
  bool seen[4] = {false, false, false, false};
  for (int i = 0; i < s.rank; ++i) {
    NF_CHECK(perm[std::size_t(i)] >= 0 && perm[std::size_t(i)] < s.rank, "bad permutation");
    seen[std::size_t(perm[std::size_t(i)])] = true;
  }
  for (int i = 0; i < s.rank; ++i) NF_CHECK(seen[std::size_t(i)], "bad permutation");
  Node n;
  n.op = Op::permute;
  n.perm = perm;
  n.shape.rank = s.rank;
  for (int i = 0; i < s.rank; ++i) n.shape.dim[std::size_t(i)] = s[perm[std::size_t(i)]];
  n.inputs = {a.id};
  n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::repeat(Var a, int axis, i64 times) {
  check_var(a);
  const Shape& s = shape(a);
  NF_CHECK(axis >= 0 && axis < s.rank, "repeat axis out of rank");
  NF_CHECK(times >= 1, "repeat count must be >= 1");
  Node n;
  n.op = Op::repeat;
  n.shape = s;
  n.shape.dim[std::size_t(axis)] = s[axis] * times;
  n.axis = axis;
  n.i0 = times;
  n.inputs = {a.id};
  n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::reduce_sum(Var a, int axis) {
  check_var(a);
  const Shape& s = shape(a);
  Node n;
  n.op = Op::reduce_sum;
  n.axis = axis;
  n.inputs = {a.id};
  n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
  if (axis < 0) {
    n.shape = Shape{};  // scalar
  } else {
    NF_CHECK(axis < s.rank, "reduce axis out of rank");
    n.shape.rank = s.rank - 1;
    int j = 0;
    for (int i = 0; i < s.rank; ++i)
      if (i != axis) n.shape.dim[std::size_t(j++)] = s[i];
  }
  return push(std::move(n));
}

inline Var Tape::reduce_mean(Var a, int axis) {
  Var s = reduce_sum(a, axis);
  const i64 denom = axis < 0 ? shape(a).numel() : shape(a)[axis];
  return scale(s, 1.0 / double(denom));
}

inline Var Tape::gather(Var a, std::vector<i64> rows) {
  check_var(a);
  const Shape& s = shape(a);
  NF_CHECK(s.rank >= 1, "gather needs rank >= 1");
  for (i64 r : rows) NF_CHECK(r >= 0 && r < s[0], "gather row " << r << " out of " << s[0]);
  Node n;
  n.op = Op::gather;
  n.shape = s;
  n.shape.dim[0] = i64(rows.size());
  n.indices = std::make_shared<std::vector<i64>>(std::move(rows));
  n.inputs = {a.id};
  n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  check_var(a);
  check_var(b);
  Shape sa = shape(a), sb = shape(b);
  // A rank-3 left operand with a rank-2 right operand (no transpose on the
  // left) is a plain row-flattened product.
  if (sa.rank == 3 && sb.rank == 2 && !trans_a) {
    Var flat = reshape(a, Shape{sa[0] * sa[1], sa[2]});
    Var out = matmul(flat, b, false, trans_b);
    return reshape(out, Shape{sa[0], sa[1], shape(out)[1]});
  }
  NF_CHECK(sa.rank == sb.rank && (sa.rank == 2 || sa.rank == 3),
           "matmul supports rank-2 or batched rank-3, got " << sa.str() << " x " << sb.str());
  const int off = sa.rank - 2;
  if (off == 1) NF_CHECK(sa[0] == sb[0], "matmul batch mismatch " << sa.str() << " x " << sb.str());
  const i64 m = trans_a ? sa[off + 1] : sa[off];
  const i64 ka = trans_a ? sa[off] : sa[off + 1];
  const i64 kb = trans_b ? sb[off + 1] : sb[off];
  const i64 nn = trans_b ? sb[off] : sb[off + 1];
  NF_CHECK(ka == kb, "matmul inner mismatch " << sa.str() << " x " << sb.str());
  Node n;
  n.op = Op::matmul;
  n.ta = trans_a;
  n.tb = trans_b;
  if (off == 1) n.shape = Shape{sa[0], m, nn};
  else n.shape = Shape{m, nn};
  n.inputs = {a.id, b.id};
  n.needs_grad =
      nodes_[std::size_t(a.id)].needs_grad || nodes_[std::size_t(b.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::affine(Var x, Var w, Var b) {
  check_var(x);
  check_var(w);
  check_var(b);
  const Shape& sx = shape(x);
  const Shape& sw = shape(w);
  const Shape& sb = shape(b);
  NF_CHECK(sw.rank == 2 && sb.rank == 1 && sb[0] == sw[1],
           "affine wants W [k,n], b [n]; got " << sw.str() << ", " << sb.str());
  NF_CHECK(sx.rank >= 1 && sx[sx.rank - 1] == sw[0],
           "affine input " << sx.str() << " does not end in k=" << sw[0]);
  Node n;
  n.op = Op::affine;
  n.shape = sx;
  n.shape.dim[std::size_t(sx.rank - 1)] = sw[1];
  n.inputs = {x.id, w.id, b.id};
  n.needs_grad = nodes_[std::size_t(x.id)].needs_grad ||
                 nodes_[std::size_t(w.id)].needs_grad ||
                 nodes_[std::size_t(b.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::softmax(Var a, std::shared_ptr<std::vector<std::uint8_t>> mask,
                         i64 rows_per_group) {
  check_var(a);
  const Shape& s = shape(a);
  NF_CHECK(s.rank >= 1, "softmax needs rank >= 1");
  const i64 sk = s[s.rank - 1];
  const i64 rows = s.numel() / sk;
  if (mask) {
    NF_CHECK(rows_per_group >= 1 && rows % rows_per_group == 0,
             "softmax mask grouping does not divide rows");
    NF_CHECK(i64(mask->size()) == (rows / rows_per_group) * sk,
             "softmax mask size mismatch");
  }
  Node n;
  n.op = Op::softmax;
  n.shape = s;
  n.mask = std::move(mask);
  n.mask_rows_per_group = rows_per_group;
  n.inputs = {a.id};
  n.needs_grad = nodes_[std::size_t(a.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  check_var(x);
  check_var(gain);
  check_var(bias);
  const Shape& s = shape(x);
  NF_CHECK(s.rank >= 1, "layer_norm needs rank >= 1");
  const i64 d = s[s.rank - 1];
  NF_CHECK(shape(gain).rank == 1 && shape(gain)[0] == d, "layer_norm gain must be [D]");
  NF_CHECK(shape(bias).rank == 1 && shape(bias)[0] == d, "layer_norm bias must be [D]");
  Node n;
  n.op = Op::layer_norm;
  n.shape = s;
  n.c0 = eps;
  n.inputs = {x.id, gain.id, bias.id};
  n.needs_grad = nodes_[std::size_t(x.id)].needs_grad ||
                 nodes_[std::size_t(gain.id)].needs_grad ||
                 nodes_[std::size_t(bias.id)].needs_grad;
  return push(std::move(n));
}

inline Var Tape::bilinear_sample_2d(Var grid, Var coords) {
  check_var(grid);
  check_var(coords);
  const Shape& sg = shape(grid);
  const Shape& sc = shape(coords);
  NF_CHECK(sg.rank == 3, "bilinear grid must be [H,W,C], got " << sg.str());
  NF_CHECK(sc.rank == 2 && sc[1] == 2, "bilinear coords must be [N,2], got " << sc.str());
  Node n;
  n.op = Op::bilinear;
  n.shape = Shape{sc[0], sg[2]};
  n.inputs = {grid.id, coords.id};
  n.needs_grad = nodes_[std::size_t(grid.id)].needs_grad ||
                 nodes_[std::size_t(coords.id)].needs_grad;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// forward evaluation
// ---------------------------------------------------------------------------

inline void Tape::compute(Node& n) {
  using detail::emap;
  switch (n.op) {
    case Op::leaf:
      return;
    case Op::reshape:
      // value already shares the input's buffer; nothing to do on replay
      // either, since the storage is shared.
      if (!has_buffer(n.value, n.shape))
        n.value = nodes_[std::size_t(n.inputs[0])].value.reshaped(n.shape);
      return;
    default:
      break;
  }

  if (!has_buffer(n.value, n.shape)) n.value = Tensor(n.shape);
  Tensor& out = n.value;

  switch (n.op) {
    case Op::add: emap(out) = emap(in_val(n, 0)) + emap(in_val(n, 1)); break;
    case Op::sub: emap(out) = emap(in_val(n, 0)) - emap(in_val(n, 1)); break;
    case Op::mul: emap(out) = emap(in_val(n, 0)) * emap(in_val(n, 1)); break;
    case Op::div: emap(out) = emap(in_val(n, 0)) / emap(in_val(n, 1)); break;
    case Op::neg: emap(out) = -emap(in_val(n, 0)); break;
    case Op::scale: emap(out) = emap(in_val(n, 0)) * n.c0; break;
    case Op::offset: emap(out) = emap(in_val(n, 0)) + n.c0; break;
    case Op::clamp: emap(out) = emap(in_val(n, 0)).max(n.c0).min(n.c1); break;
    case Op::exp_op: emap(out) = emap(in_val(n, 0)).exp(); break;
    case Op::log_op: emap(out) = emap(in_val(n, 0)).log(); break;
    case Op::sqrt_op: emap(out) = emap(in_val(n, 0)).sqrt(); break;
    case Op::sin_op: emap(out) = emap(in_val(n, 0)).sin(); break;
    case Op::cos_op: emap(out) = emap(in_val(n, 0)).cos(); break;
    case Op::relu: emap(out) = emap(in_val(n, 0)).max(0.0); break;
    case Op::softplus: {
      const Tensor& x = in_val(n, 0);
      const double* xp = x.ptr();
      double* op_ = out.ptr();
      const i64 m = x.numel();
      for (i64 i = 0; i < m; ++i) {
        const double v = xp[i];
        op_[i] = v > 30.0 ? v : std::log1p(std::exp(v));
      }
      break;
    }
    case Op::sigmoid: {
      const Tensor& x = in_val(n, 0);
      const double* xp = x.ptr();
      double* op_ = out.ptr();
      const i64 m = x.numel();
      for (i64 i = 0; i < m; ++i) {
        const double v = xp[i];
        if (v >= 0.0) {
          op_[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          op_[i] = e / (1.0 + e);
        }
      }
      break;
    }
    case Op::matmul: {
      const Tensor& a = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      const int off = a.shape.rank - 2;
      const i64 m = n.shape[off];
      const i64 nn = n.shape[off + 1];
      const i64 k = n.ta ? a.shape[off] : a.shape[off + 1];
      const i64 batches = off == 1 ? n.shape[0] : 1;
      const i64 sa = m * k, sb = k * nn, sc = m * nn;
      for (i64 t = 0; t < batches; ++t)
        detail::gemm(a.ptr() + t * sa, b.ptr() + t * sb, out.ptr() + t * sc, m, nn, k,
                     n.ta, n.tb, false);
      break;
    }
    case Op::affine: {
      const Tensor& x = in_val(n, 0);
      const Tensor& w = in_val(n, 1);
      const Tensor& b = in_val(n, 2);
      const i64 k = w.shape[0], nn = w.shape[1];
      const i64 rows = x.numel() / k;
      detail::gemm(x.ptr(), w.ptr(), out.ptr(), rows, nn, k, false, false, false);
      Eigen::Map<detail::RowMat> c(out.ptr(), rows, nn);
      Eigen::Map<const Eigen::RowVectorXd> bv(b.ptr(), nn);
      c.rowwise() += bv;
      break;
    }
    case Op::concat: {
      const int axis = n.axis;
      i64 pre = 1, post = 1;
      for (int i = 0; i < axis; ++i) pre *= n.shape[i];
      for (int i = axis + 1; i < n.shape.rank; ++i) post *= n.shape[i];
      const i64 out_ax = n.shape[axis];
      i64 off = 0;
      for (std::size_t pi = 0; pi < n.inputs.size(); ++pi) {
        const Tensor& part = in_val(n, int(pi));
        const i64 ax = part.shape[axis];
        const double* src = part.ptr();
        for (i64 p = 0; p < pre; ++p)
          std::memcpy(out.ptr() + (p * out_ax + off) * post, src + p * ax * post,
                      std::size_t(ax * post) * sizeof(double));
        off += ax;
      }
      break;
    }
    case Op::slice: {
      const Tensor& a = in_val(n, 0);
      const int axis = n.axis;
      i64 pre = 1, post = 1;
      for (int i = 0; i < axis; ++i) pre *= a.shape[i];
      for (int i = axis + 1; i < a.shape.rank; ++i) post *= a.shape[i];
      const i64 in_ax = a.shape[axis];
      for (i64 p = 0; p < pre; ++p)
        std::memcpy(out.ptr() + p * n.i1 * post, a.ptr() + (p * in_ax + n.i0) * post,
                    std::size_t(n.i1 * post) * sizeof(double));
      break;
    }
    case Op::permute: {
      const Tensor& a = in_val(n, 0);
      // pad to 4D on the left for uniform stride math
      i64 ind[4] = {1, 1, 1, 1}, outd[4] = {1, 1, 1, 1};
      int pm[4] = {0, 1, 2, 3};
      const int r = a.shape.rank, pad = 4 - r;
      for (int i = 0; i < r; ++i) {
        ind[pad + i] = a.shape[i];
        outd[pad + i] = n.shape[i];
        pm[pad + i] = n.perm[std::size_t(i)] + pad;
      }
      i64 istr[4];
      istr[3] = 1;
      for (int i = 2; i >= 0; --i) istr[i] = istr[i + 1] * ind[i + 1];
      double* dst = out.ptr();
      const double* src = a.ptr();
      i64 w = 0;
      for (i64 a0 = 0; a0 < outd[0]; ++a0)
        for (i64 a1 = 0; a1 < outd[1]; ++a1)
          for (i64 a2 = 0; a2 < outd[2]; ++a2) {
            i64 base = a0 * istr[pm[0]] + a1 * istr[pm[1]] + a2 * istr[pm[2]];
            const i64 s3 = istr[pm[3]];
            for (i64 a3 = 0; a3 < outd[3]; ++a3) dst[w++] = src[base + a3 * s3];
          }
      break;
    }
    case Op::repeat: {
      const Tensor& a = in_val(n, 0);
      const int axis = n.axis;
      i64 pre = 1, post = 1;
      for (int i = 0; i < axis; ++i) pre *= a.shape[i];
      for (int i = axis + 1; i < a.shape.rank; ++i) post *= a.shape[i];
      const i64 ax = a.shape[axis];
      const i64 block = ax * post;
      for (i64 p = 0; p < pre; ++p)
        for (i64 t = 0; t < n.i0; ++t)
          std::memcpy(out.ptr() + (p * n.i0 + t) * block, a.ptr() + p * block,
                      std::size_t(block) * sizeof(double));
      break;
    }
    case Op::reduce_sum: {
      const Tensor& a = in_val(n, 0);
      if (n.axis < 0) {
        // fixed-order scalar accumulation keeps the result independent of
        // buffer alignment and vector width
        double acc = 0.0;
        const double* src = a.ptr();
        const i64 m = a.numel();
        for (i64 i = 0; i < m; ++i) acc += src[i];
        out.at(0) = acc;
      } else {
        i64 pre = 1, post = 1;
        const i64 ax = a.shape[n.axis];
        for (int i = 0; i < n.axis; ++i) pre *= a.shape[i];
        for (int i = n.axis + 1; i < a.shape.rank; ++i) post *= a.shape[i];
        std::fill(out.data->begin(), out.data->end(), 0.0);
        for (i64 p = 0; p < pre; ++p) {
          double* dst = out.ptr() + p * post;
          const double* src = a.ptr() + p * ax * post;
          for (i64 x = 0; x < ax; ++x)
            for (i64 q = 0; q < post; ++q) dst[q] += src[x * post + q];
        }
      }
      break;
    }
    case Op::softmax: {
      const Tensor& a = in_val(n, 0);
      const i64 sk = n.shape[n.shape.rank - 1];
      const i64 rows = a.numel() / sk;
      const std::uint8_t* mk = n.mask ? n.mask->data() : nullptr;
      for (i64 r = 0; r < rows; ++r) {
        const double* x = a.ptr() + r * sk;
        double* y = out.ptr() + r * sk;
        const std::uint8_t* row_mask = mk ? mk + (r / n.mask_rows_per_group) * sk : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        i64 n_valid = 0;
        for (i64 k = 0; k < sk; ++k) {
          if (row_mask && !row_mask[k]) continue;
          ++n_valid;
          mx = std::max(mx, x[k]);
        }
        if (n_valid == 0) {
          // no valid key: fall back to uniform so rows still sum to one;
          // callers mask the consumer of such rows
          for (i64 k = 0; k < sk; ++k) y[k] = 1.0 / double(sk);
          continue;
        }
        double z = 0.0;
        for (i64 k = 0; k < sk; ++k) {
          if (row_mask && !row_mask[k]) {
            y[k] = 0.0;
          } else {
            y[k] = std::exp(x[k] - mx);
            z += y[k];
          }
        }
        const double inv = 1.0 / z;
        for (i64 k = 0; k < sk; ++k) y[k] *= inv;
      }
      break;
    }
    case Op::layer_norm: {
      const Tensor& x = in_val(n, 0);
      const Tensor& g = in_val(n, 1);
      const Tensor& b = in_val(n, 2);
      const i64 d = n.shape[n.shape.rank - 1];
      const i64 rows = x.numel() / d;
      if (n.aux.numel() != rows * 2) n.aux = Tensor(Shape{rows, 2});
      for (i64 r = 0; r < rows; ++r) {
        const double* xr = x.ptr() + r * d;
        double* yr = out.ptr() + r * d;
        double mu = 0.0;
        for (i64 i = 0; i < d; ++i) mu += xr[i];
        mu /= double(d);
        double var = 0.0;
        for (i64 i = 0; i < d; ++i) {
          const double c = xr[i] - mu;
          var += c * c;
        }
        var /= double(d);  // population variance
        const double inv = 1.0 / std::sqrt(var + n.c0);
        n.aux.at(r * 2) = mu;
        n.aux.at(r * 2 + 1) = inv;
        for (i64 i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * inv * g.at(i) + b.at(i);
      }
      break;
    }
    case Op::gather: {
      const Tensor& a = in_val(n, 0);
      const i64 row = a.numel() / a.shape[0];
      for (std::size_t i = 0; i < n.indices->size(); ++i)
        std::memcpy(out.ptr() + i64(i) * row, a.ptr() + (*n.indices)[i] * row,
                    std::size_t(row) * sizeof(double));
      break;
    }
    case Op::bilinear: {
      const Tensor& grid = in_val(n, 0);
      const Tensor& coords = in_val(n, 1);
      const i64 h = grid.shape[0], w = grid.shape[1], c = grid.shape[2];
      const i64 m = coords.shape[0];
      for (i64 i = 0; i < m; ++i) {
        const double gx = coords.at(i * 2) - 0.5;
        const double gy = coords.at(i * 2 + 1) - 0.5;
        const double fx = std::floor(gx), fy = std::floor(gy);
        const double ax = gx - fx, ay = gy - fy;
        const i64 x0 = std::clamp(i64(fx), i64(0), w - 1);
        const i64 x1 = std::clamp(i64(fx) + 1, i64(0), w - 1);
        const i64 y0 = std::clamp(i64(fy), i64(0), h - 1);
        const i64 y1 = std::clamp(i64(fy) + 1, i64(0), h - 1);
        const double w00 = (1 - ax) * (1 - ay), w10 = ax * (1 - ay);
        const double w01 = (1 - ax) * ay, w11 = ax * ay;
        const double* g00 = grid.ptr() + (y0 * w + x0) * c;
        const double* g10 = grid.ptr() + (y0 * w + x1) * c;
        const double* g01 = grid.ptr() + (y1 * w + x0) * c;
        const double* g11 = grid.ptr() + (y1 * w + x1) * c;
        double* o = out.ptr() + i * c;
        for (i64 ch = 0; ch < c; ++ch)
          o[ch] = w00 * g00[ch] + w10 * g10[ch] + w01 * g01[ch] + w11 * g11[ch];
      }
      break;
    }
    default:
      NF_CHECK(false, "compute: unhandled op " << op_name(n.op));
  }
}

// ---------------------------------------------------------------------------
// reverse sweep
// ---------------------------------------------------------------------------

inline void Tape::backward_node(int id) {
  using detail::emap;
  Node& n = nodes_[std::size_t(id)];
  if (!has_buffer(n.grad, n.shape)) return;  // not reached by any consumer
  const Tensor& gy = n.grad;

  auto want = [&](int i) {
    return nodes_[std::size_t(n.inputs[std::size_t(i)])].needs_grad;
  };
  auto give = [&](int i, Tensor&& g, bool fresh) {
    accumulate_grad(n.inputs[std::size_t(i)], std::move(g), fresh);
  };

  switch (n.op) {
    case Op::leaf:
      return;
    case Op::add:
      if (want(0)) give(0, gy.clone(), true);
      if (want(1)) give(1, gy.clone(), true);
      return;
    case Op::sub:
      if (want(0)) give(0, gy.clone(), true);
      if (want(1)) {
        Tensor g(n.shape);
        emap(g) = -emap(gy);
        give(1, std::move(g), true);
      }
      return;
    case Op::mul:
      if (want(0)) {
        Tensor g(n.shape);
        emap(g) = emap(gy) * emap(in_val(n, 1));
        give(0, std::move(g), true);
      }
      if (want(1)) {
        Tensor g(n.shape);
        emap(g) = emap(gy) * emap(in_val(n, 0));
        give(1, std::move(g), true);
      }
      return;
    case Op::div:
      if (want(0)) {
        Tensor g(n.shape);
        emap(g) = emap(gy) / emap(in_val(n, 1));
        give(0, std::move(g), true);
      }
      if (want(1)) {
        Tensor g(n.shape);
        emap(g) = -emap(gy) * emap(n.value) / emap(in_val(n, 1));
        give(1, std::move(g), true);
      }
      return;
    case Op::neg: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = -emap(gy);
      give(0, std::move(g), true);
      return;
    }
    case Op::scale: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = emap(gy) * n.c0;
      give(0, std::move(g), true);
      return;
    }
    case Op::offset:
      if (want(0)) give(0, gy.clone(), true);
      return;
    case Op::clamp: {
      if (!want(0)) return;
      const Tensor& x = in_val(n, 0);
      Tensor g(n.shape);
      const i64 m = g.numel();
      for (i64 i = 0; i < m; ++i) {
        const double v = x.at(i);
        g.at(i) = (v >= n.c0 && v <= n.c1) ? gy.at(i) : 0.0;
      }
      give(0, std::move(g), true);
      return;
    }
    case Op::exp_op: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = emap(gy) * emap(n.value);
      give(0, std::move(g), true);
      return;
    }
    case Op::log_op: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = emap(gy) / emap(in_val(n, 0));
      give(0, std::move(g), true);
      return;
    }
    case Op::sqrt_op: {
      if (!want(0)) return;
      Tensor g(n.shape);
      const i64 m = g.numel();
      for (i64 i = 0; i < m; ++i) {
        const double y = n.value.at(i);
        // subgradient 0 at x == 0 keeps zero-variance stds finite
        g.at(i) = y > 0.0 ? gy.at(i) * 0.5 / y : 0.0;
      }
      give(0, std::move(g), true);
      return;
    }
    case Op::sin_op: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = emap(gy) * emap(in_val(n, 0)).cos();
      give(0, std::move(g), true);
      return;
    }
    case Op::cos_op: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = -emap(gy) * emap(in_val(n, 0)).sin();
      give(0, std::move(g), true);
      return;
    }
    case Op::relu: {
      if (!want(0)) return;
      const Tensor& x = in_val(n, 0);
      Tensor g(n.shape);
      const i64 m = g.numel();
      for (i64 i = 0; i < m; ++i) g.at(i) = x.at(i) > 0.0 ? gy.at(i) : 0.0;
      give(0, std::move(g), true);
      return;
    }
    case Op::softplus: {
      if (!want(0)) return;
      const Tensor& x = in_val(n, 0);
      Tensor g(n.shape);
      const i64 m = g.numel();
      for (i64 i = 0; i < m; ++i) {
        const double v = x.at(i);
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
        g.at(i) = gy.at(i) * s;
      }
      give(0, std::move(g), true);
      return;
    }
    case Op::sigmoid: {
      if (!want(0)) return;
      Tensor g(n.shape);
      emap(g) = emap(gy) * emap(n.value) * (1.0 - emap(n.value));
      give(0, std::move(g), true);
      return;
    }
    case Op::matmul: {
      const Tensor& a = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      const int off = a.shape.rank - 2;
      const i64 m = n.shape[off];
      const i64 nn = n.shape[off + 1];
      const i64 k = n.ta ? a.shape[off] : a.shape[off + 1];
      const i64 batches = off == 1 ? n.shape[0] : 1;
      const i64 sa = m * k, sb = k * nn, sc = m * nn;
      if (want(0)) {
        Tensor ga = Tensor::zeros(a.shape);
        for (i64 t = 0; t < batches; ++t) {
          const double* dC = gy.ptr() + t * sc;
          const double* B = b.ptr() + t * sb;
          double* dA = ga.ptr() + t * sa;
          if (!n.ta) {
            // dA = dC * op(B)^T
            detail::gemm(dC, B, dA, m, k, nn, false, !n.tb, false);
          } else {
            // A appears transposed: dA = op(B) * dC^T
            detail::gemm(B, dC, dA, k, m, nn, n.tb, true, false);
          }
        }
        give(0, std::move(ga), true);
      }
      if (want(1)) {
        Tensor gb = Tensor::zeros(b.shape);
        for (i64 t = 0; t < batches; ++t) {
          const double* dC = gy.ptr() + t * sc;
          const double* A = a.ptr() + t * sa;
          double* dB = gb.ptr() + t * sb;
          if (!n.tb) {
            // dB = op(A)^T * dC
            detail::gemm(A, dC, dB, k, nn, m, !n.ta, false, false);
          } else {
            // B appears transposed: dB = dC^T * op(A)
            detail::gemm(dC, A, dB, nn, k, m, true, n.ta, false);
          }
        }
        give(1, std::move(gb), true);
      }
      return;
    }
    case Op::affine: {
      const Tensor& x = in_val(n, 0);
      const Tensor& w = in_val(n, 1);
      const i64 k = w.shape[0], nn = w.shape[1];
      const i64 rows = x.numel() / k;
      if (want(0)) {
        Tensor gx = Tensor::zeros(x.shape);
        detail::gemm(gy.ptr(), w.ptr(), gx.ptr(), rows, k, nn, false, true, false);
        give(0, std::move(gx), true);
      }
      if (want(1)) {
        Tensor gw = Tensor::zeros(w.shape);
        detail::gemm(x.ptr(), gy.ptr(), gw.ptr(), k, nn, rows, true, false, false);
        give(1, std::move(gw), true);
      }
      if (want(2)) {
        Tensor gb = Tensor::zeros(Shape{nn});
        double* bp = gb.ptr();
        const double* dp = gy.ptr();
        for (i64 r = 0; r < rows; ++r)
          for (i64 j = 0; j < nn; ++j) bp[j] += dp[r * nn + j];
        give(2, std::move(gb), true);
      }
      return;
    }
    case Op::concat: {
      const int axis = n.axis;
      i64 pre = 1, post = 1;
      for (int i = 0; i < axis; ++i) pre *= n.shape[i];
      for (int i = axis + 1; i < n.shape.rank; ++i) post *= n.shape[i];
      const i64 out_ax = n.shape[axis];
      i64 off = 0;
      for (std::size_t pi = 0; pi < n.inputs.size(); ++pi) {
        const Shape& ps = nodes_[std::size_t(n.inputs[pi])].shape;
        const i64 ax = ps[axis];
        if (nodes_[std::size_t(n.inputs[pi])].needs_grad) {
          Tensor g(ps);
          for (i64 p = 0; p < pre; ++p)
            std::memcpy(g.ptr() + p * ax * post, gy.ptr() + (p * out_ax + off) * post,
                        std::size_t(ax * post) * sizeof(double));
          accumulate_grad(n.inputs[pi], std::move(g), true);
        }
        off += ax;
      }
      return;
    }
    case Op::slice: {
      if (!want(0)) return;
      const Shape& ps = nodes_[std::size_t(n.inputs[0])].shape;
      const int axis = n.axis;
      i64 pre = 1, post = 1;
      for (int i = 0; i < axis; ++i) pre *= ps[i];
      for (int i = axis + 1; i < ps.rank; ++i) post *= ps[i];
      const i64 in_ax = ps[axis];
      Tensor g = Tensor::zeros(ps);
      for (i64 p = 0; p < pre; ++p)
        std::memcpy(g.ptr() + (p * in_ax + n.i0) * post, gy.ptr() + p * n.i1 * post,
                    std::size_t(n.i1 * post) * sizeof(double));
      give(0, std::move(g), true);
      return;
    }
    case Op::reshape:
      if (want(0))
        give(0, gy.clone(), true);
      return;
    case Op::permute: {
      if (!want(0)) return;
      const Shape& ps = nodes_[std::size_t(n.inputs[0])].shape;
      // scatter gy back through the permutation
      i64 ind[4] = {1, 1, 1, 1}, outd[4] = {1, 1, 1, 1};
      int pm[4] = {0, 1, 2, 3};
      const int r = ps.rank, pad = 4 - r;
      for (int i = 0; i < r; ++i) {
        ind[pad + i] = ps[i];
        outd[pad + i] = n.shape[i];
        pm[pad + i] = n.perm[std::size_t(i)] + pad;
      }
      i64 istr[4];
      istr[3] = 1;
      for (int i = 2; i >= 0; --i) istr[i] = istr[i + 1] * ind[i + 1];
      Tensor g = Tensor::zeros(ps);
      double* dst = g.ptr();
      const double* src = gy.ptr();
      i64 w = 0;
      for (i64 a0 = 0; a0 < outd[0]; ++a0)
        for (i64 a1 = 0; a1 < outd[1]; ++a1)
          for (i64 a2 = 0; a2 < outd[2]; ++a2) {
            i64 base = a0 * istr[pm[0]] + a1 * istr[pm[1]] + a2 * istr[pm[2]];
            const i64 s3 = istr[pm[3]];
            for (i64 a3 = 0; a3 < outd[3]; ++a3) dst[base + a3 * s3] = src[w++];
          }
      give(0, std::move(g), true);
      return;
    }
    case Op::repeat: {
      if (!want(0)) return;
      const Shape& ps = nodes_[std::size_t(n.inputs[0])].shape;
      const int axis = n.axis;
      i64 pre = 1, post = 1;
      for (int i = 0; i < axis; ++i) pre *= ps[i];
      for (int i = axis + 1; i < ps.rank; ++i) post *= ps[i];
      const i64 ax = ps[axis];
      const i64 block = ax * post;
      Tensor g = Tensor::zeros(ps);
      for (i64 p = 0; p < pre; ++p)
        for (i64 t = 0; t < n.i0; ++t) {
          const double* src = gy.ptr() + (p * n.i0 + t) * block;
          double* dst = g.ptr() + p * block;
          for (i64 i = 0; i < block; ++i) dst[i] += src[i];
        }
      give(0, std::move(g), true);
      return;
    }
    case Op::reduce_sum: {
      if (!want(0)) return;
      const Shape& ps = nodes_[std::size_t(n.inputs[0])].shape;
      Tensor g(ps);
      if (n.axis < 0) {
        emap(g).setConstant(gy.at(0));
      } else {
        i64 pre = 1, post = 1;
        const i64 ax = ps[n.axis];
        for (int i = 0; i < n.axis; ++i) pre *= ps[i];
        for (int i = n.axis + 1; i < ps.rank; ++i) post *= ps[i];
        for (i64 p = 0; p < pre; ++p) {
          const double* src = gy.ptr() + p * post;
          double* dst = g.ptr() + p * ax * post;
          for (i64 x = 0; x < ax; ++x)
            std::memcpy(dst + x * post, src, std::size_t(post) * sizeof(double));
        }
      }
      give(0, std::move(g), true);
      return;
    }
    case Op::softmax: {
      if (!want(0)) return;
      const i64 sk = n.shape[n.shape.rank - 1];
      const i64 rows = n.shape.numel() / sk;
      Tensor g(n.shape);
      for (i64 r = 0; r < rows; ++r) {
        const double* y = n.value.ptr() + r * sk;
        const double* dy = gy.ptr() + r * sk;
        double* dx = g.ptr() + r * sk;
        double dot = 0.0;
        for (i64 k = 0; k < sk; ++k) dot += y[k] * dy[k];
        // masked entries have y == 0, so their dx is 0 automatically;
        // uniform fallback rows feed consumers that are themselves masked
        for (i64 k = 0; k < sk; ++k) dx[k] = y[k] * (dy[k] - dot);
        if (n.mask) {
          const std::uint8_t* row_mask = n.mask->data() + (r / n.mask_rows_per_group) * sk;
          bool any = false;
          for (i64 k = 0; k < sk; ++k) any = any || row_mask[k];
          if (!any)
            for (i64 k = 0; k < sk; ++k) dx[k] = 0.0;  // uniform fallback is constant
        }
      }
      give(0, std::move(g), true);
      return;
    }
    case Op::layer_norm: {
      const Tensor& x = in_val(n, 0);
      const Tensor& gn = in_val(n, 1);
      const i64 d = n.shape[n.shape.rank - 1];
      const i64 rows = x.numel() / d;
      Tensor gx = want(0) ? Tensor::zeros(x.shape) : Tensor();
      Tensor gg = want(1) ? Tensor::zeros(Shape{d}) : Tensor();
      Tensor gb = want(2) ? Tensor::zeros(Shape{d}) : Tensor();
      for (i64 r = 0; r < rows; ++r) {
        const double* xr = x.ptr() + r * d;
        const double* dyr = gy.ptr() + r * d;
        const double mu = n.aux.at(r * 2);
        const double inv = n.aux.at(r * 2 + 1);
        if (want(1) || want(2)) {
          for (i64 i = 0; i < d; ++i) {
            const double xh = (xr[i] - mu) * inv;
            if (want(1)) gg.at(i) += dyr[i] * xh;
            if (want(2)) gb.at(i) += dyr[i];
          }
        }
        if (want(0)) {
          double mean_dyg = 0.0, mean_dyg_xh = 0.0;
          for (i64 i = 0; i < d; ++i) {
            const double dyg = dyr[i] * gn.at(i);
            const double xh = (xr[i] - mu) * inv;
            mean_dyg += dyg;
            mean_dyg_xh += dyg * xh;
          }
          mean_dyg /= double(d);
          mean_dyg_xh /= double(d);
          double* gxr = gx.ptr() + r * d;
          for (i64 i = 0; i < d; ++i) {
            const double dyg = dyr[i] * gn.at(i);
            const double xh = (xr[i] - mu) * inv;
            gxr[i] = inv * (dyg - mean_dyg - xh * mean_dyg_xh);
          }
        }
      }
      if (want(0)) give(0, std::move(gx), true);
      if (want(1)) give(1, std::move(gg), true);
      if (want(2)) give(2, std::move(gb), true);
      return;
    }
    case Op::gather: {
      if (!want(0)) return;
      const Shape& ps = nodes_[std::size_t(n.inputs[0])].shape;
      const i64 row = ps.numel() / ps[0];
      Tensor g = Tensor::zeros(ps);
      for (std::size_t i = 0; i < n.indices->size(); ++i) {
        const double* src = gy.ptr() + i64(i) * row;
        double* dst = g.ptr() + (*n.indices)[i] * row;
        for (i64 j = 0; j < row; ++j) dst[j] += src[j];
      }
      give(0, std::move(g), true);
      return;
    }
    case Op::bilinear: {
      const Tensor& grid = in_val(n, 0);
      const Tensor& coords = in_val(n, 1);
      const i64 h = grid.shape[0], w = grid.shape[1], c = grid.shape[2];
      const i64 m = coords.shape[0];
      Tensor ggrid = want(0) ? Tensor::zeros(grid.shape) : Tensor();
      Tensor gcoords = want(1) ? Tensor::zeros(coords.shape) : Tensor();
      for (i64 i = 0; i < m; ++i) {
        const double gxp = coords.at(i * 2) - 0.5;
        const double gyp = coords.at(i * 2 + 1) - 0.5;
        const double fx = std::floor(gxp), fy = std::floor(gyp);
        const double ax = gxp - fx, ay = gyp - fy;
        const i64 x0 = std::clamp(i64(fx), i64(0), w - 1);
        const i64 x1 = std::clamp(i64(fx) + 1, i64(0), w - 1);
        const i64 y0 = std::clamp(i64(fy), i64(0), h - 1);
        const i64 y1 = std::clamp(i64(fy) + 1, i64(0), h - 1);
        const double w00 = (1 - ax) * (1 - ay), w10 = ax * (1 - ay);
        const double w01 = (1 - ax) * ay, w11 = ax * ay;
        const double* dy = gy.ptr() + i * c;
        if (want(0)) {
          double* d00 = ggrid.ptr() + (y0 * w + x0) * c;
          double* d10 = ggrid.ptr() + (y0 * w + x1) * c;
          double* d01 = ggrid.ptr() + (y1 * w + x0) * c;
          double* d11 = ggrid.ptr() + (y1 * w + x1) * c;
          for (i64 ch = 0; ch < c; ++ch) {
            d00[ch] += w00 * dy[ch];
            d10[ch] += w10 * dy[ch];
            d01[ch] += w01 * dy[ch];
            d11[ch] += w11 * dy[ch];
          }
        }
        if (want(1)) {
          const double* g00 = grid.ptr() + (y0 * w + x0) * c;
          const double* g10 = grid.ptr() + (y0 * w + x1) * c;
          const double* g01 = grid.ptr() + (y1 * w + x0) * c;
          const double* g11 = grid.ptr() + (y1 * w + x1) * c;
          double du = 0.0, dv = 0.0;
          for (i64 ch = 0; ch < c; ++ch) {
            const double top = g10[ch] - g00[ch];
            const double bot = g11[ch] - g01[ch];
            const double lef = g01[ch] - g00[ch];
            const double rig = g11[ch] - g10[ch];
            du += dy[ch] * ((1 - ay) * top + ay * bot);
            dv += dy[ch] * ((1 - ax) * lef + ax * rig);
          }
          gcoords.at(i * 2) += du;
          gcoords.at(i * 2 + 1) += dv;
        }
      }
      if (want(0)) give(0, std::move(ggrid), true);
      if (want(1)) give(1, std::move(gcoords), true);
      return;
    }
    default:
      NF_CHECK(false, "backward: unhandled op " << op_name(n.op));
  }
}

inline void Tape::backward_multi(const std::vector<std::pair<Var, Tensor>>& seeds,
                                 bool release_buffers) {
  NF_CHECK(!seeds.empty(), "backward needs at least one seed");
  int max_id = -1;
  for (const auto& [v, seed] : seeds) {
    check_var(v);
    Node& n = nodes_[std::size_t(v.id)];
    NF_CHECK(seed.shape.numel() == n.shape.numel(),
             "seed shape " << seed.shape.str() << " does not match root " << n.shape.str());
    NF_CHECK(n.needs_grad, "backward root does not require gradients");
    accumulate_grad(v.id, seed.clone(), true);
    max_id = std::max(max_id, v.id);
  }
  for (int id = max_id; id >= 0; --id) {
    backward_node(id);
    if (release_buffers) {
      Node& n = nodes_[std::size_t(id)];
      if (n.op != Op::leaf) {
        n.value = Tensor();
        n.grad = Tensor();
        n.aux = Tensor();
      }
    }
  }
}

inline void Tape::replay() {
  for (Node& n : nodes_) {
    if (n.op == Op::leaf) continue;
    compute(n);
    if (check_finite)
      NF_CHECK(detail::emap(n.value).allFinite(),
               "non-finite values during replay of '" << op_name(n.op) << "'");
  }
}

// ---------------------------------------------------------------------------
// gradient checking against central finite differences
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  i64 n_checked = 0;
  bool pass = true;
};

// Builds the graph with `build` (which must return a scalar objective),
// runs backward, then compares each requested leaf gradient against a
// central finite difference.  When max_coords_per_leaf >= 0 only a random
// subset of coordinates per leaf is probed (rng required).
inline GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& leaves, double eps = 1e-5, double tol = 1e-4,
    i64 max_coords_per_leaf = -1, Rng* rng = nullptr) {
  // analytic gradients
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : leaves) vars.push_back(tape.leaf(t.clone(), true));
  Var out = build(tape, vars);
  NF_CHECK(out.shape().numel() == 1, "grad_check objective must be scalar");
  tape.backward(out);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(tape.grad(v));

  auto eval_at = [&](const std::vector<Tensor>& ins) {
    Tape t2;
    std::vector<Var> v2;
    for (const Tensor& t : ins) v2.push_back(t2.leaf(t.clone(), false));
    Var o = build(t2, v2);
    return t2.value(o).at(0);
  };

  GradCheckReport rep;
  std::vector<Tensor> work;
  for (const Tensor& t : leaves) work.push_back(t.clone());
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const i64 numel = leaves[li].numel();
    std::vector<i64> coords;
    if (max_coords_per_leaf >= 0 && numel > max_coords_per_leaf) {
      NF_CHECK(rng != nullptr, "grad_check coordinate subsetting needs an rng");
      for (i64 k = 0; k < max_coords_per_leaf; ++k) coords.push_back(rng->uniform_int(numel));
    } else {
      for (i64 k = 0; k < numel; ++k) coords.push_back(k);
    }
    for (i64 ci : coords) {
      const double orig = work[li].at(ci);
      work[li].at(ci) = orig + eps;
      const double fp = eval_at(work);
      work[li].at(ci) = orig - eps;
      const double fm = eval_at(work);
      work[li].at(ci) = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[li].at(ci);
      const double denom = std::max({std::abs(fd), std::abs(an), 1.0});
      const double rel = std::abs(fd - an) / denom;
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.n_checked;
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

// Library-level composites -------------------------------------------------

// Population standard deviation over an axis (biased, no Bessel correction).
inline Var reduce_std(Tape& t, Var a, int axis) {
  const Shape s = a.shape();  // by value: pushing nodes may reallocate storage
  NF_CHECK(axis >= 0 && axis < s.rank, "reduce_std axis out of rank");
  Var mean = t.reduce_mean(a, axis);
  // broadcast mean back along the reduced axis via reshape+repeat
  Shape keep = s;
  keep.dim[std::size_t(axis)] = 1;
  Var mean_b = t.repeat(t.reshape(mean, keep), axis, s[axis]);
  Var dev = t.sub(a, mean_b);
  Var var = t.reduce_mean(t.mul(dev, dev), axis);
  return t.sqrt(var);
}

}  // namespace nf

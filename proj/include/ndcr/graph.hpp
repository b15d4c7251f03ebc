#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ndcr/common.hpp"
#include "ndcr/tensor.hpp"

namespace ndcr {

// Reverse-mode tape over 2-D tensors. Nodes are evaluated eagerly as they are
// built; backward() walks the tape in reverse. One Graph instance per
// forward/backward pass; parameters are registered per pass and their
// gradients read back by name afterwards.
//
// Accumulation order is fixed by construction (tape order, row-major loops),
// so identical seeds give identical results on a given backend.

enum class OpKind {
  Input,
  Param,
  Matmul,
  Add,
  Sub,
  Mul,
  AddRow,
  Relu,
  Sigmoid,
  Tanh,
  Softmax,       // axis attr: 1 = within each row, 0 = within each column
  LogSoftmax,    // rows
  LayerNorm,
  ConcatCols,
  ConcatRows,
  SliceRows,
  RepeatBlock,       // [A; A; ...] t times
  RepeatInterleave,  // each row repeated t times consecutively
  PermuteRows,
  Transpose,
  Reshape,
  GroupedWeightedSum,
  PairwiseHadamard,
  L2NormalizeRows,
  Sdpa,
  Dropout,
  SumAll,
  MeanAll,
  ScaleConst,
  AddConst,
  ScalarMul,
  Pick,
  StopGrad,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddRow: return "add_row";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::RepeatBlock: return "repeat_block";
    case OpKind::RepeatInterleave: return "repeat_interleave";
    case OpKind::PermuteRows: return "permute_rows";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::GroupedWeightedSum: return "grouped_weighted_sum";
    case OpKind::PairwiseHadamard: return "pairwise_hadamard";
    case OpKind::L2NormalizeRows: return "l2_normalize_rows";
    case OpKind::Sdpa: return "sdpa";
    case OpKind::Dropout: return "dropout";
    case OpKind::SumAll: return "sum_all";
    case OpKind::MeanAll: return "mean_all";
    case OpKind::ScaleConst: return "scale_const";
    case OpKind::AddConst: return "add_const";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::Pick: return "pick";
    case OpKind::StopGrad: return "stop_gradient";
  }
  return "?";
}

using Var = int;

template <typename T>
class Graph {
 public:
  struct Options {
    bool training = false;
    double dropout_rate = 0.0;
    uint64_t seed = 0;
    bool check_finite = true;
  };

  explicit Graph(Options opt = {}) : opt_(opt), rng_(opt.seed) {}

  // ---- leaves --------------------------------------------------------------

  Var input(Tensor<T> v) { return add_leaf(OpKind::Input, std::move(v), false, {}); }

  Var param(const std::string& name, const Tensor<T>& v) {
    Var id = add_leaf(OpKind::Param, v, true, name);
    params_.emplace_back(name, id);
    return id;
  }

  Var constant_scalar(T v) {
    Tensor<T> t(1, 1);
    t.data[0] = v;
    return input(std::move(t));
  }

  // ---- elementwise / affine -------------------------------------------------

  Var add(Var a, Var b) { return binary_same_shape(OpKind::Add, a, b); }
  Var sub(Var a, Var b) { return binary_same_shape(OpKind::Sub, a, b); }
  Var mul(Var a, Var b) { return binary_same_shape(OpKind::Mul, a, b); }

  // X (n x d) + broadcast row b (1 x d)
  Var add_row(Var x, Var b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& bv = value(b);
    if (bv.rows != 1 || bv.cols != xv.cols)
      throw ShapeError(std::string("add_row: bias ") + bv.shape_str() + " does not broadcast to " +
                       xv.shape_str());
    Tensor<T> out = xv;
    for (int r = 0; r < out.rows; ++r)
      kernels::add<T>(static_cast<size_t>(out.cols), out.row(r), bv.row(0), out.row(r));
    return add_node(OpKind::AddRow, {x, b}, std::move(out));
  }

  Var matmul(Var a, Var b, bool transA = false, bool transB = false) {
    Tensor<T> out = ndcr::matmul(value(a), value(b), transA, transB);
    Node& n = node(add_node(OpKind::Matmul, {a, b}, std::move(out)));
    n.i0 = transA ? 1 : 0;
    n.i1 = transB ? 1 : 0;
    return n.id;
  }

  Var relu(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.rows, xv.cols);
    kernels::relu<T>(xv.size(), xv.data.data(), out.data.data());
    return add_node(OpKind::Relu, {x}, std::move(out));
  }

  Var sigmoid(Var x) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    return add_node(OpKind::Sigmoid, {x}, std::move(out));
  }

  Var tanh(Var x) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v = std::tanh(v);
    return add_node(OpKind::Tanh, {x}, std::move(out));
  }

  Var scale(Var x, double c) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.rows, xv.cols);
    kernels::scale<T>(xv.size(), static_cast<T>(c), xv.data.data(), out.data.data());
    Node& n = node(add_node(OpKind::ScaleConst, {x}, std::move(out)));
    n.d0 = c;
    return n.id;
  }

  Var add_const(Var x, double c) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v += static_cast<T>(c);
    Node& n = node(add_node(OpKind::AddConst, {x}, std::move(out)));
    n.d0 = c;
    return n.id;
  }

  // out = s * A with s a 1x1 node
  Var scalar_mul(Var a, Var s) {
    const Tensor<T>& sv = value(s);
    if (sv.rows != 1 || sv.cols != 1) throw ShapeError("scalar_mul: scale must be 1x1");
    const Tensor<T>& av = value(a);
    Tensor<T> out(av.rows, av.cols);
    kernels::scale<T>(av.size(), sv.data[0], av.data.data(), out.data.data());
    return add_node(OpKind::ScalarMul, {a, s}, std::move(out));
  }

  // ---- normalization / softmax ----------------------------------------------

  // axis = 1: softmax within each row; axis = 0: within each column.
  Var softmax(Var x, int axis = 1) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.rows, xv.cols);
    if (axis == 1) {
      for (int r = 0; r < xv.rows; ++r) softmax_span(xv.row(r), out.row(r), xv.cols, 1);
    } else if (axis == 0) {
      for (int c = 0; c < xv.cols; ++c)
        softmax_span(xv.data.data() + c, out.data.data() + c, xv.rows, xv.cols);
    } else {
      throw ShapeError("softmax: axis must be 0 or 1");
    }
    Node& n = node(add_node(OpKind::Softmax, {x}, std::move(out)));
    n.i0 = axis;
    return n.id;
  }

  Var log_softmax(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.rows, xv.cols);
    for (int r = 0; r < xv.rows; ++r) {
      const T* in = xv.row(r);
      T* o = out.row(r);
      T mx = in[0];
      for (int c = 1; c < xv.cols; ++c) mx = std::max(mx, in[c]);
      T lse = T(0);
      for (int c = 0; c < xv.cols; ++c) lse += std::exp(in[c] - mx);
      lse = mx + std::log(lse);
      for (int c = 0; c < xv.cols; ++c) o[c] = in[c] - lse;
    }
    return add_node(OpKind::LogSoftmax, {x}, std::move(out));
  }

  // Per-row layer normalization with affine gain/bias (both 1 x d).
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& gv = value(gain);
    const Tensor<T>& bv = value(bias);
    if (gv.rows != 1 || gv.cols != xv.cols || bv.rows != 1 || bv.cols != xv.cols)
      throw ShapeError("layer_norm: gain/bias must be 1 x cols");
    Tensor<T> out(xv.rows, xv.cols);
    Tensor<T> xhat(xv.rows, xv.cols);
    Tensor<T> inv_sigma(xv.rows, 1);
    const int d = xv.cols;
    for (int r = 0; r < xv.rows; ++r) {
      const T* in = xv.row(r);
      T mu = kernels::sum<T>(in, static_cast<size_t>(d)) / T(d);
      T var = T(0);
      for (int c = 0; c < d; ++c) {
        T dv = in[c] - mu;
        var += dv * dv;
      }
      var /= T(d);
      T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv_sigma.data[static_cast<size_t>(r)] = inv;
      T* xh = xhat.row(r);
      T* o = out.row(r);
      for (int c = 0; c < d; ++c) {
        xh[c] = (in[c] - mu) * inv;
        o[c] = gv.data[static_cast<size_t>(c)] * xh[c] + bv.data[static_cast<size_t>(c)];
      }
    }
    Node& n = node(add_node(OpKind::LayerNorm, {x, gain, bias}, std::move(out)));
    n.aux.push_back(std::move(xhat));
    n.aux.push_back(std::move(inv_sigma));
    return n.id;
  }

  // Rows scaled to unit L2 norm. Zero-norm rows are an error.
  Var l2_normalize_rows(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.rows, xv.cols);
    Tensor<T> norms(xv.rows, 1);
    for (int r = 0; r < xv.rows; ++r) {
      const T* in = xv.row(r);
      T nrm = std::sqrt(kernels::dot<T>(in, in, static_cast<size_t>(xv.cols)));
      if (!(static_cast<double>(nrm) > 1e-12))
        throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(r));
      norms.data[static_cast<size_t>(r)] = nrm;
      kernels::scale<T>(static_cast<size_t>(xv.cols), T(1) / nrm, in, out.row(r));
    }
    Node& n = node(add_node(OpKind::L2NormalizeRows, {x}, std::move(out)));
    n.aux.push_back(std::move(norms));
    return n.id;
  }

  // ---- structure ops ---------------------------------------------------------

  Var concat_cols(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rows != bv.rows)
      throw ShapeError("concat_cols: row mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out(av.rows, av.cols + bv.cols);
    for (int r = 0; r < av.rows; ++r) {
      std::copy(av.row(r), av.row(r) + av.cols, out.row(r));
      std::copy(bv.row(r), bv.row(r) + bv.cols, out.row(r) + av.cols);
    }
    return add_node(OpKind::ConcatCols, {a, b}, std::move(out));
  }

  Var concat_rows(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.cols != bv.cols)
      throw ShapeError("concat_rows: col mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out(av.rows + bv.rows, av.cols);
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.size());
    return add_node(OpKind::ConcatRows, {a, b}, std::move(out));
  }

  // Rows [r0, r1)
  Var slice_rows(Var x, int r0, int r1) {
    const Tensor<T>& xv = value(x);
    if (r0 < 0 || r1 > xv.rows || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Tensor<T> out(r1 - r0, xv.cols);
    std::copy(xv.row(r0), xv.row(r0) + out.size(), out.data.begin());
    Node& n = node(add_node(OpKind::SliceRows, {x}, std::move(out)));
    n.i0 = r0;
    n.i1 = r1;
    return n.id;
  }

  Var repeat_block(Var x, int times) {
    const Tensor<T>& xv = value(x);
    if (times < 1) throw ShapeError("repeat_block: times must be >= 1");
    Tensor<T> out(xv.rows * times, xv.cols);
    for (int t = 0; t < times; ++t)
      std::copy(xv.data.begin(), xv.data.end(),
                out.data.begin() + static_cast<size_t>(t) * xv.size());
    Node& n = node(add_node(OpKind::RepeatBlock, {x}, std::move(out)));
    n.i0 = times;
    return n.id;
  }

  Var repeat_interleave(Var x, int times) {
    const Tensor<T>& xv = value(x);
    if (times < 1) throw ShapeError("repeat_interleave: times must be >= 1");
    Tensor<T> out(xv.rows * times, xv.cols);
    for (int r = 0; r < xv.rows; ++r)
      for (int t = 0; t < times; ++t)
        std::copy(xv.row(r), xv.row(r) + xv.cols, out.row(r * times + t));
    Node& n = node(add_node(OpKind::RepeatInterleave, {x}, std::move(out)));
    n.i0 = times;
    return n.id;
  }

  // out[r] = x[perm[r]]
  Var permute_rows(Var x, std::vector<int> perm) {
    const Tensor<T>& xv = value(x);
    if (static_cast<int>(perm.size()) != xv.rows) throw ShapeError("permute_rows: bad perm size");
    Tensor<T> out(xv.rows, xv.cols);
    for (int r = 0; r < xv.rows; ++r) {
      int src = perm[static_cast<size_t>(r)];
      if (src < 0 || src >= xv.rows) throw ShapeError("permute_rows: index out of range");
      std::copy(xv.row(src), xv.row(src) + xv.cols, out.row(r));
    }
    Node& n = node(add_node(OpKind::PermuteRows, {x}, std::move(out)));
    n.perm = std::move(perm);
    return n.id;
  }

  // Same elements, new (rows, cols) split; row-major order preserved.
  Var reshape(Var x, int rows, int cols) {
    const Tensor<T>& xv = value(x);
    if (static_cast<size_t>(rows) * cols != xv.size())
      throw ShapeError("reshape: element count mismatch " + xv.shape_str() + " -> (" +
                       std::to_string(rows) + "x" + std::to_string(cols) + ")");
    Tensor<T> out(rows, cols, xv.data);
    return add_node(OpKind::Reshape, {x}, std::move(out));
  }

  Var transpose(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(xv.cols, xv.rows);
    for (int r = 0; r < xv.rows; ++r)
      for (int c = 0; c < xv.cols; ++c) out.at(c, r) = xv.at(r, c);
    return add_node(OpKind::Transpose, {x}, std::move(out));
  }

  // Y[g] = sum_j W[g, j] * X[g*n + j];  W: G x n, X: (G*n) x d -> G x d
  Var grouped_weighted_sum(Var w, Var x) {
    const Tensor<T>& wv = value(w);
    const Tensor<T>& xv = value(x);
    if (xv.rows != wv.rows * wv.cols)
      throw ShapeError("grouped_weighted_sum: X rows " + xv.shape_str() +
                       " must equal G*n of W " + wv.shape_str());
    Tensor<T> out(wv.rows, xv.cols);
    for (int g = 0; g < wv.rows; ++g) {
      T* orow = out.row(g);
      for (int j = 0; j < wv.cols; ++j)
        kernels::axpy<T>(static_cast<size_t>(xv.cols), wv.at(g, j), xv.row(g * wv.cols + j), orow);
    }
    return add_node(OpKind::GroupedWeightedSum, {w, x}, std::move(out));
  }

  // out[i*L + l] = A[i] (elementwise*) B[l];  A: M x d, B: L x d -> (M*L) x d
  Var pairwise_hadamard(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.cols != bv.cols)
      throw ShapeError("pairwise_hadamard: width mismatch " + av.shape_str() + " vs " +
                       bv.shape_str());
    Tensor<T> out(av.rows * bv.rows, av.cols);
    for (int i = 0; i < av.rows; ++i)
      for (int l = 0; l < bv.rows; ++l)
        kernels::mul<T>(static_cast<size_t>(av.cols), av.row(i), bv.row(l),
                        out.row(i * bv.rows + l));
    return add_node(OpKind::PairwiseHadamard, {a, b}, std::move(out));
  }

  // ---- attention ---------------------------------------------------------------
  //
  // Scaled dot-product attention over `groups` independent blocks. Q has
  // groups*q rows, K/V have groups*k rows; query row (g, qi) attends to key
  // rows of group g only. Projections live outside as matmuls.
  Var sdpa(Var q, Var k, Var v, int heads, int groups = 1) {
    const Tensor<T>& qv = value(q);
    const Tensor<T>& kv = value(k);
    const Tensor<T>& vv = value(v);
    if (qv.cols != kv.cols || kv.rows != vv.rows || kv.cols != vv.cols)
      throw ShapeError("sdpa: inconsistent Q/K/V shapes " + qv.shape_str() + ", " +
                       kv.shape_str() + ", " + vv.shape_str());
    if (heads < 1 || qv.cols % heads != 0) throw ShapeError("sdpa: cols must divide by heads");
    if (groups < 1 || qv.rows % groups != 0 || kv.rows % groups != 0)
      throw ShapeError("sdpa: rows must divide by groups");
    const int dm = qv.cols;
    const int dh = dm / heads;
    const int nq = qv.rows / groups;
    const int nk = kv.rows / groups;
    const T scl = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> out(qv.rows, dm);
    Tensor<T> attn(groups * heads * nq, nk);  // cached softmax weights
    std::vector<T> srow(static_cast<size_t>(nk));
    for (int g = 0; g < groups; ++g) {
      for (int h = 0; h < heads; ++h) {
        const int col = h * dh;
        for (int qi = 0; qi < nq; ++qi) {
          const T* qrow = qv.row(g * nq + qi) + col;
          for (int kj = 0; kj < nk; ++kj)
            srow[static_cast<size_t>(kj)] =
                scl * kernels::dot<T>(qrow, kv.row(g * nk + kj) + col, static_cast<size_t>(dh));
          T* arow = attn.row((g * heads + h) * nq + qi);
          softmax_span(srow.data(), arow, nk, 1);
          T* orow = out.row(g * nq + qi) + col;
          for (int kj = 0; kj < nk; ++kj)
            kernels::axpy<T>(static_cast<size_t>(dh), arow[kj], vv.row(g * nk + kj) + col, orow);
        }
      }
    }
    Node& n = node(add_node(OpKind::Sdpa, {q, k, v}, std::move(out)));
    n.i0 = heads;
    n.i1 = groups;
    n.aux.push_back(std::move(attn));
    return n.id;
  }

  // Read cached attention weights of an sdpa node (tests only). Layout:
  // row ((g*heads + h)*nq + qi) holds the nk weights.
  const Tensor<T>& attention_weights(Var sdpa_node) const {
    const Node& n = nodes_[static_cast<size_t>(sdpa_node)];
    if (n.kind != OpKind::Sdpa) throw ShapeError("attention_weights: not an sdpa node");
    return n.aux[0];
  }

  // ---- dropout / reductions -----------------------------------------------------

  // Inverted dropout; identity at eval time or rate 0.
  Var dropout(Var x) {
    const Tensor<T>& xv = value(x);
    if (!opt_.training || opt_.dropout_rate <= 0.0) {
      Tensor<T> out = xv;
      return add_node(OpKind::Dropout, {x}, std::move(out));
    }
    const T keep = static_cast<T>(1.0 - opt_.dropout_rate);
    Tensor<T> out(xv.rows, xv.cols);
    Tensor<T> mask(xv.rows, xv.cols);
    for (size_t i = 0; i < xv.size(); ++i) {
      T m = rng_.next_uniform() < opt_.dropout_rate ? T(0) : T(1) / keep;
      mask.data[i] = m;
      out.data[i] = xv.data[i] * m;
    }
    Node& n = node(add_node(OpKind::Dropout, {x}, std::move(out)));
    n.aux.push_back(std::move(mask));
    return n.id;
  }

  Var sum_all(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(1, 1);
    out.data[0] = kernels::sum<T>(xv.data.data(), xv.size());
    return add_node(OpKind::SumAll, {x}, std::move(out));
  }

  Var mean_all(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> out(1, 1);
    out.data[0] = kernels::sum<T>(xv.data.data(), xv.size()) / static_cast<T>(xv.size());
    return add_node(OpKind::MeanAll, {x}, std::move(out));
  }

  Var pick(Var x, int r, int c) {
    const Tensor<T>& xv = value(x);
    if (r < 0 || r >= xv.rows || c < 0 || c >= xv.cols) throw ShapeError("pick: out of range");
    Tensor<T> out(1, 1);
    out.data[0] = xv.at(r, c);
    Node& n = node(add_node(OpKind::Pick, {x}, std::move(out)));
    n.i0 = r;
    n.i1 = c;
    return n.id;
  }

  Var stop_gradient(Var x) {
    Tensor<T> out = value(x);
    Var id = add_node(OpKind::StopGrad, {x}, std::move(out));
    node(id).needs_grad = false;  // barrier: nothing flows past here
    return id;
  }

  // ---- access -------------------------------------------------------------------

  const Tensor<T>& value(Var id) const { return nodes_[static_cast<size_t>(id)].value; }

  const Tensor<T>& grad(Var id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) {
      static thread_local Tensor<T> zero;
      zero = Tensor<T>(n.value.rows, n.value.cols);
      return zero;
    }
    return n.grad;
  }

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }

  size_t node_count() const { return nodes_.size(); }

  // ---- backward -------------------------------------------------------------------

  void backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.rows != 1 || ln.value.cols != 1)
      throw ShapeError("backward: loss must be a 1x1 scalar");
    ensure_grad(ln);
    ln.grad.data[0] = T(1);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      backward_node(n);
    }
  }

 private:
  struct Node {
    Var id = -1;
    OpKind kind;
    std::vector<Var> in;
    Tensor<T> value;
    Tensor<T> grad;  // empty until touched
    bool needs_grad = false;
    int i0 = 0, i1 = 0;
    double d0 = 0.0;
    std::vector<int> perm;
    std::vector<Tensor<T>> aux;
    std::string name;
  };

  Options opt_;
  Rng rng_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Var>> params_;

  Node& node(Var id) { return nodes_[static_cast<size_t>(id)]; }

  Var add_leaf(OpKind kind, Tensor<T> v, bool needs_grad, const std::string& name) {
    check_value(kind, v);
    Node n;
    n.id = static_cast<Var>(nodes_.size());
    n.kind = kind;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    n.name = name;
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  Var add_node(OpKind kind, std::vector<Var> in, Tensor<T> v) {
    check_value(kind, v);
    Node n;
    n.id = static_cast<Var>(nodes_.size());
    n.kind = kind;
    n.in = std::move(in);
    n.value = std::move(v);
    for (Var i : n.in)
      if (nodes_[static_cast<size_t>(i)].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  void check_value(OpKind kind, const Tensor<T>& v) {
    if (opt_.check_finite && !v.all_finite())
      throw NumericError(std::string("non-finite value produced by op '") + op_name(kind) + "'");
  }

  Var binary_same_shape(OpKind kind, Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rows != bv.rows || av.cols != bv.cols)
      throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + av.shape_str() + " vs " +
                       bv.shape_str());
    Tensor<T> out(av.rows, av.cols);
    switch (kind) {
      case OpKind::Add: kernels::add<T>(av.size(), av.data.data(), bv.data.data(), out.data.data()); break;
      case OpKind::Sub: kernels::sub<T>(av.size(), av.data.data(), bv.data.data(), out.data.data()); break;
      case OpKind::Mul: kernels::mul<T>(av.size(), av.data.data(), bv.data.data(), out.data.data()); break;
      default: throw ShapeError("binary_same_shape: bad op");
    }
    return add_node(kind, {a, b}, std::move(out));
  }

  // softmax over `n` entries with stride `stride`
  static void softmax_span(const T* in, T* out, int n, int stride) {
    T mx = in[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, in[static_cast<size_t>(i) * stride]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
      T e = std::exp(in[static_cast<size_t>(i) * stride] - mx);
      out[static_cast<size_t>(i) * stride] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(i) * stride] *= inv;
  }

  Tensor<T>& ensure_grad(Node& n) {
    if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.rows, n.value.cols);
    return n.grad;
  }

  // Accumulate into input `idx`'s grad tensor (allocating if needed), if that
  // input participates in differentiation.
  Tensor<T>* grad_sink(Node& n, int idx) {
    Node& src = node(n.in[static_cast<size_t>(idx)]);
    if (!src.needs_grad) return nullptr;
    return &ensure_grad(src);
  }

  const Tensor<T>& in_val(const Node& n, int idx) const {
    return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(idx)])].value;
  }

  void backward_node(Node& n) {
    const Tensor<T>& dy = n.grad;
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Param:
      case OpKind::StopGrad:
        break;
      case OpKind::Add: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        if (Tensor<T>* g = grad_sink(n, 1))
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        break;
      }
      case OpKind::Sub: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        if (Tensor<T>* g = grad_sink(n, 1))
          kernels::sub<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        break;
      }
      case OpKind::Mul: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::fma<T>(dy.size(), dy.data.data(), in_val(n, 1).data.data(), g->data.data());
        if (Tensor<T>* g = grad_sink(n, 1))
          kernels::fma<T>(dy.size(), dy.data.data(), in_val(n, 0).data.data(), g->data.data());
        break;
      }
      case OpKind::AddRow: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        if (Tensor<T>* g = grad_sink(n, 1))
          for (int r = 0; r < dy.rows; ++r)
            kernels::add<T>(static_cast<size_t>(dy.cols), g->row(0), dy.row(r), g->row(0));
        break;
      }
      case OpKind::Matmul: {
        const bool ta = n.i0 != 0, tb = n.i1 != 0;
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        if (!ta && !tb) {
          if (Tensor<T>* g = grad_sink(n, 0)) matmul_into(*g, dy, b, false, true, true);
          if (Tensor<T>* g = grad_sink(n, 1)) matmul_into(*g, a, dy, true, false, true);
        } else if (!ta && tb) {
          if (Tensor<T>* g = grad_sink(n, 0)) matmul_into(*g, dy, b, false, false, true);
          if (Tensor<T>* g = grad_sink(n, 1)) matmul_into(*g, dy, a, true, false, true);
        } else {  // ta && !tb
          if (Tensor<T>* g = grad_sink(n, 0)) matmul_into(*g, b, dy, false, true, true);
          if (Tensor<T>* g = grad_sink(n, 1)) matmul_into(*g, a, dy, false, false, true);
        }
        break;
      }
      case OpKind::Relu: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::relu_bwd<T>(dy.size(), in_val(n, 0).data.data(), dy.data.data(),
                               g->data.data());
        break;
      }
      case OpKind::Sigmoid: {
        if (Tensor<T>* g = grad_sink(n, 0))
          for (size_t i = 0; i < dy.size(); ++i) {
            T s = n.value.data[i];
            g->data[i] += dy.data[i] * s * (T(1) - s);
          }
        break;
      }
      case OpKind::Tanh: {
        if (Tensor<T>* g = grad_sink(n, 0))
          for (size_t i = 0; i < dy.size(); ++i) {
            T t = n.value.data[i];
            g->data[i] += dy.data[i] * (T(1) - t * t);
          }
        break;
      }
      case OpKind::Softmax: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        const Tensor<T>& y = n.value;
        if (n.i0 == 1) {
          for (int r = 0; r < y.rows; ++r) {
            const T* yr = y.row(r);
            const T* dyr = dy.row(r);
            T dot = kernels::dot<T>(yr, dyr, static_cast<size_t>(y.cols));
            T* gr = g->row(r);
            for (int c = 0; c < y.cols; ++c) gr[c] += yr[c] * (dyr[c] - dot);
          }
        } else {
          for (int c = 0; c < y.cols; ++c) {
            T dot = T(0);
            for (int r = 0; r < y.rows; ++r) dot += y.at(r, c) * dy.at(r, c);
            for (int r = 0; r < y.rows; ++r) g->at(r, c) += y.at(r, c) * (dy.at(r, c) - dot);
          }
        }
        break;
      }
      case OpKind::LogSoftmax: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        for (int r = 0; r < dy.rows; ++r) {
          const T* dyr = dy.row(r);
          const T* yr = n.value.row(r);
          T s = kernels::sum<T>(dyr, static_cast<size_t>(dy.cols));
          T* gr = g->row(r);
          for (int c = 0; c < dy.cols; ++c) gr[c] += dyr[c] - std::exp(yr[c]) * s;
        }
        break;
      }
      case OpKind::LayerNorm: {
        const Tensor<T>& xhat = n.aux[0];
        const Tensor<T>& inv_sigma = n.aux[1];
        const Tensor<T>& gval = in_val(n, 1);
        const int d = dy.cols;
        Tensor<T>* gx = grad_sink(n, 0);
        Tensor<T>* gg = grad_sink(n, 1);
        Tensor<T>* gb = grad_sink(n, 2);
        std::vector<T> dxhat(static_cast<size_t>(d));
        for (int r = 0; r < dy.rows; ++r) {
          const T* dyr = dy.row(r);
          const T* xh = xhat.row(r);
          if (gg)
            kernels::fma<T>(static_cast<size_t>(d), dyr, xh, gg->row(0));
          if (gb) kernels::add<T>(static_cast<size_t>(d), gb->row(0), dyr, gb->row(0));
          if (gx) {
            kernels::mul<T>(static_cast<size_t>(d), dyr, gval.row(0), dxhat.data());
            T mean_dxhat = kernels::sum<T>(dxhat.data(), static_cast<size_t>(d)) / T(d);
            T mean_dxhat_xhat =
                kernels::dot<T>(dxhat.data(), xh, static_cast<size_t>(d)) / T(d);
            T inv = inv_sigma.data[static_cast<size_t>(r)];
            T* gr = gx->row(r);
            for (int c = 0; c < d; ++c)
              gr[c] += inv * (dxhat[static_cast<size_t>(c)] - mean_dxhat - xh[c] * mean_dxhat_xhat);
          }
        }
        break;
      }
      case OpKind::ConcatCols: {
        const int ca = in_val(n, 0).cols;
        if (Tensor<T>* g = grad_sink(n, 0))
          for (int r = 0; r < dy.rows; ++r)
            kernels::add<T>(static_cast<size_t>(ca), g->row(r), dy.row(r), g->row(r));
        if (Tensor<T>* g = grad_sink(n, 1))
          for (int r = 0; r < dy.rows; ++r)
            kernels::add<T>(static_cast<size_t>(g->cols), g->row(r), dy.row(r) + ca, g->row(r));
        break;
      }
      case OpKind::ConcatRows: {
        const int ra = in_val(n, 0).rows;
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(g->size(), g->data.data(), dy.data.data(), g->data.data());
        if (Tensor<T>* g = grad_sink(n, 1))
          kernels::add<T>(g->size(), g->data.data(),
                          dy.data.data() + static_cast<size_t>(ra) * dy.cols, g->data.data());
        break;
      }
      case OpKind::SliceRows: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(dy.size(), g->row(n.i0), dy.data.data(), g->row(n.i0));
        break;
      }
      case OpKind::RepeatBlock: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        for (int t = 0; t < n.i0; ++t)
          kernels::add<T>(g->size(), g->data.data(),
                          dy.data.data() + static_cast<size_t>(t) * g->size(), g->data.data());
        break;
      }
      case OpKind::RepeatInterleave: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        for (int r = 0; r < g->rows; ++r)
          for (int t = 0; t < n.i0; ++t)
            kernels::add<T>(static_cast<size_t>(g->cols), g->row(r), dy.row(r * n.i0 + t),
                            g->row(r));
        break;
      }
      case OpKind::PermuteRows: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        for (int r = 0; r < dy.rows; ++r)
          kernels::add<T>(static_cast<size_t>(dy.cols), g->row(n.perm[static_cast<size_t>(r)]),
                          dy.row(r), g->row(n.perm[static_cast<size_t>(r)]));
        break;
      }
      case OpKind::Reshape: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        break;
      }
      case OpKind::Transpose: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        for (int r = 0; r < dy.rows; ++r)
          for (int c = 0; c < dy.cols; ++c) g->at(c, r) += dy.at(r, c);
        break;
      }
      case OpKind::GroupedWeightedSum: {
        const Tensor<T>& w = in_val(n, 0);
        const Tensor<T>& x = in_val(n, 1);
        Tensor<T>* gw = grad_sink(n, 0);
        Tensor<T>* gx = grad_sink(n, 1);
        for (int g = 0; g < w.rows; ++g) {
          const T* dyr = dy.row(g);
          for (int j = 0; j < w.cols; ++j) {
            if (gw)
              gw->at(g, j) += kernels::dot<T>(dyr, x.row(g * w.cols + j),
                                              static_cast<size_t>(x.cols));
            if (gx)
              kernels::axpy<T>(static_cast<size_t>(x.cols), w.at(g, j), dyr,
                               gx->row(g * w.cols + j));
          }
        }
        break;
      }
      case OpKind::PairwiseHadamard: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        Tensor<T>* ga = grad_sink(n, 0);
        Tensor<T>* gb = grad_sink(n, 1);
        for (int i = 0; i < a.rows; ++i)
          for (int l = 0; l < b.rows; ++l) {
            const T* dyr = dy.row(i * b.rows + l);
            if (ga) kernels::fma<T>(static_cast<size_t>(a.cols), dyr, b.row(l), ga->row(i));
            if (gb) kernels::fma<T>(static_cast<size_t>(a.cols), dyr, a.row(i), gb->row(l));
          }
        break;
      }
      case OpKind::L2NormalizeRows: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        const Tensor<T>& norms = n.aux[0];
        for (int r = 0; r < dy.rows; ++r) {
          const T* yr = n.value.row(r);
          const T* dyr = dy.row(r);
          T d = kernels::dot<T>(yr, dyr, static_cast<size_t>(dy.cols));
          T inv = T(1) / norms.data[static_cast<size_t>(r)];
          T* gr = g->row(r);
          for (int c = 0; c < dy.cols; ++c) gr[c] += inv * (dyr[c] - yr[c] * d);
        }
        break;
      }
      case OpKind::Sdpa: {
        backward_sdpa(n);
        break;
      }
      case OpKind::Dropout: {
        Tensor<T>* g = grad_sink(n, 0);
        if (!g) break;
        if (n.aux.empty()) {
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        } else {
          kernels::fma<T>(dy.size(), dy.data.data(), n.aux[0].data.data(), g->data.data());
        }
        break;
      }
      case OpKind::SumAll: {
        if (Tensor<T>* g = grad_sink(n, 0))
          for (T& v : g->data) v += dy.data[0];
        break;
      }
      case OpKind::MeanAll: {
        if (Tensor<T>* g = grad_sink(n, 0)) {
          T d = dy.data[0] / static_cast<T>(g->size());
          for (T& v : g->data) v += d;
        }
        break;
      }
      case OpKind::ScaleConst: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::axpy<T>(dy.size(), static_cast<T>(n.d0), dy.data.data(), g->data.data());
        break;
      }
      case OpKind::AddConst: {
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::add<T>(dy.size(), g->data.data(), dy.data.data(), g->data.data());
        break;
      }
      case OpKind::ScalarMul: {
        const Tensor<T>& a = in_val(n, 0);
        const T s = in_val(n, 1).data[0];
        if (Tensor<T>* g = grad_sink(n, 0))
          kernels::axpy<T>(dy.size(), s, dy.data.data(), g->data.data());
        if (Tensor<T>* g = grad_sink(n, 1))
          g->data[0] += kernels::dot<T>(dy.data.data(), a.data.data(), dy.size());
        break;
      }
      case OpKind::Pick: {
        if (Tensor<T>* g = grad_sink(n, 0)) g->at(n.i0, n.i1) += dy.data[0];
        break;
      }
    }
  }

  void backward_sdpa(Node& n) {
    const Tensor<T>& q = in_val(n, 0);
    const Tensor<T>& k = in_val(n, 1);
    const Tensor<T>& v = in_val(n, 2);
    const Tensor<T>& attn = n.aux[0];
    const Tensor<T>& dy = n.grad;
    Tensor<T>* gq = grad_sink(n, 0);
    Tensor<T>* gk = grad_sink(n, 1);
    Tensor<T>* gv = grad_sink(n, 2);
    const int heads = n.i0, groups = n.i1;
    const int dm = q.cols;
    const int dh = dm / heads;
    const int nq = q.rows / groups;
    const int nk = k.rows / groups;
    const T scl = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> da(static_cast<size_t>(nk)), ds(static_cast<size_t>(nk));
    for (int g = 0; g < groups; ++g) {
      for (int h = 0; h < heads; ++h) {
        const int col = h * dh;
        for (int qi = 0; qi < nq; ++qi) {
          const T* dyr = dy.row(g * nq + qi) + col;
          const T* arow = attn.row((g * heads + h) * nq + qi);
          // dA = dO . V^T ; dV += A^T dO
          for (int kj = 0; kj < nk; ++kj) {
            da[static_cast<size_t>(kj)] =
                kernels::dot<T>(dyr, v.row(g * nk + kj) + col, static_cast<size_t>(dh));
            if (gv)
              kernels::axpy<T>(static_cast<size_t>(dh), arow[kj], dyr, gv->row(g * nk + kj) + col);
          }
          // dS = A (*) (dA - sum(dA (*) A))
          T dot = T(0);
          for (int kj = 0; kj < nk; ++kj) dot += da[static_cast<size_t>(kj)] * arow[kj];
          for (int kj = 0; kj < nk; ++kj)
            ds[static_cast<size_t>(kj)] = arow[kj] * (da[static_cast<size_t>(kj)] - dot) * scl;
          // dQ += dS . K ; dK += dS^T . Q
          const T* qrow = q.row(g * nq + qi) + col;
          for (int kj = 0; kj < nk; ++kj) {
            T w = ds[static_cast<size_t>(kj)];
            if (gq)
              kernels::axpy<T>(static_cast<size_t>(dh), w, k.row(g * nk + kj) + col,
                               gq->row(g * nq + qi) + col);
            if (gk) kernels::axpy<T>(static_cast<size_t>(dh), w, qrow, gk->row(g * nk + kj) + col);
          }
        }
      }
    }
  }
};

}  // namespace ndcr

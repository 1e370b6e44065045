#pragma once

// Tape-based reverse-mode autodiff over dense tensors.
//
// Every kernel appends one node to the tape holding its output and whatever
// locals its backward rule needs. Nodes are appended in evaluation order, so
// the tape is already topologically sorted and backward is a single reverse
// sweep. All reductions run in a fixed sequential order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sspt/ndgrad/tensor.hpp"

namespace sspt::ndgrad {

enum class OpKind : std::uint8_t {
  Input,
  Param,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Softmax,
  LogSoftmax,
  LayerNorm,
  Relu,
  Gelu,
  GatherRows,
  Pick,
  Concat,
  Slice,
  SumAxis,
  MeanAxis,
  SumAll,
  MeanAll,
  Square,
  Log,
  Reshape,
  Permute,
  PairwiseDiff,
};

inline const char* op_name(OpKind kind);

/// Handle to a node on a Graph tape.
struct NodeId {
  std::size_t index = 0;
};

template <typename T>
class Graph {
 public:
  /// `params` must outlive the graph. `trainable`, when non-empty, marks which
  /// params receive gradients; the others are treated as constants.
  explicit Graph(std::span<const Tensor<T>> params, std::vector<bool> trainable = {})
      : params_(params), trainable_(std::move(trainable)) {
    if (!trainable_.empty() && trainable_.size() != params_.size()) {
      throw ShapeError("graph: trainable mask length " + std::to_string(trainable_.size()) +
                       " != param count " + std::to_string(params_.size()));
    }
  }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor<T>& value(NodeId id) const { return nodes_.at(id.index).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  std::span<const std::size_t> inputs(NodeId id) const { return nodes_.at(id.index).in; }

  NodeId input(Tensor<T> t) {
    Node n(OpKind::Input);
    n.value = std::move(t);
    return push(std::move(n));
  }

  NodeId param(std::size_t param_id) {
    if (param_id >= params_.size()) {
      throw ShapeError("param: id " + std::to_string(param_id) + " out of range");
    }
    Node n(OpKind::Param);
    n.value = params_[param_id];
    n.ints = {param_id};
    bool grad = trainable_.empty() || trainable_[param_id];
    n.needs_grad = grad;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  /// a: [..., m, k]; b: [k, n] (broadcast over batch) or [..., k, n] with matching batch dims.
  /// With transpose_b, b is read as [..., n, k].
  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.rank() < 2 || B.rank() < 2) mismatch("matmul", A, B);
    const std::size_t m = A.dim(A.rank() - 2), k = A.dim(A.rank() - 1);
    const std::size_t bk = transpose_b ? B.dim(B.rank() - 1) : B.dim(B.rank() - 2);
    const std::size_t n = transpose_b ? B.dim(B.rank() - 2) : B.dim(B.rank() - 1);
    if (bk != k) mismatch("matmul", A, B);
    const bool broadcast = B.rank() == 2 && A.rank() > 2;
    if (!broadcast) {
      if (B.rank() != A.rank()) mismatch("matmul", A, B);
      for (std::size_t i = 0; i + 2 < A.rank(); ++i) {
        if (A.dim(i) != B.dim(i)) mismatch("matmul", A, B);
      }
    }
    Shape out_shape(A.shape().begin(), A.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    const std::size_t batch = numel(Shape(A.shape().begin(), A.shape().end() - 2));
    Tensor<T> C(out_shape);
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* pa = A.data().data() + bi * m * k;
      const T* pb = B.data().data() + (broadcast ? 0 : bi * k * n);
      T* pc = C.data().data() + bi * m * n;
      if (transpose_b) {
        gemm_nt(pa, pb, pc, m, k, n);
      } else {
        gemm_nn(pa, pb, pc, m, k, n);
      }
    }
    Node node(OpKind::MatMul);
    node.in = {a.index, b.index};
    node.value = std::move(C);
    node.ints = {m, k, n, batch, broadcast ? 1u : 0u, transpose_b ? 1u : 0u};
    return push(std::move(node));
  }

  /// Elementwise a + b; b may match a trailing suffix of a's shape and is broadcast.
  NodeId add(NodeId a, NodeId b) { return add_sub(a, b, OpKind::Add); }
  NodeId sub(NodeId a, NodeId b) { return add_sub(a, b, OpKind::Sub); }

  NodeId mul(NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.shape() != B.shape()) mismatch("mul", A, B);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    Node n(OpKind::Mul);
    n.in = {a.index, b.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId scale(NodeId a, T s) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * s;
    Node n(OpKind::Scale);
    n.in = {a.index};
    n.value = std::move(out);
    n.scalar = s;
    return push(std::move(n));
  }

  NodeId softmax(NodeId a) {
    const auto& A = value(a);
    require_rank("softmax", A, 1);
    const std::size_t d = A.dim(A.rank() - 1), rows = A.size() / d;
    Tensor<T> out(A.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* x = A.data().data() + r * d;
      T* y = out.data().data() + r * d;
      T mx = *std::max_element(x, x + d);
      T sum = 0;
      for (std::size_t j = 0; j < d; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      for (std::size_t j = 0; j < d; ++j) y[j] /= sum;
    }
    Node n(OpKind::Softmax);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId log_softmax(NodeId a) {
    const auto& A = value(a);
    require_rank("log_softmax", A, 1);
    const std::size_t d = A.dim(A.rank() - 1), rows = A.size() / d;
    Tensor<T> out(A.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* x = A.data().data() + r * d;
      T* y = out.data().data() + r * d;
      T mx = *std::max_element(x, x + d);
      T sum = 0;
      for (std::size_t j = 0; j < d; ++j) sum += std::exp(x[j] - mx);
      const T lse = mx + std::log(sum);
      for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - lse;
    }
    Node n(OpKind::LogSoftmax);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  /// Normalizes over the last axis, then applies gamma * xhat + beta (both shaped [d]).
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, T eps = T(1e-5)) {
    const auto& X = value(x);
    const auto& G = value(gamma);
    const auto& Bt = value(beta);
    require_rank("layer_norm", X, 1);
    const std::size_t d = X.dim(X.rank() - 1), rows = X.size() / d;
    if (G.shape() != Shape{d} || Bt.shape() != Shape{d}) mismatch("layer_norm", X, G);
    Tensor<T> out(X.shape());
    std::vector<T> cache(X.size() + rows);  // xhat followed by per-row rstd
    for (std::size_t r = 0; r < rows; ++r) {
      const T* px = X.data().data() + r * d;
      T mean = 0;
      for (std::size_t j = 0; j < d; ++j) mean += px[j];
      mean /= T(d);
      T var = 0;
      for (std::size_t j = 0; j < d; ++j) var += (px[j] - mean) * (px[j] - mean);
      var /= T(d);
      const T rstd = T(1) / std::sqrt(var + eps);
      cache[X.size() + r] = rstd;
      for (std::size_t j = 0; j < d; ++j) {
        const T xh = (px[j] - mean) * rstd;
        cache[r * d + j] = xh;
        out[r * d + j] = xh * G[j] + Bt[j];
      }
    }
    Node n(OpKind::LayerNorm);
    n.in = {x.index, gamma.index, beta.index};
    n.value = std::move(out);
    n.cache = std::move(cache);
    return push(std::move(n));
  }

  NodeId relu(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > T(0) ? A[i] : T(0);
    Node n(OpKind::Relu);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  /// max(x, 0); same kernel as relu.
  NodeId max_with_zero(NodeId a) { return relu(a); }

  /// Tanh approximation of GELU.
  NodeId gelu(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T x = A[i];
      out[i] = T(0.5) * x * (T(1) + std::tanh(kGeluC * (x + T(0.044715) * x * x * x)));
    }
    Node n(OpKind::Gelu);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  /// Embedding lookup: rows of table [V, d] selected by ids -> [ids.size(), d].
  NodeId gather_rows(NodeId table, std::span<const std::size_t> ids) {
    const auto& Tb = value(table);
    if (Tb.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + to_string(Tb.shape()));
    const std::size_t v = Tb.dim(0), d = Tb.dim(1);
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= v) throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " >= " + std::to_string(v));
      std::copy_n(Tb.data().data() + ids[i] * d, d, out.data().data() + i * d);
    }
    Node n(OpKind::GatherRows);
    n.in = {table.index};
    n.value = std::move(out);
    n.ints.assign(ids.begin(), ids.end());
    return push(std::move(n));
  }

  /// out[r] = a[r, indices[r]] over the last axis of a.
  NodeId pick(NodeId a, std::span<const std::size_t> indices) {
    const auto& A = value(a);
    require_rank("pick", A, 1);
    const std::size_t d = A.dim(A.rank() - 1), rows = A.size() / d;
    if (indices.size() != rows) {
      throw ShapeError("pick: " + std::to_string(indices.size()) + " indices for " + std::to_string(rows) +
                       " rows of " + to_string(A.shape()));
    }
    Tensor<T> out(Shape(A.shape().begin(), A.shape().end() - 1));
    for (std::size_t r = 0; r < rows; ++r) {
      if (indices[r] >= d) {
        throw ShapeError("pick: index " + std::to_string(indices[r]) + " out of range for width " + std::to_string(d));
      }
      out[r] = A[r * d + indices[r]];
    }
    Node n(OpKind::Pick);
    n.in = {a.index};
    n.value = std::move(out);
    n.ints.assign(indices.begin(), indices.end());
    return push(std::move(n));
  }

  /// Concatenate along the last axis.
  NodeId concat(NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.rank() == 0 || A.rank() != B.rank() ||
        !std::equal(A.shape().begin(), A.shape().end() - 1, B.shape().begin())) {
      mismatch("concat", A, B);
    }
    const std::size_t da = A.dim(A.rank() - 1), db = B.dim(B.rank() - 1), rows = A.size() / da;
    Shape s = A.shape();
    s.back() = da + db;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(A.data().data() + r * da, da, out.data().data() + r * (da + db));
      std::copy_n(B.data().data() + r * db, db, out.data().data() + r * (da + db) + da);
    }
    Node n(OpKind::Concat);
    n.in = {a.index, b.index};
    n.value = std::move(out);
    n.ints = {da, db};
    return push(std::move(n));
  }

  /// Columns [begin, end) of the last axis.
  NodeId slice(NodeId a, std::size_t begin, std::size_t end) {
    const auto& A = value(a);
    require_rank("slice", A, 1);
    const std::size_t d = A.dim(A.rank() - 1), rows = A.size() / d;
    if (begin >= end || end > d) {
      throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                       to_string(A.shape()));
    }
    Shape s = A.shape();
    s.back() = end - begin;
    Tensor<T> out(s);
    const std::size_t w = end - begin;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(A.data().data() + r * d + begin, w, out.data().data() + r * w);
    }
    Node n(OpKind::Slice);
    n.in = {a.index};
    n.value = std::move(out);
    n.ints = {begin, end, d};
    return push(std::move(n));
  }

  NodeId sum(NodeId a, std::size_t axis) { return reduce_axis(a, axis, OpKind::SumAxis); }
  NodeId mean(NodeId a, std::size_t axis) { return reduce_axis(a, axis, OpKind::MeanAxis); }

  NodeId sum_all(NodeId a) {
    const auto& A = value(a);
    T s = 0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A[i];
    Node n(OpKind::SumAll);
    n.in = {a.index};
    n.value = Tensor<T>::scalar(s);
    return push(std::move(n));
  }

  NodeId mean_all(NodeId a) {
    const auto& A = value(a);
    T s = 0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A[i];
    Node n(OpKind::MeanAll);
    n.in = {a.index};
    n.value = Tensor<T>::scalar(s / T(A.size()));
    return push(std::move(n));
  }

  NodeId square(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * A[i];
    Node n(OpKind::Square);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId log(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(A[i]);
    Node n(OpKind::Log);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId reshape(NodeId a, Shape shape) {
    Tensor<T> out = value(a);
    out.reshape(std::move(shape));
    Node n(OpKind::Reshape);
    n.in = {a.index};
    n.value = std::move(out);
    return push(std::move(n));
  }

  /// out.shape[i] = a.shape[perm[i]].
  NodeId permute(NodeId a, std::vector<std::size_t> perm) {
    const auto& A = value(a);
    if (perm.size() != A.rank()) {
      throw ShapeError("permute: permutation of length " + std::to_string(perm.size()) + " for " + to_string(A.shape()));
    }
    std::vector<bool> seen(perm.size(), false);
    for (auto p : perm) {
      if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation for " + to_string(A.shape()));
      seen[p] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = A.dim(perm[i]);
    Tensor<T> out(out_shape);
    permute_copy(A, perm, out, false);
    Node n(OpKind::Permute);
    n.in = {a.index};
    n.value = std::move(out);
    n.ints = std::move(perm);
    return push(std::move(n));
  }

  /// x: [n] -> [n, n] with out[i, j] = x[i] - x[j].
  NodeId pairwise_diff(NodeId a) {
    const auto& A = value(a);
    if (A.rank() != 1) throw ShapeError("pairwise_diff: expected rank 1, got " + to_string(A.shape()));
    const std::size_t n = A.size();
    Tensor<T> out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = A[i] - A[j];
    }
    Node node(OpKind::PairwiseDiff);
    node.in = {a.index};
    node.value = std::move(out);
    return push(std::move(node));
  }

  /// Gradients of a scalar node with respect to every param; params the loss
  /// does not reach (or that are not trainable) get zeros.
  std::vector<Tensor<T>> backward(NodeId loss) {
    const auto& L = value(loss);
    if (L.rank() != 0) throw ShapeError("backward: loss must be a scalar, got " + to_string(L.shape()));
    std::vector<Tensor<T>> grads(nodes_.size());
    std::vector<bool> has(nodes_.size(), false);
    grads[loss.index] = Tensor<T>::scalar(T(1));
    has[loss.index] = true;

    std::vector<Tensor<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.emplace_back(p.shape());

    for (std::size_t idx = loss.index + 1; idx-- > 0;) {
      if (!has[idx]) continue;
      Node& node = nodes_[idx];
      const Tensor<T>& g = grads[idx];
      if (node.kind == OpKind::Param) {
        auto& dst = out[node.ints[0]];
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
      } else {
        backprop(node, g, grads, has);
      }
      grads[idx] = Tensor<T>();  // release
    }
    return out;
  }

 private:
  static constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)

  struct Node {
    explicit Node(OpKind k) : kind(k) {}
    OpKind kind;
    std::vector<std::size_t> in;
    Tensor<T> value;
    std::vector<T> cache;
    std::vector<std::size_t> ints;
    T scalar = T(0);
    bool needs_grad = false;
  };

  NodeId push(Node n) {
    if (n.kind != OpKind::Input) {
      for (auto i : n.in) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    }
    if (!n.value.all_finite()) {
      throw NonFiniteError(std::string("kernel ") + op_name(n.kind) + " produced a non-finite value (output shape " +
                           to_string(n.value.shape()) + ")");
    }
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  [[noreturn]] static void mismatch(const char* kernel, const Tensor<T>& a, const Tensor<T>& b) {
    throw ShapeError(std::string(kernel) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }

  static void require_rank(const char* kernel, const Tensor<T>& a, std::size_t min_rank) {
    if (a.rank() < min_rank || a.size() == 0) {
      throw ShapeError(std::string(kernel) + ": unsupported shape " + to_string(a.shape()));
    }
  }

  // C[m,n] = A[m,k] * B[k,n]
  static void gemm_nn(const T* __restrict A, const T* __restrict B, T* __restrict C, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      T* __restrict c = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a = A[i * k + p];
        const T* __restrict b = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
      }
    }
  }

  // C[m,n] = A[m,k] * B[n,k]^T
  // B is transposed into scratch so the inner loop runs over contiguous output columns.
  static void gemm_nt(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    thread_local std::vector<T> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    }
    gemm_nn(A, bt.data(), C, m, k, n);
  }

  // C[k,n] += A[m,k]^T * G[m,n]
  static void gemm_tn(const T* __restrict A, const T* __restrict G, T* __restrict C, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* __restrict g = G + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a = A[i * k + p];
        T* __restrict c = C + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * g[j];
      }
    }
  }

  NodeId add_sub(NodeId a, NodeId b, OpKind kind) {
    const auto& A = value(a);
    const auto& B = value(b);
    const char* name = kind == OpKind::Add ? "add" : "sub";
    if (B.rank() > A.rank() || !std::equal(B.shape().rbegin(), B.shape().rend(), A.shape().rbegin())) {
      mismatch(name, A, B);
    }
    const std::size_t inner = B.size();
    const std::size_t reps = inner == 0 ? 0 : A.size() / inner;
    Tensor<T> out(A.shape());
    const T sign = kind == OpKind::Add ? T(1) : T(-1);
    for (std::size_t r = 0; r < reps; ++r) {
      for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = A[r * inner + j] + sign * B[j];
    }
    Node n(kind);
    n.in = {a.index, b.index};
    n.value = std::move(out);
    n.ints = {reps, inner};
    return push(std::move(n));
  }

  NodeId reduce_axis(NodeId a, std::size_t axis, OpKind kind) {
    const auto& A = value(a);
    if (axis >= A.rank()) {
      throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) + " out of range for " +
                       to_string(A.shape()));
    }
    const std::size_t outer = numel(Shape(A.shape().begin(), A.shape().begin() + axis));
    const std::size_t len = A.dim(axis);
    const std::size_t inner = numel(Shape(A.shape().begin() + axis + 1, A.shape().end()));
    Shape s = A.shape();
    s.erase(s.begin() + axis);
    Tensor<T> out(s);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t l = 0; l < len; ++l) {
        const T* src = A.data().data() + (o * len + l) * inner;
        T* dst = out.data().data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
    if (kind == OpKind::MeanAxis) {
      for (auto& v : out.storage()) v /= T(len);
    }
    Node n(kind);
    n.in = {a.index};
    n.value = std::move(out);
    n.ints = {outer, len, inner};
    return push(std::move(n));
  }

  // Copies src into dst laid out by perm. When `inverse`, scatters dst-shaped
  // data (src) back into the original layout (dst).
  static void permute_copy(const Tensor<T>& src, const std::vector<std::size_t>& perm, Tensor<T>& dst,
                           bool inverse) {
    const std::size_t r = perm.size();
    // Shape of the unpermuted tensor and its strides.
    const Shape& base = inverse ? dst.shape() : src.shape();
    std::vector<std::size_t> stride(r, 1);
    for (std::size_t i = r; i-- > 1;) stride[i - 1] = stride[i] * base[i];
    Shape pshape(r);
    for (std::size_t i = 0; i < r; ++i) pshape[i] = base[perm[i]];
    std::vector<std::size_t> idx(r, 0);
    const std::size_t total = numel(pshape);
    for (std::size_t lin = 0; lin < total; ++lin) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < r; ++i) off += idx[i] * stride[perm[i]];
      if (inverse) {
        dst[off] += src[lin];
      } else {
        dst[lin] = src[off];
      }
      for (std::size_t i = r; i-- > 0;) {
        if (++idx[i] < pshape[i]) break;
        idx[i] = 0;
      }
    }
  }

  Tensor<T>& grad_slot(std::vector<Tensor<T>>& grads, std::vector<bool>& has, std::size_t i) {
    if (!has[i]) {
      grads[i] = Tensor<T>(nodes_[i].value.shape());
      has[i] = true;
    }
    return grads[i];
  }

  bool wants(std::size_t i) const { return nodes_[i].needs_grad; }

  void backprop(const Node& node, const Tensor<T>& g, std::vector<Tensor<T>>& grads, std::vector<bool>& has) {
    switch (node.kind) {
      case OpKind::Input:
      case OpKind::Param:
        return;
      case OpKind::MatMul: {
        const std::size_t m = node.ints[0], k = node.ints[1], n = node.ints[2], batch = node.ints[3];
        const bool broadcast = node.ints[4] != 0, tb = node.ints[5] != 0;
        const auto& A = nodes_[node.in[0]].value;
        const auto& B = nodes_[node.in[1]].value;
        if (wants(node.in[0])) {
          auto& dA = grad_slot(grads, has, node.in[0]);
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const T* pg = g.data().data() + bi * m * n;
            const T* pb = B.data().data() + (broadcast ? 0 : bi * k * n);
            T* pa = dA.data().data() + bi * m * k;
            if (tb) {
              gemm_nn(pg, pb, pa, m, n, k);  // dA = G * B where B is [n,k]
            } else {
              gemm_nt(pg, pb, pa, m, n, k);  // dA = G * B^T where B is [k,n]
            }
          }
        }
        if (wants(node.in[1])) {
          auto& dB = grad_slot(grads, has, node.in[1]);
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const T* pg = g.data().data() + bi * m * n;
            const T* pa = A.data().data() + bi * m * k;
            T* pb = dB.data().data() + (broadcast ? 0 : bi * k * n);
            if (tb) {
              gemm_tn(pg, pa, pb, m, n, k);  // dB[n,k] = G^T * A
            } else {
              gemm_tn(pa, pg, pb, m, k, n);  // dB[k,n] = A^T * G
            }
          }
        }
        return;
      }
      case OpKind::Add:
      case OpKind::Sub: {
        const std::size_t reps = node.ints[0], inner = node.ints[1];
        if (wants(node.in[0])) {
          auto& dA = grad_slot(grads, has, node.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
        }
        if (wants(node.in[1])) {
          auto& dB = grad_slot(grads, has, node.in[1]);
          const T sign = node.kind == OpKind::Add ? T(1) : T(-1);
          for (std::size_t r = 0; r < reps; ++r) {
            for (std::size_t j = 0; j < inner; ++j) dB[j] += sign * g[r * inner + j];
          }
        }
        return;
      }
      case OpKind::Mul: {
        const auto& A = nodes_[node.in[0]].value;
        const auto& B = nodes_[node.in[1]].value;
        if (wants(node.in[0])) {
          auto& dA = grad_slot(grads, has, node.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * B[i];
        }
        if (wants(node.in[1])) {
          auto& dB = grad_slot(grads, has, node.in[1]);
          for (std::size_t i = 0; i < g.size(); ++i) dB[i] += g[i] * A[i];
        }
        return;
      }
      case OpKind::Scale: {
        if (!wants(node.in[0])) return;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * node.scalar;
        return;
      }
      case OpKind::Softmax: {
        if (!wants(node.in[0])) return;
        const auto& Y = node.value;
        const std::size_t d = Y.dim(Y.rank() - 1), rows = Y.size() / d;
        auto& dX = grad_slot(grads, has, node.in[0]);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * Y[r * d + j];
          for (std::size_t j = 0; j < d; ++j) dX[r * d + j] += Y[r * d + j] * (g[r * d + j] - dot);
        }
        return;
      }
      case OpKind::LogSoftmax: {
        if (!wants(node.in[0])) return;
        const auto& Y = node.value;
        const std::size_t d = Y.dim(Y.rank() - 1), rows = Y.size() / d;
        auto& dX = grad_slot(grads, has, node.in[0]);
        for (std::size_t r = 0; r < rows; ++r) {
          T gs = 0;
          for (std::size_t j = 0; j < d; ++j) gs += g[r * d + j];
          for (std::size_t j = 0; j < d; ++j) dX[r * d + j] += g[r * d + j] - std::exp(Y[r * d + j]) * gs;
        }
        return;
      }
      case OpKind::LayerNorm: {
        const auto& G = nodes_[node.in[1]].value;
        const std::size_t d = G.size(), rows = node.value.size() / d;
        const T* xhat = node.cache.data();
        const T* rstd = node.cache.data() + node.value.size();
        if (wants(node.in[1]) || wants(node.in[2])) {
          auto& dG = grad_slot(grads, has, node.in[1]);
          auto& dB = grad_slot(grads, has, node.in[2]);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              dG[j] += g[r * d + j] * xhat[r * d + j];
              dB[j] += g[r * d + j];
            }
          }
        }
        if (wants(node.in[0])) {
          auto& dX = grad_slot(grads, has, node.in[0]);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = g[r * d + j] * G[j];
              m1 += dxh;
              m2 += dxh * xhat[r * d + j];
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = g[r * d + j] * G[j];
              dX[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
        return;
      }
      case OpKind::Relu: {
        if (!wants(node.in[0])) return;
        const auto& A = nodes_[node.in[0]].value;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (A[i] > T(0)) dA[i] += g[i];
        }
        return;
      }
      case OpKind::Gelu: {
        if (!wants(node.in[0])) return;
        const auto& A = nodes_[node.in[0]].value;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = A[i];
          const T u = kGeluC * (x + T(0.044715) * x * x * x);
          const T th = std::tanh(u);
          const T du = kGeluC * (T(1) + T(3) * T(0.044715) * x * x);
          dA[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
        }
        return;
      }
      case OpKind::GatherRows: {
        if (!wants(node.in[0])) return;
        auto& dT = grad_slot(grads, has, node.in[0]);
        const std::size_t d = node.value.dim(1);
        for (std::size_t i = 0; i < node.ints.size(); ++i) {
          for (std::size_t j = 0; j < d; ++j) dT[node.ints[i] * d + j] += g[i * d + j];
        }
        return;
      }
      case OpKind::Pick: {
        if (!wants(node.in[0])) return;
        auto& dA = grad_slot(grads, has, node.in[0]);
        const auto& A = nodes_[node.in[0]].value;
        const std::size_t d = A.dim(A.rank() - 1);
        for (std::size_t r = 0; r < node.ints.size(); ++r) dA[r * d + node.ints[r]] += g[r];
        return;
      }
      case OpKind::Concat: {
        const std::size_t da = node.ints[0], db = node.ints[1], w = da + db, rows = node.value.size() / w;
        if (wants(node.in[0])) {
          auto& dA = grad_slot(grads, has, node.in[0]);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < da; ++j) dA[r * da + j] += g[r * w + j];
          }
        }
        if (wants(node.in[1])) {
          auto& dB = grad_slot(grads, has, node.in[1]);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < db; ++j) dB[r * db + j] += g[r * w + da + j];
          }
        }
        return;
      }
      case OpKind::Slice: {
        if (!wants(node.in[0])) return;
        const std::size_t begin = node.ints[0], end = node.ints[1], d = node.ints[2], w = end - begin;
        const std::size_t rows = node.value.size() / w;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) dA[r * d + begin + j] += g[r * w + j];
        }
        return;
      }
      case OpKind::SumAxis:
      case OpKind::MeanAxis: {
        if (!wants(node.in[0])) return;
        const std::size_t outer = node.ints[0], len = node.ints[1], inner = node.ints[2];
        const T f = node.kind == OpKind::MeanAxis ? T(1) / T(len) : T(1);
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t i = 0; i < inner; ++i) dA[(o * len + l) * inner + i] += f * g[o * inner + i];
          }
        }
        return;
      }
      case OpKind::SumAll:
      case OpKind::MeanAll: {
        if (!wants(node.in[0])) return;
        auto& dA = grad_slot(grads, has, node.in[0]);
        const T f = node.kind == OpKind::MeanAll ? g[0] / T(dA.size()) : g[0];
        for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += f;
        return;
      }
      case OpKind::Square: {
        if (!wants(node.in[0])) return;
        const auto& A = nodes_[node.in[0]].value;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += T(2) * A[i] * g[i];
        return;
      }
      case OpKind::Log: {
        if (!wants(node.in[0])) return;
        const auto& A = nodes_[node.in[0]].value;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] / A[i];
        return;
      }
      case OpKind::Reshape: {
        if (!wants(node.in[0])) return;
        auto& dA = grad_slot(grads, has, node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
        return;
      }
      case OpKind::Permute: {
        if (!wants(node.in[0])) return;
        auto& dA = grad_slot(grads, has, node.in[0]);
        permute_copy(g, node.ints, dA, true);
        return;
      }
      case OpKind::PairwiseDiff: {
        if (!wants(node.in[0])) return;
        auto& dA = grad_slot(grads, has, node.in[0]);
        const std::size_t n = dA.size();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            dA[i] += g[i * n + j];
            dA[j] -= g[i * n + j];
          }
        }
        return;
      }
    }
  }

  std::span<const Tensor<T>> params_;
  std::vector<bool> trainable_;
  std::vector<Node> nodes_;
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Pick: return "pick";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::SumAxis: return "sum";
    case OpKind::MeanAxis: return "mean";
    case OpKind::SumAll: return "sum_all";
    case OpKind::MeanAll: return "mean_all";
    case OpKind::Square: return "square";
    case OpKind::Log: return "log";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::PairwiseDiff: return "pairwise_diff";
  }
  return "unknown";
}

}  // namespace sspt::ndgrad

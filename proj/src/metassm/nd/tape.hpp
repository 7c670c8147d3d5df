#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "metassm/nd/tensor.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

/// Broadcast mode for a right-hand operand: full shape, one row, or scalar.
enum class Bcast : std::uint8_t { kNone = 0, kRow = 1, kScalar = 2 };

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScalarAffine,
  kTanh,
  kRelu,
  kSigmoid,
  kSoftplus,
  kExp,
  kLog,
  kSquare,
  kSqrtGuard,
  kSumAll,
  kMeanAll,
  kSumRows,
  kColMean,
  kConcatColsMany,
  kConcatRowsMany,
  kSliceRows,
  kSliceCols,
  kTileRows,
  kTranspose,
  kReshape,
  kGru,
  kGaussKlRows,
  kGaussLogpdfRows,
  kReparam,
  kLowRankFro2,
  kLogsumexpRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScalarAffine: return "scalar_affine";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kSqrtGuard: return "sqrt_guard";
    case Op::kSumAll: return "sum_all";
    case Op::kMeanAll: return "mean_all";
    case Op::kSumRows: return "sum_rows";
    case Op::kColMean: return "col_mean";
    case Op::kConcatColsMany: return "concat_cols";
    case Op::kConcatRowsMany: return "concat_rows";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kTileRows: return "tile_rows";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kGru: return "gru";
    case Op::kGaussKlRows: return "gauss_kl_rows";
    case Op::kGaussLogpdfRows: return "gauss_logpdf_rows";
    case Op::kReparam: return "reparam";
    case Op::kLowRankFro2: return "lowrank_fro2";
    case Op::kLogsumexpRows: return "logsumexp_rows";
  }
  return "?";
}

/// Reverse-mode autodiff over dense row-major matrices.
///
/// Nodes live in flat arenas that are reused across graphs via `clear()`.
/// `backward()` runs once per graph from a 1x1 loss node. Sequence models
/// push one node per op per step; heavy lifting (matmul, gru) maps onto
/// Eigen so a whole mini-batch slab is one GEMM.
template <typename S>
class TapeT {
 public:
  using Tensor = TensorT<S>;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;
  using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MapA = Eigen::Map<ArrX>;
  using CMapA = Eigen::Map<const ArrX>;

  struct Var {
    std::int32_t id = -1;
    bool ok() const { return id >= 0; }
  };

  TapeT() = default;

  /// Drops all nodes but keeps arena capacity for the next graph.
  void clear() {
    nodes_.clear();
    parents_.clear();
    values_.clear();
    aux_.clear();
    grads_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t value_elems() const { return values_.size(); }

  void set_check_finite(bool on) { check_finite_ = on; }

  // ---- graph inputs ----

  Var leaf(const Tensor& t) { return input(t, /*requires_grad=*/true); }
  Var constant(const Tensor& t) { return input(t, /*requires_grad=*/false); }
  Var constant_scalar(S v) { return constant(Tensor::scalar(v)); }

  // ---- shape / value access ----

  int rows(Var x) const { return node(x).rows; }
  int cols(Var x) const { return node(x).cols; }

  const S* value(Var x) const { return values_.data() + node(x).val_off; }

  Tensor value_copy(Var x) const {
    const Node& n = node(x);
    Tensor t(n.rows, n.cols);
    std::copy_n(values_.data() + n.val_off, t.size(), t.data());
    return t;
  }

  S scalar_value(Var x) const {
    const Node& n = node(x);
    if (n.rows != 1 || n.cols != 1)
      throw DimensionError("scalar_value on non-scalar node");
    return values_[n.val_off];
  }

  bool grad_ready() const { return !grads_.empty(); }

  /// Valid after backward(); zero for nodes the loss does not depend on.
  const S* grad(Var x) const {
    if (grads_.empty()) throw UsageError("grad read before backward()");
    return grads_.data() + node(x).val_off;
  }

  Tensor grad_copy(Var x) const {
    const Node& n = node(x);
    Tensor t(n.rows, n.cols);
    std::copy_n(grad(x), t.size(), t.data());
    return t;
  }

  // ---- ops ----

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const int ar = node(a).rows, ac = node(a).cols;
    const int br = node(b).rows, bc = node(b).cols;
    const int m = trans_a ? ac : ar;
    const int k = trans_a ? ar : ac;
    const int kb = trans_b ? bc : br;
    const int n = trans_b ? br : bc;
    if (k != kb)
      throw DimensionError(shape_msg("matmul", node(a), node(b)));
    Var out = push(Op::kMatmul, m, n, {a.id, b.id},
                   trans_a ? 1 : 0, trans_b ? 1 : 0);
    CMapM A(pval(a), ar, ac);
    CMapM B(pval(b), br, bc);
    MapM C(val(out), m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
    return finish(out);
  }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }

  /// s0 * x + s1, elementwise with fixed scalars.
  Var scalar_affine(Var x, S s0, S s1) {
    const int r = node(x).rows, c = node(x).cols;
    const std::size_t ne = static_cast<std::size_t>(r) * c;
    Var out = push(Op::kScalarAffine, r, c, {x.id}, 0, 0, s0, s1);
    CMapA in(pval(x), ne);
    MapA o(val(out), ne);
    o = s0 * in + s1;
    return finish(out);
  }

  Var scale(Var x, S s) { return scalar_affine(x, s, S(0)); }
  Var neg(Var x) { return scalar_affine(x, S(-1), S(0)); }

  Var tanh(Var x) {
    return unary(Op::kTanh, x, [](S v) { return std::tanh(v); });
  }
  Var relu(Var x) {
    return unary(Op::kRelu, x, [](S v) { return v > S(0) ? v : S(0); });
  }
  Var sigmoid(Var x) {
    return unary(Op::kSigmoid, x, [](S v) { return sigmoid_scalar(v); });
  }
  Var softplus(Var x) {
    return unary(Op::kSoftplus, x, [](S v) {
      return std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v)));
    });
  }
  Var exp(Var x) {
    return unary(Op::kExp, x, [](S v) { return std::exp(v); });
  }
  Var log(Var x) {
    return unary(Op::kLog, x, [](S v) { return std::log(v); });
  }
  Var square(Var x) {
    return unary(Op::kSquare, x, [](S v) { return v * v; });
  }
  /// Elementwise sqrt whose gradient is clamped to zero below `guard`,
  /// so norms of zero-initialized factors stay differentiable in practice.
  Var sqrt_guard(Var x, S guard = S(1e-24)) {
    const int r = node(x).rows, c = node(x).cols;
    const std::size_t ne = static_cast<std::size_t>(r) * c;
    Var out = push(Op::kSqrtGuard, r, c, {x.id}, 0, 0, guard);
    const S* in = pval(x);
    S* o = val(out);
    for (std::size_t i = 0; i < ne; ++i) o[i] = std::sqrt(in[i]);
    return finish(out);
  }

  Var sum_all(Var x) {
    const std::size_t ne = elems(node(x));
    Var out = push(Op::kSumAll, 1, 1, {x.id});
    *val(out) = CMapA(pval(x), ne).sum();
    return finish(out);
  }

  Var mean_all(Var x) {
    const std::size_t ne = elems(node(x));
    Var out = push(Op::kMeanAll, 1, 1, {x.id});
    *val(out) = CMapA(pval(x), ne).mean();
    return finish(out);
  }

  /// Row sums: R x C -> R x 1.
  Var sum_rows(Var x) {
    const int r = node(x).rows, c = node(x).cols;
    Var out = push(Op::kSumRows, r, 1, {x.id});
    CMapM in(pval(x), r, c);
    MapM o(val(out), r, 1);
    o = in.rowwise().sum();
    return finish(out);
  }

  /// Column means: R x C -> 1 x C.
  Var col_mean(Var x) {
    const int r = node(x).rows, c = node(x).cols;
    Var out = push(Op::kColMean, 1, c, {x.id});
    CMapM in(pval(x), r, c);
    MapM o(val(out), 1, c);
    o = in.colwise().mean();
    return finish(out);
  }

  Var concat_cols(Var a, Var b) { return concat_cols({a, b}); }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat_cols of nothing");
    const int r = node(parts[0]).rows;
    int c = 0;
    std::vector<std::int32_t> ids;
    for (Var p : parts) {
      if (node(p).rows != r)
        throw DimensionError("concat_cols row mismatch");
      c += node(p).cols;
      ids.push_back(p.id);
    }
    Var out = push_many(Op::kConcatColsMany, r, c, ids);
    MapM o(val(out), r, c);
    int at = 0;
    for (Var p : parts) {
      const Node& np = node(p);
      o.block(0, at, r, np.cols) = CMapM(pval(p), np.rows, np.cols);
      at += np.cols;
    }
    return finish(out);
  }

  Var concat_rows(Var a, Var b) { return concat_rows({a, b}); }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat_rows of nothing");
    const int c = node(parts[0]).cols;
    int r = 0;
    std::vector<std::int32_t> ids;
    for (Var p : parts) {
      if (node(p).cols != c)
        throw DimensionError("concat_rows column mismatch");
      r += node(p).rows;
      ids.push_back(p.id);
    }
    Var out = push_many(Op::kConcatRowsMany, r, c, ids);
    S* o = val(out);
    for (Var p : parts) {
      const Node& np = node(p);
      std::copy_n(pval(p), elems(np), o);
      o += elems(np);
    }
    return finish(out);
  }

  /// Rows [r0, r1) of x.
  Var slice_rows(Var x, int r0, int r1) {
    const int r = node(x).rows, c = node(x).cols;
    if (r0 < 0 || r1 > r || r0 >= r1)
      throw DimensionError("slice_rows bounds");
    Var out = push(Op::kSliceRows, r1 - r0, c, {x.id}, r0, r1);
    std::copy_n(pval(x) + static_cast<std::size_t>(r0) * c,
                static_cast<std::size_t>(r1 - r0) * c, val(out));
    return finish(out);
  }

  /// Columns [c0, c1) of x.
  Var slice_cols(Var x, int c0, int c1) {
    const int r = node(x).rows, c = node(x).cols;
    if (c0 < 0 || c1 > c || c0 >= c1)
      throw DimensionError("slice_cols bounds");
    Var out = push(Op::kSliceCols, r, c1 - c0, {x.id}, c0, c1);
    CMapM in(pval(x), r, c);
    MapM o(val(out), r, c1 - c0);
    o = in.block(0, c0, r, c1 - c0);
    return finish(out);
  }

  /// Repeats a 1 x C row n times -> n x C.
  Var tile_rows(Var x, int n) {
    const int r = node(x).rows, c = node(x).cols;
    if (r != 1) throw DimensionError("tile_rows expects a row vector");
    Var out = push(Op::kTileRows, n, c, {x.id}, n);
    CMapM in(pval(x), 1, c);
    MapM o(val(out), n, c);
    o = in.replicate(n, 1);
    return finish(out);
  }

  Var transpose(Var x) {
    const int r = node(x).rows, c = node(x).cols;
    Var out = push(Op::kTranspose, c, r, {x.id});
    CMapM in(pval(x), r, c);
    MapM o(val(out), c, r);
    o = in.transpose();
    return finish(out);
  }

  /// Row-major reinterpretation to r x c (element count must match).
  Var reshape(Var x, int r, int c) {
    const std::size_t ne = elems(node(x));
    if (static_cast<std::size_t>(r) * c != ne)
      throw DimensionError("reshape changes element count");
    Var out = push(Op::kReshape, r, c, {x.id});
    std::copy_n(pval(x), ne, val(out));
    return finish(out);
  }

  /// Fused GRU cell. x: B x D, h: B x H, w_ih: 3H x D, w_hh: 3H x H,
  /// b_ih/b_hh: 1 x 3H with gate order (reset, update, candidate).
  /// Returns the next hidden state, B x H.
  Var gru(Var x, Var h, Var w_ih, Var w_hh, Var b_ih, Var b_hh) {
    const Node& nx = node(x);
    const Node& nh = node(h);
    const int B = nx.rows;
    const int D = nx.cols;
    const int H = nh.cols;
    const Node& wi = node(w_ih);
    const Node& wh = node(w_hh);
    if (nh.rows != B || wi.rows != 3 * H || wi.cols != D || wh.rows != 3 * H ||
        wh.cols != H || node(b_ih).rows != 1 || node(b_ih).cols != 3 * H ||
        node(b_hh).rows != 1 || node(b_hh).cols != 3 * H)
      throw DimensionError("gru operand shapes are inconsistent");

    const std::size_t bh = static_cast<std::size_t>(B) * H;
    Var out = push(Op::kGru, B, H, {x.id, h.id, w_ih.id, w_hh.id, b_ih.id,
                                    b_hh.id},
                   0, 0, S(0), S(0), /*aux_elems=*/4 * bh);

    scratch_a_.resize(B, 3 * H);
    scratch_b_.resize(B, 3 * H);
    MapM gx(scratch_a_.data(), B, 3 * H);
    MapM gh(scratch_b_.data(), B, 3 * H);
    gx.noalias() = CMapM(pval(x), B, D) *
                  CMapM(pval(w_ih), 3 * H, D).transpose();
    gx.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
        pval(b_ih), 3 * H);
    gh.noalias() = CMapM(pval(h), B, H) *
                  CMapM(pval(w_hh), 3 * H, H).transpose();
    gh.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
        pval(b_hh), 3 * H);

    S* auxp = aux(out);
    MapM r(auxp, B, H), z(auxp + bh, B, H), nn(auxp + 2 * bh, B, H),
        ghn(auxp + 3 * bh, B, H);
    r = (gx.block(0, 0, B, H) + gh.block(0, 0, B, H))
            .unaryExpr([](S v) { return sigmoid_scalar(v); });
    z = (gx.block(0, H, B, H) + gh.block(0, H, B, H))
            .unaryExpr([](S v) { return sigmoid_scalar(v); });
    ghn = gh.block(0, 2 * H, B, H);
    nn = (gx.block(0, 2 * H, B, H).array() + r.array() * ghn.array())
             .unaryExpr([](S v) { return std::tanh(v); });
    MapM o(val(out), B, H);
    o.array() = (S(1) - z.array()) * nn.array() +
                z.array() * CMapM(pval(h), B, H).array();
    return finish(out);
  }

  /// Row-wise KL( N(mu_q, exp(lv_q)) || N(mu_p, exp(lv_p)) ) summed over
  /// columns -> R x 1. The p-side arguments may be a single broadcast row.
  Var gauss_kl_rows(Var mu_q, Var lv_q, Var mu_p, Var lv_p) {
    const Node& nq = node(mu_q);
    const int R = nq.rows;
    const int C = nq.cols;
    if (!same_dims(lv_q, R, C)) throw DimensionError("gauss_kl_rows lv_q");
    const Bcast bm = row_bcast(mu_p, R, C, "gauss_kl_rows mu_p");
    const Bcast bl = row_bcast(lv_p, R, C, "gauss_kl_rows lv_p");
    Var out = push(Op::kGaussKlRows, R, 1,
                   {mu_q.id, lv_q.id, mu_p.id, lv_p.id},
                   static_cast<int>(bm), static_cast<int>(bl));
    const S* mq = pval(mu_q);
    const S* lq = pval(lv_q);
    const S* mp = pval(mu_p);
    const S* lp = pval(lv_p);
    S* o = val(out);
    for (int r = 0; r < R; ++r) {
      const S* mpr = mp + (bm == Bcast::kRow ? 0 : r * C);
      const S* lpr = lp + (bl == Bcast::kRow ? 0 : r * C);
      S acc = S(0);
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        const S dv = std::exp(lq[i] - lpr[c]);
        const S dm = mq[i] - mpr[c];
        acc += dv + dm * dm * std::exp(-lpr[c]) - S(1) + lpr[c] - lq[i];
      }
      o[r] = S(0.5) * acc;
    }
    return finish(out);
  }

  /// Row-wise diagonal-Gaussian log density of x under N(mu, exp(lv)),
  /// summed over columns -> R x 1. mu / lv may be broadcast rows.
  Var gauss_logpdf_rows(Var x, Var mu, Var lv) {
    const Node& nx = node(x);
    const int R = nx.rows;
    const int C = nx.cols;
    const Bcast bm = row_bcast(mu, R, C, "gauss_logpdf_rows mu");
    const Bcast bl = row_bcast(lv, R, C, "gauss_logpdf_rows lv");
    Var out = push(Op::kGaussLogpdfRows, R, 1, {x.id, mu.id, lv.id},
                   static_cast<int>(bm), static_cast<int>(bl));
    const S* xv = pval(x);
    const S* mv = pval(mu);
    const S* lv_ = pval(lv);
    S* o = val(out);
    const S ln2pi = static_cast<S>(std::log(2.0 * std::numbers::pi));
    for (int r = 0; r < R; ++r) {
      const S* mr = mv + (bm == Bcast::kRow ? 0 : r * C);
      const S* lr = lv_ + (bl == Bcast::kRow ? 0 : r * C);
      S acc = S(0);
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        const S d = xv[i] - mr[c];
        acc += ln2pi + lr[c] + d * d * std::exp(-lr[c]);
      }
      o[r] = S(-0.5) * acc;
    }
    return finish(out);
  }

  /// mu + exp(lv / 2) * eps, with eps a (typically constant) noise tensor.
  Var reparam(Var mu, Var lv, Var eps) {
    const int r = node(mu).rows, c = node(mu).cols;
    if (!same_dims(lv, r, c) || !same_dims(eps, r, c))
      throw DimensionError("reparam operand shapes differ");
    Var out = push(Op::kReparam, r, c, {mu.id, lv.id, eps.id});
    const std::size_t n = static_cast<std::size_t>(r) * c;
    CMapA m(pval(mu), n), l(pval(lv), n), e(pval(eps), n);
    MapA o(val(out), n);
    o = m + (S(0.5) * l).exp() * e;
    return finish(out);
  }

  /// Squared Frobenius norm of U * V^T without materializing the product.
  Var lowrank_fro2(Var u, Var v) {
    const int ur = node(u).rows, uc = node(u).cols;
    const int vr = node(v).rows, vc = node(v).cols;
    if (uc != vc) throw DimensionError("lowrank_fro2 rank mismatch");
    Var out = push(Op::kLowRankFro2, 1, 1, {u.id, v.id});
    CMapM U(pval(u), ur, uc);
    CMapM V(pval(v), vr, vc);
    Mat gu = U.transpose() * U;
    Mat gv = V.transpose() * V;
    *val(out) = (gu.array() * gv.array()).sum();
    return finish(out);
  }

  /// Row-wise log(sum(exp(x))) -> R x 1, computed stably.
  Var logsumexp_rows(Var x) {
    const int r = node(x).rows, c = node(x).cols;
    Var out = push(Op::kLogsumexpRows, r, 1, {x.id});
    CMapM in(pval(x), r, c);
    S* o = val(out);
    for (int i = 0; i < r; ++i) {
      const S m = in.row(i).maxCoeff();
      o[i] = m + std::log((in.row(i).array() - m).exp().sum());
    }
    return finish(out);
  }

  // ---- backward ----

  void backward(Var loss) {
    const Node& nl = node(loss);
    if (nl.rows != 1 || nl.cols != 1)
      throw UsageError("backward() expects a scalar loss node");
    if (!nl.rg)
      throw UsageError("loss does not depend on any differentiable leaf");
    grads_.assign(values_.size(), S(0));
    grads_[nl.val_off] = S(1);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      const Node& n = nodes_[i];
      if (!n.rg || n.op == Op::kLeaf || n.op == Op::kConstant) continue;
      backward_node(n);
    }
  }

 private:
  struct Node {
    Op op;
    bool rg = false;
    int rows = 0, cols = 0;
    std::int32_t pfirst = 0, pcount = 0;
    int i0 = 0, i1 = 0;
    S s0 = S(0), s1 = S(0);
    std::size_t val_off = 0;
    std::size_t aux_off = 0;
  };

  static S sigmoid_scalar(S v) {
    if (v >= S(0)) {
      const S e = std::exp(-v);
      return S(1) / (S(1) + e);
    }
    const S e = std::exp(v);
    return e / (S(1) + e);
  }

  static std::size_t elems(const Node& n) {
    return static_cast<std::size_t>(n.rows) * n.cols;
  }

  const Node& node(Var x) const {
    if (x.id < 0 || static_cast<std::size_t>(x.id) >= nodes_.size())
      throw UsageError("invalid tape handle");
    return nodes_[x.id];
  }

  S* val(Var x) { return values_.data() + nodes_[x.id].val_off; }
  const S* pval(Var x) const { return values_.data() + nodes_[x.id].val_off; }
  S* aux(Var x) { return aux_.data() + nodes_[x.id].aux_off; }
  const S* paux(const Node& n) const { return aux_.data() + n.aux_off; }

  S* gval(const Node& n) { return grads_.data() + n.val_off; }
  const S* cgval(const Node& n) const { return grads_.data() + n.val_off; }

  bool same_dims(Var x, int r, int c) const {
    return node(x).rows == r && node(x).cols == c;
  }

  Bcast row_bcast(Var x, int r, int c, const char* what) const {
    const Node& n = node(x);
    if (n.rows == r && n.cols == c) return Bcast::kNone;
    if (n.rows == 1 && n.cols == c) return Bcast::kRow;
    throw DimensionError(std::string(what) + ": shape neither full nor row");
  }

  std::string shape_msg(const char* what, const Node& a, const Node& b) const {
    return std::string(what) + " shape mismatch: " + std::to_string(a.rows) +
           "x" + std::to_string(a.cols) + " vs " + std::to_string(b.rows) +
           "x" + std::to_string(b.cols);
  }

  Var input(const Tensor& t, bool requires_grad) {
    Var out = push(requires_grad ? Op::kLeaf : Op::kConstant, t.rows, t.cols,
                   {});
    nodes_[out.id].rg = requires_grad;
    std::copy_n(t.data(), t.size(), val(out));
    return out;
  }

  Var push(Op op, int rows, int cols, std::initializer_list<std::int32_t> ps,
           int i0 = 0, int i1 = 0, S s0 = S(0), S s1 = S(0),
           std::size_t aux_elems = 0) {
    std::vector<std::int32_t> ids(ps);
    return push_many(op, rows, cols, ids, i0, i1, s0, s1, aux_elems);
  }

  Var push_many(Op op, int rows, int cols,
                const std::vector<std::int32_t>& ps, int i0 = 0, int i1 = 0,
                S s0 = S(0), S s1 = S(0), std::size_t aux_elems = 0) {
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.pfirst = static_cast<std::int32_t>(parents_.size());
    n.pcount = static_cast<std::int32_t>(ps.size());
    n.i0 = i0;
    n.i1 = i1;
    n.s0 = s0;
    n.s1 = s1;
    n.val_off = values_.size();
    n.aux_off = aux_.size();
    for (auto pid : ps) {
      if (pid < 0 || static_cast<std::size_t>(pid) >= nodes_.size())
        throw UsageError("op references an invalid tape handle");
      parents_.push_back(pid);
      n.rg = n.rg || nodes_[pid].rg;
    }
    values_.resize(values_.size() +
                   static_cast<std::size_t>(rows) * cols);
    aux_.resize(aux_.size() + aux_elems);
    nodes_.push_back(n);
    if (!grads_.empty()) grads_.clear();  // stale after graph growth
    return Var{static_cast<std::int32_t>(nodes_.size()) - 1};
  }

  Var finish(Var out) {
    if (check_finite_) {
      const Node& n = nodes_[out.id];
      const S* p = values_.data() + n.val_off;
      for (std::size_t i = 0; i < elems(n); ++i)
        if (!std::isfinite(p[i]))
          throw NumericError(std::string("non-finite value out of ") +
                             op_name(n.op));
    }
    return out;
  }

  Var binary(Op op, Var a, Var b) {
    const int ar = node(a).rows, ac = node(a).cols;
    const int br = node(b).rows, bc_ = node(b).cols;
    Bcast bc;
    if (br == ar && bc_ == ac) bc = Bcast::kNone;
    else if (br == 1 && bc_ == ac) bc = Bcast::kRow;
    else if (br == 1 && bc_ == 1) bc = Bcast::kScalar;
    else throw DimensionError(shape_msg(op_name(op), node(a), node(b)));

    Var out = push(op, ar, ac, {a.id, b.id}, static_cast<int>(bc));
    const std::size_t n = static_cast<std::size_t>(ar) * ac;
    CMapA av(pval(a), n);
    MapA o(val(out), n);
    if (bc == Bcast::kNone) {
      CMapA bv(pval(b), n);
      if (op == Op::kAdd) o = av + bv;
      else if (op == Op::kSub) o = av - bv;
      else o = av * bv;
    } else if (bc == Bcast::kScalar) {
      const S s = *pval(b);
      if (op == Op::kAdd) o = av + s;
      else if (op == Op::kSub) o = av - s;
      else o = av * s;
    } else {
      CMapM am(pval(a), ar, ac);
      MapM om(val(out), ar, ac);
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> brow(pval(b), ac);
      if (op == Op::kAdd) om = am.rowwise() + brow;
      else if (op == Op::kSub) om = am.rowwise() - brow;
      else om.array() = am.array().rowwise() * brow.array();
    }
    return finish(out);
  }

  template <typename F>
  Var unary(Op op, Var x, F&& f) {
    const int r = node(x).rows, c = node(x).cols;
    const std::size_t ne = static_cast<std::size_t>(r) * c;
    Var out = push(op, r, c, {x.id});
    const S* in = pval(x);
    S* o = val(out);
    for (std::size_t i = 0; i < ne; ++i) o[i] = f(in[i]);
    return finish(out);
  }

  // ---- backward dispatch ----

  void add_grad(std::int32_t pid, const S* g, std::size_t n) {
    Node& p = nodes_[pid];
    if (!p.rg) return;
    MapA(gval(p), n) += CMapA(g, n);
  }

  void backward_node(const Node& n) {
    const std::int32_t* ps = parents_.data() + n.pfirst;
    const S* g = cgval(n);
    switch (n.op) {
      case Op::kMatmul: backward_matmul(n, ps, g); break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: backward_binary(n, ps, g); break;
      case Op::kScalarAffine: {
        Node& p = nodes_[ps[0]];
        if (p.rg) MapA(gval(p), elems(n)) += n.s0 * CMapA(g, elems(n));
        break;
      }
      case Op::kTanh: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapA y(values_.data() + n.val_off, elems(n));
        MapA(gval(p), elems(n)) += CMapA(g, elems(n)) * (S(1) - y * y);
        break;
      }
      case Op::kRelu: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapA x(values_.data() + p.val_off, elems(n));
        MapA(gval(p), elems(n)) +=
            CMapA(g, elems(n)) * (x > S(0)).template cast<S>();
        break;
      }
      case Op::kSigmoid: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapA y(values_.data() + n.val_off, elems(n));
        MapA(gval(p), elems(n)) += CMapA(g, elems(n)) * y * (S(1) - y);
        break;
      }
      case Op::kSoftplus: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        const S* x = values_.data() + p.val_off;
        S* gp = gval(p);
        const std::size_t m = elems(n);
        for (std::size_t i = 0; i < m; ++i)
          gp[i] += g[i] * sigmoid_scalar(x[i]);
        break;
      }
      case Op::kExp: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapA y(values_.data() + n.val_off, elems(n));
        MapA(gval(p), elems(n)) += CMapA(g, elems(n)) * y;
        break;
      }
      case Op::kLog: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapA x(values_.data() + p.val_off, elems(n));
        MapA(gval(p), elems(n)) += CMapA(g, elems(n)) / x;
        break;
      }
      case Op::kSquare: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapA x(values_.data() + p.val_off, elems(n));
        MapA(gval(p), elems(n)) += S(2) * CMapA(g, elems(n)) * x;
        break;
      }
      case Op::kSqrtGuard: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        const S* x = values_.data() + p.val_off;
        const S* y = values_.data() + n.val_off;
        S* gp = gval(p);
        for (std::size_t i = 0; i < elems(n); ++i)
          if (x[i] > n.s0) gp[i] += g[i] / (S(2) * y[i]);
        break;
      }
      case Op::kSumAll: {
        Node& p = nodes_[ps[0]];
        if (p.rg) MapA(gval(p), elems(p)) += g[0];
        break;
      }
      case Op::kMeanAll: {
        Node& p = nodes_[ps[0]];
        if (p.rg) MapA(gval(p), elems(p)) += g[0] / static_cast<S>(elems(p));
        break;
      }
      case Op::kSumRows: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        MapM gp(gval(p), p.rows, p.cols);
        gp.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(
            g, p.rows);
        break;
      }
      case Op::kColMean: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        MapM gp(gval(p), p.rows, p.cols);
        gp.rowwise() +=
            (Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(g, p.cols) /
             static_cast<S>(p.rows));
        break;
      }
      case Op::kConcatColsMany: {
        CMapM go(g, n.rows, n.cols);
        int at = 0;
        for (std::int32_t k = 0; k < n.pcount; ++k) {
          Node& p = nodes_[ps[k]];
          if (p.rg)
            MapM(gval(p), p.rows, p.cols) += go.block(0, at, n.rows, p.cols);
          at += p.cols;
        }
        break;
      }
      case Op::kConcatRowsMany: {
        const S* gp = g;
        for (std::int32_t k = 0; k < n.pcount; ++k) {
          Node& p = nodes_[ps[k]];
          if (p.rg) MapA(gval(p), elems(p)) += CMapA(gp, elems(p));
          gp += elems(p);
        }
        break;
      }
      case Op::kSliceRows: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        MapA(gval(p) + static_cast<std::size_t>(n.i0) * p.cols, elems(n)) +=
            CMapA(g, elems(n));
        break;
      }
      case Op::kSliceCols: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        MapM gp(gval(p), p.rows, p.cols);
        gp.block(0, n.i0, p.rows, n.cols) += CMapM(g, n.rows, n.cols);
        break;
      }
      case Op::kTileRows: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        MapM gp(gval(p), 1, p.cols);
        gp += CMapM(g, n.rows, n.cols).colwise().sum();
        break;
      }
      case Op::kTranspose: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        MapM gp(gval(p), p.rows, p.cols);
        gp += CMapM(g, n.rows, n.cols).transpose();
        break;
      }
      case Op::kReshape: {
        Node& p = nodes_[ps[0]];
        if (p.rg) MapA(gval(p), elems(n)) += CMapA(g, elems(n));
        break;
      }
      case Op::kGru: backward_gru(n, ps, g); break;
      case Op::kGaussKlRows: backward_gauss_kl(n, ps, g); break;
      case Op::kGaussLogpdfRows: backward_gauss_logpdf(n, ps, g); break;
      case Op::kReparam: {
        Node& pm = nodes_[ps[0]];
        Node& pl = nodes_[ps[1]];
        Node& pe = nodes_[ps[2]];
        const std::size_t m = elems(n);
        if (pm.rg) MapA(gval(pm), m) += CMapA(g, m);
        if (pl.rg) {
          CMapA y(values_.data() + n.val_off, m);
          CMapA mu(values_.data() + pm.val_off, m);
          MapA(gval(pl), m) += CMapA(g, m) * S(0.5) * (y - mu);
        }
        if (pe.rg) {
          CMapA lv(values_.data() + pl.val_off, m);
          MapA(gval(pe), m) += CMapA(g, m) * (S(0.5) * lv).exp();
        }
        break;
      }
      case Op::kLowRankFro2: backward_lowrank_fro2(n, ps, g); break;
      case Op::kLogsumexpRows: {
        Node& p = nodes_[ps[0]];
        if (!p.rg) break;
        CMapM x(values_.data() + p.val_off, p.rows, p.cols);
        const S* y = values_.data() + n.val_off;
        MapM gp(gval(p), p.rows, p.cols);
        for (int r = 0; r < p.rows; ++r)
          gp.row(r).array() += g[r] * (x.row(r).array() - y[r]).exp();
        break;
      }
      case Op::kLeaf:
      case Op::kConstant:
        break;
      default:
        throw UsageError(std::string("missing backward for ") + op_name(n.op));
    }
  }

  void backward_matmul(const Node& n, const std::int32_t* ps, const S* g) {
    Node& pa = nodes_[ps[0]];
    Node& pb = nodes_[ps[1]];
    const bool ta = n.i0 != 0, tb = n.i1 != 0;
    CMapM A(values_.data() + pa.val_off, pa.rows, pa.cols);
    CMapM B(values_.data() + pb.val_off, pb.rows, pb.cols);
    CMapM G(g, n.rows, n.cols);
    if (pa.rg) {
      MapM gA(gval(pa), pa.rows, pa.cols);
      if (!ta && !tb) gA.noalias() += G * B.transpose();
      else if (!ta && tb) gA.noalias() += G * B;
      else if (ta && !tb) gA.noalias() += B * G.transpose();
      else gA.noalias() += B.transpose() * G.transpose();
    }
    if (pb.rg) {
      MapM gB(gval(pb), pb.rows, pb.cols);
      if (!ta && !tb) gB.noalias() += A.transpose() * G;
      else if (!ta && tb) gB.noalias() += G.transpose() * A;
      else if (ta && !tb) gB.noalias() += A * G;
      else gB.noalias() += G.transpose() * A.transpose();
    }
  }

  void backward_binary(const Node& n, const std::int32_t* ps, const S* g) {
    Node& pa = nodes_[ps[0]];
    Node& pb = nodes_[ps[1]];
    const Bcast bc = static_cast<Bcast>(n.i0);
    const std::size_t m = elems(n);
    const S sign = n.op == Op::kSub ? S(-1) : S(1);

    if (pa.rg) {
      if (n.op == Op::kMul) {
        if (bc == Bcast::kNone) {
          CMapA bv(values_.data() + pb.val_off, m);
          MapA(gval(pa), m) += CMapA(g, m) * bv;
        } else if (bc == Bcast::kScalar) {
          MapA(gval(pa), m) += CMapA(g, m) * values_[pb.val_off];
        } else {
          CMapM gm(g, n.rows, n.cols);
          Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> brow(
              values_.data() + pb.val_off, n.cols);
          MapM gp(gval(pa), n.rows, n.cols);
          gp.array() += gm.array().rowwise() * brow.array();
        }
      } else {
        MapA(gval(pa), m) += CMapA(g, m);
      }
    }
    if (pb.rg) {
      if (n.op == Op::kMul) {
        CMapA av(values_.data() + pa.val_off, m);
        if (bc == Bcast::kNone) {
          MapA(gval(pb), m) += CMapA(g, m) * av;
        } else if (bc == Bcast::kScalar) {
          gval(pb)[0] += (CMapA(g, m) * av).sum();
        } else {
          CMapM gm(g, n.rows, n.cols);
          CMapM am(values_.data() + pa.val_off, n.rows, n.cols);
          MapM gp(gval(pb), 1, n.cols);
          gp += (gm.array() * am.array()).matrix().colwise().sum();
        }
      } else {
        if (bc == Bcast::kNone) {
          MapA(gval(pb), m) += sign * CMapA(g, m);
        } else if (bc == Bcast::kScalar) {
          gval(pb)[0] += sign * CMapA(g, m).sum();
        } else {
          MapM gp(gval(pb), 1, n.cols);
          gp += sign * CMapM(g, n.rows, n.cols).colwise().sum();
        }
      }
    }
  }

  void backward_gru(const Node& n, const std::int32_t* ps, const S* g) {
    Node& px = nodes_[ps[0]];
    Node& ph = nodes_[ps[1]];
    Node& pwi = nodes_[ps[2]];
    Node& pwh = nodes_[ps[3]];
    Node& pbi = nodes_[ps[4]];
    Node& pbh = nodes_[ps[5]];
    const int B = n.rows, H = n.cols, D = px.cols;
    const std::size_t bh = static_cast<std::size_t>(B) * H;
    const S* auxp = paux(n);
    CMapM r(auxp, B, H), z(auxp + bh, B, H), nn(auxp + 2 * bh, B, H),
        ghn(auxp + 3 * bh, B, H);
    CMapM G(g, B, H);
    CMapM h(values_.data() + ph.val_off, B, H);
    CMapM x(values_.data() + px.val_off, B, D);

    scratch_a_.resize(B, 3 * H);
    scratch_b_.resize(B, 3 * H);
    MapM dgx(scratch_a_.data(), B, 3 * H);
    MapM dgh(scratch_b_.data(), B, 3 * H);

    Mat dn = (G.array() * (S(1) - z.array())).matrix();
    Mat dan = (dn.array() * (S(1) - nn.array() * nn.array())).matrix();
    Mat dz = (G.array() * (h.array() - nn.array())).matrix();
    Mat daz = (dz.array() * z.array() * (S(1) - z.array())).matrix();
    Mat dr = (dan.array() * ghn.array()).matrix();
    Mat dar = (dr.array() * r.array() * (S(1) - r.array())).matrix();

    dgx.block(0, 0, B, H) = dar;
    dgx.block(0, H, B, H) = daz;
    dgx.block(0, 2 * H, B, H) = dan;
    dgh.block(0, 0, B, H) = dar;
    dgh.block(0, H, B, H) = daz;
    dgh.block(0, 2 * H, B, H) = (dan.array() * r.array()).matrix();

    if (px.rg) {
      CMapM wi(values_.data() + pwi.val_off, 3 * H, D);
      MapM(gval(px), B, D).noalias() += dgx * wi;
    }
    if (pwi.rg)
      MapM(gval(pwi), 3 * H, D).noalias() += dgx.transpose() * x;
    if (pbi.rg)
      MapM(gval(pbi), 1, 3 * H) += dgx.colwise().sum();
    if (ph.rg) {
      CMapM wh(values_.data() + pwh.val_off, 3 * H, H);
      MapM gh_(gval(ph), B, H);
      gh_.array() += G.array() * z.array();
      gh_.noalias() += dgh * wh;
    }
    if (pwh.rg)
      MapM(gval(pwh), 3 * H, H).noalias() += dgh.transpose() * h;
    if (pbh.rg)
      MapM(gval(pbh), 1, 3 * H) += dgh.colwise().sum();
  }

  void backward_gauss_kl(const Node& n, const std::int32_t* ps, const S* g) {
    Node& pmq = nodes_[ps[0]];
    Node& plq = nodes_[ps[1]];
    Node& pmp = nodes_[ps[2]];
    Node& plp = nodes_[ps[3]];
    const int R = n.rows, C = pmq.cols;
    const Bcast bm = static_cast<Bcast>(n.i0);
    const Bcast bl = static_cast<Bcast>(n.i1);
    const S* mq = values_.data() + pmq.val_off;
    const S* lq = values_.data() + plq.val_off;
    const S* mp = values_.data() + pmp.val_off;
    const S* lp = values_.data() + plp.val_off;
    for (int r = 0; r < R; ++r) {
      const S gr = g[r];
      if (gr == S(0)) continue;
      const std::size_t mo = (bm == Bcast::kRow ? 0 : r) *
                             static_cast<std::size_t>(C);
      const std::size_t lo = (bl == Bcast::kRow ? 0 : r) *
                             static_cast<std::size_t>(C);
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        const S inv_sp = std::exp(-lp[lo + c]);
        const S dm = mq[i] - mp[mo + c];
        const S ratio = std::exp(lq[i] - lp[lo + c]);
        if (pmq.rg) gval(pmq)[i] += gr * dm * inv_sp;
        if (pmp.rg) gval(pmp)[mo + c] -= gr * dm * inv_sp;
        if (plq.rg) gval(plq)[i] += gr * S(0.5) * (ratio - S(1));
        if (plp.rg)
          gval(plp)[lo + c] +=
              gr * S(0.5) * (S(1) - ratio - dm * dm * inv_sp);
      }
    }
  }

  void backward_gauss_logpdf(const Node& n, const std::int32_t* ps,
                             const S* g) {
    Node& px = nodes_[ps[0]];
    Node& pm = nodes_[ps[1]];
    Node& pl = nodes_[ps[2]];
    const int R = n.rows, C = px.cols;
    const Bcast bm = static_cast<Bcast>(n.i0);
    const Bcast bl = static_cast<Bcast>(n.i1);
    const S* xv = values_.data() + px.val_off;
    const S* mv = values_.data() + pm.val_off;
    const S* lv = values_.data() + pl.val_off;
    for (int r = 0; r < R; ++r) {
      const S gr = g[r];
      if (gr == S(0)) continue;
      const std::size_t mo = (bm == Bcast::kRow ? 0 : r) *
                             static_cast<std::size_t>(C);
      const std::size_t lo = (bl == Bcast::kRow ? 0 : r) *
                             static_cast<std::size_t>(C);
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        const S inv_s = std::exp(-lv[lo + c]);
        const S d = xv[i] - mv[mo + c];
        if (px.rg) gval(px)[i] -= gr * d * inv_s;
        if (pm.rg) gval(pm)[mo + c] += gr * d * inv_s;
        if (pl.rg)
          gval(pl)[lo + c] -= gr * S(0.5) * (S(1) - d * d * inv_s);
      }
    }
  }

  void backward_lowrank_fro2(const Node& n, const std::int32_t* ps,
                             const S* g) {
    Node& pu = nodes_[ps[0]];
    Node& pv = nodes_[ps[1]];
    CMapM U(values_.data() + pu.val_off, pu.rows, pu.cols);
    CMapM V(values_.data() + pv.val_off, pv.rows, pv.cols);
    const S s = S(2) * g[0];
    if (pu.rg) {
      Mat gv = V.transpose() * V;
      MapM(gval(pu), pu.rows, pu.cols).noalias() += s * (U * gv);
    }
    if (pv.rg) {
      Mat gu = U.transpose() * U;
      MapM(gval(pv), pv.rows, pv.cols).noalias() += s * (V * gu);
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::int32_t> parents_;
  std::vector<S> values_;
  std::vector<S> grads_;
  std::vector<S> aux_;
  Mat scratch_a_, scratch_b_;
  bool check_finite_ = false;
};

using Tape = TapeT<double>;
using Var = Tape::Var;

/// x * W^T + b for a linear layer with W: out x in and b: 1 x out.
template <typename S>
typename TapeT<S>::Var linear(TapeT<S>& tp, typename TapeT<S>::Var x,
                              typename TapeT<S>::Var w,
                              typename TapeT<S>::Var b) {
  return tp.add(tp.matmul(x, w, false, true), b);
}

}  // namespace metassm

#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation as a node holding its value and a closure
// that propagates the node's gradient into its inputs. Vars are cheap
// handles (tape pointer + node index). All values are 2-D; scalars are 1x1.

#include "crm/errors.hpp"
#include "crm/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace crm {

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  // Accumulated by tapes during backward; scratch state, not part of the value.
  mutable Matrix<Scalar> grad;
  // Whether decoupled weight decay applies.
  bool decay = true;

  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, int)>;

  // With record=false no backward closures are stored; use for inference.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }

  Var<Scalar> parameter(const Parameter<Scalar>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return Var<Scalar>(this, it->second);
    const Parameter<Scalar>* target = &p;
    Var<Scalar> v = push(p.value, record_, [target](Tape& t, int self) {
      const Mat& g = t.grad(self);
      if (target->grad.size() == 0) target->grad.setZero(target->value.rows(), target->value.cols());
      target->grad += g;
    });
    leaves_.emplace(&p, v.id());
    return v;
  }

  // Adds a derived node. needs_grad should be true iff any input needs a gradient.
  Var<Scalar> push(Mat value, bool needs_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool needs_grad(const Var<Scalar>& v) const { return nodes_[v.id()].needs_grad; }

  // Gradient of the last backward root w.r.t. the node; empty if unreached.
  const Mat& grad(int id) const { return nodes_[id].grad; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Direct access for ops that scatter into a subset of rows.
  Mat& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(const Var<Scalar>& root, Scalar seed = Scalar(1)) {
    if (root.tape() != this) throw InputError("backward root belongs to another tape");
    const int r = root.id();
    if (!nodes_[r].needs_grad) return;
    nodes_[r].grad = Mat::Constant(nodes_[r].value.rows(), nodes_[r].value.cols(), seed);
    for (int i = r; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<Scalar>*, int> leaves_;
};

namespace ad {

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape()) throw InputError("operands recorded on different tapes");
  return *a.tape();
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& a) {
  return a.tape()->constant(a.value());
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value() * b.value();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

// a * b^T
template <typename Scalar>
Var<Scalar> matmul_bt(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw DimensionError("matmul_bt: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<Scalar>& tp, int self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, tp.grad(self));
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<Scalar>& tp, int self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, -tp.grad(self));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value() * s, t.needs_grad(ia), [ia, s](Tape<Scalar>& tp, int self) {
    tp.accumulate(ia, tp.grad(self) * s);
  });
}

// Sum of 1x1 scalars.
template <typename Scalar>
Var<Scalar> sum_scalars(const std::vector<Var<Scalar>>& terms) {
  if (terms.empty()) throw InputError("sum_scalars: no terms");
  auto& t = *terms.front().tape();
  Scalar total(0);
  bool needs = false;
  std::vector<int> ids;
  for (const auto& v : terms) {
    if (v.rows() != 1 || v.cols() != 1) throw DimensionError("sum_scalars: term is not 1x1");
    total += v.scalar();
    needs = needs || t.needs_grad(v.id());
    ids.push_back(v.id());
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), needs, [ids](Tape<Scalar>& tp, int self) {
    for (int id : ids) tp.accumulate(id, tp.grad(self));
  });
}

// a + broadcast(bias) where bias is 1 x cols.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& bias) {
  auto& t = detail::same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw DimensionError("add_row: bias must be 1 x cols");
  const int ia = a.id(), ib = bias.id();
  Matrix<Scalar> out = a.value().rowwise() + bias.value().row(0);
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    tp.accumulate(ia, g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  auto& t = *a.tape();
  const int ia = a.id();
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Matrix<Scalar> out = a.value().unaryExpr([inv_sqrt2](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  });
  return t.push(std::move(out), t.needs_grad(ia), [ia, inv_sqrt2](Tape<Scalar>& tp, int self) {
    const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    Matrix<Scalar> d = tp.value(ia).unaryExpr([inv_sqrt2, inv_sqrt_2pi](Scalar x) {
      return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(Scalar(-0.5) * x * x);
    });
    tp.accumulate(ia, tp.grad(self).cwiseProduct(d));
  });
}

// Row-wise standardisation: zero mean, unit variance over columns.
// With gamma/beta given, applies the affine transform (layer norm).
template <typename Scalar>
Var<Scalar> normalize_rows(const Var<Scalar>& a, const Var<Scalar>* gamma, const Var<Scalar>* beta, Scalar eps) {
  auto& t = *a.tape();
  const Eigen::Index n = a.cols();
  if (gamma && (gamma->rows() != 1 || gamma->cols() != n)) throw DimensionError("normalize_rows: gamma shape");
  if (beta && (beta->rows() != 1 || beta->cols() != n)) throw DimensionError("normalize_rows: beta shape");
  const auto& x = a.value();
  Vector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  Vector<Scalar> inv_std =
      ((centered.array().square().rowwise().sum() / Scalar(n)) + eps).sqrt().inverse().matrix();
  Matrix<Scalar> xhat = centered.array().colwise() * inv_std.array();
  Matrix<Scalar> out = xhat;
  if (gamma) out = out.array().rowwise() * gamma->value().row(0).array();
  if (beta) out = out.rowwise() + beta->value().row(0);
  const int ia = a.id();
  const int ig = gamma ? gamma->id() : -1;
  const int ib = beta ? beta->id() : -1;
  bool needs = t.needs_grad(ia) || (ig >= 0 && t.needs_grad(ig)) || (ib >= 0 && t.needs_grad(ib));
  return t.push(std::move(out), needs,
                [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.grad(self);
                  const Scalar cols = Scalar(g.cols());
                  if (ig >= 0 && tp.needs_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                  if (ib >= 0 && tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum());
                  if (!tp.needs_grad(ia)) return;
                  Matrix<Scalar> gx = g;
                  if (ig >= 0) gx = gx.array().rowwise() * tp.value(ig).row(0).array();
                  Vector<Scalar> m1 = gx.rowwise().sum() / cols;
                  Vector<Scalar> m2 = gx.cwiseProduct(xhat).rowwise().sum() / cols;
                  Matrix<Scalar> r = gx.colwise() - m1;
                  r -= (xhat.array().colwise() * m2.array()).matrix();
                  r = r.array().colwise() * inv_std.array();
                  tp.accumulate(ia, r);
                });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& a, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  return normalize_rows(a, &gamma, &beta, eps);
}

template <typename Scalar>
Var<Scalar> standardize_rows(const Var<Scalar>& a, Scalar eps) {
  return normalize_rows<Scalar>(a, nullptr, nullptr, eps);
}

// Elementwise maximum; ties route the gradient to the first operand.
template <typename Scalar>
Var<Scalar> maximum(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "maximum");
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value().cwiseMax(b.value());
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    auto first = (tp.value(ia).array() >= tp.value(ib).array());
    if (tp.needs_grad(ia)) tp.accumulate(ia, first.select(g.array(), Scalar(0)).matrix());
    if (tp.needs_grad(ib)) tp.accumulate(ib, first.select(Scalar(0), g.array()).matrix());
  });
}

// out.row(i) = a.row(index[i]); repeated indices accumulate on backward.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<int> index) {
  auto& t = *a.tape();
  const auto& x = a.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  const int ia = a.id();
  return t.push(std::move(out), t.needs_grad(ia), [ia, index = std::move(index)](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename Scalar>
Var<Scalar> hconcat(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw InputError("hconcat: no parts");
  auto& t = *parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("hconcat: row count mismatch");
    cols += p.cols();
    needs = needs || t.needs_grad(p.id());
    ids.push_back(p.id());
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.push(std::move(out), needs, [ids](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index w = tp.value(id).cols();
      if (tp.needs_grad(id)) tp.accumulate(id, g.middleCols(off, w));
      off += w;
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  auto& t = *a.tape();
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: range out of bounds");
  const int ia = a.id();
  Matrix<Scalar> out = a.value().middleCols(start, count);
  return t.push(std::move(out), t.needs_grad(ia), [ia, start, count](Tape<Scalar>& tp, int self) {
    tp.grad_buffer(ia).middleCols(start, count) += tp.grad(self);
  });
}

// Row i of the result is x.row(i) where keep[i] != 0, else the 1 x d token.
template <typename Scalar>
Var<Scalar> substitute_rows(const Var<Scalar>& x, const std::vector<std::uint8_t>& keep, const Var<Scalar>& token) {
  auto& t = detail::same_tape(x, token);
  if (static_cast<Eigen::Index>(keep.size()) != x.rows()) throw DimensionError("substitute_rows: keep length != rows");
  if (token.rows() != 1 || token.cols() != x.cols()) throw DimensionError("substitute_rows: token must be 1 x d");
  Matrix<Scalar> out = x.value();
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (!keep[i]) out.row(static_cast<Eigen::Index>(i)) = token.value().row(0);
  }
  const int ix = x.id(), it = token.id();
  return t.push(std::move(out), t.needs_grad(ix) || t.needs_grad(it), [ix, it, keep](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    const bool gx = tp.needs_grad(ix), gt = tp.needs_grad(it);
    RowVector<Scalar> token_grad = RowVector<Scalar>::Zero(g.cols());
    Matrix<Scalar>* xb = gx ? &tp.grad_buffer(ix) : nullptr;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (keep[i]) {
        if (gx) xb->row(r) += g.row(r);
      } else if (gt) {
        token_grad += g.row(r);
      }
    }
    if (gt) tp.accumulate(it, token_grad);
  });
}

// One attention group: the query rows attend over the key rows.
struct AttentionGroup {
  std::vector<int> query_rows;
  std::vector<int> key_rows;
};

// Fused multi-head scaled dot-product attention.
// q: Tq x d, k and v: Tk x d. Each group is attended independently per head;
// query rows not covered by any group produce zeros.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads,
                      std::shared_ptr<const std::vector<AttentionGroup>> groups) {
  auto& t = detail::same_tape(q, k);
  detail::same_tape(k, v);
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw DimensionError("attention: q/k/v widths differ");
  if (k.rows() != v.rows()) throw DimensionError("attention: k/v row counts differ");
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const Eigen::Index dh = d / heads;
  const Scalar sc = Scalar(1) / std::sqrt(Scalar(dh));

  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(Q.rows(), d);
  // Probabilities per (group, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>();
  probs->reserve(groups->size() * static_cast<std::size_t>(heads));

  Matrix<Scalar> qg, kg, vg;
  for (const auto& grp : *groups) {
    const auto nq = static_cast<Eigen::Index>(grp.query_rows.size());
    const auto nk = static_cast<Eigen::Index>(grp.key_rows.size());
    qg.resize(nq, d);
    kg.resize(nk, d);
    vg.resize(nk, d);
    for (Eigen::Index i = 0; i < nq; ++i) qg.row(i) = Q.row(grp.query_rows[i]);
    for (Eigen::Index j = 0; j < nk; ++j) {
      kg.row(j) = K.row(grp.key_rows[j]);
      vg.row(j) = V.row(grp.key_rows[j]);
    }
    for (int h = 0; h < heads; ++h) {
      Matrix<Scalar> s = (qg.middleCols(h * dh, dh) * kg.middleCols(h * dh, dh).transpose()) * sc;
      Vector<Scalar> mx = s.rowwise().maxCoeff();
      s = (s.colwise() - mx).array().exp().matrix();
      Vector<Scalar> z = s.rowwise().sum();
      s = s.array().colwise() / z.array();
      Matrix<Scalar> o = s * vg.middleCols(h * dh, dh);
      for (Eigen::Index i = 0; i < nq; ++i) out.row(grp.query_rows[i]).segment(h * dh, dh) = o.row(i);
      probs->push_back(std::move(s));
    }
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  const bool needs = t.needs_grad(iq) || t.needs_grad(ik) || t.needs_grad(iv);
  return t.push(std::move(out), needs, [iq, ik, iv, heads, dh, sc, groups, probs](Tape<Scalar>& tp, int self) {
    const auto& G = tp.grad(self);
    const auto& Q = tp.value(iq);
    const auto& K = tp.value(ik);
    const auto& V = tp.value(iv);
    const bool gq = tp.needs_grad(iq), gk = tp.needs_grad(ik), gv = tp.needs_grad(iv);
    Matrix<Scalar>* bq = gq ? &tp.grad_buffer(iq) : nullptr;
    Matrix<Scalar>* bk = gk ? &tp.grad_buffer(ik) : nullptr;
    Matrix<Scalar>* bv = gv ? &tp.grad_buffer(iv) : nullptr;
    const Eigen::Index d = Q.cols();
    Matrix<Scalar> qg, kg, vg, gg;
    std::size_t pi = 0;
    for (const auto& grp : *groups) {
      const auto nq = static_cast<Eigen::Index>(grp.query_rows.size());
      const auto nk = static_cast<Eigen::Index>(grp.key_rows.size());
      qg.resize(nq, d);
      gg.resize(nq, d);
      kg.resize(nk, d);
      vg.resize(nk, d);
      for (Eigen::Index i = 0; i < nq; ++i) {
        qg.row(i) = Q.row(grp.query_rows[i]);
        gg.row(i) = G.row(grp.query_rows[i]);
      }
      for (Eigen::Index j = 0; j < nk; ++j) {
        kg.row(j) = K.row(grp.key_rows[j]);
        vg.row(j) = V.row(grp.key_rows[j]);
      }
      for (int h = 0; h < heads; ++h) {
        const Matrix<Scalar>& p = (*probs)[pi++];
        auto go = gg.middleCols(h * dh, dh);
        if (gv) {
          Matrix<Scalar> dv = p.transpose() * go;
          for (Eigen::Index j = 0; j < nk; ++j) bv->row(grp.key_rows[j]).segment(h * dh, dh) += dv.row(j);
        }
        if (!gq && !gk) continue;
        Matrix<Scalar> dp = go * vg.middleCols(h * dh, dh).transpose();
        Vector<Scalar> rs = dp.cwiseProduct(p).rowwise().sum();
        Matrix<Scalar> ds = (p.array() * (dp.colwise() - rs).array()).matrix() * sc;
        if (gq) {
          Matrix<Scalar> dq = ds * kg.middleCols(h * dh, dh);
          for (Eigen::Index i = 0; i < nq; ++i) bq->row(grp.query_rows[i]).segment(h * dh, dh) += dq.row(i);
        }
        if (gk) {
          Matrix<Scalar> dk = ds.transpose() * qg.middleCols(h * dh, dh);
          for (Eigen::Index j = 0; j < nk; ++j) bk->row(grp.key_rows[j]).segment(h * dh, dh) += dk.row(j);
        }
      }
    }
  });
}

// Bilinear resampling matrix (dst x src) with half-pixel centres and edge clamping.
template <typename Scalar>
Matrix<Scalar> bilinear_weights(int src, int dst) {
  Matrix<Scalar> r = Matrix<Scalar>::Zero(dst, src);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (int i = 0; i < dst; ++i) {
    double s = (i + 0.5) * ratio - 0.5;
    if (s < 0) s = 0;
    if (s > src - 1) s = src - 1;
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, src - 1);
    const double f = s - i0;
    r(i, i0) += Scalar(1.0 - f);
    r(i, i1) += Scalar(f);
  }
  return r;
}

// Each column of `maps` is one h x w map in row-major pixel order; the result
// holds the bilinearly resampled H x W maps in the same layout.
template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& maps, int h, int w, int out_h, int out_w) {
  auto& t = *maps.tape();
  if (maps.rows() != static_cast<Eigen::Index>(h) * w) throw DimensionError("resize_bilinear: rows != h*w");
  if (h == out_h && w == out_w) return maps;
  Matrix<Scalar> ry = bilinear_weights<Scalar>(h, out_h);
  Matrix<Scalar> rx = bilinear_weights<Scalar>(w, out_w);
  const auto& z = maps.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(out_h) * out_w, z.cols());
  for (Eigen::Index n = 0; n < z.cols(); ++n) {
    // Column-major views are transposed maps: element (x, y).
    Eigen::Map<const Matrix<Scalar>> src(z.col(n).data(), w, h);
    Eigen::Map<Matrix<Scalar>> dst(out.col(n).data(), out_w, out_h);
    dst.noalias() = rx * src * ry.transpose();
  }
  const int im = maps.id();
  return t.push(std::move(out), t.needs_grad(im), [im, h, w, out_h, out_w, ry = std::move(ry), rx = std::move(rx)](Tape<Scalar>& tp, int self) {
    const auto& g = tp.grad(self);
    auto& gm = tp.grad_buffer(im);
    for (Eigen::Index n = 0; n < g.cols(); ++n) {
      Eigen::Map<const Matrix<Scalar>> gd(g.col(n).data(), out_w, out_h);
      Eigen::Map<Matrix<Scalar>> gs(gm.col(n).data(), w, h);
      gs.noalias() += rx.transpose() * gd * ry;
    }
  });
}

// Mean absolute difference over all entries, as a 1x1 value.
template <typename Scalar>
Var<Scalar> l1_mean(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "l1_mean");
  const Scalar n = Scalar(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = (a.value() - b.value()).cwiseAbs().sum() / n;
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib, n](Tape<Scalar>& tp, int self) {
    const Scalar g = tp.grad(self)(0, 0) / n;
    Matrix<Scalar> sign = (tp.value(ia) - tp.value(ib)).unaryExpr([](Scalar x) {
      return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
    });
    if (tp.needs_grad(ia)) tp.accumulate(ia, sign * g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, sign * (-g));
  });
}

// Sum over rows n of weight[n] * CE(softmax(logits.row(n)), target[n]).
template <typename Scalar>
Var<Scalar> weighted_cross_entropy(const Var<Scalar>& logits, std::vector<int> target, std::vector<Scalar> weight) {
  auto& t = *logits.tape();
  const auto& z = logits.value();
  if (static_cast<Eigen::Index>(target.size()) != z.rows() || weight.size() != target.size()) {
    throw DimensionError("weighted_cross_entropy: one target and weight per row required");
  }
  Matrix<Scalar> prob(z.rows(), z.cols());
  Scalar total(0);
  for (Eigen::Index n = 0; n < z.rows(); ++n) {
    if (target[n] < 0 || target[n] >= z.cols()) throw DimensionError("weighted_cross_entropy: target out of range");
    const Scalar mx = z.row(n).maxCoeff();
    RowVector<Scalar> e = (z.row(n).array() - mx).exp().matrix();
    const Scalar s = e.sum();
    prob.row(n) = e / s;
    total += weight[n] * (std::log(s) + mx - z(n, target[n]));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total;
  const int il = logits.id();
  return t.push(std::move(out), t.needs_grad(il),
                [il, target = std::move(target), weight = std::move(weight), prob = std::move(prob)](Tape<Scalar>& tp, int self) {
                  const Scalar g = tp.grad(self)(0, 0);
                  Matrix<Scalar> d = prob;
                  for (Eigen::Index n = 0; n < d.rows(); ++n) {
                    d(n, target[n]) -= Scalar(1);
                    d.row(n) *= weight[n] * g;
                  }
                  tp.accumulate(il, d);
                });
}

}  // namespace ad
}  // namespace crm

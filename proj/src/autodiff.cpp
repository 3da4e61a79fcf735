#include "siblurry/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "siblurry/error.hpp"

namespace siblurry::ad {

namespace {

std::string shape_of(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
  }
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("autodiff: invalid Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("autodiff: Vars from different tapes");
  return tape_of(a);
}

}  // namespace

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::ref(const Matrix& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError("autodiff: Var does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Matrix& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.value;
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw ContractError("autodiff: scalar() on " + shape_of(m));
  return m(0, 0);
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) {
    const Matrix& val = value(v);
    return Matrix::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward fn) {
  bool any = false;
  if (grad_enabled_) {
    for (Var in : inputs) any = any || node(in).requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = any;
  if (any) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) throw ContractError("backward: output must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  Node& root = nodes_[static_cast<std::size_t>(out.id)];
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (std::size_t i = static_cast<std::size_t>(out.id) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad, n.ref ? *n.ref : n.value);
  }
}

// ---------------------------------------------------------------- algebra

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) {
    throw ContractError("matmul: " + shape_of(av) + " * " + shape_of(bv));
  }
  return t.record(av * bv, {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols()) {
    throw ContractError("matmul_nt: " + shape_of(av) + " * " + shape_of(bv) + "^T");
  }
  return t.record(av * bv.transpose(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs(a)) t.accumulate(a, g * t.value(b));
    if (t.needs(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

Var linear(Var x, Var w, Var bias) {
  Tape& t = tape_of(x, w);
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  const Matrix& bv = t.value(bias);
  if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows()) {
    throw ContractError("linear: x " + shape_of(xv) + " w " + shape_of(wv) + " b " + shape_of(bv));
  }
  Matrix out = xv * wv.transpose();
  out.rowwise() += bv.row(0);
  return t.record(std::move(out), {x, w, bias}, [x, w, bias](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs(x)) t.accumulate(x, g * t.value(w));
    if (t.needs(w)) t.accumulate(w, g.transpose() * t.value(x));
    if (t.needs(bias)) t.accumulate(bias, g.colwise().sum());
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(t.value(a), t.value(b), "add");
  return t.record(t.value(a) + t.value(b), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(t.value(a), t.value(b), "sub");
  return t.record(t.value(a) - t.value(b), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs(b)) t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(t.value(a), t.value(b), "hadamard");
  return t.record(t.value(a).cwiseProduct(t.value(b)), {a, b},
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    if (t.needs(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
                    if (t.needs(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
                  });
}

Var scale(Var a, double s) { return affine(a, s, 0.0); }

Var affine(Var a, double s, double shift) {
  Tape& t = tape_of(a);
  Matrix out = (s * t.value(a)).array() + shift;
  return t.record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, s * g);
  });
}

Var row_scale(Var a, const Vector& s) {
  Tape& t = tape_of(a);
  if (s.size() != t.value(a).rows()) throw ContractError("row_scale: length mismatch");
  return t.record(s.asDiagonal() * t.value(a), {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, s.asDiagonal() * g);
  });
}

Var col_scale(Var a, const Vector& s) {
  Tape& t = tape_of(a);
  if (s.size() != t.value(a).cols()) throw ContractError("col_scale: length mismatch");
  return t.record(t.value(a) * s.asDiagonal(), {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g * s.asDiagonal());
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  return t.record(t.value(a).array().exp().matrix(), {a},
                  [a](Tape& t, const Matrix& g, const Matrix& out) {
                    t.accumulate(a, g.cwiseProduct(out));
                  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  return t.record(t.value(a).array().log().matrix(), {a},
                  [a](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, g.cwiseQuotient(t.value(a)));
                  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Matrix out = x.unaryExpr([inv_sqrt2](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  return t.record(std::move(out), {a}, [a, inv_sqrt2](Tape& t, const Matrix& g, const Matrix&) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = t.value(a).unaryExpr([&](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

// ------------------------------------------------------------- reductions

Var sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& v = t.value(a);
    t.accumulate(a, Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  const double n = static_cast<double>(t.value(a).size());
  if (n == 0) throw ContractError("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

Var weighted_mean(Var v, const Vector& w) {
  Tape& t = tape_of(v);
  const Matrix& x = t.value(v);
  if (x.cols() != 1 || x.rows() != w.size() || w.size() == 0) {
    throw ContractError("weighted_mean: expected column of length " + std::to_string(w.size()));
  }
  const double n = static_cast<double>(w.size());
  Matrix out(1, 1);
  out(0, 0) = w.dot(x.col(0)) / n;
  return t.record(std::move(out), {v}, [v, w, n](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(v, (w * (g(0, 0) / n)).eval());
  });
}

// ------------------------------------------------------------ row helpers

Var select_rows(Var a, std::span<const Index> rows) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw ContractError("select_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(a);
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
    t.accumulate(a, d);
  });
}

Var gather_mean_rows(Var a, const std::vector<std::vector<Index>>& groups) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  Matrix out = Matrix::Zero(static_cast<Index>(groups.size()), x.cols());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].empty()) throw ContractError("gather_mean_rows: empty group");
    for (Index r : groups[i]) {
      if (r < 0 || r >= x.rows()) throw ContractError("gather_mean_rows: index out of range");
      out.row(static_cast<Index>(i)) += x.row(r);
    }
    out.row(static_cast<Index>(i)) /= static_cast<double>(groups[i].size());
  }
  return t.record(std::move(out), {a}, [a, groups](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(a);
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < groups.size(); ++i) {
      const double w = 1.0 / static_cast<double>(groups[i].size());
      for (Index r : groups[i]) d.row(r) += w * g.row(static_cast<Index>(i));
    }
    t.accumulate(a, d);
  });
}

Var row_normalize(Var a) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  Vector norms = x.rowwise().norm();
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    if (norms[i] > 0.0) out.row(i) = x.row(i) / norms[i];
  }
  return t.record(std::move(out), {a}, [a, norms](Tape& t, const Matrix& g, const Matrix& out) {
    Matrix d = Matrix::Zero(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      if (norms[i] <= 0.0) continue;
      const double proj = out.row(i).dot(g.row(i));
      d.row(i) = (g.row(i) - proj * out.row(i)) / norms[i];
    }
    t.accumulate(a, d);
  });
}

Var prepend_blocks(Var x, std::span<const Var> sources, std::span<const Index> offsets, Index count,
                   Index batch, Index tokens) {
  Tape& t = tape_of(x);
  const Matrix& xv = t.value(x);
  if (xv.rows() != batch * tokens) throw ContractError("prepend_blocks: x rows != batch*tokens");
  if (static_cast<Index>(sources.size()) != batch || static_cast<Index>(offsets.size()) != batch) {
    throw ContractError("prepend_blocks: need one source per sample");
  }
  const Index width = xv.cols();
  const Index stride = tokens + count;
  Matrix out(batch * stride, width);
  for (Index b = 0; b < batch; ++b) {
    const Matrix& src = t.value(sources[static_cast<std::size_t>(b)]);
    const Index off = offsets[static_cast<std::size_t>(b)];
    if (src.cols() != width || off < 0 || off + count > src.rows()) {
      throw ContractError("prepend_blocks: prompt block shape mismatch " + shape_of(src));
    }
    out.middleRows(b * stride, count) = src.middleRows(off, count);
    out.middleRows(b * stride + count, tokens) = xv.middleRows(b * tokens, tokens);
  }
  std::vector<Var> inputs{x};
  inputs.insert(inputs.end(), sources.begin(), sources.end());
  std::vector<Var> src(sources.begin(), sources.end());
  std::vector<Index> offs(offsets.begin(), offsets.end());
  return t.record(std::move(out), inputs,
                  [x, src = std::move(src), offs = std::move(offs), count, batch, tokens](
                      Tape& t, const Matrix& g, const Matrix&) {
                    const Index stride = tokens + count;
                    if (t.needs(x)) {
                      Matrix dx(batch * tokens, g.cols());
                      for (Index b = 0; b < batch; ++b) {
                        dx.middleRows(b * tokens, tokens) = g.middleRows(b * stride + count, tokens);
                      }
                      t.accumulate(x, dx);
                    }
                    for (Index b = 0; b < batch; ++b) {
                      const Var s = src[static_cast<std::size_t>(b)];
                      if (!t.needs(s)) continue;
                      const Matrix& sv = t.value(s);
                      Matrix ds = Matrix::Zero(sv.rows(), sv.cols());
                      ds.middleRows(offs[static_cast<std::size_t>(b)], count) = g.middleRows(b * stride, count);
                      t.accumulate(s, ds);
                    }
                  });
}

Var drop_leading_rows(Var x, Index batch, Index tokens, Index count) {
  Tape& t = tape_of(x);
  const Matrix& xv = t.value(x);
  if (xv.rows() != batch * tokens || count > tokens) throw ContractError("drop_leading_rows: bad shape");
  const Index kept = tokens - count;
  Matrix out(batch * kept, xv.cols());
  for (Index b = 0; b < batch; ++b) out.middleRows(b * kept, kept) = xv.middleRows(b * tokens + count, kept);
  return t.record(std::move(out), {x}, [x, batch, tokens, count](Tape& t, const Matrix& g, const Matrix&) {
    const Index kept = tokens - count;
    Matrix d = Matrix::Zero(batch * tokens, g.cols());
    for (Index b = 0; b < batch; ++b) d.middleRows(b * tokens + count, kept) = g.middleRows(b * kept, kept);
    t.accumulate(x, d);
  });
}

// ------------------------------------------------------------ transformer

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x);
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  const Index d = xv.cols();
  if (gv.size() != d || bv.size() != d) throw ContractError("layer_norm: parameter width mismatch");
  Matrix xhat(xv.rows(), d);
  Vector inv_std(xv.rows());
  for (Index i = 0; i < xv.rows(); ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std[i];
  }
  Matrix out = xhat.array().rowwise() * Eigen::Map<const RowVector>(gv.data(), d).array();
  out.rowwise() += Eigen::Map<const RowVector>(bv.data(), d);
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& t, const Matrix& g, const Matrix&) {
                    const Matrix& gv = t.value(gamma);
                    const Index d = g.cols();
                    if (t.needs(gamma)) {
                      Matrix dg = g.cwiseProduct(xhat).colwise().sum();
                      t.accumulate(gamma, dg.reshaped(gv.rows(), gv.cols()));
                    }
                    if (t.needs(beta)) {
                      Matrix db = g.colwise().sum();
                      t.accumulate(beta, db.reshaped(gv.rows(), gv.cols()));
                    }
                    if (t.needs(x)) {
                      Matrix dxhat = g.array().rowwise() * Eigen::Map<const RowVector>(gv.data(), d).array();
                      Matrix dx(g.rows(), d);
                      for (Index i = 0; i < g.rows(); ++i) {
                        const double m1 = dxhat.row(i).mean();
                        const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(d);
                        dx.row(i) = inv_std[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                      }
                      t.accumulate(x, dx);
                    }
                  });
}

namespace {

// Row-wise softmax of q k^T * scale for one (sample, head) block.
Matrix attention_probs(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& k, double scale) {
  Matrix s = (q * k.transpose()) * scale;
  for (Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

}  // namespace

Var self_attention(Var qkv, Index batch, Index tokens, Index heads) {
  Tape& t = tape_of(qkv);
  const Matrix& x = t.value(qkv);
  if (x.rows() != batch * tokens || x.cols() % 3 != 0 || (x.cols() / 3) % heads != 0) {
    throw ContractError("self_attention: bad qkv shape " + shape_of(x));
  }
  const Index d = x.cols() / 3;
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(batch * tokens, d);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto q = x.block(b * tokens, h * dh, tokens, dh);
      auto k = x.block(b * tokens, d + h * dh, tokens, dh);
      auto v = x.block(b * tokens, 2 * d + h * dh, tokens, dh);
      out.block(b * tokens, h * dh, tokens, dh) = attention_probs(q, k, scale) * v;
    }
  }
  return t.record(std::move(out), {qkv}, [qkv, batch, tokens, heads, d, dh, scale](
                                            Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = t.value(qkv);
    Matrix dx(x.rows(), x.cols());
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads; ++h) {
        auto q = x.block(b * tokens, h * dh, tokens, dh);
        auto k = x.block(b * tokens, d + h * dh, tokens, dh);
        auto v = x.block(b * tokens, 2 * d + h * dh, tokens, dh);
        auto go = g.block(b * tokens, h * dh, tokens, dh);
        const Matrix p = attention_probs(q, k, scale);
        const Matrix dp = go * v.transpose();
        Matrix ds = p.cwiseProduct(dp);
        const Vector row_dot = ds.rowwise().sum();
        ds -= p.cwiseProduct(row_dot.replicate(1, tokens));
        dx.block(b * tokens, h * dh, tokens, dh) = scale * ds * k;
        dx.block(b * tokens, d + h * dh, tokens, dh) = scale * ds.transpose() * q;
        dx.block(b * tokens, 2 * d + h * dh, tokens, dh) = p.transpose() * go;
      }
    }
    t.accumulate(qkv, dx);
  });
}

Var cross_entropy_rows(Var logits, std::span<const ClassId> labels, const std::vector<bool>& allowed) {
  Tape& t = tape_of(logits);
  const Matrix& z = t.value(logits);
  const Index n = z.rows();
  const Index c = z.cols();
  if (static_cast<Index>(labels.size()) != n) throw ContractError("cross_entropy_rows: label count mismatch");
  if (!allowed.empty() && static_cast<Index>(allowed.size()) != c) {
    throw ContractError("cross_entropy_rows: allowed-mask width mismatch");
  }
  auto ok = [&](Index j) { return allowed.empty() || allowed[static_cast<std::size_t>(j)]; };
  Matrix probs = Matrix::Zero(n, c);
  Matrix out(n, 1);
  for (Index i = 0; i < n; ++i) {
    const ClassId y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c || !ok(y)) throw ContractError("cross_entropy_rows: label outside class range");
    double m = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < c; ++j) {
      if (ok(j)) m = std::max(m, z(i, j));
    }
    double s = 0.0;
    for (Index j = 0; j < c; ++j) {
      if (ok(j)) {
        probs(i, j) = std::exp(z(i, j) - m);
        s += probs(i, j);
      }
    }
    probs.row(i) /= s;
    out(i, 0) = m + std::log(s) - z(i, y);
  }
  Labels ys(labels.begin(), labels.end());
  return t.record(std::move(out), {logits},
                  [logits, probs = std::move(probs), ys = std::move(ys)](Tape& t, const Matrix& g, const Matrix&) {
                    Matrix d = probs;
                    for (Index i = 0; i < d.rows(); ++i) {
                      d(i, ys[static_cast<std::size_t>(i)]) -= 1.0;
                      d.row(i) *= g(i, 0);
                    }
                    t.accumulate(logits, d);
                  });
}

}  // namespace siblurry::ad

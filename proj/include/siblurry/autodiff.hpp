#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation applied to Vars created from it. Calling
// backward() on a 1x1 Var accumulates d(out)/d(node) into every node that
// requires a gradient. Constants (frozen backbone weights, detached scores)
// never receive gradients and no backward work is done for them.

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "siblurry/types.hpp"

namespace siblurry::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using Backward =
      std::function<void(Tape&, const Matrix& out_grad, const Matrix& out_value)>;

  /// With grad disabled the tape only computes values (evaluation mode).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad);
  Var constant(Matrix value) { return leaf(std::move(value), false); }
  /// Non-owning constant; `value` must outlive the tape.
  Var ref(const Matrix& value);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  bool requires_grad(Var v) const;
  /// Accumulated gradient; a zero matrix of the value's shape if none flowed.
  Matrix grad(Var v) const;

  void backward(Var out);

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Used by operation implementations.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Matrix value, std::span<const Var> inputs, Backward fn);
  void accumulate(Var v, const Matrix& g);
  bool needs(Var v) const { return requires_grad(v); }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

// Linear algebra.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
/// x * w^T + bias, with w stored [out x in] and bias [1 x out].
Var linear(Var x, Var w, Var bias);

// Elementwise / broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var affine(Var a, double s, double shift);  // s * a + shift
/// Row i multiplied by the constant s[i].
Var row_scale(Var a, const Vector& s);
/// Column j multiplied by the constant s[j].
Var col_scale(Var a, const Vector& s);
Var exp(Var a);
Var log(Var a);
Var gelu(Var a);

// Reductions.
Var sum(Var a);
Var mean(Var a);
/// sum_i w_i * v_i / n for a column vector v with constant weights w.
Var weighted_mean(Var v, const Vector& w);

// Row manipulation.
Var select_rows(Var a, std::span<const Index> rows);
/// Row i of the output is the mean of a's rows listed in groups[i].
Var gather_mean_rows(Var a, const std::vector<std::vector<Index>>& groups);
/// Rows scaled to unit norm. Zero rows stay zero and pass no gradient.
Var row_normalize(Var a);

/// Inserts `count` rows in front of every sample block of `x`.
///
/// `x` holds `batch` blocks of `tokens` rows. For sample b the inserted rows
/// are rows [offsets[b], offsets[b] + count) of sources[b].
Var prepend_blocks(Var x, std::span<const Var> sources, std::span<const Index> offsets,
                   Index count, Index batch, Index tokens);
/// Removes the first `count` rows of every block of `tokens` rows.
Var drop_leading_rows(Var x, Index batch, Index tokens, Index count);

// Transformer pieces.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// Multi-head self-attention on packed qkv rows [batch*tokens x 3D].
Var self_attention(Var qkv, Index batch, Index tokens, Index heads);

/// Per-row softmax cross-entropy, returned as a [B x 1] column.
///
/// When `allowed` is non-empty only columns with allowed[c] participate in
/// the softmax.
Var cross_entropy_rows(Var logits, std::span<const ClassId> labels,
                       const std::vector<bool>& allowed = {});

}  // namespace siblurry::ad

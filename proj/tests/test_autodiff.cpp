#include <gtest/gtest.h>

#include <cmath>

#include "siblurry/autodiff.hpp"
#include "siblurry/error.hpp"
#include "support.hpp"

namespace siblurry {
namespace {

using Op = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Contracts op(inputs) with a fixed random matrix and compares the analytic
// gradient of every input against central differences.
double max_gradient_error(const Op& op, const std::vector<Matrix>& inputs, std::uint64_t seed = 7) {
  Matrix weights;
  auto loss_value = [&](const std::vector<Matrix>& xs) {
    ad::Tape tape(false);
    std::vector<ad::Var> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    const Matrix& y = tape.value(op(tape, vars));
    return y.cwiseProduct(weights).sum();
  };
  {
    ad::Tape tape(false);
    std::vector<ad::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.constant(x));
    const Matrix& y = tape.value(op(tape, vars));
    Rng rng(seed);
    weights = test::random_matrix(y.rows(), y.cols(), rng);
  }
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
  const ad::Var y = op(tape, vars);
  const ad::Var loss = ad::sum(ad::hadamard(y, tape.constant(weights)));
  tape.backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix numeric = test::numeric_gradient(
        [&](const Matrix& probe) {
          std::vector<Matrix> xs = inputs;
          xs[k] = probe;
          return loss_value(xs);
        },
        inputs[k]);
    worst = std::max(worst, test::relative_error(tape.grad(vars[k]), numeric));
  }
  return worst;
}

class AutodiffTest : public ::testing::Test {
 protected:
  Rng rng{2024};
  Matrix rand(Index r, Index c, double s = 1.0) { return test::random_matrix(r, c, rng, s); }
};

TEST_F(AutodiffTest, MatmulGradients) {
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::matmul(v[0], v[1]); }, {rand(3, 4), rand(4, 5)}),
            1e-7);
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::matmul_nt(v[0], v[1]); },
                               {rand(3, 4), rand(5, 4)}),
            1e-7);
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::linear(v[0], v[1], v[2]); },
                               {rand(3, 4), rand(5, 4), rand(1, 5)}),
            1e-7);
}

TEST_F(AutodiffTest, ElementwiseGradients) {
  const Vector rs = Vector::LinSpaced(3, 0.5, 2.0);
  const Vector cs = Vector::LinSpaced(4, -1.0, 1.5);
  const std::vector<std::pair<std::string, Op>> ops{
      {"add", [](ad::Tape&, const auto& v) { return ad::add(v[0], v[1]); }},
      {"sub", [](ad::Tape&, const auto& v) { return ad::sub(v[0], v[1]); }},
      {"hadamard", [](ad::Tape&, const auto& v) { return ad::hadamard(v[0], v[1]); }},
      {"scale", [](ad::Tape&, const auto& v) { return ad::add(ad::scale(v[0], -1.7), v[1]); }},
      {"affine", [](ad::Tape&, const auto& v) { return ad::add(ad::affine(v[0], 0.3, 2.0), v[1]); }},
      {"row_scale", [&](ad::Tape&, const auto& v) { return ad::add(ad::row_scale(v[0], rs), v[1]); }},
      {"col_scale", [&](ad::Tape&, const auto& v) { return ad::add(ad::col_scale(v[0], cs), v[1]); }},
      {"exp", [](ad::Tape&, const auto& v) { return ad::hadamard(ad::exp(v[0]), v[1]); }},
      {"gelu", [](ad::Tape&, const auto& v) { return ad::hadamard(ad::gelu(v[0]), v[1]); }},
  };
  for (const auto& [name, op] : ops) {
    EXPECT_LT(max_gradient_error(op, {rand(3, 4), rand(3, 4)}), 1e-7) << name;
  }
  Matrix positive = rand(3, 4).cwiseAbs().array() + 0.5;
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::log(v[0]); }, {positive}), 1e-7);
}

TEST_F(AutodiffTest, ShapeMismatchIsContractError) {
  ad::Tape tape;
  EXPECT_THROW(ad::add(tape.constant(rand(4, 3)), tape.constant(rand(1, 3))), ContractError);
  EXPECT_THROW(ad::matmul(tape.constant(rand(4, 3)), tape.constant(rand(4, 3))), ContractError);
}

TEST_F(AutodiffTest, ReductionGradients) {
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::sum(v[0]); }, {rand(3, 4)}), 1e-7);
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::mean(v[0]); }, {rand(3, 4)}), 1e-7);
  const Vector w = Vector::LinSpaced(5, 0.0, 2.0);
  EXPECT_LT(max_gradient_error([&](ad::Tape&, const auto& v) { return ad::weighted_mean(v[0], w); }, {rand(5, 1)}),
            1e-7);
}

TEST_F(AutodiffTest, RowOpsGradients) {
  const std::vector<Index> rows{2, 0, 2, 3};
  EXPECT_LT(max_gradient_error([&](ad::Tape&, const auto& v) { return ad::select_rows(v[0], rows); }, {rand(4, 3)}),
            1e-7);
  const std::vector<std::vector<Index>> groups{{0}, {1, 3}, {0, 1, 2}};
  EXPECT_LT(
      max_gradient_error([&](ad::Tape&, const auto& v) { return ad::gather_mean_rows(v[0], groups); }, {rand(4, 3)}),
      1e-7);
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::row_normalize(v[0]); }, {rand(4, 3)}), 1e-7);
}

TEST_F(AutodiffTest, RowNormalizeZeroRowPassesNoGradient) {
  Matrix x = rand(3, 4);
  x.row(1).setZero();
  ad::Tape tape;
  const ad::Var v = tape.leaf(x, true);
  const ad::Var y = ad::row_normalize(v);
  EXPECT_DOUBLE_EQ(tape.value(y).row(1).norm(), 0.0);
  EXPECT_NEAR(tape.value(y).row(0).norm(), 1.0, 1e-12);
  tape.backward(ad::sum(y));
  EXPECT_DOUBLE_EQ(tape.grad(v).row(1).norm(), 0.0);
}

TEST_F(AutodiffTest, PrependAndDropBlocks) {
  const Index batch = 2, tokens = 3, count = 2, d = 4;
  const Matrix x = rand(batch * tokens, d);
  const Matrix p0 = rand(4, d), p1 = rand(4, d);
  ad::Tape tape(false);
  const ad::Var vx = tape.constant(x);
  const std::vector<ad::Var> sources{tape.constant(p1), tape.constant(p0)};
  const std::vector<Index> offsets{2, 0};
  const ad::Var y = ad::prepend_blocks(vx, sources, offsets, count, batch, tokens);
  const Matrix& out = tape.value(y);
  ASSERT_EQ(out.rows(), batch * (tokens + count));
  EXPECT_EQ(out.row(0), p1.row(2));
  EXPECT_EQ(out.row(1), p1.row(3));
  EXPECT_EQ(out.row(2), x.row(0));
  EXPECT_EQ(out.row(5), p0.row(0));
  EXPECT_EQ(out.row(6), p0.row(1));
  EXPECT_EQ(out.row(9), x.row(5));
  const ad::Var back = ad::drop_leading_rows(y, batch, tokens + count, count);
  EXPECT_EQ(tape.value(back), x);

  EXPECT_LT(max_gradient_error(
                [&](ad::Tape&, const auto& v) {
                  const std::vector<ad::Var> src{v[1], v[2]};
                  return ad::drop_leading_rows(
                      ad::hadamard(ad::prepend_blocks(v[0], src, offsets, count, batch, tokens),
                                   ad::prepend_blocks(v[0], src, offsets, count, batch, tokens)),
                      batch, tokens + count, 1);
                },
                {x, p1, p0}),
            1e-7);
}

TEST_F(AutodiffTest, LayerNormMatchesFormula) {
  const Matrix x = rand(3, 5);
  const Matrix g = rand(1, 5), b = rand(1, 5);
  ad::Tape tape(false);
  const Matrix& y = tape.value(ad::layer_norm(tape.constant(x), tape.constant(g), tape.constant(b), 1e-6));
  for (Index i = 0; i < 3; ++i) {
    double mu = 0.0;
    for (Index j = 0; j < 5; ++j) mu += x(i, j) / 5.0;
    double var = 0.0;
    for (Index j = 0; j < 5; ++j) var += (x(i, j) - mu) * (x(i, j) - mu) / 5.0;
    for (Index j = 0; j < 5; ++j) {
      EXPECT_NEAR(y(i, j), (x(i, j) - mu) / std::sqrt(var + 1e-6) * g(0, j) + b(0, j), 1e-12);
    }
  }
  EXPECT_LT(max_gradient_error([](ad::Tape&, const auto& v) { return ad::layer_norm(v[0], v[1], v[2], 1e-6); },
                               {x, g, b}),
            1e-6);
}

TEST_F(AutodiffTest, GeluIsErfForm) {
  Matrix x(1, 4);
  x << -2.0, -0.5, 0.0, 1.3;
  ad::Tape tape(false);
  const Matrix& y = tape.value(ad::gelu(tape.constant(x)));
  for (Index j = 0; j < 4; ++j) EXPECT_NEAR(y(0, j), 0.5 * x(0, j) * (1.0 + std::erf(x(0, j) / std::sqrt(2.0))), 1e-15);
}

TEST_F(AutodiffTest, SelfAttentionMatchesLoopOracleAndGradient) {
  const Index batch = 2, tokens = 3, heads = 2, d = 4, dh = d / heads;
  const Matrix qkv = rand(batch * tokens, 3 * d);
  ad::Tape tape(false);
  const Matrix& out = tape.value(ad::self_attention(tape.constant(qkv), batch, tokens, heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < tokens; ++i) {
        std::vector<double> s(static_cast<std::size_t>(tokens));
        double mx = -1e300;
        for (Index j = 0; j < tokens; ++j) {
          double dot = 0.0;
          for (Index e = 0; e < dh; ++e) dot += qkv(b * tokens + i, h * dh + e) * qkv(b * tokens + j, d + h * dh + e);
          s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (Index e = 0; e < dh; ++e) {
          double acc = 0.0;
          for (Index j = 0; j < tokens; ++j) acc += s[static_cast<std::size_t>(j)] / z * qkv(b * tokens + j, 2 * d + h * dh + e);
          EXPECT_NEAR(out(b * tokens + i, h * dh + e), acc, 1e-12);
        }
      }
    }
  }
  EXPECT_LT(max_gradient_error([&](ad::Tape&, const auto& v) { return ad::self_attention(v[0], batch, tokens, heads); },
                               {qkv}),
            1e-6);
}

TEST_F(AutodiffTest, CrossEntropyRows) {
  const Matrix logits = rand(4, 5);
  const std::vector<ClassId> labels{0, 3, 1, 3};
  ad::Tape tape(false);
  const Matrix& ce = tape.value(ad::cross_entropy_rows(tape.constant(logits), labels));
  for (Index i = 0; i < 4; ++i) {
    double z = 0.0;
    for (Index c = 0; c < 5; ++c) z += std::exp(logits(i, c));
    EXPECT_NEAR(ce(i, 0), std::log(z) - logits(i, labels[static_cast<std::size_t>(i)]), 1e-12);
  }
  EXPECT_LT(max_gradient_error([&](ad::Tape&, const auto& v) { return ad::cross_entropy_rows(v[0], labels); }, {logits}),
            1e-7);
  const std::vector<bool> allowed{true, true, false, true, false};
  const Matrix& restricted = tape.value(ad::cross_entropy_rows(tape.constant(logits), labels, allowed));
  double z = std::exp(logits(0, 0)) + std::exp(logits(0, 1)) + std::exp(logits(0, 3));
  EXPECT_NEAR(restricted(0, 0), std::log(z) - logits(0, 0), 1e-12);
  EXPECT_LT(max_gradient_error([&](ad::Tape&, const auto& v) { return ad::cross_entropy_rows(v[0], labels, allowed); },
                               {logits}),
            1e-7);
}

TEST_F(AutodiffTest, ConstantsReceiveNoGradient) {
  ad::Tape tape;
  const ad::Var a = tape.leaf(rand(2, 2), true);
  const Matrix c = rand(2, 2);
  const ad::Var k = tape.ref(c);
  tape.backward(ad::sum(ad::matmul(a, k)));
  EXPECT_FALSE(tape.requires_grad(k));
  EXPECT_EQ(tape.grad(k), Matrix::Zero(2, 2));
  EXPECT_GT(tape.grad(a).norm(), 0.0);
}

TEST_F(AutodiffTest, GradientsAccumulateOverReuse) {
  ad::Tape tape;
  const ad::Var a = tape.leaf(Matrix::Constant(1, 1, 3.0), true);
  tape.backward(ad::add(ad::hadamard(a, a), a));  // a^2 + a
  EXPECT_DOUBLE_EQ(tape.grad(a)(0, 0), 7.0);
}

}  // namespace
}  // namespace siblurry

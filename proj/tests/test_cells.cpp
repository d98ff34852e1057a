// SPDX-License-Identifier: Apache-2.0
/**
 * @file   test_cells.cpp
 * @brief  LSTM, GRU and tanh-RNN steps against scalar oracles; initialisation.
 */
#include "zoneout/cells.hpp"
#include "zoneout/diagnostics.hpp"
#include "zoneout/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace zoneout {
namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

CellParams constant_params(CellKind kind, Index in, Index hidden, double w,
                           double b = 0.0) {
  const Index g = gate_blocks(kind) * hidden;
  return CellParams{kind, Tensor(Matrix::Constant(in, g, w), true),
                    Tensor(Matrix::Constant(hidden, g, w), true),
                    Tensor(Matrix::Constant(1, g, b), true)};
}

TEST(Lstm, ZeroParamsGiveHalfGates) {
  CellParams p = constant_params(CellKind::lstm, 2, 3, 0.0);
  CellState prev = zero_state(CellKind::lstm, 1, 3);
  LstmStep s = lstm_step(p, Tensor(Matrix::Constant(1, 2, 0.7)), prev);
  EXPECT_TRUE((s.gate(LstmGate::input).value().array() == 0.5).all());
  EXPECT_TRUE((s.gate(LstmGate::forget).value().array() == 0.5).all());
  EXPECT_TRUE((s.gate(LstmGate::output).value().array() == 0.5).all());
  EXPECT_TRUE((s.gate(LstmGate::candidate).value().array() == 0.0).all());
  EXPECT_TRUE((s.c_cand.value().array() == 0.0).all());
  EXPECT_TRUE((s.h_cand.value().array() == 0.0).all());
}

TEST(Lstm, ScalarOracle) {
  CellParams p = constant_params(CellKind::lstm, 1, 1, 0.1);
  LstmStep s = lstm_step(p, Tensor::scalar(1.0), zero_state(CellKind::lstm, 1, 1));
  // mpmath over the four-gate equations: i = sigma(0.1), g = tanh(0.1),
  // c = i*g, h = sigma(0.1)*tanh(c).
  EXPECT_NEAR(s.c_cand.item(), 0.0523236228358647, 1e-15);
  EXPECT_NEAR(s.h_cand.item(), 0.0274437727373881, 1e-15);
}

TEST(Lstm, SaturatedForgetGateRemembers) {
  CellParams p = constant_params(CellKind::lstm, 1, 1, 0.0);
  p.b.mutable_value()(0, 1) = 100.0; // forget block of [i, f, o, g]
  CellState prev = zero_state(CellKind::lstm, 1, 1);
  prev.c = Tensor::scalar(0.3);
  LstmStep s = lstm_step(p, Tensor::scalar(0.0), prev);
  EXPECT_EQ(s.gate(LstmGate::forget).item(), 1.0);
  EXPECT_EQ(s.c_cand.item(), 0.3);
  EXPECT_NEAR(s.h_cand.item(), 0.5 * std::tanh(0.3), 1e-16);
}

TEST(Lstm, SaturatedForgetAndClosedInputKeepCell) {
  CellParams p = constant_params(CellKind::lstm, 2, 2, 0.0);
  p.b.mutable_value().block(0, 0, 1, 2).setConstant(-800.0); // i = 0
  p.b.mutable_value().block(0, 2, 1, 2).setConstant(800.0);  // f = 1
  CellState prev = zero_state(CellKind::lstm, 1, 2);
  prev.c = Tensor::from_rows({{0.25, -1.5}});
  LstmStep s = lstm_step(p, Tensor::from_rows({{1.0, -2.0}}), prev);
  EXPECT_TRUE((s.c_cand.value().array() == prev.c.value().array()).all());
}

TEST(Lstm, FusedStepMatchesElementaryOps) {
  Rng rng(21);
  CellParams p = init_params(CellKind::lstm, 3, 5, InitScheme{InitScheme::Kind::uniform, 0.8, 0.3}, rng);
  CellState prev = zero_state(CellKind::lstm, 2, 5);
  prev.h = Tensor(Matrix::Random(2, 5));
  prev.c = Tensor(Matrix::Random(2, 5) * 3.0);
  const Tensor x(Matrix::Random(2, 3));
  const LstmStep s = lstm_step(p, x, prev);

  const Tensor pre = add_bias(add(matmul(x, p.w_x), matmul(prev.h, p.w_h)), p.b);
  const Tensor i = sigmoid(slice_cols(pre, 0, 5)), f = sigmoid(slice_cols(pre, 5, 5));
  const Tensor o = sigmoid(slice_cols(pre, 10, 5)), g = tanh(slice_cols(pre, 15, 5));
  const Tensor c = add(mul(f, prev.c), mul(i, g));
  const Tensor h = mul(o, tanh(c));
  EXPECT_LT((s.c_cand.value() - c.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((s.h_cand.value() - h.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((s.gate(LstmGate::output).value() - o.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((s.gate(LstmGate::candidate).value() - g.value()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Lstm, StepIsDeterministic) {
  Rng rng(4);
  CellParams p = init_params(CellKind::lstm, 3, 4, InitScheme{}, rng);
  CellState prev = zero_state(CellKind::lstm, 2, 4);
  Tensor x(Matrix::Random(2, 3));
  LstmStep a = lstm_step(p, x, prev), b = lstm_step(p, x, prev);
  EXPECT_TRUE((a.h_cand.value().array() == b.h_cand.value().array()).all());
}

TEST(Lstm, ShapeMismatchThrows) {
  CellParams p = constant_params(CellKind::lstm, 3, 4, 0.1);
  EXPECT_THROW(lstm_step(p, Tensor::zeros(2, 5), zero_state(CellKind::lstm, 2, 4)),
               DimensionError);
  EXPECT_THROW(lstm_step(p, Tensor::zeros(2, 3), zero_state(CellKind::lstm, 3, 4)),
               DimensionError);
}

TEST(Gru, ZeroParamsHalveThePreviousState) {
  CellParams p = constant_params(CellKind::gru, 1, 2, 0.0);
  Tensor h = Tensor::from_rows({{0.8, -0.4}});
  GruStep s = gru_step(p, Tensor::scalar(1.0), h);
  EXPECT_TRUE((s.u.value().array() == 0.5).all());
  EXPECT_TRUE((s.candidate.value().array() == 0.0).all());
  EXPECT_EQ(s.h_cand.value()(0, 0), 0.4);
  EXPECT_EQ(s.h_cand.value()(0, 1), -0.2);
}

TEST(Gru, ClosedUpdateGateKeepsState) {
  CellParams p = constant_params(CellKind::gru, 1, 2, 0.3);
  p.b.mutable_value().block(0, 0, 1, 2).setConstant(-100.0); // u block of [u, r, cand]
  Tensor h = Tensor::from_rows({{0.8, -0.4}});
  GruStep s = gru_step(p, Tensor::scalar(1.0), h);
  EXPECT_NEAR(s.h_cand.value()(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(s.h_cand.value()(0, 1), -0.4, 1e-15);
}

TEST(Gru, ScalarOracle) {
  Rng rng(9);
  CellParams p = init_params(CellKind::gru, 1, 1, InitScheme{InitScheme::Kind::uniform, 1.0, 0.0}, rng);
  p.b.mutable_value() << 0.2, -0.3, 0.1;
  const Matrix &wx = p.w_x.value(), &wh = p.w_h.value(), &b = p.b.value();
  const double x = 0.6, h = -0.7;
  const double u = sig(wx(0, 0) * x + wh(0, 0) * h + b(0, 0));
  const double r = sig(wx(0, 1) * x + wh(0, 1) * h + b(0, 1));
  const double cand = std::tanh(wx(0, 2) * x + wh(0, 2) * (r * h) + b(0, 2));
  const double expected = (1 - u) * h + u * cand;
  GruStep s = gru_step(p, Tensor::scalar(x), Tensor::scalar(h));
  EXPECT_NEAR(s.h_cand.item(), expected, 1e-12);
}

TEST(Rnn, ZeroParamsGiveZero) {
  CellParams p = constant_params(CellKind::rnn, 2, 3, 0.0);
  Tensor h = rnn_step(p, Tensor::from_rows({{1.0, 2.0}}), Tensor::constant(1, 3, 0.5));
  EXPECT_TRUE((h.value().array() == 0.0).all());
}

TEST(Rnn, ScalarOracle) {
  CellParams p = constant_params(CellKind::rnn, 1, 1, 1.0);
  EXPECT_NEAR(rnn_step(p, Tensor::scalar(0.5), Tensor::scalar(0.0)).item(),
              0.462117157260010, 1e-15);
}

TEST(Rnn, Saturates) {
  CellParams p = constant_params(CellKind::rnn, 1, 1, 1.0, 98.0);
  EXPECT_EQ(rnn_step(p, Tensor::scalar(1.0), Tensor::scalar(1.0)).item(), 1.0);
}

TEST(Init, UniformRange) {
  Rng rng(1);
  CellParams p = init_params(CellKind::lstm, 20, 30, InitScheme{InitScheme::Kind::uniform, 0.04, 0.0}, rng);
  for (const Tensor *t : {&p.w_x, &p.w_h}) {
    EXPECT_LE(t->value().maxCoeff(), 0.04);
    EXPECT_GE(t->value().minCoeff(), -0.04);
  }
  EXPECT_TRUE((p.b.value().array() == 0.0).all());
}

TEST(Init, ForgetBiasOnlyOnForgetBlock) {
  Rng rng(1);
  CellParams p = init_params(CellKind::lstm, 2, 3, InitScheme{}, rng);
  const Matrix &b = p.b.value();
  EXPECT_TRUE((b.block(0, 3, 1, 3).array() == 1.0).all());
  EXPECT_TRUE((b.block(0, 0, 1, 3).array() == 0.0).all());
  EXPECT_TRUE((b.block(0, 6, 1, 6).array() == 0.0).all());
}

TEST(Init, OrthogonalRecurrentBlocks) {
  Rng rng(2);
  const Index h = 16;
  for (CellKind kind : {CellKind::lstm, CellKind::gru, CellKind::rnn}) {
    CellParams p = init_params(kind, 5, h, InitScheme{InitScheme::Kind::orthogonal, 0.04, 0.0}, rng);
    for (Index k = 0; k < gate_blocks(kind); ++k) {
      const Matrix w = p.w_h.value().block(0, k * h, h, h);
      EXPECT_LT((w.transpose() * w - Matrix::Identity(h, h)).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Init, RejectsDegenerateSizes) {
  Rng rng(0);
  EXPECT_THROW(init_params(CellKind::lstm, 0, 4, InitScheme{}, rng), DimensionError);
  EXPECT_THROW(init_params(CellKind::gru, 3, 0, InitScheme{}, rng), DimensionError);
}

class CellGradient : public ::testing::TestWithParam<CellKind> {};

TEST_P(CellGradient, TwoStepLossMatchesFiniteDifferences) {
  const CellKind kind = GetParam();
  Rng rng(17);
  CellParams p = init_params(kind, 3, 4, InitScheme{InitScheme::Kind::uniform, 0.6, 0.5}, rng);
  const Tensor x1(Matrix::Random(2, 3)), x2(Matrix::Random(2, 3));
  const Matrix w = Matrix::Random(2, 4);
  auto loss = [&]() {
    CellState s = zero_state(kind, 2, 4);
    s.h = Tensor(Matrix::Constant(2, 4, 0.3));
    if (kind == CellKind::lstm)
      s.c = Tensor(Matrix::Constant(2, 4, -0.2));
    for (const Tensor *x : {&x1, &x2}) {
      if (kind == CellKind::lstm) {
        LstmStep st = lstm_step(p, *x, s);
        s.h = st.h_cand;
        s.c = st.c_cand;
      } else if (kind == CellKind::gru) {
        s.h = gru_step(p, *x, s.h).h_cand;
      } else {
        s.h = rnn_step(p, *x, s.h);
      }
    }
    return sum(mul(s.h, Tensor(w)));
  };
  std::vector<Tensor> params{p.w_x, p.w_h, p.b};
  const GradCheckReport r = finite_diff_check(loss, params);
  EXPECT_TRUE(r.pass) << "max rel err " << r.max_rel_error;
  EXPECT_LT(r.max_rel_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(AllCells, CellGradient,
                         ::testing::Values(CellKind::lstm, CellKind::gru, CellKind::rnn),
                         [](const auto &info) { return std::string(to_string(info.param)); });

TEST(CellKind, ParseRoundTrip) {
  for (CellKind k : {CellKind::lstm, CellKind::gru, CellKind::rnn})
    EXPECT_EQ(parse_cell_kind(to_string(k)), k);
  EXPECT_THROW(parse_cell_kind("lstmx"), std::invalid_argument);
}

} // namespace
} // namespace zoneout

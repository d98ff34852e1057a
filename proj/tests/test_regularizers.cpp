// SPDX-License-Identifier: Apache-2.0
/**
 * @file   test_regularizers.cpp
 * @brief  Mask sampling, every state-assembly rule, weight noise and the norm
 *         stabiliser, plus the train/eval invariants they must satisfy.
 */
#include "zoneout/network.hpp"
#include "zoneout/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace zoneout {
namespace {

Tensor row(std::initializer_list<double> v) { return Tensor::from_rows({v}); }

bool same(const Tensor &a, const Tensor &b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.value().array() == b.value().array()).all();
}

/// Hand-built LSTM intermediates for a 1x2 state.
LstmStep make_step(std::initializer_list<double> i, std::initializer_list<double> f,
                   std::initializer_list<double> o, std::initializer_list<double> g,
                   const CellState &prev) {
  LstmStep s;
  s.i = row(i);
  s.f = row(f);
  s.o = row(o);
  s.g = row(g);
  s.c_cand = add(mul(s.f, prev.c), mul(s.i, s.g));
  s.h_cand = mul(s.o, tanh(s.c_cand));
  return s;
}

CellState prev_state() {
  return CellState{row({0.3, -0.6}), row({1.2, -0.4}), row({0.6, 0.7})};
}

TEST(SampleMask, DegenerateProbabilities) {
  Rng rng(1);
  EXPECT_TRUE((sample_mask(0.0, 4, 5, rng).array() == 0.0).all());
  EXPECT_TRUE((sample_mask(1.0, 4, 5, rng).array() == 1.0).all());
  EXPECT_THROW(sample_mask(1.5, 1, 1, rng), std::invalid_argument);
  EXPECT_THROW(sample_mask(-0.1, 1, 1, rng), std::invalid_argument);
}

TEST(SampleMask, MeanOfAMillionDraws) {
  Rng rng(2);
  const Matrix m = sample_mask(0.5, 1000, 1000, rng);
  // Binomial 99.99% interval for n = 1e6, p = 0.5 is about +-0.0019.
  EXPECT_GE(m.mean(), 0.498);
  EXPECT_LE(m.mean(), 0.502);
  EXPECT_TRUE((m.array() == 0.0 || m.array() == 1.0).all());
}

TEST(ZoneoutLstm, FullMaskIsIdentity) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix ones = Matrix::Ones(1, 2);
  const CellState out = zoneout_lstm_assemble(s, prev, &ones, &ones, Mode::train, 0.5, 0.5);
  EXPECT_TRUE(same(out.c, prev.c));
  EXPECT_TRUE(same(out.h, prev.h));
}

TEST(ZoneoutLstm, EmptyMaskIsVanillaStep) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix zeros = Matrix::Zero(1, 2);
  const CellState out = zoneout_lstm_assemble(s, prev, &zeros, &zeros, Mode::train, 0.5, 0.5);
  EXPECT_TRUE(same(out.c, s.c_cand));
  EXPECT_TRUE(same(out.h, s.h_cand));
}

TEST(ZoneoutLstm, HiddenUsesCellCandidateNotZonedCell) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix ones = Matrix::Ones(1, 2), zeros = Matrix::Zero(1, 2);
  const CellState out = zoneout_lstm_assemble(s, prev, &ones, &zeros, Mode::train, 0.5, 0.5);
  EXPECT_TRUE(same(out.c, prev.c));
  EXPECT_TRUE(same(out.h, s.h_cand));
}

TEST(ZoneoutLstm, EvalIsConvexMidpoint) {
  CellState prev{row({0.0}), row({2.0}), {}};
  LstmStep s;
  s.i = s.f = s.o = s.g = row({0.0});
  s.c_cand = row({0.0});
  s.h_cand = row({0.0});
  const CellState out = zoneout_lstm_assemble(s, prev, nullptr, nullptr, Mode::eval, 0.5, 0.05);
  EXPECT_EQ(out.c.item(), 1.0);
}

TEST(ZoneoutLstm, TrainModeWithoutMaskThrows) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  EXPECT_THROW(zoneout_lstm_assemble(s, prev, nullptr, nullptr, Mode::train, 0.5, 0.5),
               std::invalid_argument);
  const Matrix wrong = Matrix::Ones(2, 2);
  EXPECT_THROW(zoneout_lstm_assemble(s, prev, &wrong, &wrong, Mode::train, 0.5, 0.5),
               DimensionError);
}

TEST(RecurrentDropout, MaskedInputLeavesForgetDecay) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix zeros = Matrix::Zero(1, 2), ones = Matrix::Ones(1, 2);
  const CellState dropped = recurrent_dropout_assemble(s, prev, &zeros, Mode::train, 0.5);
  EXPECT_TRUE(same(dropped.c, mul(s.f, prev.c)));
  EXPECT_TRUE(same(dropped.h, mul(s.o, tanh(dropped.c))));
  const CellState kept = recurrent_dropout_assemble(s, prev, &ones, Mode::train, 0.5);
  EXPECT_TRUE(same(kept.c, s.c_cand));
  EXPECT_TRUE(same(kept.h, s.h_cand));
}

TEST(RecurrentDropout, EvalScalesInputTerm) {
  CellState prev{row({0.0}), row({0.2}), {}};
  const LstmStep s = make_step({0.8}, {0.5}, {0.5}, {0.5}, prev); // f*c = 0.1, i*g = 0.4
  const CellState out = recurrent_dropout_assemble(s, prev, nullptr, Mode::eval, 0.25);
  EXPECT_NEAR(out.c.item(), 0.4, 1e-15);
}

TEST(NaiveCellDropout, TrainAndEval) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix zeros = Matrix::Zero(1, 2), ones = Matrix::Ones(1, 2);
  EXPECT_TRUE(same(naive_cell_dropout_assemble(s, prev, &ones, Mode::train, 0.5).c, s.c_cand));
  EXPECT_TRUE((naive_cell_dropout_assemble(s, prev, &zeros, Mode::train, 0.5).c.value().array() == 0.0).all());

  CellState p1{row({0.0}), row({0.0}), {}};
  LstmStep s1;
  s1.i = s1.f = s1.o = s1.g = row({0.5});
  s1.c_cand = row({0.8});
  s1.h_cand = row({0.0});
  EXPECT_NEAR(naive_cell_dropout_assemble(s1, p1, nullptr, Mode::eval, 0.5).c.item(), 0.4, 1e-16);
}

TEST(OutputGateReuse, NoDropIsVanilla) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix zeros = Matrix::Zero(1, 2);
  const CellState out = output_gate_reuse_assemble(s, prev, &zeros, Mode::train, 0.5);
  EXPECT_TRUE(same(out.c, s.c_cand));
  EXPECT_TRUE(same(out.h, s.h_cand));
  EXPECT_TRUE(same(out.o, s.o));
}

TEST(OutputGateReuse, FullDropDecaysCellAndReusesGate) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const Matrix ones = Matrix::Ones(1, 2);
  const CellState out = output_gate_reuse_assemble(s, prev, &ones, Mode::train, 0.5);
  EXPECT_TRUE(same(out.c, mul(s.f, prev.c)));
  EXPECT_TRUE(same(out.h, mul(prev.o, tanh(out.c))));
}

TEST(OutputGateReuse, EvalMidpoint) {
  CellState prev{row({0.0}), row({800.0}), row({0.6})};
  LstmStep s;
  s.i = row({0.0});
  s.g = row({0.0});
  s.f = row({1.0});
  s.o = row({0.2});
  s.c_cand = row({800.0});
  s.h_cand = row({0.2});
  const CellState out = output_gate_reuse_assemble(s, prev, nullptr, Mode::eval, 0.5);
  EXPECT_NEAR(out.h.item(), 0.4, 1e-15);
}

TEST(OutputGateReuse, NeedsPreviousGate) {
  CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  prev.o = Tensor();
  const Matrix zeros = Matrix::Zero(1, 2);
  EXPECT_THROW(output_gate_reuse_assemble(s, prev, &zeros, Mode::train, 0.5),
               std::invalid_argument);
}

TEST(StochasticDepth, DrawsSelectWholeState) {
  const CellState prev = prev_state();
  const CellState cand{row({0.9, 0.8}), row({-0.1, 0.2}), {}};
  const Matrix ones = Matrix::Ones(1, 2), zeros = Matrix::Zero(1, 2);
  const CellState kept = stochastic_depth_assemble(cand, prev, &ones, Mode::train, 0.5);
  EXPECT_TRUE(same(kept.h, prev.h));
  EXPECT_TRUE(same(kept.c, prev.c));
  const CellState taken = stochastic_depth_assemble(cand, prev, &zeros, Mode::train, 0.5);
  EXPECT_TRUE(same(taken.h, cand.h));
  EXPECT_TRUE(same(taken.c, cand.c));
}

TEST(ZoneoutSimple, ElementwiseSelect) {
  const Matrix d{{1.0, 0.0}};
  EXPECT_TRUE(same(zoneout_simple_assemble(row({3, 4}), row({1, 2}), &d, Mode::train, 0.5),
                   row({1, 4})));
  const Matrix ones = Matrix::Ones(1, 2), zeros = Matrix::Zero(1, 2);
  EXPECT_TRUE(same(zoneout_simple_assemble(row({3, 4}), row({1, 2}), &ones, Mode::train, 0.5),
                   row({1, 2})));
  EXPECT_TRUE(same(zoneout_simple_assemble(row({3, 4}), row({1, 2}), &zeros, Mode::train, 0.5),
                   row({3, 4})));
  const Tensor e = zoneout_simple_assemble(row({3, 4}), row({1, 2}), nullptr, Mode::eval, 0.25);
  EXPECT_NEAR(e.value()(0, 0), 2.5, 1e-15);
}

TEST(WeightNoise, ZeroSigmaIsIdentity) {
  Rng rng(5);
  CellParams p = init_params(CellKind::lstm, 3, 4, InitScheme{}, rng);
  const CellParams q = apply_weight_noise(p, 0.0, rng);
  EXPECT_TRUE(same(q.w_x, p.w_x));
  EXPECT_TRUE(same(q.w_h, p.w_h));
  EXPECT_TRUE(same(q.b, p.b));
}

TEST(WeightNoise, SampleStdOfAMillionDraws) {
  Rng rng(6);
  Tensor w = Tensor::zeros(1000, 1000, true);
  NoiseTape tape;
  const Matrix noisy = add_weight_noise(w, 0.075, rng, tape).value();
  const double mean = noisy.mean();
  const double sd = std::sqrt((noisy.array() - mean).square().sum() / (noisy.size() - 1.0));
  EXPECT_GE(sd, 0.0746);
  EXPECT_LE(sd, 0.0754);
}

TEST(WeightNoise, GradientReachesCleanWeights) {
  Rng rng(7);
  Tensor w(Matrix::Constant(2, 2, 0.5), true);
  NoiseTape tape;
  backward(sum(add_weight_noise(w, 0.1, rng, tape)));
  EXPECT_TRUE((w.grad().array() == 1.0).all());
}

TEST(NoiseTape, FrozenReplayRepeatsDraws) {
  Rng rng(8);
  NoiseTape tape;
  tape.record();
  auto gen = [&] { return Matrix(Matrix::Constant(1, 1, rng.uniform())); };
  const double a = tape.take(gen)(0, 0), b = tape.take(gen)(0, 0);
  tape.freeze();
  EXPECT_EQ(tape.take(gen)(0, 0), a);
  EXPECT_EQ(tape.take(gen)(0, 0), b);
  tape.rewind();
  EXPECT_EQ(tape.take(gen)(0, 0), a);
  tape.release();
  EXPECT_NE(tape.take(gen)(0, 0), a);
}

TEST(NormStabilizer, ConstantNormIsFree) {
  const std::vector<Tensor> hs{row({0.6, 0.8}), row({1.0, 0.0}), row({0.0, -1.0})};
  EXPECT_EQ(norm_stabilizer_penalty(row({0.8, 0.6}), hs, 50.0).item(), 0.0);
}

TEST(NormStabilizer, HandArithmetic) {
  const std::vector<Tensor> hs{row({1.0, 0.0}), row({0.0, 2.0})};
  EXPECT_NEAR(norm_stabilizer_penalty(row({0.0, 0.0}), hs, 50.0).item(), 50.0, 1e-12);
}

TEST(NormStabilizer, MatchesDirectRecomputation) {
  Rng rng(9);
  const Index b = 3, h = 4, t_len = 5;
  std::vector<Tensor> hs;
  std::vector<Matrix> raw;
  Matrix h0(b, h);
  for (Index k = 0; k < h0.size(); ++k)
    h0.data()[k] = rng.uniform(-1, 1);
  for (Index t = 0; t < t_len; ++t) {
    Matrix m(b, h);
    for (Index k = 0; k < m.size(); ++k)
      m.data()[k] = rng.uniform(-1, 1);
    raw.push_back(m);
    hs.emplace_back(m);
  }
  double total = 0.0;
  for (Index t = 0; t < t_len; ++t) {
    const Matrix &prev = t == 0 ? h0 : raw[static_cast<std::size_t>(t - 1)];
    double batch_sum = 0.0;
    for (Index r = 0; r < b; ++r) {
      double n1 = 0.0, n0 = 0.0;
      for (Index c = 0; c < h; ++c) {
        n1 += raw[static_cast<std::size_t>(t)](r, c) * raw[static_cast<std::size_t>(t)](r, c);
        n0 += prev(r, c) * prev(r, c);
      }
      batch_sum += (std::sqrt(n1) - std::sqrt(n0)) * (std::sqrt(n1) - std::sqrt(n0));
    }
    total += batch_sum / b;
  }
  EXPECT_NEAR(norm_stabilizer_penalty(Tensor(h0), hs, 50.0).item(), 50.0 * total / t_len, 1e-10);
}

TEST(NormStabilizer, EmptySequenceThrows) {
  EXPECT_THROW(norm_stabilizer_penalty(row({0.0}), std::vector<Tensor>{}, 1.0),
               std::invalid_argument);
}

TEST(RegularizerConfig, Validation) {
  EXPECT_NO_THROW((RegularizerConfig{{Zoneout{0.5, 0.05}, WeightNoise{0.075}, NormStabilizer{50}}}.validate()));
  EXPECT_THROW((RegularizerConfig{{Zoneout{0.5, 0.05}, RecurrentDropout{0.25}}}.validate()),
               std::invalid_argument);
  EXPECT_THROW((RegularizerConfig{{Zoneout{1.5, 0.0}}}.validate()), std::invalid_argument);
  EXPECT_THROW((RegularizerConfig{{WeightNoise{-1.0}}}.validate()), std::invalid_argument);
  EXPECT_THROW((RegularizerConfig{{NormStabilizer{-1.0}}}.validate()), std::invalid_argument);
  EXPECT_THROW((RegularizerConfig{{OutputGateReuse{0.5}}}.validate_for(CellKind::gru)),
               std::invalid_argument);
  EXPECT_THROW((RegularizerConfig{{Zoneout{0.5, 0.1, MaskMode::shared_hc}}}.validate()),
               std::invalid_argument);
  EXPECT_EQ((RegularizerConfig{{Zoneout{0.5, 0.05}}}.label()), "zoneout");
  EXPECT_EQ(RegularizerConfig{}.label(), "none");
}

// ---------------------------------------------------------------------------
// Network-level invariants

struct Fixture {
  RecurrentNetwork net;
  SequenceInput input;
  std::vector<CellState> initial;
};

Fixture make_fixture(CellKind cell, Index steps, Index batch, std::uint64_t seed) {
  Rng rng(seed);
  InitScheme init;
  init.scale = 0.5;
  Fixture f{RecurrentNetwork(NetworkShape{cell, 3, false, 6, 1, 4}, init, rng), {}, {}};
  for (Index t = 0; t < steps; ++t) {
    Matrix x(batch, 3);
    for (Index k = 0; k < x.size(); ++k)
      x.data()[k] = rng.uniform(-1, 1);
    f.input.dense.push_back(x);
  }
  f.initial = f.net.initial_state(batch);
  for (auto &s : f.initial) {
    Matrix h(batch, 6), c(batch, 6);
    for (Index k = 0; k < h.size(); ++k) {
      h.data()[k] = rng.uniform(-0.9, 0.9);
      c.data()[k] = rng.uniform(-2, 2);
    }
    s.h = Tensor(h);
    if (s.c.defined())
      s.c = Tensor(c);
  }
  return f;
}

UnrollResult run(Fixture &f, const RegularizerConfig &regs, Mode mode,
                 std::uint64_t seed = 3) {
  NoiseContext noise(regs, f.net.shape().cell, 1, seed);
  NoGradGuard guard;
  return unroll(f.net, f.input, f.initial, noise, ForwardOptions{mode, false});
}

class CellInvariant : public ::testing::TestWithParam<CellKind> {};

TEST_P(CellInvariant, FullZoneoutKeepsInitialStateForFiftySteps) {
  Fixture f = make_fixture(GetParam(), 50, 3, 1);
  const UnrollResult r = run(f, RegularizerConfig{{Zoneout{1.0, 1.0}}}, Mode::train);
  for (Index t = 0; t < 50; ++t) {
    ASSERT_TRUE(same(r.trace[0].h[static_cast<std::size_t>(t)], f.initial[0].h)) << "t=" << t;
    if (GetParam() == CellKind::lstm)
      ASSERT_TRUE(same(r.trace[0].c[static_cast<std::size_t>(t)], f.initial[0].c)) << "t=" << t;
  }
}

TEST_P(CellInvariant, ZeroZoneoutMatchesUnregularisedBitwise) {
  for (Mode mode : {Mode::train, Mode::eval}) {
    Fixture f = make_fixture(GetParam(), 20, 3, 2);
    const UnrollResult plain = run(f, RegularizerConfig{}, mode);
    const UnrollResult zero = run(f, RegularizerConfig{{Zoneout{0.0, 0.0}}}, mode);
    for (std::size_t t = 0; t < 20; ++t)
      ASSERT_TRUE(same(plain.outputs[t], zero.outputs[t])) << "t=" << t;
  }
}

TEST_P(CellInvariant, ZeroDepthDropMatchesUnregularisedBitwise) {
  Fixture f = make_fixture(GetParam(), 20, 3, 4);
  const UnrollResult plain = run(f, RegularizerConfig{}, Mode::train);
  const UnrollResult sd = run(f, RegularizerConfig{{StochasticDepth{0.0}}}, Mode::train);
  for (std::size_t t = 0; t < 20; ++t)
    ASSERT_TRUE(same(plain.outputs[t], sd.outputs[t])) << "t=" << t;
}

TEST_P(CellInvariant, UnregularisedTrainEqualsEval) {
  Fixture f = make_fixture(GetParam(), 10, 2, 5);
  const UnrollResult a = run(f, RegularizerConfig{}, Mode::train);
  const UnrollResult b = run(f, RegularizerConfig{}, Mode::eval);
  for (std::size_t t = 0; t < 10; ++t)
    ASSERT_TRUE(same(a.outputs[t], b.outputs[t]));
}

TEST_P(CellInvariant, EvalIsSeedIndependent) {
  Fixture f = make_fixture(GetParam(), 10, 2, 6);
  const RegularizerConfig regs{{Zoneout{0.3, 0.6}}};
  const UnrollResult a = run(f, regs, Mode::eval, 1), b = run(f, regs, Mode::eval, 99);
  for (std::size_t t = 0; t < 10; ++t)
    ASSERT_TRUE(same(a.outputs[t], b.outputs[t]));
}

INSTANTIATE_TEST_SUITE_P(AllCells, CellInvariant,
                         ::testing::Values(CellKind::lstm, CellKind::gru, CellKind::rnn),
                         [](const auto &info) { return std::string(to_string(info.param)); });

TEST(ZoneoutLstm, EvalStateIsConvexCombination) {
  const CellState prev = prev_state();
  const LstmStep s = make_step({0.3, 0.9}, {0.5, 0.2}, {0.7, 0.1}, {0.4, -0.8}, prev);
  const CellState out = zoneout_lstm_assemble(s, prev, nullptr, nullptr, Mode::eval, 0.37, 0.81);
  for (Index k = 0; k < 2; ++k) {
    const double lo = std::min(prev.c.value()(0, k), s.c_cand.value()(0, k));
    const double hi = std::max(prev.c.value()(0, k), s.c_cand.value()(0, k));
    EXPECT_GE(out.c.value()(0, k), lo);
    EXPECT_LE(out.c.value()(0, k), hi);
  }
}

TEST(ZoneoutLstm, MonteCarloMeanMatchesEval) {
  Fixture f = make_fixture(CellKind::lstm, 1, 2, 7);
  const RegularizerConfig regs{{Zoneout{0.5, 0.3}}};
  const UnrollResult expect = run(f, regs, Mode::eval);
  NoiseContext noise(regs, CellKind::lstm, 1, 11);
  const int n = 10000;
  Matrix s1 = Matrix::Zero(2, 6), s2 = Matrix::Zero(2, 6);
  NoGradGuard guard;
  for (int k = 0; k < n; ++k) {
    const Matrix c = unroll(f.net, f.input, f.initial, noise, {}).trace[0].c[0].value();
    s1 += c;
    s2 += c.cwiseProduct(c);
  }
  const Matrix mean = s1 / n;
  const Matrix var = (s2 / n - mean.cwiseProduct(mean)) * (n / (n - 1.0));
  const Matrix &target = expect.trace[0].c[0].value();
  for (Index k = 0; k < mean.size(); ++k) {
    const double se = std::sqrt(var.data()[k] / n);
    EXPECT_LE(std::abs(mean.data()[k] - target.data()[k]), 3 * se) << "entry " << k;
  }
}

/// Entries of `now` equal to `before` (zoned out) as a 0/1 matrix.
Matrix preserved(const Tensor &now, const Tensor &before) {
  return (now.value().array() == before.value().array()).cast<double>().matrix();
}

TEST(MaskModes, SharedMaskZonesCellAndHiddenTogether) {
  Fixture f = make_fixture(CellKind::lstm, 6, 4, 8);
  const UnrollResult r = run(f, RegularizerConfig{{Zoneout{0.5, 0.5, MaskMode::shared_hc}}}, Mode::train);
  for (std::size_t t = 1; t < 6; ++t) {
    const Matrix dc = preserved(r.trace[0].c[t], r.trace[0].c[t - 1]);
    const Matrix dh = preserved(r.trace[0].h[t], r.trace[0].h[t - 1]);
    EXPECT_TRUE(dc == dh) << "t=" << t;
    EXPECT_GT(dc.sum(), 0.0);
    EXPECT_LT(dc.sum(), static_cast<double>(dc.size()));
  }
}

TEST(MaskModes, StaticMasksRepeatAcrossBatchesAndDifferAcrossTime) {
  Fixture f = make_fixture(CellKind::lstm, 5, 3, 9);
  Fixture g = make_fixture(CellKind::lstm, 5, 3, 10);
  const RegularizerConfig regs{{Zoneout{0.5, 0.5, MaskMode::static_global}}};
  NoiseContext noise(regs, CellKind::lstm, 1, 12);
  NoGradGuard guard;
  const UnrollResult a = unroll(f.net, f.input, f.initial, noise, {});
  const UnrollResult b = unroll(f.net, g.input, g.initial, noise, {});
  std::vector<Matrix> patterns;
  for (std::size_t t = 1; t < 5; ++t) {
    const Matrix da = preserved(a.trace[0].c[t], a.trace[0].c[t - 1]);
    const Matrix db = preserved(b.trace[0].c[t], b.trace[0].c[t - 1]);
    EXPECT_TRUE(da == db) << "t=" << t;
    for (Index r = 1; r < da.rows(); ++r)
      EXPECT_TRUE(da.row(r) == da.row(0)); // one mask shared by the batch
    patterns.push_back(da);
  }
  bool differs = false;
  for (std::size_t t = 1; t < patterns.size(); ++t)
    differs = differs || !(patterns[t] == patterns[0]);
  EXPECT_TRUE(differs);
}

TEST(MaskModes, WholeStateMasksCoverEveryUnit) {
  Fixture f = make_fixture(CellKind::lstm, 8, 4, 13);
  const UnrollResult r = run(f, RegularizerConfig{{Zoneout{0.5, 0.5, MaskMode::per_timestep_whole_state}}}, Mode::train);
  for (std::size_t t = 1; t < 8; ++t) {
    const Matrix d = preserved(r.trace[0].c[t], r.trace[0].c[t - 1]);
    for (Index b = 0; b < d.rows(); ++b)
      EXPECT_TRUE(d.row(b).minCoeff() == d.row(b).maxCoeff()) << "t=" << t;
  }
}

TEST(MaskModes, PerSequenceMaskIsFixedWithinASequence) {
  Rng rng(14);
  MaskSampler s(MaskSpec{0.5, MaskMode::per_sequence}, rng);
  const Matrix a = s.draw(3, 7, 0);
  EXPECT_TRUE(a == s.draw(3, 7, 1));
  s.new_sequence();
  bool changed = false;
  for (int k = 0; k < 5 && !changed; ++k) {
    changed = !(s.draw(3, 7, 0) == a);
    s.new_sequence();
  }
  EXPECT_TRUE(changed);
}

TEST(MaskModes, ParseNames) {
  EXPECT_EQ(parse_mask_mode("shared"), MaskMode::shared_hc);
  EXPECT_EQ(parse_mask_mode("static"), MaskMode::static_global);
  EXPECT_THROW(parse_mask_mode("sometimes"), std::invalid_argument);
}

} // namespace
} // namespace zoneout

// SPDX-License-Identifier: Apache-2.0
#include "zoneout/cells.hpp"

#include <Eigen/QR>

#include <stdexcept>
#include <string>

namespace zoneout {

std::string_view to_string(CellKind kind) {
  switch (kind) {
  case CellKind::lstm:
    return "lstm";
  case CellKind::gru:
    return "gru";
  case CellKind::rnn:
    return "rnn";
  }
  return "?";
}

CellKind parse_cell_kind(std::string_view name) {
  if (name == "lstm")
    return CellKind::lstm;
  if (name == "gru")
    return CellKind::gru;
  if (name == "rnn")
    return CellKind::rnn;
  throw std::invalid_argument("unknown cell kind '" + std::string(name) + "'");
}

void CellParams::validate() const {
  if (!w_x.defined() || !w_h.defined() || !b.defined())
    throw DimensionError("cell parameters are not initialised");
  const Index h = w_h.rows();
  const Index width = gate_blocks(kind) * h;
  if (w_h.cols() != width || w_x.cols() != width || b.rows() != 1 ||
      b.cols() != width)
    throw DimensionError(std::string(to_string(kind)) +
                         " parameters inconsistent: W_x " + w_x.shape_str() +
                         ", W_h " + w_h.shape_str() + ", b " + b.shape_str());
}

CellState zero_state(CellKind kind, Index batch, Index hidden) {
  CellState s;
  s.h = Tensor::zeros(batch, hidden);
  if (kind == CellKind::lstm) {
    s.c = Tensor::zeros(batch, hidden);
    s.o = Tensor::constant(batch, hidden, 1.0);
  }
  return s;
}

Tensor project_input(const Tensor &w_x, const Tensor &x) {
  return matmul(x, w_x);
}

Tensor project_tokens(const Tensor &w_x, std::span<const int> tokens) {
  return gather_rows(w_x, tokens);
}

namespace {

void check_state(const CellParams &p, const Tensor &x_proj, const Tensor &h) {
  const Index width = gate_blocks(p.kind) * p.hidden_size();
  if (x_proj.cols() != width)
    throw DimensionError("input projection " + x_proj.shape_str() +
                         " does not match gate width " + std::to_string(width));
  if (h.cols() != p.hidden_size() || h.rows() != x_proj.rows())
    throw DimensionError("state " + h.shape_str() + " does not match batch " +
                         std::to_string(x_proj.rows()) + " / hidden " +
                         std::to_string(p.hidden_size()));
}

} // namespace

LstmStep lstm_step_projected(const CellParams &params, const Tensor &x_proj,
                             const CellState &prev) {
  if (params.kind != CellKind::lstm)
    throw std::invalid_argument("lstm_step called with " +
                                std::string(to_string(params.kind)) + " params");
  check_state(params, x_proj, prev.h);
  if (!prev.c.defined() || prev.c.rows() != prev.h.rows() ||
      prev.c.cols() != prev.h.cols())
    throw DimensionError("lstm_step: missing or mis-shaped cell state");
  const Index h = params.hidden_size();
  LstmStep s;
  s.packed = lstm_cell(x_proj, prev.h, params.w_h, params.b, prev.c);
  s.c_cand = slice_cols(s.packed, 4 * h, h);
  s.h_cand = slice_cols(s.packed, 6 * h, h);
  return s;
}

Tensor LstmStep::gate(LstmGate which) const {
  const Tensor *field = nullptr;
  switch (which) {
  case LstmGate::input:
    field = &i;
    break;
  case LstmGate::forget:
    field = &f;
    break;
  case LstmGate::output:
    field = &o;
    break;
  case LstmGate::candidate:
    field = &g;
    break;
  }
  if (field->defined())
    return *field;
  if (!packed.defined())
    throw std::logic_error("LstmStep: gate requested from an empty step");
  const Index h = packed.cols() / 7;
  return slice_cols(packed, static_cast<Index>(which) * h, h);
}

LstmStep lstm_step(const CellParams &params, const Tensor &x_t,
                   const CellState &prev) {
  if (x_t.cols() != params.input_size())
    throw DimensionError("lstm_step: input " + x_t.shape_str() +
                         " does not match W_x " + params.w_x.shape_str());
  return lstm_step_projected(params, project_input(params.w_x, x_t), prev);
}

GruStep gru_step_projected(const CellParams &params, const Tensor &x_proj,
                           const Tensor &h_prev) {
  if (params.kind != CellKind::gru)
    throw std::invalid_argument("gru_step called with " +
                                std::string(to_string(params.kind)) + " params");
  check_state(params, x_proj, h_prev);
  const Index h = params.hidden_size();
  const Tensor gates_in = add_bias(
    slice_cols(x_proj, 0, 2 * h) +
      matmul(h_prev, slice_cols(params.w_h, 0, 2 * h)),
    slice_cols(params.b, 0, 2 * h));

  GruStep s;
  s.u = sigmoid(slice_cols(gates_in, 0, h));
  s.r = sigmoid(slice_cols(gates_in, h, h));
  s.candidate =
    tanh(add_bias(slice_cols(x_proj, 2 * h, h) +
                    matmul(mul(s.r, h_prev), slice_cols(params.w_h, 2 * h, h)),
                  slice_cols(params.b, 2 * h, h)));
  // (1-u)*h_prev + u*cand, written as h_prev + u*(cand - h_prev).
  s.h_cand = h_prev + mul(s.u, s.candidate - h_prev);
  return s;
}

GruStep gru_step(const CellParams &params, const Tensor &x_t,
                 const Tensor &h_prev) {
  if (x_t.cols() != params.input_size())
    throw DimensionError("gru_step: input " + x_t.shape_str() +
                         " does not match W_x " + params.w_x.shape_str());
  return gru_step_projected(params, project_input(params.w_x, x_t), h_prev);
}

Tensor rnn_step_projected(const CellParams &params, const Tensor &x_proj,
                          const Tensor &h_prev) {
  if (params.kind != CellKind::rnn)
    throw std::invalid_argument("rnn_step called with " +
                                std::string(to_string(params.kind)) + " params");
  check_state(params, x_proj, h_prev);
  return tanh(affine(x_proj, h_prev, params.w_h, params.b));
}

Tensor rnn_step(const CellParams &params, const Tensor &x_t,
                const Tensor &h_prev) {
  if (x_t.cols() != params.input_size())
    throw DimensionError("rnn_step: input " + x_t.shape_str() +
                         " does not match W_x " + params.w_x.shape_str());
  return rnn_step_projected(params, project_input(params.w_x, x_t), h_prev);
}

namespace {

Matrix uniform_matrix(Index rows, Index cols, double a, Rng &rng) {
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k)
    m.data()[k] = rng.uniform(-a, a);
  return m;
}

Matrix orthogonal_matrix(Index n, Rng &rng) {
  Matrix g(n, n);
  for (Index k = 0; k < g.size(); ++k)
    g.data()[k] = rng.normal(0.0, 1.0);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  // Fix column signs so Q is uniformly (Haar) distributed.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0)
      q.col(j) *= -1.0;
  return q;
}

} // namespace

CellParams init_params(CellKind kind, Index input_size, Index hidden_size,
                       const InitScheme &scheme, Rng &rng) {
  if (input_size <= 0 || hidden_size <= 0)
    throw DimensionError("init_params: sizes must be positive, got input " +
                         std::to_string(input_size) + ", hidden " +
                         std::to_string(hidden_size));
  if (!(scheme.scale > 0))
    throw std::invalid_argument("init_params: uniform scale must be > 0");
  const Index blocks = gate_blocks(kind);
  const Index width = blocks * hidden_size;

  CellParams p;
  p.kind = kind;
  p.w_x = Tensor(uniform_matrix(input_size, width, scheme.scale, rng), true);
  Matrix w_h;
  if (scheme.kind == InitScheme::Kind::orthogonal) {
    w_h.resize(hidden_size, width);
    for (Index k = 0; k < blocks; ++k)
      w_h.middleCols(k * hidden_size, hidden_size) =
        orthogonal_matrix(hidden_size, rng);
  } else {
    w_h = uniform_matrix(hidden_size, width, scheme.scale, rng);
  }
  p.w_h = Tensor(std::move(w_h), true);
  Matrix b = Matrix::Zero(1, width);
  if (kind == CellKind::lstm)
    b.middleCols(hidden_size, hidden_size).setConstant(scheme.forget_bias);
  p.b = Tensor(std::move(b), true);
  return p;
}

} // namespace zoneout

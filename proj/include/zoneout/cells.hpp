// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cells.hpp
 * @brief  tanh-RNN, GRU and LSTM step functions.
 *
 * Steps return candidate states and the raw gate activations. They never apply
 * masks; turning candidates into the next state is the job of the assembly
 * rules in regularizers.hpp.
 *
 * Weight layout, all row-major with inputs on the left (x * W):
 *   LSTM  W_x [I x 4H], W_h [H x 4H], b [1 x 4H], gate blocks [i | f | o | g]
 *   GRU   W_x [I x 3H], W_h [H x 3H], b [1 x 3H], blocks [u | r | candidate]
 *   RNN   W_x [I x H],  W_h [H x H],  b [1 x H]
 */
#pragma once

#include "zoneout/ops.hpp"
#include "zoneout/rng.hpp"
#include "zoneout/tensor.hpp"

#include <string_view>

namespace zoneout {

enum class CellKind { lstm, gru, rnn };

std::string_view to_string(CellKind kind);
CellKind parse_cell_kind(std::string_view name);

/// Number of H-wide blocks stacked along the gate axis.
constexpr Index gate_blocks(CellKind kind) {
  switch (kind) {
  case CellKind::lstm:
    return 4;
  case CellKind::gru:
    return 3;
  case CellKind::rnn:
    return 1;
  }
  return 1;
}

struct CellParams {
  CellKind kind = CellKind::lstm;
  Tensor w_x;
  Tensor w_h;
  Tensor b;

  Index input_size() const { return w_x.rows(); }
  Index hidden_size() const { return w_h.rows(); }
  /// Throws DimensionError unless the three tensors agree with `kind`.
  void validate() const;
};

/// h and, for LSTMs, c. `o` carries the previous output gate for the
/// output-gate-reuse regulariser and is undefined otherwise.
struct CellState {
  Tensor h;
  Tensor c;
  Tensor o;
};

CellState zero_state(CellKind kind, Index batch, Index hidden);

enum class LstmGate { input, forget, output, candidate };

/// One LSTM step before any regulariser is applied. lstm_step fills only
/// c_cand, h_cand and the fused `packed` result; gate() slices individual
/// gates out of it on demand. Hand-built steps may set i, f, o, g directly.
struct LstmStep {
  Tensor i, f, o, g;
  Tensor c_cand; // f*c_prev + i*g
  Tensor h_cand; // o*tanh(c_cand)
  Tensor packed; // [i, f, o, g, c, tanh(c), h] from lstm_cell

  Tensor gate(LstmGate which) const;
};

struct GruStep {
  Tensor u, r;
  Tensor candidate; // tanh(x W_xc + (r*h) W_hc + b_c)
  Tensor h_cand;    // (1-u)*h_prev + u*candidate
};

/// Input projection helpers: x_proj = x * W_x for dense inputs or the rows of
/// W_x selected by token ids (one-hot inputs).
Tensor project_input(const Tensor &w_x, const Tensor &x);
Tensor project_tokens(const Tensor &w_x, std::span<const int> tokens);

LstmStep lstm_step(const CellParams &params, const Tensor &x_t,
                   const CellState &prev);
LstmStep lstm_step_projected(const CellParams &params, const Tensor &x_proj,
                             const CellState &prev);

GruStep gru_step(const CellParams &params, const Tensor &x_t,
                 const Tensor &h_prev);
GruStep gru_step_projected(const CellParams &params, const Tensor &x_proj,
                           const Tensor &h_prev);

Tensor rnn_step(const CellParams &params, const Tensor &x_t,
                const Tensor &h_prev);
Tensor rnn_step_projected(const CellParams &params, const Tensor &x_proj,
                          const Tensor &h_prev);

struct InitScheme {
  enum class Kind { uniform, orthogonal } kind = Kind::uniform;
  double scale = 0.04; // half-width of the uniform range
  double forget_bias = 1.0;
};

/// Uniform weights in [-scale, scale], or orthogonal H x H recurrent blocks
/// (QR of a Gaussian matrix) with uniform input weights. Biases are zero
/// except the LSTM forget block, which gets `forget_bias`.
CellParams init_params(CellKind kind, Index input_size, Index hidden_size,
                       const InitScheme &scheme, Rng &rng);

} // namespace zoneout

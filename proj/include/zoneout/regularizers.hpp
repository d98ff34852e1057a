// SPDX-License-Identifier: Apache-2.0
/**
 * @file   regularizers.hpp
 * @brief  Bernoulli masks and state-assembly rules for zoneout and the
 *         recurrent regularisers it is compared against.
 *
 * Mask convention: a zoneout mask entry of 1 means "keep the previous value".
 * A dropout keep-mask entry of 1 means "keep the masked term" and is drawn
 * with probability 1 - p. In eval mode every mask is replaced by its
 * expectation, with no train-time rescaling.
 */
#pragma once

#include "zoneout/cells.hpp"
#include "zoneout/rng.hpp"
#include "zoneout/tensor.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace zoneout {

enum class Mode { train, eval };

enum class MaskMode {
  per_step,                 // fresh i.i.d. mask at every timestep
  per_sequence,             // one mask per sequence, reused over time
  shared_hc,                // per step, one draw serves both c and h
  static_global,            // one mask per timestep index, fixed for the run
  per_timestep_whole_state, // one draw per (example, timestep), whole state
};

std::string_view to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view name);

/// 0/1 entries; masks are constants and never receive gradients.
using MaskBatch = Matrix;

struct MaskSpec {
  double probability = 0.0;
  MaskMode mode = MaskMode::per_step;
  void validate() const;
};

/// i.i.d. Bernoulli(probability) entries.
MaskBatch sample_mask(double probability, Index rows, Index cols, Rng &rng);

/// Records generated matrices on request and replays them verbatim, so a
/// stochastic forward pass can be repeated with frozen noise.
class NoiseTape {
public:
  /// Start a fresh recording; subsequent take() calls append to it.
  void record();
  /// Stop recording and replay the recording from the start.
  void freeze();
  /// Move the replay cursor back to the first recorded draw.
  void rewind() { cursor_ = 0; }
  /// Drop the recording and go back to live sampling.
  void release();
  bool frozen() const { return replaying_; }

  Matrix take(const std::function<Matrix()> &generate);

private:
  std::vector<Matrix> tape_;
  std::size_t cursor_ = 0;
  bool recording_ = false;
  bool replaying_ = false;
};

/// Draws masks according to a MaskSpec, keeping the caches its mode needs.
class MaskSampler {
public:
  MaskSampler(MaskSpec spec, Rng rng);

  const MaskSpec &spec() const { return spec_; }
  /// Mask for timestep `t` (0-based within the current sequence).
  MaskBatch draw(Index rows, Index cols, Index t);
  /// Invalidates the per_sequence cache.
  void new_sequence() { sequence_mask_.resize(0, 0); }
  NoiseTape &tape() { return tape_; }

private:
  MaskBatch fresh(Index rows, Index cols, Index t);

  MaskSpec spec_;
  Rng rng_;
  NoiseTape tape_;
  MaskBatch sequence_mask_;
  std::map<Index, MaskBatch> static_rows_;
};

// ---------------------------------------------------------------------------
// Configuration

struct Zoneout {
  double z_c = 0.0;
  double z_h = 0.0;
  MaskMode mode = MaskMode::per_step;
};
struct RecurrentDropout {
  double p = 0.0;
};
struct NaiveCellDropout {
  double p = 0.0;
};
struct OutputGateReuse {
  double p = 0.0;
};
struct StochasticDepth {
  double z = 0.0;
};
struct WeightNoise {
  double sigma = 0.0;
};
struct NormStabilizer {
  double beta = 0.0;
};

using RegularizerTerm =
  std::variant<Zoneout, RecurrentDropout, NaiveCellDropout, OutputGateReuse,
               StochasticDepth, WeightNoise, NormStabilizer>;

/// A combination of regularisers: at most one state-assembly rule (zoneout,
/// a dropout variant, stochastic depth) plus optional weight noise and norm
/// stabiliser. An empty list means no regularisation.
struct RegularizerConfig {
  std::vector<RegularizerTerm> terms;

  /// Throws std::invalid_argument on out-of-range values, duplicate terms,
  /// two assembly rules, or a rule the cell kind does not support.
  void validate() const;
  void validate_for(CellKind kind) const;

  /// The state-assembly term, or nullptr when states are assembled plainly.
  const RegularizerTerm *assembly() const;
  double weight_noise_sigma() const;
  double norm_stabilizer_beta() const;
  std::string label() const;
};

std::string term_name(const RegularizerTerm &term);

// ---------------------------------------------------------------------------
// Assembly rules. Train mode requires the relevant masks; eval mode ignores
// them and uses probabilities.

CellState zoneout_lstm_assemble(const LstmStep &step, const CellState &prev,
                                const MaskBatch *d_c, const MaskBatch *d_h,
                                Mode mode, double z_c, double z_h);

/// c = f*c_prev + m*(i*g), h = o*tanh(c); m is a keep-mask.
CellState recurrent_dropout_assemble(const LstmStep &step,
                                     const CellState &prev, const MaskBatch *m,
                                     Mode mode, double p);

/// c = m*c_cand, h = o*tanh(c); m is a keep-mask.
CellState naive_cell_dropout_assemble(const LstmStep &step,
                                      const CellState &prev,
                                      const MaskBatch *m, Mode mode, double p);

/// One drop-indicator d (1 with probability p) serves both roles:
/// c = f*c_prev + (1-d)*(i*g), h = ((1-d)*o_t + d*o_{t-1}) * tanh(c).
CellState output_gate_reuse_assemble(const LstmStep &step,
                                     const CellState &prev, const MaskBatch *d,
                                     Mode mode, double p);

/// Whole-state zoneout: rows of `s` are all-ones (keep previous state, ignore
/// the input) or all-zeros (take the candidate).
CellState stochastic_depth_assemble(const CellState &candidate,
                                    const CellState &prev, const MaskBatch *s,
                                    Mode mode, double z);

/// h = d*h_prev + (1-d)*h_cand, for GRU and tanh-RNN states.
Tensor zoneout_simple_assemble(const Tensor &h_cand, const Tensor &h_prev,
                               const MaskBatch *d_h, Mode mode, double z_h);

/// GRU analogue of input-gate dropout: the update term loses its candidate
/// contribution, h = (1-u)*h_prev + m*(u*candidate).
Tensor gru_recurrent_dropout_assemble(const GruStep &step, const Tensor &h_prev,
                                      const MaskBatch *m, Mode mode, double p);

/// Zero-mapping of a whole state, h = m*h_cand (eval: (1-p)*h_cand). Used for
/// naive dropout on GRU/RNN states, and for RNN recurrent dropout, which has
/// no gate to mask.
Tensor state_dropout_assemble(const Tensor &h_cand, const MaskBatch *m,
                              Mode mode, double p);

/// Copies of the parameters with N(0, sigma^2) noise added to the weight
/// matrices (biases untouched). Gradients flow to the clean tensors.
CellParams apply_weight_noise(const CellParams &params, double sigma,
                              Rng &rng);
/// Same, with noise drawn through a tape (frozen-noise checks).
Tensor add_weight_noise(const Tensor &w, double sigma, Rng &rng,
                        NoiseTape &tape);

/// beta/T * sum_t mean_b (|h_t| - |h_{t-1}|)^2 with h_0 = `initial`.
Tensor norm_stabilizer_penalty(const Tensor &initial,
                               std::span<const Tensor> states, double beta);

} // namespace zoneout

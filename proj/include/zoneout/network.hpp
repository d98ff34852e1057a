// SPDX-License-Identifier: Apache-2.0
/**
 * @file   network.hpp
 * @brief  Stacked recurrent network, unrolled through time with a regulariser
 *         owning the state assembly at every step.
 */
#pragma once

#include "zoneout/cells.hpp"
#include "zoneout/regularizers.hpp"
#include "zoneout/rng.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace zoneout {

struct NetworkShape {
  CellKind cell = CellKind::lstm;
  Index input_size = 1;    // vocabulary size when token_input
  bool token_input = false;
  Index hidden = 8;
  Index layers = 1;
  Index output_size = 2;
};

class RecurrentNetwork {
public:
  RecurrentNetwork(NetworkShape shape, const InitScheme &init, Rng &rng);

  const NetworkShape &shape() const { return shape_; }
  const std::vector<CellParams> &layers() const { return layers_; }
  const Tensor &w_out() const { return w_out_; }
  const Tensor &b_out() const { return b_out_; }

  /// Every trainable tensor, in a fixed order, with a stable name.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;

  std::vector<CellState> initial_state(Index batch) const;

private:
  NetworkShape shape_;
  std::vector<CellParams> layers_;
  Tensor w_out_;
  Tensor b_out_;
};

/// Inputs for T timesteps: token ids tokens[t][b] or dense rows dense[t] (BxI).
struct SequenceInput {
  std::vector<std::vector<int>> tokens;
  std::vector<Matrix> dense;

  Index steps() const;
  Index batch() const;
};

/// Per-run stochastic state for one regulariser: mask samplers for every
/// layer plus the weight-noise stream. Masks can be recorded and replayed so a
/// stochastic pass is repeatable (gradient checks, profiles).
class NoiseContext {
public:
  NoiseContext(RegularizerConfig config, CellKind cell, Index layers,
               std::uint64_t seed);

  const RegularizerConfig &config() const { return config_; }

  void record();
  void freeze();
  void rewind();
  void release();

  struct LayerSamplers {
    std::unique_ptr<MaskSampler> first;  // c (LSTM zoneout), or the only mask
    std::unique_ptr<MaskSampler> second; // h (zoneout)
  };
  LayerSamplers &layer(Index l) { return layers_[static_cast<std::size_t>(l)]; }
  Rng &weight_rng() { return weight_rng_; }
  NoiseTape &weight_tape() { return weight_tape_; }
  void new_sequence();

private:
  RegularizerConfig config_;
  std::vector<LayerSamplers> layers_;
  Rng weight_rng_;
  NoiseTape weight_tape_;
};

struct ForwardOptions {
  Mode mode = Mode::train;
  /// Adds a zero leaf to every assembled c_t / h_t. Its gradient after
  /// backward() is dL/dc_t (dL/dh_t), and perturbing its value perturbs the
  /// state in place.
  bool state_probes = false;
  /// Optional starting value for each probe (layer, t, is_cell, value).
  std::function<void(Index, Index, bool, Matrix &)> probe_init;
};

/// Per-layer, per-timestep record of assembled states.
struct LayerTrace {
  std::vector<Tensor> h;
  std::vector<Tensor> c;
  std::vector<Tensor> probe_h;
  std::vector<Tensor> probe_c;
};

struct UnrollResult {
  std::vector<Tensor> outputs;          // top-layer h_t, t = 1..T
  std::vector<CellState> final_state;   // one per layer
  std::vector<LayerTrace> trace;        // one per layer
  Tensor penalty;                       // norm stabiliser, undefined if off
};

UnrollResult unroll(const RecurrentNetwork &net, const SequenceInput &input,
                    const std::vector<CellState> &initial, NoiseContext &noise,
                    const ForwardOptions &options);

/// Carried state with the history cut (truncated BPTT across batches).
std::vector<CellState> detach_state(const std::vector<CellState> &state);

enum class TaskKind { language_model, classification };

struct LossResult {
  Tensor loss;       // mean NLL per predicted symbol (+ norm penalty)
  double nll = 0.0;  // mean NLL per predicted symbol, nats
  Index count = 0;   // predicted symbols
  Index errors = 0;  // argmax mismatches
  UnrollResult unrolled;
};

/// Language model: targets[t * B + b] is the symbol after inputs at (t, b).
/// Classification: targets[b] is the label, predicted from the last step.
LossResult sequence_nll(const RecurrentNetwork &net, const SequenceInput &input,
                        std::span<const int> targets, TaskKind task,
                        const std::vector<CellState> &initial,
                        NoiseContext &noise, const ForwardOptions &options);

/// Row-wise argmax mismatches; ties go to the lowest class index.
Index count_errors(const Matrix &logits, std::span<const int> labels);

} // namespace zoneout

// SPDX-License-Identifier: Apache-2.0
#include "zoneout/network.hpp"

#include <stdexcept>
#include <variant>

namespace zoneout {

RecurrentNetwork::RecurrentNetwork(NetworkShape shape, const InitScheme &init,
                                   Rng &rng)
  : shape_(shape) {
  if (shape.layers <= 0 || shape.hidden <= 0 || shape.input_size <= 0 ||
      shape.output_size <= 0)
    throw DimensionError("network sizes must be positive");
  for (Index l = 0; l < shape.layers; ++l) {
    const Index in = l == 0 ? shape.input_size : shape.hidden;
    layers_.push_back(init_params(shape.cell, in, shape.hidden, init, rng));
  }
  Matrix w(shape.hidden, shape.output_size);
  for (Index k = 0; k < w.size(); ++k)
    w.data()[k] = rng.uniform(-init.scale, init.scale);
  w_out_ = Tensor(std::move(w), true);
  b_out_ = Tensor::zeros(1, shape.output_size, true);
}

std::vector<std::pair<std::string, Tensor>>
RecurrentNetwork::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "w_x", layers_[l].w_x);
    out.emplace_back(p + "w_h", layers_[l].w_h);
    out.emplace_back(p + "b", layers_[l].b);
  }
  out.emplace_back("out.w", w_out_);
  out.emplace_back("out.b", b_out_);
  return out;
}

std::vector<Tensor> RecurrentNetwork::parameters() const {
  std::vector<Tensor> out;
  for (auto &[name, t] : named_parameters())
    out.push_back(t);
  return out;
}

std::vector<CellState> RecurrentNetwork::initial_state(Index batch) const {
  std::vector<CellState> s;
  for (Index l = 0; l < shape_.layers; ++l)
    s.push_back(zero_state(shape_.cell, batch, shape_.hidden));
  return s;
}

Index SequenceInput::steps() const {
  return static_cast<Index>(tokens.empty() ? dense.size() : tokens.size());
}

Index SequenceInput::batch() const {
  if (!tokens.empty())
    return static_cast<Index>(tokens.front().size());
  if (!dense.empty())
    return dense.front().rows();
  return 0;
}

// ---------------------------------------------------------------------------

NoiseContext::NoiseContext(RegularizerConfig config, CellKind cell,
                           Index layers, std::uint64_t seed)
  : config_(std::move(config)), weight_rng_(seed, "noise/weights") {
  config_.validate_for(cell);
  const RegularizerTerm *rule = config_.assembly();
  for (Index l = 0; l < layers; ++l) {
    const std::string tag = "masks/layer" + std::to_string(l);
    Rng first(seed, tag + "/first");
    Rng second(seed, tag + "/second");
    LayerSamplers s;
    if (rule) {
      if (const auto *z = std::get_if<Zoneout>(rule)) {
        if (cell == CellKind::lstm) {
          s.first = std::make_unique<MaskSampler>(MaskSpec{z->z_c, z->mode},
                                                  std::move(first));
          if (z->mode != MaskMode::shared_hc)
            s.second = std::make_unique<MaskSampler>(
              MaskSpec{z->z_h, z->mode}, std::move(second));
        } else {
          s.first = std::make_unique<MaskSampler>(MaskSpec{z->z_h, z->mode},
                                                  std::move(first));
        }
      } else if (const auto *d = std::get_if<RecurrentDropout>(rule)) {
        s.first = std::make_unique<MaskSampler>(
          MaskSpec{1.0 - d->p, MaskMode::per_step}, std::move(first));
      } else if (const auto *n = std::get_if<NaiveCellDropout>(rule)) {
        s.first = std::make_unique<MaskSampler>(
          MaskSpec{1.0 - n->p, MaskMode::per_step}, std::move(first));
      } else if (const auto *o = std::get_if<OutputGateReuse>(rule)) {
        s.first = std::make_unique<MaskSampler>(
          MaskSpec{o->p, MaskMode::per_step}, std::move(first));
      } else if (const auto *sd = std::get_if<StochasticDepth>(rule)) {
        s.first = std::make_unique<MaskSampler>(
          MaskSpec{sd->z, MaskMode::per_timestep_whole_state},
          std::move(first));
      }
    }
    layers_.push_back(std::move(s));
  }
}

namespace {

template <typename Fn> void each_tape(NoiseContext &ctx, Index layers, Fn fn) {
  for (Index l = 0; l < layers; ++l) {
    auto &s = ctx.layer(l);
    if (s.first)
      fn(s.first->tape());
    if (s.second)
      fn(s.second->tape());
  }
  fn(ctx.weight_tape());
}

} // namespace

void NoiseContext::record() {
  each_tape(*this, static_cast<Index>(layers_.size()),
            [](NoiseTape &t) { t.record(); });
}
void NoiseContext::freeze() {
  each_tape(*this, static_cast<Index>(layers_.size()),
            [](NoiseTape &t) { t.freeze(); });
}
void NoiseContext::rewind() {
  each_tape(*this, static_cast<Index>(layers_.size()),
            [](NoiseTape &t) { t.rewind(); });
}
void NoiseContext::release() {
  each_tape(*this, static_cast<Index>(layers_.size()),
            [](NoiseTape &t) { t.release(); });
}
void NoiseContext::new_sequence() {
  for (auto &s : layers_) {
    if (s.first)
      s.first->new_sequence();
    if (s.second)
      s.second->new_sequence();
  }
}

// ---------------------------------------------------------------------------

namespace {

/// Draws a mask only in train mode; eval assembles from probabilities.
struct MaskDraw {
  MaskBatch value;
  const MaskBatch *ptr = nullptr;
};

MaskDraw draw(MaskSampler *sampler, Mode mode, Index rows, Index cols,
              Index t) {
  MaskDraw d;
  if (mode == Mode::train && sampler) {
    d.value = sampler->draw(rows, cols, t);
    d.ptr = &d.value;
  }
  return d;
}

CellState lstm_layer_step(const CellParams &p, const Tensor &x_proj,
                          const CellState &prev, const RegularizerTerm *rule,
                          NoiseContext::LayerSamplers &masks, Mode mode,
                          Index t) {
  const LstmStep s = lstm_step_projected(p, x_proj, prev);
  const Index rows = x_proj.rows();
  const Index cols = p.hidden_size();
  if (!rule)
    return CellState{s.h_cand, s.c_cand, {}};

  if (const auto *z = std::get_if<Zoneout>(rule)) {
    MaskDraw dc = draw(masks.first.get(), mode, rows, cols, t);
    if (z->mode == MaskMode::shared_hc)
      return zoneout_lstm_assemble(s, prev, dc.ptr, dc.ptr, mode, z->z_c,
                                   z->z_h);
    MaskDraw dh = draw(masks.second.get(), mode, rows, cols, t);
    return zoneout_lstm_assemble(s, prev, dc.ptr, dh.ptr, mode, z->z_c, z->z_h);
  }
  MaskDraw m = draw(masks.first.get(), mode, rows, cols, t);
  if (const auto *d = std::get_if<RecurrentDropout>(rule))
    return recurrent_dropout_assemble(s, prev, m.ptr, mode, d->p);
  if (const auto *n = std::get_if<NaiveCellDropout>(rule))
    return naive_cell_dropout_assemble(s, prev, m.ptr, mode, n->p);
  if (const auto *o = std::get_if<OutputGateReuse>(rule))
    return output_gate_reuse_assemble(s, prev, m.ptr, mode, o->p);
  if (const auto *sd = std::get_if<StochasticDepth>(rule))
    return stochastic_depth_assemble(CellState{s.h_cand, s.c_cand, {}}, prev,
                                     m.ptr, mode, sd->z);
  throw std::logic_error("unhandled lstm regularizer");
}

Tensor simple_layer_step(const CellParams &p, const Tensor &x_proj,
                         const Tensor &h_prev, const RegularizerTerm *rule,
                         NoiseContext::LayerSamplers &masks, Mode mode,
                         Index t) {
  const bool gru = p.kind == CellKind::gru;
  GruStep g;
  Tensor h_cand;
  if (gru) {
    g = gru_step_projected(p, x_proj, h_prev);
    h_cand = g.h_cand;
  } else {
    h_cand = rnn_step_projected(p, x_proj, h_prev);
  }
  if (!rule)
    return h_cand;
  MaskDraw m = draw(masks.first.get(), mode, x_proj.rows(), p.hidden_size(), t);
  if (const auto *z = std::get_if<Zoneout>(rule))
    return zoneout_simple_assemble(h_cand, h_prev, m.ptr, mode, z->z_h);
  if (const auto *d = std::get_if<RecurrentDropout>(rule))
    return gru ? gru_recurrent_dropout_assemble(g, h_prev, m.ptr, mode, d->p)
               : state_dropout_assemble(h_cand, m.ptr, mode, d->p);
  if (const auto *n = std::get_if<NaiveCellDropout>(rule))
    return state_dropout_assemble(h_cand, m.ptr, mode, n->p);
  if (const auto *sd = std::get_if<StochasticDepth>(rule)) {
    const Tensor cand_only = h_cand;
    return stochastic_depth_assemble(CellState{cand_only, {}, {}},
                                     CellState{h_prev, {}, {}}, m.ptr, mode,
                                     sd->z)
      .h;
  }
  throw std::logic_error("unhandled regularizer for " +
                         std::string(to_string(p.kind)));
}

} // namespace

UnrollResult unroll(const RecurrentNetwork &net, const SequenceInput &input,
                    const std::vector<CellState> &initial, NoiseContext &noise,
                    const ForwardOptions &options) {
  const NetworkShape &shape = net.shape();
  const Index steps = input.steps();
  const Index batch = input.batch();
  if (steps <= 0 || batch <= 0)
    throw DimensionError("unroll: empty input sequence");
  if (static_cast<Index>(initial.size()) != shape.layers)
    throw DimensionError("unroll: initial state has " +
                         std::to_string(initial.size()) + " layers, network " +
                         std::to_string(shape.layers));
  if (input.tokens.empty() == shape.token_input)
    throw std::invalid_argument(shape.token_input
                                  ? "unroll: network expects token inputs"
                                  : "unroll: network expects dense inputs");

  const RegularizerConfig &config = noise.config();
  const RegularizerTerm *rule = config.assembly();
  const double sigma = config.weight_noise_sigma();
  const double beta = config.norm_stabilizer_beta();
  const Mode mode = options.mode;

  // Effective weights for this pass; weight noise only perturbs training.
  std::vector<CellParams> params = net.layers();
  if (mode == Mode::train && sigma > 0.0) {
    for (auto &p : params) {
      p.w_x = add_weight_noise(p.w_x, sigma, noise.weight_rng(),
                               noise.weight_tape());
      p.w_h = add_weight_noise(p.w_h, sigma, noise.weight_rng(),
                               noise.weight_tape());
    }
  }
  noise.new_sequence();

  UnrollResult out;
  out.trace.resize(static_cast<std::size_t>(shape.layers));
  std::vector<CellState> state = initial;
  for (Index t = 0; t < steps; ++t) {
    Tensor below;
    for (Index l = 0; l < shape.layers; ++l) {
      const CellParams &p = params[static_cast<std::size_t>(l)];
      Tensor x_proj;
      if (l == 0) {
        x_proj = shape.token_input
                   ? project_tokens(p.w_x, input.tokens[static_cast<std::size_t>(t)])
                   : project_input(p.w_x,
                                   Tensor(input.dense[static_cast<std::size_t>(t)]));
      } else {
        x_proj = project_input(p.w_x, below);
      }
      CellState &s = state[static_cast<std::size_t>(l)];
      auto &masks = noise.layer(l);
      CellState next;
      if (shape.cell == CellKind::lstm) {
        next = lstm_layer_step(p, x_proj, s, rule, masks, mode, t);
      } else {
        next.h = simple_layer_step(p, x_proj, s.h, rule, masks, mode, t);
      }
      LayerTrace &trace = out.trace[static_cast<std::size_t>(l)];
      if (options.state_probes) {
        Tensor ph = Tensor::zeros(next.h.rows(), next.h.cols(), true);
        if (options.probe_init)
          options.probe_init(l, t, false, ph.mutable_value());
        next.h = next.h + ph;
        trace.probe_h.push_back(ph);
        if (next.c.defined()) {
          Tensor pc = Tensor::zeros(next.c.rows(), next.c.cols(), true);
          if (options.probe_init)
            options.probe_init(l, t, true, pc.mutable_value());
          next.c = next.c + pc;
          trace.probe_c.push_back(pc);
        }
      }
      trace.h.push_back(next.h);
      if (next.c.defined())
        trace.c.push_back(next.c);
      s = std::move(next);
      below = s.h;
    }
    out.outputs.push_back(below);
  }

  if (beta > 0.0) {
    for (Index l = 0; l < shape.layers; ++l) {
      Tensor term = norm_stabilizer_penalty(
        initial[static_cast<std::size_t>(l)].h,
        out.trace[static_cast<std::size_t>(l)].h, beta);
      out.penalty = out.penalty.defined() ? out.penalty + term : term;
    }
  }
  out.final_state = std::move(state);
  return out;
}

std::vector<CellState> detach_state(const std::vector<CellState> &state) {
  std::vector<CellState> out;
  out.reserve(state.size());
  for (const auto &s : state) {
    CellState d;
    d.h = s.h.detach();
    if (s.c.defined())
      d.c = s.c.detach();
    if (s.o.defined())
      d.o = s.o.detach();
    out.push_back(std::move(d));
  }
  return out;
}

Index count_errors(const Matrix &logits, std::span<const int> labels) {
  Index errors = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index k = 1; k < logits.cols(); ++k)
      if (logits(r, k) > logits(r, best))
        best = k;
    if (best != labels[static_cast<std::size_t>(r)])
      ++errors;
  }
  return errors;
}

LossResult sequence_nll(const RecurrentNetwork &net, const SequenceInput &input,
                        std::span<const int> targets, TaskKind task,
                        const std::vector<CellState> &initial,
                        NoiseContext &noise, const ForwardOptions &options) {
  LossResult r;
  r.unrolled = unroll(net, input, initial, noise, options);
  const Index steps = input.steps();
  const Index batch = input.batch();

  Tensor w_out = net.w_out();
  const double sigma = noise.config().weight_noise_sigma();
  if (options.mode == Mode::train && sigma > 0.0)
    w_out = add_weight_noise(w_out, sigma, noise.weight_rng(),
                             noise.weight_tape());

  Tensor hidden;
  if (task == TaskKind::language_model) {
    if (static_cast<Index>(targets.size()) != steps * batch)
      throw DimensionError("sequence_nll: expected " +
                           std::to_string(steps * batch) + " targets, got " +
                           std::to_string(targets.size()));
    hidden = concat_rows(std::span<const Tensor>(r.unrolled.outputs));
  } else {
    if (static_cast<Index>(targets.size()) != batch)
      throw DimensionError("sequence_nll: expected " + std::to_string(batch) +
                           " labels, got " + std::to_string(targets.size()));
    hidden = r.unrolled.outputs.back();
  }
  const Tensor logits = add_bias(matmul(hidden, w_out), net.b_out());
  const Tensor nll = softmax_cross_entropy(logits, targets);
  r.nll = nll.item();
  r.count = static_cast<Index>(targets.size());
  r.errors = count_errors(logits.value(), targets);
  r.loss = r.unrolled.penalty.defined() ? nll + r.unrolled.penalty : nll;
  return r;
}

} // namespace zoneout

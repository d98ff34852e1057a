// SPDX-License-Identifier: Apache-2.0
#include "zoneout/regularizers.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace zoneout {

std::string_view to_string(MaskMode mode) {
  switch (mode) {
  case MaskMode::per_step:
    return "per_step";
  case MaskMode::per_sequence:
    return "per_sequence";
  case MaskMode::shared_hc:
    return "shared";
  case MaskMode::static_global:
    return "static";
  case MaskMode::per_timestep_whole_state:
    return "whole_state";
  }
  return "?";
}

MaskMode parse_mask_mode(std::string_view name) {
  if (name == "per_step")
    return MaskMode::per_step;
  if (name == "per_sequence")
    return MaskMode::per_sequence;
  if (name == "shared" || name == "shared_hc")
    return MaskMode::shared_hc;
  if (name == "static" || name == "static_global")
    return MaskMode::static_global;
  if (name == "whole_state" || name == "per_timestep_whole_state")
    return MaskMode::per_timestep_whole_state;
  throw std::invalid_argument("unknown mask mode '" + std::string(name) + "'");
}

namespace {

void require_probability(const char *what, double p) {
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument(std::string(what) + " must lie in [0, 1], got " +
                                std::to_string(p));
}

} // namespace

void MaskSpec::validate() const {
  require_probability("mask probability", probability);
}

MaskBatch sample_mask(double probability, Index rows, Index cols, Rng &rng) {
  require_probability("mask probability", probability);
  MaskBatch m(rows, cols);
  for (Index k = 0; k < m.size(); ++k)
    m.data()[k] = static_cast<double>(rng.bernoulli(probability));
  return m;
}

// ---------------------------------------------------------------------------

void NoiseTape::record() {
  tape_.clear();
  cursor_ = 0;
  recording_ = true;
  replaying_ = false;
}

void NoiseTape::freeze() {
  recording_ = false;
  replaying_ = true;
  cursor_ = 0;
}

void NoiseTape::release() {
  tape_.clear();
  cursor_ = 0;
  recording_ = replaying_ = false;
}

Matrix NoiseTape::take(const std::function<Matrix()> &generate) {
  if (replaying_) {
    if (cursor_ >= tape_.size())
      throw std::logic_error("noise replay ran past the recorded draws");
    return tape_[cursor_++];
  }
  Matrix m = generate();
  if (recording_)
    tape_.push_back(m);
  return m;
}

MaskSampler::MaskSampler(MaskSpec spec, Rng rng)
  : spec_(spec), rng_(std::move(rng)) {
  spec_.validate();
}

MaskBatch MaskSampler::draw(Index rows, Index cols, Index t) {
  return tape_.take([&] { return fresh(rows, cols, t); });
}

MaskBatch MaskSampler::fresh(Index rows, Index cols, Index t) {
  const double p = spec_.probability;
  switch (spec_.mode) {
  case MaskMode::per_step:
  case MaskMode::shared_hc:
    return sample_mask(p, rows, cols, rng_);
  case MaskMode::per_sequence:
    if (sequence_mask_.rows() != rows || sequence_mask_.cols() != cols)
      sequence_mask_ = sample_mask(p, rows, cols, rng_);
    return sequence_mask_;
  case MaskMode::static_global: {
    auto it = static_rows_.find(t);
    if (it == static_rows_.end() || it->second.cols() != cols)
      it = static_rows_.insert_or_assign(t, sample_mask(p, 1, cols, rng_)).first;
    return it->second.replicate(rows, 1);
  }
  case MaskMode::per_timestep_whole_state:
    return sample_mask(p, rows, 1, rng_).replicate(1, cols);
  }
  throw std::logic_error("unhandled mask mode");
}

// ---------------------------------------------------------------------------

std::string term_name(const RegularizerTerm &term) {
  struct Visitor {
    std::string operator()(const Zoneout &) const { return "zoneout"; }
    std::string operator()(const RecurrentDropout &) const {
      return "recurrent_dropout";
    }
    std::string operator()(const NaiveCellDropout &) const {
      return "naive_cell_dropout";
    }
    std::string operator()(const OutputGateReuse &) const {
      return "output_gate_reuse";
    }
    std::string operator()(const StochasticDepth &) const {
      return "stochastic_depth";
    }
    std::string operator()(const WeightNoise &) const { return "weight_noise"; }
    std::string operator()(const NormStabilizer &) const {
      return "norm_stabilizer";
    }
  };
  return std::visit(Visitor{}, term);
}

namespace {

bool is_assembly(const RegularizerTerm &t) {
  return !std::holds_alternative<WeightNoise>(t) &&
         !std::holds_alternative<NormStabilizer>(t);
}

} // namespace

void RegularizerConfig::validate() const {
  int assembly_terms = 0;
  int noise_terms = 0;
  int norm_terms = 0;
  for (const auto &t : terms) {
    if (is_assembly(t))
      ++assembly_terms;
    if (const auto *z = std::get_if<Zoneout>(&t)) {
      require_probability("zc", z->z_c);
      require_probability("zh", z->z_h);
      if (z->mode == MaskMode::shared_hc && z->z_c != z->z_h)
        throw std::invalid_argument(
          "shared zoneout masks need zc == zh (got " + std::to_string(z->z_c) +
          " and " + std::to_string(z->z_h) + ")");
    } else if (const auto *d = std::get_if<RecurrentDropout>(&t)) {
      require_probability("p", d->p);
    } else if (const auto *n = std::get_if<NaiveCellDropout>(&t)) {
      require_probability("p", n->p);
    } else if (const auto *o = std::get_if<OutputGateReuse>(&t)) {
      require_probability("p", o->p);
    } else if (const auto *s = std::get_if<StochasticDepth>(&t)) {
      require_probability("z", s->z);
    } else if (const auto *w = std::get_if<WeightNoise>(&t)) {
      ++noise_terms;
      if (!(w->sigma >= 0.0) || !std::isfinite(w->sigma))
        throw std::invalid_argument("sigma must be >= 0, got " +
                                    std::to_string(w->sigma));
    } else if (const auto *b = std::get_if<NormStabilizer>(&t)) {
      ++norm_terms;
      if (!(b->beta >= 0.0) || !std::isfinite(b->beta))
        throw std::invalid_argument("beta must be >= 0, got " +
                                    std::to_string(b->beta));
    }
  }
  if (assembly_terms > 1)
    throw std::invalid_argument(
      "at most one of zoneout / recurrent_dropout / naive_cell_dropout / "
      "output_gate_reuse / stochastic_depth may be active");
  if (noise_terms > 1 || norm_terms > 1)
    throw std::invalid_argument("regularizer listed twice");
}

void RegularizerConfig::validate_for(CellKind kind) const {
  validate();
  const RegularizerTerm *a = assembly();
  if (a && std::holds_alternative<OutputGateReuse>(*a) &&
      kind != CellKind::lstm)
    throw std::invalid_argument(
      "output_gate_reuse needs an output gate; it is only defined for lstm");
}

const RegularizerTerm *RegularizerConfig::assembly() const {
  for (const auto &t : terms)
    if (is_assembly(t))
      return &t;
  return nullptr;
}

double RegularizerConfig::weight_noise_sigma() const {
  for (const auto &t : terms)
    if (const auto *w = std::get_if<WeightNoise>(&t))
      return w->sigma;
  return 0.0;
}

double RegularizerConfig::norm_stabilizer_beta() const {
  for (const auto &t : terms)
    if (const auto *b = std::get_if<NormStabilizer>(&t))
      return b->beta;
  return 0.0;
}

std::string RegularizerConfig::label() const {
  if (terms.empty())
    return "none";
  std::ostringstream os;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (k)
      os << '+';
    os << term_name(terms[k]);
    if (const auto *z = std::get_if<Zoneout>(&terms[k]);
        z && z->mode != MaskMode::per_step)
      os << '(' << to_string(z->mode) << ')';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

const MaskBatch &require_mask(const MaskBatch *m, const char *rule,
                              const Tensor &like) {
  if (!m)
    throw std::invalid_argument(std::string(rule) +
                                ": train mode needs a sampled mask");
  if (m->rows() != like.rows() || m->cols() != like.cols())
    throw DimensionError(std::string(rule) + ": mask " +
                         shape_string(m->rows(), m->cols()) +
                         " does not fit state " + like.shape_str());
  return *m;
}

Matrix filled(const Tensor &like, double v) {
  return Matrix::Constant(like.rows(), like.cols(), v);
}

} // namespace

CellState zoneout_lstm_assemble(const LstmStep &step, const CellState &prev,
                                const MaskBatch *d_c, const MaskBatch *d_h,
                                Mode mode, double z_c, double z_h) {
  CellState next;
  if (mode == Mode::train) {
    next.c = mix(require_mask(d_c, "zoneout", step.c_cand), prev.c, step.c_cand);
    next.h = mix(require_mask(d_h, "zoneout", step.h_cand), prev.h, step.h_cand);
  } else {
    next.c = mix(filled(step.c_cand, z_c), prev.c, step.c_cand);
    next.h = mix(filled(step.h_cand, z_h), prev.h, step.h_cand);
  }
  return next;
}

CellState recurrent_dropout_assemble(const LstmStep &step,
                                     const CellState &prev, const MaskBatch *m,
                                     Mode mode, double p) {
  const Tensor input = mul(step.gate(LstmGate::input), step.gate(LstmGate::candidate));
  Tensor kept;
  if (mode == Mode::train) {
    kept = mul(Tensor(require_mask(m, "recurrent_dropout", input)), input);
  } else {
    kept = scale(input, 1.0 - p);
  }
  CellState next;
  next.c = mul(step.gate(LstmGate::forget), prev.c) + kept;
  next.h = mul(step.gate(LstmGate::output), tanh(next.c));
  return next;
}

CellState naive_cell_dropout_assemble(const LstmStep &step,
                                      const CellState &prev,
                                      const MaskBatch *m, Mode mode,
                                      double p) {
  (void)prev;
  CellState next;
  if (mode == Mode::train) {
    next.c =
      mul(Tensor(require_mask(m, "naive_cell_dropout", step.c_cand)), step.c_cand);
  } else {
    next.c = scale(step.c_cand, 1.0 - p);
  }
  next.h = mul(step.gate(LstmGate::output), tanh(next.c));
  return next;
}

CellState output_gate_reuse_assemble(const LstmStep &step,
                                     const CellState &prev, const MaskBatch *d,
                                     Mode mode, double p) {
  if (!prev.o.defined())
    throw std::invalid_argument(
      "output_gate_reuse: previous output gate missing from state");
  const Tensor input = mul(step.gate(LstmGate::input), step.gate(LstmGate::candidate));
  Matrix drop = mode == Mode::train
                  ? require_mask(d, "output_gate_reuse", input)
                  : filled(input, p);
  CellState next;
  const Tensor o = step.gate(LstmGate::output);
  next.c = mul(step.gate(LstmGate::forget), prev.c) +
           mix(drop, Tensor::zeros(input.rows(), input.cols()), input);
  next.o = o;
  next.h = mul(mix(drop, prev.o, o), tanh(next.c));
  return next;
}

CellState stochastic_depth_assemble(const CellState &candidate,
                                    const CellState &prev, const MaskBatch *s,
                                    Mode mode, double z) {
  const Matrix keep = mode == Mode::train
                        ? require_mask(s, "stochastic_depth", candidate.h)
                        : filled(candidate.h, z);
  CellState next;
  next.h = mix(keep, prev.h, candidate.h);
  if (candidate.c.defined())
    next.c = mix(keep, prev.c, candidate.c);
  next.o = candidate.o;
  return next;
}

Tensor zoneout_simple_assemble(const Tensor &h_cand, const Tensor &h_prev,
                               const MaskBatch *d_h, Mode mode, double z_h) {
  detail::require_same_shape("zoneout_simple_assemble", h_cand, h_prev);
  if (mode == Mode::train)
    return mix(require_mask(d_h, "zoneout", h_cand), h_prev, h_cand);
  return mix(filled(h_cand, z_h), h_prev, h_cand);
}

Tensor gru_recurrent_dropout_assemble(const GruStep &step, const Tensor &h_prev,
                                      const MaskBatch *m, Mode mode, double p) {
  const Tensor update = mul(step.u, step.candidate);
  const Tensor kept =
    mode == Mode::train
      ? mul(Tensor(require_mask(m, "recurrent_dropout", update)), update)
      : scale(update, 1.0 - p);
  return h_prev - mul(step.u, h_prev) + kept;
}

Tensor state_dropout_assemble(const Tensor &h_cand, const MaskBatch *m,
                              Mode mode, double p) {
  if (mode == Mode::train)
    return mul(Tensor(require_mask(m, "dropout", h_cand)), h_cand);
  return scale(h_cand, 1.0 - p);
}

// ---------------------------------------------------------------------------

namespace {

Matrix gaussian(Index rows, Index cols, double sigma, Rng &rng) {
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k)
    m.data()[k] = rng.normal(0.0, sigma);
  return m;
}

} // namespace

Tensor add_weight_noise(const Tensor &w, double sigma, Rng &rng,
                        NoiseTape &tape) {
  if (!(sigma >= 0.0))
    throw std::invalid_argument("weight noise sigma must be >= 0");
  if (sigma == 0.0)
    return w;
  Tensor noise(tape.take([&] { return gaussian(w.rows(), w.cols(), sigma, rng); }));
  return w + noise;
}

CellParams apply_weight_noise(const CellParams &params, double sigma,
                              Rng &rng) {
  NoiseTape live;
  CellParams noisy = params;
  noisy.w_x = add_weight_noise(params.w_x, sigma, rng, live);
  noisy.w_h = add_weight_noise(params.w_h, sigma, rng, live);
  return noisy;
}

Tensor norm_stabilizer_penalty(const Tensor &initial,
                               std::span<const Tensor> states, double beta) {
  if (states.empty())
    throw std::invalid_argument("norm_stabilizer_penalty: empty sequence");
  Tensor previous = row_norm(initial);
  Tensor total;
  for (const auto &h : states) {
    Tensor current = row_norm(h);
    Tensor diff = current - previous;
    Tensor term = mean(mul(diff, diff));
    total = total.defined() ? total + term : term;
    previous = current;
  }
  return scale(total, beta / static_cast<double>(states.size()));
}

} // namespace zoneout

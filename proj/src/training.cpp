// SPDX-License-Identifier: Apache-2.0
#include "zoneout/training.hpp"

#include "zoneout/network.hpp"

#include <cmath>
#include <numbers>

namespace zoneout {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
  case OptimizerKind::adam:
    return "adam";
  case OptimizerKind::rmsprop:
    return "rmsprop";
  case OptimizerKind::sgd:
    return "sgd";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam")
    return OptimizerKind::adam;
  if (name == "rmsprop")
    return OptimizerKind::rmsprop;
  if (name == "sgd")
    return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

namespace {

void check_step(const OptimizerState &state, std::span<Tensor> params,
                std::span<const Matrix> grads) {
  if (!(state.lr > 0.0))
    throw std::invalid_argument("learning rate must be > 0, got " +
                                std::to_string(state.lr));
  if (params.size() != grads.size())
    throw DimensionError("optimizer: " + std::to_string(params.size()) +
                         " parameters but " + std::to_string(grads.size()) +
                         " gradients");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (params[k].rows() != grads[k].rows() ||
        params[k].cols() != grads[k].cols())
      throw DimensionError("optimizer: gradient " +
                           shape_string(grads[k].rows(), grads[k].cols()) +
                           " for parameter " + params[k].shape_str());
}

void ensure_buffers(std::vector<Matrix> &buf, std::span<Tensor> params) {
  if (buf.size() == params.size())
    return;
  buf.clear();
  for (const auto &p : params)
    buf.push_back(Matrix::Zero(p.rows(), p.cols()));
}

} // namespace

void adam_step(OptimizerState &state, std::span<Tensor> params,
               std::span<const Matrix> grads) {
  check_step(state, params, grads);
  ensure_buffers(state.first, params);
  ensure_buffers(state.second, params);
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto m = state.first[k].array();
    auto v = state.second[k].array();
    const auto g = grads[k].array();
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.square();
    params[k].mutable_value().array() -=
      state.lr * (m / c1) / ((v / c2).sqrt() + state.eps);
  }
}

void rmsprop_step(OptimizerState &state, std::span<Tensor> params,
                  std::span<const Matrix> grads) {
  check_step(state, params, grads);
  ensure_buffers(state.second, params);
  ++state.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = state.second[k].array();
    const auto g = grads[k].array();
    v = state.decay * v + (1.0 - state.decay) * g.square();
    params[k].mutable_value().array() -= state.lr * g / (v.sqrt() + state.eps);
  }
}

void sgd_step(OptimizerState &state, std::span<Tensor> params,
              std::span<const Matrix> grads) {
  check_step(state, params, grads);
  ++state.step;
  for (std::size_t k = 0; k < params.size(); ++k)
    params[k].mutable_value() -= state.lr * grads[k];
}

void optimizer_step(OptimizerState &state, std::span<Tensor> params,
                    std::span<const Matrix> grads) {
  switch (state.kind) {
  case OptimizerKind::adam:
    return adam_step(state, params, grads);
  case OptimizerKind::rmsprop:
    return rmsprop_step(state, params, grads);
  case OptimizerKind::sgd:
    return sgd_step(state, params, grads);
  }
}

void ClipRule::validate() const {
  if (kind != Kind::none && !(threshold > 0.0))
    throw std::invalid_argument("clip threshold must be > 0, got " +
                                std::to_string(threshold));
}

double clip_gradients(std::span<Matrix> grads, const ClipRule &rule) {
  rule.validate();
  double sq = 0.0;
  for (const auto &g : grads) {
    if (!g.allFinite())
      throw NumericalError("non-finite gradient encountered");
    sq += g.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (rule.kind == ClipRule::Kind::norm && norm > rule.threshold) {
    // (g * threshold) / norm rounds once per entry, so a 3-4-5 gradient
    // clipped to 1 lands exactly on 0.6 and 0.8.
    for (auto &g : grads)
      g = (g * rule.threshold) / norm;
  } else if (rule.kind == ClipRule::Kind::value) {
    for (auto &g : grads)
      g = g.cwiseMax(-rule.threshold).cwiseMin(rule.threshold);
  }
  return norm;
}

double LrSchedule::rate(int epoch) const {
  if (!(factor >= 1.0))
    throw std::invalid_argument("learning-rate decay factor must be >= 1");
  const int decays = epoch > start_epoch ? epoch - start_epoch : 0;
  return base / std::pow(factor, decays);
}

double bpc(double nll_nats) {
  if (nll_nats < 0.0)
    throw std::invalid_argument("negative NLL");
  return nll_nats / std::numbers::ln2;
}

double perplexity(double nll_nats) {
  if (nll_nats < 0.0)
    throw std::invalid_argument("negative NLL");
  return std::exp(nll_nats);
}

double classification_error(const Matrix &logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw DimensionError("classification_error: label count mismatch");
  return static_cast<double>(count_errors(logits, labels)) /
         static_cast<double>(logits.rows());
}

} // namespace zoneout

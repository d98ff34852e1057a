// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Optimisers, gradient clipping, learning-rate schedule and metrics.
 */
#pragma once

#include "zoneout/tensor.hpp"

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace zoneout {

/// A gradient or loss became NaN/Inf.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { adam, rmsprop, sgd };
std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.5; // RMSProp moving-average decay
  std::vector<Matrix> first;  // Adam m
  std::vector<Matrix> second; // Adam v, RMSProp mean square
  long step = 0;
};

/// Bias-corrected Adam update of each parameter by its gradient.
void adam_step(OptimizerState &state, std::span<Tensor> params,
               std::span<const Matrix> grads);
/// v <- decay*v + (1-decay)*g^2; param <- param - lr*g/(sqrt(v)+eps).
void rmsprop_step(OptimizerState &state, std::span<Tensor> params,
                  std::span<const Matrix> grads);
void sgd_step(OptimizerState &state, std::span<Tensor> params,
              std::span<const Matrix> grads);
/// Dispatches on state.kind.
void optimizer_step(OptimizerState &state, std::span<Tensor> params,
                    std::span<const Matrix> grads);

struct ClipRule {
  enum class Kind { none, norm, value } kind = Kind::norm;
  double threshold = 1.0;
  void validate() const;
};

/// Rescales (norm) or clamps (value) the gradients in place. Returns the
/// global L2 norm before clipping. Throws NumericalError on NaN/Inf.
double clip_gradients(std::span<Matrix> grads, const ClipRule &rule);

/// rate(epoch) = base / factor^(epoch - start) once epoch > start; epochs are
/// 1-based.
struct LrSchedule {
  double base = 0.002;
  double factor = 1.0;
  int start_epoch = 0;
  double rate(int epoch) const;
};

/// Per-epoch metrics; optional fields are empty in the CSV.
struct RunRecord {
  int epoch = 0;
  std::string split;
  double nll = 0.0;
  std::optional<double> error_rate;
  std::optional<double> grad_norm_preclip;
  std::optional<double> wall_seconds;
};

double bpc(double nll_nats);
double perplexity(double nll_nats);
/// Fraction of rows whose argmax differs from the label (lowest index wins
/// ties).
double classification_error(const Matrix &logits, std::span<const int> labels);

} // namespace zoneout

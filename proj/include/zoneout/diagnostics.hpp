// SPDX-License-Identifier: Apache-2.0
/**
 * @file   diagnostics.hpp
 * @brief  Per-timestep gradient-flow profiles and a finite-difference
 *         gradient checker.
 */
#pragma once

#include "zoneout/network.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zoneout {

/// Every per-timestep gradient was zero, so the profile cannot be normalised.
class DegenerateProfileError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class ProbeTarget { cell, hidden };
std::string_view to_string(ProbeTarget target);
ProbeTarget parse_probe_target(std::string_view name);

struct GradientFlowProfile {
  std::vector<double> values; // sums to 1
  ProbeTarget target = ProbeTarget::cell;
  std::string label;
};

/// Divides by the total. Throws DegenerateProfileError when it is zero and
/// std::invalid_argument on negative or non-finite entries.
std::vector<double> normalize_profile(std::span<const double> raw);

/// Mean over the batch of the row L2 norms of each matrix.
std::vector<double> mean_row_norms(std::span<const Matrix> grads);

/// One train-mode forward pass with state probes on `layer`, one backward
/// pass, then normalised mean-over-batch ||dL/dstate_t||. Cells without a
/// memory cell (GRU, tanh RNN) report the hidden state for either target.
GradientFlowProfile gradient_flow(const RecurrentNetwork &net,
                                  const SequenceInput &input,
                                  std::span<const int> targets, TaskKind task,
                                  NoiseContext &noise, ProbeTarget target,
                                  Index layer = 0);

/// Entrywise mean of equally long profiles.
GradientFlowProfile mean_profile(std::span<const GradientFlowProfile> runs);

/// Sum of the first ceil(fraction * T) entries.
double early_mass(const GradientFlowProfile &profile, double fraction = 0.25);

/// `# <comment>` line, then `timestep,normalized_norm` rows (1-based t).
void write_profile_csv(const std::filesystem::path &path,
                       const GradientFlowProfile &profile,
                       const std::string &comment);
GradientFlowProfile read_profile_csv(const std::filesystem::path &path);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t tensor = 0; // parameter holding the worst entry
  Index entry = 0;        // flat row-major index within it
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  bool pass = false;
};

/// |a - n| / max(1, |a| + |n|).
double relative_error(double analytic, double numeric);

/// Compares backward() gradients of the scalar `loss` with central differences
/// over every entry of every tensor in `params` (leaves requiring grad).
/// `loss` must be deterministic, so stochastic callers should replay frozen
/// masks. Throws NumericalError on non-finite values.
GradCheckReport finite_diff_check(const std::function<Tensor()> &loss,
                                  std::span<Tensor> params, double step = 1e-5,
                                  double tolerance = 1e-4);

} // namespace zoneout

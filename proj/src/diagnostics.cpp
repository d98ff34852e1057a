// SPDX-License-Identifier: Apache-2.0
#include "zoneout/diagnostics.hpp"

#include "zoneout/ops.hpp"
#include "zoneout/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace zoneout {

std::string_view to_string(ProbeTarget target) {
  return target == ProbeTarget::cell ? "cell" : "hidden";
}

ProbeTarget parse_probe_target(std::string_view name) {
  if (name == "cell")
    return ProbeTarget::cell;
  if (name == "hidden")
    return ProbeTarget::hidden;
  throw std::invalid_argument("unknown probe target '" + std::string(name) +
                              "' (expected cell or hidden)");
}

std::vector<double> normalize_profile(std::span<const double> raw) {
  double total = 0.0;
  for (double v : raw) {
    if (!std::isfinite(v) || v < 0.0)
      throw std::invalid_argument("profile entries must be finite and >= 0");
    total += v;
  }
  if (!(total > 0.0))
    throw DegenerateProfileError("all per-timestep gradient norms are zero");
  std::vector<double> out(raw.begin(), raw.end());
  for (double &v : out)
    v /= total;
  return out;
}

std::vector<double> mean_row_norms(std::span<const Matrix> grads) {
  std::vector<double> out;
  out.reserve(grads.size());
  for (const auto &g : grads)
    out.push_back(g.rowwise().norm().mean());
  return out;
}

GradientFlowProfile gradient_flow(const RecurrentNetwork &net,
                                  const SequenceInput &input,
                                  std::span<const int> targets, TaskKind task,
                                  NoiseContext &noise, ProbeTarget target,
                                  Index layer) {
  if (layer < 0 || layer >= net.shape().layers)
    throw std::out_of_range("gradient_flow: no layer " + std::to_string(layer));
  ForwardOptions options;
  options.mode = Mode::train;
  options.state_probes = true;
  const LossResult r = sequence_nll(net, input, targets, task,
                                    net.initial_state(input.batch()), noise,
                                    options);
  backward(r.loss);

  const LayerTrace &trace = r.unrolled.trace[static_cast<std::size_t>(layer)];
  const bool use_cell = target == ProbeTarget::cell && !trace.probe_c.empty();
  const auto &probes = use_cell ? trace.probe_c : trace.probe_h;
  std::vector<Matrix> grads;
  grads.reserve(probes.size());
  for (const auto &p : probes)
    grads.push_back(p.has_grad() ? p.grad()
                                 : Matrix(Matrix::Zero(p.rows(), p.cols())));

  GradientFlowProfile profile;
  const auto raw = mean_row_norms(grads);
  profile.values = normalize_profile(raw);
  profile.target = target;
  profile.label = noise.config().label();
  return profile;
}

GradientFlowProfile mean_profile(std::span<const GradientFlowProfile> runs) {
  if (runs.empty())
    throw std::invalid_argument("mean_profile: no runs");
  GradientFlowProfile out;
  out.target = runs.front().target;
  out.label = runs.front().label;
  out.values.assign(runs.front().values.size(), 0.0);
  for (const auto &r : runs) {
    if (r.values.size() != out.values.size())
      throw DimensionError("mean_profile: profiles differ in length");
    for (std::size_t t = 0; t < r.values.size(); ++t)
      out.values[t] += r.values[t];
  }
  for (double &v : out.values)
    v /= static_cast<double>(runs.size());
  return out;
}

double early_mass(const GradientFlowProfile &profile, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("early_mass: fraction must be in (0, 1]");
  const auto n = static_cast<std::size_t>(
    std::ceil(fraction * static_cast<double>(profile.values.size())));
  double mass = 0.0;
  for (std::size_t t = 0; t < n && t < profile.values.size(); ++t)
    mass += profile.values[t];
  return mass;
}

void write_profile_csv(const std::filesystem::path &path,
                       const GradientFlowProfile &profile,
                       const std::string &comment) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out << "# " << comment << '\n' << "timestep,normalized_norm\n";
  out << std::setprecision(17);
  for (std::size_t t = 0; t < profile.values.size(); ++t)
    out << t + 1 << ',' << profile.values[t] << '\n';
  if (!out)
    throw std::runtime_error("error writing " + path.string());
}

GradientFlowProfile read_profile_csv(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("cannot open " + path.string());
  GradientFlowProfile p;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("timestep", 0) == 0)
      continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    p.values.push_back(std::stod(line.substr(comma + 1)));
  }
  return p;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1.0, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport finite_diff_check(const std::function<Tensor()> &loss,
                                  std::span<Tensor> params, double step,
                                  double tolerance) {
  if (!(step > 0.0))
    throw std::invalid_argument("finite_diff_check: step must be > 0");
  for (auto &p : params) {
    if (!p.is_leaf() || !p.requires_grad())
      throw std::invalid_argument(
        "finite_diff_check: parameters must be leaves requiring grad");
    p.zero_grad();
  }

  const Tensor l = loss();
  if (!std::isfinite(l.item()))
    throw NumericalError("finite_diff_check: non-finite loss");
  backward(l);
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto &p : params)
    analytic.push_back(p.has_grad() ? p.grad()
                                    : Matrix(Matrix::Zero(p.rows(), p.cols())));

  auto evaluate = [&]() {
    NoGradGuard guard;
    const double v = loss().item();
    if (!std::isfinite(v))
      throw NumericalError("finite_diff_check: non-finite perturbed loss");
    return v;
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix &value = params[k].mutable_value();
    for (Index e = 0; e < value.size(); ++e) {
      double &x = value.data()[e];
      const double saved = x;
      x = saved + step;
      const double up = evaluate();
      x = saved - step;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k].data()[e];
      if (!std::isfinite(a))
        throw NumericalError("finite_diff_check: non-finite analytic gradient");
      const double err = relative_error(a, numeric);
      ++report.checked;
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = err;
        report.tensor = k;
        report.entry = e;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

} // namespace zoneout

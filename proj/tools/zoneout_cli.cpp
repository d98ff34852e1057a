// SPDX-License-Identifier: Apache-2.0
/**
 * @file   zoneout_cli.cpp
 * @brief  `zoneout` command: train, eval, gradflow and gradcheck.
 */
#include "zoneout/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

using namespace zoneout;

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_common(CLI::App *cmd, CommonArgs &args) {
  cmd->add_option("-c,--config", args.config_file, "key=value configuration file");
  cmd->add_option("-s,--set", args.overrides,
                  "override a key (key=value); repeatable and applied after the file");
}

RunConfig load_config(const CommonArgs &args) {
  ConfigMap file;
  if (!args.config_file.empty())
    file = read_config_file(args.config_file);
  ConfigMap overrides;
  for (const auto &o : args.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(o, "override must look like key=value");
    overrides[o.substr(0, eq)] = o.substr(eq + 1);
  }
  return parse_config(file, overrides);
}

int run_gradcheck_command(const std::string &fault) {
  if (!fault.empty())
    testing::set_backward_fault(fault);
  const auto cases = run_gradcheck_suite();
  testing::set_backward_fault({});
  int failures = 0;
  for (const auto &c : cases) {
    char line[256];
    if (!c.error.empty()) {
      std::snprintf(line, sizeof line, "FAIL  %-45s error: ", c.name.c_str());
      std::cout << line << c.error << '\n';
    } else {
      std::snprintf(line, sizeof line, "%s  %-45s max_rel_err=%.3e (%zu entries)",
                    c.pass() ? "PASS" : "FAIL", c.name.c_str(),
                    c.report.max_rel_error, c.report.checked);
      std::cout << line << '\n';
    }
    failures += c.pass() ? 0 : 1;
  }
  std::cout << (failures ? "FAIL" : "PASS") << ": " << cases.size() - failures
            << "/" << cases.size() << " cases within tolerance 1e-4\n";
  return failures ? exit_numerical : exit_ok;
}

int run_gradflow_command(const RunConfig &config, const std::string &out) {
  const Dataset data = load_dataset(config);
  const std::filesystem::path dir = out.empty() ? config.output_dir : out;
  const auto results = run_gradflow(config, data, dir);
  for (const auto &r : results)
    std::cout << r.name << ": early-quarter mass " << early_mass(r.mean)
              << " (mean over " << r.per_seed.size() << " seeds)\n";
  return exit_ok;
}

} // namespace

int main(int argc, char **argv) {
  tune_allocator();
  CLI::App app{"Recurrent networks with zoneout and related regularisers"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, flow_args;
  auto *train = app.add_subcommand("train", "train a model and write metrics.csv");
  add_common(train, train_args);
  auto *eval = app.add_subcommand("eval", "evaluate a checkpoint on valid and test");
  add_common(eval, eval_args);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default output_dir/model.ckpt)");
  auto *flow = app.add_subcommand("gradflow", "per-timestep gradient-norm profiles");
  add_common(flow, flow_args);
  std::string flow_out;
  flow->add_option("-o,--out", flow_out, "directory for profile CSVs (default output_dir)");
  auto *check = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
  std::string fault;
  check->add_option("--inject-fault", fault,
                    "corrupt the backward rule of this op (self-test of the checker)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    if (*train)
      return run_train(load_config(train_args));
    if (*eval) {
      RunConfig c = load_config(eval_args);
      if (!checkpoint.empty())
        c.checkpoint = checkpoint;
      return run_eval(c);
    }
    if (*flow)
      return run_gradflow_command(load_config(flow_args), flow_out);
    if (*check)
      return run_gradcheck_command(fault);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const DataError &e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return exit_io;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return exit_io;
  } catch (const NumericalError &e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return exit_numerical;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_config;
  }
  return exit_ok;
}

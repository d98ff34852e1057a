// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Flat key=value run configuration with validation.
 */
#pragma once

#include "zoneout/cells.hpp"
#include "zoneout/diagnostics.hpp"
#include "zoneout/regularizers.hpp"
#include "zoneout/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace zoneout {

/// Unknown key, unparsable value or out-of-range setting. The message names
/// the offending key.
class ConfigError : public std::runtime_error {
public:
  ConfigError(const std::string &key, const std::string &what)
    : std::runtime_error(key + ": " + what), key_(key) {}
  const std::string &key() const { return key_; }

private:
  std::string key_;
};

enum class Task { charlm, wordlm, pmnist, toy };
std::string_view to_string(Task task);
Task parse_task(std::string_view name);

struct RunConfig {
  Task task = Task::charlm;

  // model
  CellKind cell = CellKind::lstm;
  Index hidden = 256;
  Index layers = 1;
  InitScheme init;

  // data
  std::string data_path;
  std::size_t data_limit = 0; // symbols (text) or examples (images); 0 = all
  double valid_fraction = 0.05;
  double test_fraction = 0.05;
  Index seq_len = 100;
  Index batch = 32;
  Index eval_batch = 32;
  bool overlap = false;
  Index stride = 0; // 0 = seq_len / 2
  Index downsample = 1;
  bool permute = true;
  std::uint64_t permutation_seed = 1234;
  std::size_t toy_count = 2000;
  Index toy_side = 8;
  int toy_classes = 10;
  double toy_noise = 0.3;

  // optimisation
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double rms_decay = 0.5;
  ClipRule clip;
  double lr_decay = 1.0;
  int lr_decay_start = 0;
  int epochs = 20;
  std::size_t max_batches = 0; // per epoch; 0 = all

  // regularisation
  std::vector<std::string> regularizer; // term names; empty = none
  double zc = 0.0;
  double zh = 0.0;
  MaskMode zoneout_mode = MaskMode::per_step;
  double dropout_p = 0.0;
  double sd_z = 0.0;
  double noise_sigma = 0.0;
  double norm_beta = 0.0;

  // gradient-flow probe
  std::vector<std::string> gradflow_regularizers{"none", "zoneout", "dropout"};
  int gradflow_seeds = 3;
  double gradflow_z = 0.5;
  ProbeTarget probe_target = ProbeTarget::cell;

  // run
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  std::string checkpoint;
  bool eval_only = false;
  bool record_wall_time = false;

  /// Throws ConfigError naming the first bad key.
  void validate() const;
  /// Builds the configured regulariser combination.
  RegularizerConfig regularizers() const;
  OptimizerState optimizer_state() const;
  LrSchedule schedule() const;
};

using ConfigMap = std::map<std::string, std::string>;

/// `key=value` lines; `#` starts a comment; blank lines ignored.
ConfigMap parse_config_text(std::string_view text);
ConfigMap read_config_file(const std::filesystem::path &path);

/// Applies `overrides` on top of `file` and converts to a validated config.
RunConfig parse_config(const ConfigMap &file, const ConfigMap &overrides = {});

/// Every key with its resolved value, one `key=value` per line, parseable by
/// parse_config_text.
std::string format_config(const RunConfig &config);

/// Names every accepted key.
std::vector<std::string> config_keys();

} // namespace zoneout

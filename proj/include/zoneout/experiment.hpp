// SPDX-License-Identifier: Apache-2.0
/**
 * @file   experiment.hpp
 * @brief  Training/evaluation loops, metrics CSV, checkpoints, and the
 *         gradient-flow and gradient-check suites behind the CLI.
 */
#pragma once

#include "zoneout/config.hpp"
#include "zoneout/data.hpp"
#include "zoneout/diagnostics.hpp"
#include "zoneout/network.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace zoneout {

/// Exit codes shared by the CLI.
enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_numerical = 2, exit_io = 3 };

struct TextSplits {
  std::size_t vocab_size = 0;
  std::vector<int> train, valid, test;
};

struct ImageSplits {
  PermutedImageSet train, valid, test;
  int classes = 10;
};

using Dataset = std::variant<TextSplits, ImageSplits>;

/// Contiguous train/valid/test split of a corpus or image list.
Dataset load_dataset(const RunConfig &config);

NetworkShape network_shape(const RunConfig &config, const Dataset &data);

/// Line-flushed writer of the metrics CSV.
class MetricsWriter {
public:
  static constexpr const char *header =
    "epoch,split,nll_nats,bpc,perplexity,error_rate,grad_norm_preclip,wall_s";

  explicit MetricsWriter(const std::filesystem::path &path);
  void write(const RunRecord &record);
  /// Marks a run stopped by a non-finite loss or gradient.
  void write_abort(int epoch, std::size_t step, const std::string &reason);

private:
  std::ofstream out_;
};

std::string format_record(const RunRecord &record);

/// Versioned binary checkpoint; see README for the byte layout.
void save_checkpoint(const std::filesystem::path &path,
                     const RecurrentNetwork &net);
/// Overwrites the parameters of `net`; names and shapes must match.
void load_checkpoint(const std::filesystem::path &path, RecurrentNetwork &net);

struct EvalResult {
  double nll = 0.0;
  std::optional<double> error_rate;
  Index count = 0;
};

/// Expectation-mode pass over one split. `noise` is consulted only for
/// structural (static) masks.
EvalResult evaluate_text(const RecurrentNetwork &net, const std::vector<int> &codes,
                         const RunConfig &config, NoiseContext &noise);
EvalResult evaluate_images(const RecurrentNetwork &net, const PermutedImageSet &set,
                           const RunConfig &config, NoiseContext &noise);

struct TrainOutcome {
  std::vector<RunRecord> records;
  std::optional<double> best_valid_nll;
  std::optional<double> best_valid_error;
  bool aborted = false;
  std::string abort_reason;
};

/// Trains `net` in place for config.epochs, evaluating on valid each epoch
/// and on test at the end. Records go to `metrics` as they are produced.
TrainOutcome train(RecurrentNetwork &net, const Dataset &data,
                   const RunConfig &config, MetricsWriter *metrics = nullptr);

/// Network initialised from the config's seed.
RecurrentNetwork make_network(const RunConfig &config, const Dataset &data);

/// Asks the C allocator to keep freed blocks instead of handing them back to
/// the kernel. An unrolled batch allocates and frees tens of megabytes of
/// same-sized buffers, and refaulting those pages each batch costs more than
/// the arithmetic of the backward pass. No-op outside glibc. Call once at
/// program start.
void tune_allocator();

/// Full `train` subcommand: writes metrics.csv, model.ckpt and
/// config.resolved into config.output_dir. Returns an ExitCode.
int run_train(const RunConfig &config);

/// `eval` subcommand: loads config.checkpoint (or output_dir/model.ckpt) and
/// writes valid/test records to output_dir/eval.csv.
int run_eval(const RunConfig &config);

/// Comparator used by the gradient-flow probe: "none", "zoneout" (cells only
/// at z) or "dropout" (cells only, zero-mapping at p = z).
RegularizerConfig gradflow_regularizer(const std::string &name, double z);

struct GradflowResult {
  std::string name;
  std::vector<GradientFlowProfile> per_seed;
  GradientFlowProfile mean;
};

/// For each comparator and seed: train one epoch with that comparator, then
/// profile the first validation batch. Writes CSVs when `out_dir` is set.
std::vector<GradflowResult>
run_gradflow(const RunConfig &config, const Dataset &data,
             const std::optional<std::filesystem::path> &out_dir);

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
  std::string error; // non-empty when the case threw
  bool pass() const { return error.empty() && report.pass; }
};

/// Every differentiable op, then every cell x regulariser at toy sizes with
/// frozen masks (and frozen weight noise), tolerance 1e-4, step 1e-5.
std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 7);

} // namespace zoneout

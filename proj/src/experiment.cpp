// SPDX-License-Identifier: Apache-2.0
#include "zoneout/experiment.hpp"

#include "zoneout/ops.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace zoneout {

namespace {

std::vector<int> compact_codes(std::vector<int> codes) {
  // Renumber in first-occurrence order so a truncated corpus has no unused ids.
  std::unordered_map<int, int> remap;
  for (int &c : codes) {
    auto [it, inserted] = remap.try_emplace(c, static_cast<int>(remap.size()));
    c = it->second;
  }
  return codes;
}

struct SplitSizes {
  std::size_t train, valid, test;
};

SplitSizes split_sizes(std::size_t n, const RunConfig &c) {
  const auto valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * c.valid_fraction));
  const auto test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * c.test_fraction));
  if (valid + test >= n)
    throw DataError("dataset of " + std::to_string(n) + " items is too small to split");
  return {n - valid - test, valid, test};
}

void require_file(const std::string &path) {
  if (!std::filesystem::is_regular_file(path))
    throw DataError("data file not found: " + path);
}

} // namespace

Dataset load_dataset(const RunConfig &config) {
  // Checked here rather than in validate() so that configs can be built up
  // and inspected before a corpus is chosen.
  if (config.task != Task::toy && config.data_path.empty())
    throw ConfigError("data_path",
                      "required for task " + std::string(to_string(config.task)));
  switch (config.task) {
  case Task::charlm:
  case Task::wordlm: {
    require_file(config.data_path);
    TextCorpus corpus = load_text(config.data_path, config.task == Task::charlm
                                                      ? TextLevel::character
                                                      : TextLevel::word);
    std::vector<int> codes = std::move(corpus.codes);
    if (config.data_limit && codes.size() > config.data_limit)
      codes.resize(config.data_limit);
    codes = compact_codes(std::move(codes));
    TextSplits s;
    s.vocab_size = static_cast<std::size_t>(*std::max_element(codes.begin(), codes.end())) + 1;
    const SplitSizes n = split_sizes(codes.size(), config);
    s.train.assign(codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(n.train));
    s.valid.assign(codes.begin() + static_cast<std::ptrdiff_t>(n.train),
                   codes.begin() + static_cast<std::ptrdiff_t>(n.train + n.valid));
    s.test.assign(codes.begin() + static_cast<std::ptrdiff_t>(n.train + n.valid), codes.end());
    return s;
  }
  case Task::pmnist:
  case Task::toy: {
    const std::optional<std::uint64_t> perm =
      config.permute ? std::optional<std::uint64_t>(config.permutation_seed)
                     : std::nullopt;
    PermutedImageSet all;
    int classes = 10;
    if (config.task == Task::pmnist) {
      require_file(config.data_path);
      all = load_pmnist(config.data_path, perm, config.downsample, config.data_limit);
    } else {
      // The synthetic set is fixed by permutation_seed so that runs with
      // different seeds see the same data.
      RawImages raw = make_toy_digits(config.toy_count, config.toy_side,
                                      config.toy_classes, config.toy_noise,
                                      config.permutation_seed);
      all = make_pmnist(raw, perm, config.downsample);
      classes = config.toy_classes;
    }
    const SplitSizes n = split_sizes(all.labels.size(), config);
    ImageSplits s;
    s.classes = classes;
    const auto a = static_cast<Index>(n.train);
    const auto b = static_cast<Index>(n.train + n.valid);
    const auto e = static_cast<Index>(all.labels.size());
    s.train = subset(all, 0, a);
    s.valid = subset(all, a, b);
    s.test = subset(all, b, e);
    return s;
  }
  }
  throw std::logic_error("unhandled task");
}

NetworkShape network_shape(const RunConfig &config, const Dataset &data) {
  NetworkShape shape;
  shape.cell = config.cell;
  shape.hidden = config.hidden;
  shape.layers = config.layers;
  if (const auto *t = std::get_if<TextSplits>(&data)) {
    shape.token_input = true;
    shape.input_size = static_cast<Index>(t->vocab_size);
    shape.output_size = static_cast<Index>(t->vocab_size);
  } else {
    const auto &img = std::get<ImageSplits>(data);
    shape.token_input = false;
    shape.input_size = 1;
    shape.output_size = img.classes;
  }
  return shape;
}

RecurrentNetwork make_network(const RunConfig &config, const Dataset &data) {
  Rng rng(config.seed, "init");
  return RecurrentNetwork(network_shape(config, data), config.init, rng);
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

} // namespace

std::string format_record(const RunRecord &r) {
  std::string line = std::to_string(r.epoch) + "," + r.split + "," + num(r.nll);
  if (std::isfinite(r.nll) && r.nll >= 0.0)
    line += "," + num(bpc(r.nll)) + "," + num(perplexity(r.nll));
  else
    line += ",,";
  line += "," + (r.error_rate ? num(*r.error_rate) : std::string());
  line += "," + (r.grad_norm_preclip ? num(*r.grad_norm_preclip) : std::string());
  line += "," + (r.wall_seconds ? num(*r.wall_seconds) : std::string());
  return line;
}

MetricsWriter::MetricsWriter(const std::filesystem::path &path) : out_(path) {
  if (!out_)
    throw DataError("cannot write " + path.string());
  out_ << header << '\n' << std::flush;
}

void MetricsWriter::write(const RunRecord &record) {
  out_ << format_record(record) << '\n' << std::flush;
  if (!out_)
    throw DataError("error writing metrics");
}

void MetricsWriter::write_abort(int epoch, std::size_t step,
                                const std::string &reason) {
  // The reason goes in a comment line so the CSV stays parseable.
  out_ << "# aborted at epoch " << epoch << " step " << step << ": " << reason
       << '\n'
       << epoch << ",aborted,nan,,,,,\n"
       << std::flush;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "ZOCK" | u32 version | u32 count | count x (u32 name_len | name |
// u64 rows | u64 cols | rows*cols f64, row-major). Little-endian.

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T> void put(std::ostream &out, T v) {
  out.write(reinterpret_cast<const char *>(&v), sizeof v);
}

template <typename T> T get(std::istream &in, const std::string &path) {
  T v{};
  if (!in.read(reinterpret_cast<char *>(&v), sizeof v))
    throw DataError(path + ": truncated checkpoint");
  return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path &path,
                     const RecurrentNetwork &net) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw DataError("cannot write " + path.string());
  const auto params = net.named_parameters();
  out.write("ZOCK", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto &[name, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    out.write(reinterpret_cast<const char *>(t.value().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out)
    throw DataError("error writing " + path.string());
}

void load_checkpoint(const std::filesystem::path &path, RecurrentNetwork &net) {
  std::ifstream in(path, std::ios::binary);
  const std::string p = path.string();
  if (!in)
    throw DataError("cannot open " + p);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "ZOCK", 4) != 0)
    throw DataError(p + ": not a checkpoint");
  if (const auto v = get<std::uint32_t>(in, p); v != kCheckpointVersion)
    throw DataError(p + ": unsupported checkpoint version " + std::to_string(v));
  auto params = net.named_parameters();
  const auto count = get<std::uint32_t>(in, p);
  if (count != params.size())
    throw DataError(p + ": holds " + std::to_string(count) +
                    " tensors, network has " + std::to_string(params.size()));
  for (auto &[name, t] : params) {
    const auto len = get<std::uint32_t>(in, p);
    std::string stored(len, '\0');
    if (!in.read(stored.data(), len))
      throw DataError(p + ": truncated checkpoint");
    const auto rows = get<std::uint64_t>(in, p);
    const auto cols = get<std::uint64_t>(in, p);
    if (stored != name || static_cast<Index>(rows) != t.rows() ||
        static_cast<Index>(cols) != t.cols())
      throw DataError(p + ": tensor " + stored + " " +
                      shape_string(static_cast<Index>(rows), static_cast<Index>(cols)) +
                      " does not match " + name + " " + t.shape_str());
    Tensor handle = t;
    if (!in.read(reinterpret_cast<char *>(handle.mutable_value().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw DataError(p + ": truncated checkpoint");
  }
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::vector<int> flatten_targets(const std::vector<std::vector<int>> &rows) {
  std::vector<int> out;
  for (const auto &r : rows)
    out.insert(out.end(), r.begin(), r.end());
  return out;
}

SequenceInput image_batch(const PermutedImageSet &set,
                          std::span<const std::size_t> rows,
                          std::vector<int> &labels) {
  const Index steps = set.pixels.cols();
  const auto b = static_cast<Index>(rows.size());
  Matrix x(b, steps);
  labels.resize(rows.size());
  for (Index i = 0; i < b; ++i) {
    x.row(i) = set.pixels.row(static_cast<Index>(rows[static_cast<std::size_t>(i)]));
    labels[static_cast<std::size_t>(i)] = set.labels[rows[static_cast<std::size_t>(i)]];
  }
  SequenceInput in;
  in.dense.reserve(static_cast<std::size_t>(steps));
  for (Index t = 0; t < steps; ++t)
    in.dense.emplace_back(x.col(t));
  return in;
}

} // namespace

EvalResult evaluate_text(const RecurrentNetwork &net, const std::vector<int> &codes,
                         const RunConfig &config, NoiseContext &noise) {
  NoGradGuard guard;
  const auto n = static_cast<Index>(codes.size());
  const Index batch =
    std::max<Index>(1, std::min(config.eval_batch, (n - 1) / config.seq_len));
  SequenceBatcher batcher(codes, config.seq_len, batch);
  std::vector<CellState> state = net.initial_state(batch);
  double total = 0.0;
  Index count = 0;
  ForwardOptions options;
  options.mode = Mode::eval;
  for (std::size_t k = 0; k < batcher.size(); ++k) {
    const TextBatch b = batcher[k];
    SequenceInput in;
    in.tokens = b.inputs;
    const std::vector<int> targets = flatten_targets(b.targets);
    LossResult r = sequence_nll(net, in, targets, TaskKind::language_model,
                                state, noise, options);
    total += r.nll * static_cast<double>(r.count);
    count += r.count;
    state = std::move(r.unrolled.final_state);
  }
  return {total / static_cast<double>(count), std::nullopt, count};
}

EvalResult evaluate_images(const RecurrentNetwork &net, const PermutedImageSet &set,
                           const RunConfig &config, NoiseContext &noise) {
  NoGradGuard guard;
  const std::size_t n = set.labels.size();
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  double total = 0.0;
  Index count = 0, errors = 0;
  ForwardOptions options;
  options.mode = Mode::eval;
  std::vector<int> labels;
  const auto step = static_cast<std::size_t>(config.eval_batch);
  for (std::size_t start = 0; start < n; start += step) {
    const std::size_t end = std::min(n, start + step);
    const SequenceInput in =
      image_batch(set, std::span(rows).subspan(start, end - start), labels);
    const LossResult r =
      sequence_nll(net, in, labels, TaskKind::classification,
                   net.initial_state(in.batch()), noise, options);
    total += r.nll * static_cast<double>(r.count);
    count += r.count;
    errors += r.errors;
  }
  return {total / static_cast<double>(count),
          static_cast<double>(errors) / static_cast<double>(count), count};
}

// ---------------------------------------------------------------------------
// Training

namespace {

using Clock = std::chrono::steady_clock;

struct StepStats {
  double nll_sum = 0.0;
  Index count = 0;
  Index errors = 0;
  double norm_sum = 0.0;
  std::size_t steps = 0;
};

/// backward + clip + update for one minibatch loss.
void apply_update(const LossResult &r, std::vector<Tensor> &params,
                  OptimizerState &opt, const ClipRule &clip, StepStats &stats) {
  if (!std::isfinite(r.loss.item()))
    throw NumericalError("non-finite loss " + num(r.loss.item()));
  backward(r.loss);
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (auto &p : params) {
    grads.push_back(p.has_grad() ? p.grad()
                                 : Matrix(Matrix::Zero(p.rows(), p.cols())));
    p.zero_grad();
  }
  stats.norm_sum += clip_gradients(grads, clip);
  optimizer_step(opt, params, grads);
  stats.nll_sum += r.nll * static_cast<double>(r.count);
  stats.count += r.count;
  stats.errors += r.errors;
  ++stats.steps;
}

void train_text_epoch(RecurrentNetwork &net, const SequenceBatcher &batcher,
                      const RunConfig &config, NoiseContext &noise,
                      std::vector<Tensor> &params, OptimizerState &opt,
                      StepStats &stats) {
  ForwardOptions options;
  options.mode = Mode::train;
  std::vector<CellState> state = net.initial_state(config.batch);
  std::size_t windows = batcher.size();
  if (config.max_batches)
    windows = std::min(windows, config.max_batches);
  for (std::size_t k = 0; k < windows; ++k) {
    const TextBatch b = batcher[k];
    if (b.stream_start)
      state = net.initial_state(config.batch);
    SequenceInput in;
    in.tokens = b.inputs;
    const std::vector<int> targets = flatten_targets(b.targets);
    const LossResult r = sequence_nll(net, in, targets, TaskKind::language_model,
                                      state, noise, options);
    std::vector<CellState> carry = detach_state(r.unrolled.final_state);
    apply_update(r, params, opt, config.clip, stats);
    state = std::move(carry);
  }
}

void train_image_epoch(RecurrentNetwork &net, const PermutedImageSet &set,
                       const RunConfig &config, NoiseContext &noise,
                       Rng &order_rng, std::vector<Tensor> &params,
                       OptimizerState &opt, StepStats &stats) {
  ForwardOptions options;
  options.mode = Mode::train;
  const std::size_t n = set.labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t k = n; k > 1; --k) {
    const auto j = std::min(
      k - 1, static_cast<std::size_t>(order_rng.uniform() * static_cast<double>(k)));
    std::swap(order[k - 1], order[j]);
  }
  const auto step = static_cast<std::size_t>(config.batch);
  std::vector<int> labels;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += step) {
    if (config.max_batches && batches == config.max_batches)
      break;
    const std::size_t end = std::min(n, start + step);
    const SequenceInput in =
      image_batch(set, std::span(order).subspan(start, end - start), labels);
    const LossResult r =
      sequence_nll(net, in, labels, TaskKind::classification,
                   net.initial_state(in.batch()), noise, options);
    apply_update(r, params, opt, config.clip, stats);
    ++batches;
  }
}

RunRecord eval_record(const RecurrentNetwork &net, const Dataset &data,
                      const RunConfig &config, NoiseContext &noise, int epoch,
                      const std::string &split) {
  const auto start = Clock::now();
  EvalResult e;
  if (const auto *t = std::get_if<TextSplits>(&data)) {
    e = evaluate_text(net, split == "valid" ? t->valid : t->test, config, noise);
  } else {
    const auto &img = std::get<ImageSplits>(data);
    e = evaluate_images(net, split == "valid" ? img.valid : img.test, config, noise);
  }
  RunRecord r;
  r.epoch = epoch;
  r.split = split;
  r.nll = e.nll;
  r.error_rate = e.error_rate;
  if (config.record_wall_time)
    r.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

} // namespace

TrainOutcome train(RecurrentNetwork &net, const Dataset &data,
                   const RunConfig &config, MetricsWriter *metrics) {
  TrainOutcome outcome;
  const RegularizerConfig regs = config.regularizers();
  NoiseContext noise(regs, config.cell, config.layers,
                     stream_seed(config.seed, "noise"));
  Rng order_rng(config.seed, "data/order");
  std::vector<Tensor> params = net.parameters();
  OptimizerState opt = config.optimizer_state();
  const LrSchedule schedule = config.schedule();

  std::optional<SequenceBatcher> batcher;
  if (const auto *t = std::get_if<TextSplits>(&data))
    batcher.emplace(t->train, config.seq_len, config.batch,
                    config.overlap ? SequenceBatcher::Overlap::overlapping
                                   : SequenceBatcher::Overlap::non_overlapping,
                    config.stride);

  auto emit = [&](RunRecord r) {
    if (metrics)
      metrics->write(r);
    outcome.records.push_back(std::move(r));
  };

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = Clock::now();
    opt.lr = schedule.rate(epoch);
    StepStats stats;
    try {
      if (batcher)
        train_text_epoch(net, *batcher, config, noise, params, opt, stats);
      else
        train_image_epoch(net, std::get<ImageSplits>(data).train, config, noise,
                          order_rng, params, opt, stats);
    } catch (const NumericalError &e) {
      outcome.aborted = true;
      outcome.abort_reason = "epoch " + std::to_string(epoch) + " step " +
                             std::to_string(stats.steps + 1) + ": " + e.what();
      if (metrics)
        metrics->write_abort(epoch, stats.steps + 1, e.what());
      return outcome;
    }
    RunRecord tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.nll = stats.nll_sum / static_cast<double>(stats.count);
    if (!batcher)
      tr.error_rate = static_cast<double>(stats.errors) / static_cast<double>(stats.count);
    tr.grad_norm_preclip = stats.norm_sum / static_cast<double>(stats.steps);
    if (config.record_wall_time)
      tr.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    emit(tr);

    RunRecord va = eval_record(net, data, config, noise, epoch, "valid");
    if (!std::isfinite(va.nll)) {
      outcome.aborted = true;
      outcome.abort_reason = "non-finite validation loss at epoch " + std::to_string(epoch);
      if (metrics)
        metrics->write_abort(epoch, stats.steps, "non-finite validation loss");
      return outcome;
    }
    if (!outcome.best_valid_nll || va.nll < *outcome.best_valid_nll)
      outcome.best_valid_nll = va.nll;
    if (va.error_rate &&
        (!outcome.best_valid_error || *va.error_rate < *outcome.best_valid_error))
      outcome.best_valid_error = va.error_rate;
    emit(std::move(va));
  }
  if (config.epochs > 0)
    emit(eval_record(net, data, config, noise, config.epochs, "test"));
  return outcome;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

int run_train(const RunConfig &config) {
  if (config.eval_only)
    return run_eval(config);
  const std::filesystem::path dir(config.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const Dataset data = load_dataset(config);
  {
    std::ofstream snap(dir / "config.resolved");
    if (!snap)
      throw DataError("cannot write " + (dir / "config.resolved").string());
    snap << format_config(config);
  }
  RecurrentNetwork net = make_network(config, data);
  MetricsWriter metrics(dir / "metrics.csv");
  const TrainOutcome outcome = train(net, data, config, &metrics);
  save_checkpoint(dir / "model.ckpt", net);
  if (outcome.aborted) {
    std::cerr << "training aborted: " << outcome.abort_reason << '\n';
    return exit_numerical;
  }
  if (outcome.best_valid_nll)
    std::cout << "best valid nll " << num(*outcome.best_valid_nll) << " (bpc "
              << num(bpc(*outcome.best_valid_nll)) << ")\n";
  return exit_ok;
}

int run_eval(const RunConfig &config) {
  const std::filesystem::path dir(config.output_dir);
  const std::filesystem::path ckpt =
    config.checkpoint.empty() ? dir / "model.ckpt" : std::filesystem::path(config.checkpoint);
  const Dataset data = load_dataset(config);
  RecurrentNetwork net = make_network(config, data);
  load_checkpoint(ckpt, net);
  NoiseContext noise(config.regularizers(), config.cell, config.layers,
                     stream_seed(config.seed, "noise"));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  MetricsWriter out(dir / "eval.csv");
  for (const char *split : {"valid", "test"}) {
    const RunRecord r = eval_record(net, data, config, noise, config.epochs, split);
    out.write(r);
    std::cout << format_record(r) << '\n';
  }
  return exit_ok;
}

// ---------------------------------------------------------------------------
// Gradient flow

namespace {

RunConfig comparator_config(RunConfig c, const std::string &name, double z) {
  c.zh = 0.0;
  c.zoneout_mode = MaskMode::per_step;
  if (name == "none") {
    c.regularizer.clear();
  } else if (name == "zoneout") {
    c.regularizer = {"zoneout"};
    c.zc = z;
  } else if (name == "dropout") {
    c.regularizer = {"naive_cell_dropout"};
    c.dropout_p = z;
  } else {
    throw ConfigError("gradflow_regularizers", "unknown comparator '" + name + "'");
  }
  return c;
}

} // namespace

RegularizerConfig gradflow_regularizer(const std::string &name, double z) {
  return comparator_config(RunConfig{}, name, z).regularizers();
}

std::vector<GradflowResult>
run_gradflow(const RunConfig &config, const Dataset &data,
             const std::optional<std::filesystem::path> &out_dir) {
  if (out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*out_dir, ec);
    if (ec)
      throw DataError("cannot create " + out_dir->string() + ": " + ec.message());
  }
  std::vector<GradflowResult> results;
  for (const auto &name : config.gradflow_regularizers) {
    GradflowResult res;
    res.name = name;
    for (int k = 0; k < config.gradflow_seeds; ++k) {
      RunConfig c = comparator_config(config, name, config.gradflow_z);
      c.seed = config.seed + static_cast<std::uint64_t>(k);
      c.epochs = 1; // profiles are taken after one epoch of training
      RecurrentNetwork net = make_network(c, data);
      {
        // One training epoch, without the per-epoch evaluation.
        NoiseContext noise(c.regularizers(), c.cell, c.layers,
                           stream_seed(c.seed, "noise"));
        Rng order_rng(c.seed, "data/order");
        std::vector<Tensor> params = net.parameters();
        OptimizerState opt = c.optimizer_state();
        opt.lr = c.schedule().rate(1);
        StepStats stats;
        if (const auto *t = std::get_if<TextSplits>(&data)) {
          SequenceBatcher batcher(t->train, c.seq_len, c.batch);
          train_text_epoch(net, batcher, c, noise, params, opt, stats);
        } else {
          train_image_epoch(net, std::get<ImageSplits>(data).train, c, noise,
                            order_rng, params, opt, stats);
        }
      }

      NoiseContext probe_noise(c.regularizers(), c.cell, c.layers,
                               stream_seed(c.seed, "gradflow"));
      GradientFlowProfile profile;
      if (const auto *t = std::get_if<TextSplits>(&data)) {
        SequenceBatcher batcher(t->valid, c.seq_len,
                                std::min<Index>(c.batch, (static_cast<Index>(t->valid.size()) - 1) / c.seq_len));
        const TextBatch b = batcher[0];
        SequenceInput in;
        in.tokens = b.inputs;
        profile = gradient_flow(net, in, flatten_targets(b.targets),
                                TaskKind::language_model, probe_noise,
                                c.probe_target);
      } else {
        const auto &valid = std::get<ImageSplits>(data).valid;
        const std::size_t rows_n =
          std::min(valid.labels.size(), static_cast<std::size_t>(c.batch));
        std::vector<std::size_t> rows(rows_n);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        std::vector<int> labels;
        const SequenceInput in = image_batch(valid, rows, labels);
        profile = gradient_flow(net, in, labels, TaskKind::classification,
                                probe_noise, c.probe_target);
      }
      profile.label = name;
      if (out_dir) {
        const std::string comment =
          "regularizer=" + name + " z=" + num(c.gradflow_z) + " seed=" +
          std::to_string(c.seed) + " target=" + std::string(to_string(c.probe_target)) +
          " cell=" + std::string(to_string(c.cell)) + " hidden=" + std::to_string(c.hidden);
        write_profile_csv(*out_dir / ("profile_" + name + "_seed" +
                                      std::to_string(c.seed) + ".csv"),
                          profile, comment);
      }
      res.per_seed.push_back(std::move(profile));
    }
    res.mean = mean_profile(res.per_seed);
    if (out_dir)
      write_profile_csv(*out_dir / ("profile_" + name + "_mean.csv"), res.mean,
                        "regularizer=" + name + " mean over " +
                          std::to_string(config.gradflow_seeds) + " seeds from " +
                          std::to_string(config.seed));
    results.push_back(std::move(res));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Gradient check suite

namespace {

Matrix random_matrix(Rng &rng, Index r, Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Index k = 0; k < m.size(); ++k)
    m.data()[k] = rng.uniform(lo, hi);
  return m;
}

/// Weighted sum of an op's output, so every output entry gets its own
/// upstream gradient.
Tensor probe_sum(const Tensor &out, const Matrix &weights) {
  return sum(mul(out, Tensor(weights)));
}

GradCheckCase check_case(const std::string &name,
                         const std::function<Tensor()> &loss,
                         std::vector<Tensor> params) {
  GradCheckCase c;
  c.name = name;
  try {
    c.report = finite_diff_check(loss, params, 1e-5, 1e-4);
  } catch (const std::exception &e) {
    c.error = e.what();
  }
  return c;
}

void op_cases(std::vector<GradCheckCase> &out, Rng &rng) {
  auto leaf = [&](Index r, Index c, double lo = -1.0, double hi = 1.0) {
    return Tensor(random_matrix(rng, r, c, lo, hi), true);
  };
  {
    Tensor a = leaf(3, 4), b = leaf(4, 2);
    Matrix w = random_matrix(rng, 3, 2);
    out.push_back(check_case("op matmul", [=] { return probe_sum(matmul(a, b), w); }, {a, b}));
  }
  {
    Tensor a = leaf(2, 3), b = leaf(2, 3);
    Matrix w = random_matrix(rng, 2, 3);
    out.push_back(check_case("op add", [=] { return probe_sum(add(a, b), w); }, {a, b}));
    out.push_back(check_case("op sub", [=] { return probe_sum(sub(a, b), w); }, {a, b}));
    out.push_back(check_case("op mul", [=] { return probe_sum(mul(a, b), w); }, {a, b}));
    out.push_back(check_case("op scale", [=] { return probe_sum(scale(a, 1.7), w); }, {a}));
    out.push_back(check_case("op sigmoid", [=] { return probe_sum(sigmoid(a), w); }, {a}));
    out.push_back(check_case("op tanh", [=] { return probe_sum(tanh(a), w); }, {a}));
    out.push_back(check_case("op sum", [=] { return sum(mul(a, a)); }, {a}));
    out.push_back(check_case("op mean", [=] { return mean(mul(a, b)); }, {a, b}));
    Matrix d = random_matrix(rng, 2, 3, 0.0, 1.0);
    d(0, 0) = 0.0;
    d(1, 2) = 1.0;
    out.push_back(check_case("op mix", [=] { return probe_sum(mix(d, a, b), w); }, {a, b}));
  }
  {
    Tensor a = leaf(3, 4), b = leaf(1, 4);
    Matrix w = random_matrix(rng, 3, 4);
    out.push_back(check_case("op add_bias", [=] { return probe_sum(add_bias(a, b), w); }, {a, b}));
    Matrix wn = random_matrix(rng, 3, 1);
    out.push_back(check_case("op row_norm", [=] { return probe_sum(row_norm(a), wn); }, {a}));
  }
  {
    Tensor x = leaf(2, 8), h = leaf(2, 2), w = leaf(2, 8), b = leaf(1, 8);
    Tensor c = leaf(2, 2, -2.0, 2.0);
    Matrix wa = random_matrix(rng, 2, 8), wl = random_matrix(rng, 2, 14);
    out.push_back(check_case("op affine", [=] { return probe_sum(affine(x, h, w, b), wa); },
                             {x, h, w, b}));
    out.push_back(check_case("op lstm_cell",
                             [=] { return probe_sum(lstm_cell(scale(x, 2.0), h, w, b, c), wl); },
                             {x, h, w, b, c}));
  }
  {
    Tensor a = leaf(3, 6);
    Matrix w = random_matrix(rng, 3, 3);
    out.push_back(check_case("op slice_cols", [=] { return probe_sum(slice_cols(a, 1, 3), w); }, {a}));
  }
  {
    Tensor table = leaf(5, 3);
    const std::vector<int> ids{4, 0, 4, 2};
    Matrix w = random_matrix(rng, 4, 3);
    out.push_back(check_case("op gather_rows", [=] {
      return probe_sum(gather_rows(table, std::span<const int>(ids)), w);
    }, {table}));
  }
  {
    Tensor a = leaf(2, 3), b = leaf(1, 3);
    Matrix w = random_matrix(rng, 3, 3);
    out.push_back(check_case("op concat_rows", [=] {
      const std::vector<Tensor> parts{a, b};
      return probe_sum(concat_rows(std::span<const Tensor>(parts)), w);
    }, {a, b}));
  }
  {
    Tensor logits = leaf(3, 5, -2.0, 2.0);
    const std::vector<int> targets{1, 4, 0};
    out.push_back(check_case("op softmax_cross_entropy", [=] {
      return softmax_cross_entropy(logits, std::span<const int>(targets));
    }, {logits}));
  }
}

struct NetCase {
  std::string name;
  CellKind cell;
  RegularizerConfig regs;
  Mode mode = Mode::train;
  Index layers = 1;
  bool tokens = false;
  TaskKind task = TaskKind::language_model;
};

GradCheckCase network_case(const NetCase &nc, std::uint64_t seed) {
  constexpr Index kInput = 3, kHidden = 5, kSteps = 3, kBatch = 2, kOut = 4;
  Rng rng(seed, "gradcheck/" + nc.name);
  NetworkShape shape{nc.cell, kInput, nc.tokens, kHidden, nc.layers, kOut};
  InitScheme init;
  init.scale = 0.5;
  RecurrentNetwork net(shape, init, rng);

  SequenceInput in;
  for (Index t = 0; t < kSteps; ++t) {
    if (nc.tokens) {
      std::vector<int> row;
      for (Index b = 0; b < kBatch; ++b)
        row.push_back(static_cast<int>(rng.uniform() * kInput) % kInput);
      in.tokens.push_back(row);
    } else {
      in.dense.push_back(random_matrix(rng, kBatch, kInput));
    }
  }
  std::vector<int> targets;
  const Index n_targets = nc.task == TaskKind::language_model ? kSteps * kBatch : kBatch;
  for (Index k = 0; k < n_targets; ++k)
    targets.push_back(static_cast<int>(rng.uniform() * kOut) % kOut);

  // A non-trivial starting state exercises the paths through h_0, c_0, o_0.
  std::vector<CellState> initial = net.initial_state(kBatch);
  for (auto &s : initial) {
    s.h = Tensor(random_matrix(rng, kBatch, kHidden, -0.5, 0.5));
    if (s.c.defined())
      s.c = Tensor(random_matrix(rng, kBatch, kHidden, -0.5, 0.5));
    if (s.o.defined())
      s.o = Tensor(random_matrix(rng, kBatch, kHidden, 0.1, 0.9));
  }

  auto noise = std::make_shared<NoiseContext>(nc.regs, nc.cell, nc.layers,
                                              stream_seed(seed, nc.name));
  ForwardOptions options;
  options.mode = nc.mode;
  noise->record();
  {
    NoGradGuard guard;
    sequence_nll(net, in, targets, nc.task, initial, *noise, options);
  }
  noise->freeze();
  auto loss = [=, &net]() {
    noise->rewind();
    return sequence_nll(net, in, targets, nc.task, initial, *noise, options).loss;
  };
  return check_case(nc.name, loss, net.parameters());
}

} // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradCheckCase> out;
  Rng rng(seed, "gradcheck/ops");
  op_cases(out, rng);

  const std::vector<std::pair<std::string, RegularizerTerm>> rules = {
    {"zoneout", Zoneout{0.5, 0.3, MaskMode::per_step}},
    {"recurrent_dropout", RecurrentDropout{0.5}},
    {"naive_cell_dropout", NaiveCellDropout{0.5}},
    {"output_gate_reuse", OutputGateReuse{0.5}},
    {"stochastic_depth", StochasticDepth{0.5}},
    {"norm_stabilizer", NormStabilizer{0.5}},
  };
  std::vector<NetCase> cases;
  for (CellKind cell : {CellKind::lstm, CellKind::gru, CellKind::rnn}) {
    const std::string c(to_string(cell));
    cases.push_back({c + " none", cell, {}});
    for (const auto &[name, term] : rules) {
      RegularizerConfig regs{{term}};
      try {
        regs.validate_for(cell);
      } catch (const std::invalid_argument &) {
        continue; // rule does not apply to this cell kind
      }
      cases.push_back({c + " " + name, cell, regs});
    }
    cases.push_back({c + " weight_noise (frozen)", cell,
                     RegularizerConfig{{WeightNoise{0.1}}}});
    cases.push_back({c + " zoneout eval", cell,
                     RegularizerConfig{{Zoneout{0.5, 0.3, MaskMode::per_step}}},
                     Mode::eval});
  }
  for (MaskMode mode : {MaskMode::per_sequence, MaskMode::shared_hc,
                        MaskMode::static_global, MaskMode::per_timestep_whole_state}) {
    const double z = mode == MaskMode::shared_hc ? 0.4 : 0.5;
    cases.push_back({"lstm zoneout " + std::string(to_string(mode)), CellKind::lstm,
                     RegularizerConfig{{Zoneout{z, mode == MaskMode::shared_hc ? z : 0.3, mode}}}});
  }
  cases.push_back({"lstm zoneout+weight_noise+norm_stabilizer", CellKind::lstm,
                   RegularizerConfig{{Zoneout{0.5, 0.3, MaskMode::per_step},
                                      WeightNoise{0.1}, NormStabilizer{0.5}}}});
  cases.push_back({"lstm zoneout 2 layers", CellKind::lstm,
                   RegularizerConfig{{Zoneout{0.5, 0.3, MaskMode::per_step}}},
                   Mode::train, 2});
  cases.push_back({"gru zoneout 2 layers", CellKind::gru,
                   RegularizerConfig{{Zoneout{0.5, 0.5, MaskMode::per_step}}},
                   Mode::train, 2});
  cases.push_back({"lstm zoneout token input", CellKind::lstm,
                   RegularizerConfig{{Zoneout{0.5, 0.3, MaskMode::per_step}}},
                   Mode::train, 1, true});
  cases.push_back({"lstm zoneout classification", CellKind::lstm,
                   RegularizerConfig{{Zoneout{0.5, 0.3, MaskMode::per_step}}},
                   Mode::train, 1, false, TaskKind::classification});

  for (const auto &nc : cases)
    out.push_back(network_case(nc, seed));
  return out;
}

} // namespace zoneout

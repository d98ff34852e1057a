// SPDX-License-Identifier: Apache-2.0
#include "zoneout/config.hpp"

#include "zoneout/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

namespace zoneout {

std::string_view to_string(Task task) {
  switch (task) {
  case Task::charlm:
    return "charlm";
  case Task::wordlm:
    return "wordlm";
  case Task::pmnist:
    return "pmnist";
  case Task::toy:
    return "toy";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "charlm")
    return Task::charlm;
  if (name == "wordlm")
    return Task::wordlm;
  if (name == "pmnist")
    return Task::pmnist;
  if (name == "toy")
    return Task::toy;
  throw std::invalid_argument("unknown task '" + std::string(name) +
                              "' (expected charlm, wordlm, pmnist or toy)");
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos)
    return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T> T parse_integer(const std::string &key, const std::string &v) {
  T out{};
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string &key, const std::string &v) {
  double out = 0.0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key, "expected a finite number, got '" + v + "'");
  return out;
}

bool parse_flag(const std::string &key, const std::string &v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on")
    return true;
  if (v == "false" || v == "0" || v == "no" || v == "off")
    return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::vector<std::string> parse_list(const std::string &v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty())
      out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string> &items) {
  std::string out;
  for (std::size_t k = 0; k < items.size(); ++k)
    out += (k ? "," : "") + items[k];
  return out;
}

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename Fn> auto named(const std::string &key, Fn &&fn) {
  try {
    return fn();
  } catch (const std::invalid_argument &e) {
    throw ConfigError(key, e.what());
  }
}

struct Field {
  std::string key;
  std::function<void(RunConfig &, const std::string &)> set;
  std::function<std::string(const RunConfig &)> get;
};

#define ZO_INT(name, member, type)                                            \
  Field {                                                                     \
    name,                                                                     \
      [](RunConfig &c, const std::string &v) {                                \
        c.member = parse_integer<type>(name, v);                              \
      },                                                                      \
      [](const RunConfig &c) { return std::to_string(c.member); }             \
  }
#define ZO_REAL(name, member)                                                 \
  Field {                                                                     \
    name,                                                                     \
      [](RunConfig &c, const std::string &v) {                                \
        c.member = parse_real(name, v);                                       \
      },                                                                      \
      [](const RunConfig &c) { return real(c.member); }                       \
  }
#define ZO_BOOL(name, member)                                                 \
  Field {                                                                     \
    name,                                                                     \
      [](RunConfig &c, const std::string &v) {                                \
        c.member = parse_flag(name, v);                                       \
      },                                                                      \
      [](const RunConfig &c) { return std::string(c.member ? "true" : "false"); } \
  }
#define ZO_STR(name, member)                                                  \
  Field {                                                                     \
    name, [](RunConfig &c, const std::string &v) { c.member = v; },           \
      [](const RunConfig &c) { return c.member; }                             \
  }

const std::vector<Field> &fields() {
  static const std::vector<Field> table = {
    {"task",
     [](RunConfig &c, const std::string &v) {
       c.task = named("task", [&] { return parse_task(v); });
     },
     [](const RunConfig &c) { return std::string(to_string(c.task)); }},
    {"cell",
     [](RunConfig &c, const std::string &v) {
       c.cell = named("cell", [&] { return parse_cell_kind(v); });
     },
     [](const RunConfig &c) { return std::string(to_string(c.cell)); }},
    ZO_INT("hidden", hidden, Index),
    ZO_INT("layers", layers, Index),
    {"init",
     [](RunConfig &c, const std::string &v) {
       if (v == "uniform")
         c.init.kind = InitScheme::Kind::uniform;
       else if (v == "orthogonal")
         c.init.kind = InitScheme::Kind::orthogonal;
       else
         throw ConfigError("init", "expected uniform or orthogonal, got '" + v + "'");
     },
     [](const RunConfig &c) {
       return std::string(c.init.kind == InitScheme::Kind::uniform ? "uniform"
                                                                   : "orthogonal");
     }},
    ZO_REAL("init_scale", init.scale),
    ZO_REAL("forget_bias", init.forget_bias),

    ZO_STR("data_path", data_path),
    ZO_INT("data_limit", data_limit, std::size_t),
    ZO_REAL("valid_fraction", valid_fraction),
    ZO_REAL("test_fraction", test_fraction),
    ZO_INT("seq_len", seq_len, Index),
    ZO_INT("batch", batch, Index),
    ZO_INT("eval_batch", eval_batch, Index),
    ZO_BOOL("overlap", overlap),
    ZO_INT("stride", stride, Index),
    ZO_INT("downsample", downsample, Index),
    ZO_BOOL("permute", permute),
    ZO_INT("permutation_seed", permutation_seed, std::uint64_t),
    ZO_INT("toy_count", toy_count, std::size_t),
    ZO_INT("toy_side", toy_side, Index),
    ZO_INT("toy_classes", toy_classes, int),
    ZO_REAL("toy_noise", toy_noise),

    {"optimizer",
     [](RunConfig &c, const std::string &v) {
       c.optimizer = named("optimizer", [&] { return parse_optimizer(v); });
     },
     [](const RunConfig &c) { return std::string(to_string(c.optimizer)); }},
    ZO_REAL("lr", lr),
    ZO_REAL("beta1", beta1),
    ZO_REAL("beta2", beta2),
    ZO_REAL("eps", eps),
    ZO_REAL("rms_decay", rms_decay),
    {"clip",
     [](RunConfig &c, const std::string &v) {
       if (v == "norm")
         c.clip.kind = ClipRule::Kind::norm;
       else if (v == "value")
         c.clip.kind = ClipRule::Kind::value;
       else if (v == "none")
         c.clip.kind = ClipRule::Kind::none;
       else
         throw ConfigError("clip", "expected norm, value or none, got '" + v + "'");
     },
     [](const RunConfig &c) {
       switch (c.clip.kind) {
       case ClipRule::Kind::norm:
         return std::string("norm");
       case ClipRule::Kind::value:
         return std::string("value");
       case ClipRule::Kind::none:
         break;
       }
       return std::string("none");
     }},
    ZO_REAL("clip_threshold", clip.threshold),
    ZO_REAL("lr_decay", lr_decay),
    ZO_INT("lr_decay_start", lr_decay_start, int),
    ZO_INT("epochs", epochs, int),
    ZO_INT("max_batches", max_batches, std::size_t),

    {"regularizer",
     [](RunConfig &c, const std::string &v) {
       c.regularizer = parse_list(v);
       std::erase(c.regularizer, "none");
     },
     [](const RunConfig &c) {
       return c.regularizer.empty() ? std::string("none") : join(c.regularizer);
     }},
    ZO_REAL("zc", zc),
    ZO_REAL("zh", zh),
    {"zoneout_mode",
     [](RunConfig &c, const std::string &v) {
       c.zoneout_mode = named("zoneout_mode", [&] { return parse_mask_mode(v); });
     },
     [](const RunConfig &c) { return std::string(to_string(c.zoneout_mode)); }},
    ZO_REAL("dropout_p", dropout_p),
    ZO_REAL("sd_z", sd_z),
    ZO_REAL("noise_sigma", noise_sigma),
    ZO_REAL("norm_beta", norm_beta),

    {"gradflow_regularizers",
     [](RunConfig &c, const std::string &v) { c.gradflow_regularizers = parse_list(v); },
     [](const RunConfig &c) { return join(c.gradflow_regularizers); }},
    ZO_INT("gradflow_seeds", gradflow_seeds, int),
    ZO_REAL("gradflow_z", gradflow_z),
    {"probe_target",
     [](RunConfig &c, const std::string &v) {
       c.probe_target = named("probe_target", [&] { return parse_probe_target(v); });
     },
     [](const RunConfig &c) { return std::string(to_string(c.probe_target)); }},

    ZO_INT("seed", seed, std::uint64_t),
    ZO_STR("output_dir", output_dir),
    ZO_STR("checkpoint", checkpoint),
    ZO_BOOL("eval_only", eval_only),
    ZO_BOOL("record_wall_time", record_wall_time),
  };
  return table;
}

#undef ZO_INT
#undef ZO_REAL
#undef ZO_BOOL
#undef ZO_STR

void require_positive(const char *key, double v) {
  if (!(v > 0.0))
    throw ConfigError(key, "must be > 0, got " + real(v));
}

void require_unit(const char *key, double v) {
  if (!(v >= 0.0 && v <= 1.0))
    throw ConfigError(key, "must lie in [0, 1], got " + real(v));
}

const std::vector<std::string> kTermNames = {
  "zoneout",          "recurrent_dropout", "naive_cell_dropout",
  "output_gate_reuse", "stochastic_depth", "weight_noise",
  "norm_stabilizer"};

RegularizerTerm make_term(const RunConfig &c, const std::string &name) {
  if (name == "zoneout")
    return Zoneout{c.zc, c.zh, c.zoneout_mode};
  if (name == "recurrent_dropout")
    return RecurrentDropout{c.dropout_p};
  if (name == "naive_cell_dropout")
    return NaiveCellDropout{c.dropout_p};
  if (name == "output_gate_reuse")
    return OutputGateReuse{c.dropout_p};
  if (name == "stochastic_depth")
    return StochasticDepth{c.sd_z};
  if (name == "weight_noise")
    return WeightNoise{c.noise_sigma};
  if (name == "norm_stabilizer")
    return NormStabilizer{c.norm_beta};
  throw ConfigError("regularizer", "unknown regularizer '" + name + "'");
}

} // namespace

ConfigMap parse_config_text(std::string_view text) {
  ConfigMap out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no),
                        "expected key=value, got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty())
      throw ConfigError("line " + std::to_string(line_no), "empty key");
    out[key] = trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

ConfigMap read_config_file(const std::filesystem::path &path) {
  return parse_config_text(read_file(path));
}

RunConfig parse_config(const ConfigMap &file, const ConfigMap &overrides) {
  ConfigMap merged = file;
  for (const auto &[k, v] : overrides)
    merged[k] = v;
  RunConfig c;
  for (const auto &[key, value] : merged) {
    const auto &table = fields();
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Field &f) { return f.key == key; });
    if (it == table.end())
      throw ConfigError(key, "unknown key");
    it->set(c, value);
  }
  c.validate();
  return c;
}

std::string format_config(const RunConfig &config) {
  std::string out;
  for (const auto &f : fields())
    out += f.key + "=" + f.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto &f : fields())
    out.push_back(f.key);
  return out;
}

void RunConfig::validate() const {
  if (hidden <= 0)
    throw ConfigError("hidden", "must be > 0");
  if (layers <= 0)
    throw ConfigError("layers", "must be > 0");
  require_positive("init_scale", init.scale);
  if (seq_len <= 0)
    throw ConfigError("seq_len", "must be > 0");
  if (batch <= 0)
    throw ConfigError("batch", "must be > 0");
  if (eval_batch <= 0)
    throw ConfigError("eval_batch", "must be > 0");
  if (stride < 0)
    throw ConfigError("stride", "must be >= 0");
  if (downsample <= 0)
    throw ConfigError("downsample", "must be > 0");
  require_unit("valid_fraction", valid_fraction);
  require_unit("test_fraction", test_fraction);
  if (valid_fraction + test_fraction >= 1.0)
    throw ConfigError("valid_fraction", "valid and test fractions leave no training data");
  if (toy_count == 0)
    throw ConfigError("toy_count", "must be > 0");
  if (toy_side <= 0)
    throw ConfigError("toy_side", "must be > 0");
  if (toy_classes < 2)
    throw ConfigError("toy_classes", "must be >= 2");
  if (!(toy_noise >= 0.0))
    throw ConfigError("toy_noise", "must be >= 0");
  require_positive("lr", lr);
  if (!(beta1 >= 0.0 && beta1 < 1.0))
    throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("beta2", "must lie in [0, 1)");
  require_positive("eps", eps);
  if (!(rms_decay >= 0.0 && rms_decay < 1.0))
    throw ConfigError("rms_decay", "must lie in [0, 1)");
  if (clip.kind != ClipRule::Kind::none)
    require_positive("clip_threshold", clip.threshold);
  if (!(lr_decay >= 1.0))
    throw ConfigError("lr_decay", "must be >= 1 (learning rate is divided by it)");
  if (lr_decay_start < 0)
    throw ConfigError("lr_decay_start", "must be >= 0");
  if (epochs < 0)
    throw ConfigError("epochs", "must be >= 0");

  require_unit("zc", zc);
  require_unit("zh", zh);
  require_unit("dropout_p", dropout_p);
  require_unit("sd_z", sd_z);
  if (!(noise_sigma >= 0.0))
    throw ConfigError("noise_sigma", "must be >= 0");
  if (!(norm_beta >= 0.0))
    throw ConfigError("norm_beta", "must be >= 0");
  for (const auto &name : regularizer)
    if (std::find(kTermNames.begin(), kTermNames.end(), name) == kTermNames.end())
      throw ConfigError("regularizer", "unknown regularizer '" + name + "'");
  try {
    regularizers().validate_for(cell);
  } catch (const ConfigError &) {
    throw;
  } catch (const std::invalid_argument &e) {
    throw ConfigError("regularizer", e.what());
  }

  for (const auto &name : gradflow_regularizers)
    if (name != "none" && name != "zoneout" && name != "dropout")
      throw ConfigError("gradflow_regularizers",
                        "expected none, zoneout or dropout, got '" + name + "'");
  if (gradflow_seeds <= 0)
    throw ConfigError("gradflow_seeds", "must be > 0");
  require_unit("gradflow_z", gradflow_z);
  if (output_dir.empty())
    throw ConfigError("output_dir", "must not be empty");
}

RegularizerConfig RunConfig::regularizers() const {
  RegularizerConfig r;
  for (const auto &name : regularizer)
    r.terms.push_back(make_term(*this, name));
  return r;
}

OptimizerState RunConfig::optimizer_state() const {
  OptimizerState s;
  s.kind = optimizer;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.decay = rms_decay;
  return s;
}

LrSchedule RunConfig::schedule() const {
  return LrSchedule{lr, lr_decay, lr_decay_start};
}

} // namespace zoneout

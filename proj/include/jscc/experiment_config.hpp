#pragma once

// JSON experiment configuration. Every block has defaults; unknown keys are
// rejected so typos fail loudly. See configs/ for worked examples.
//
//   {
//     "name": "cifar-eval",
//     "seed": 0,
//     "model":    {"checkpoint": "model.ckpt", "variant": "tiny", "cpp": "1/6",
//                  "snr_train_db": 5, "height": 32, "width": 32,
//                  "denoiser": {"depth": 10, "hidden": 32}},
//     "dataset":  {"source": "synthetic", "split": "test", "count": 256},
//     "channel":  {"family": "gaussian", "snr_test_db": [5, 15]},
//     "isec":     {"table": "cifar"}            or {"alpha": 1, "eta": 0.002, "delta": 1},
//     "realizations": 1,
//     "outputs":  {"dir": "out/eval"}
//   }

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "jscc/channel.hpp"
#include "jscc/checkpoint.hpp"
#include "jscc/data.hpp"
#include "jscc/error.hpp"
#include "jscc/isec.hpp"
#include "jscc/models.hpp"
#include "jscc/training.hpp"

namespace jscc {

using nlohmann::json;

struct ModelBlock {
  std::string checkpoint;
  Variant variant = Variant::tiny;
  Rational cpp{1, 6};
  double snr_train_db = 5.0;
  int height = 32;
  int width = 32;
  int denoiser_depth = 10;
  int denoiser_hidden = 32;
  /// FNV-1a digest the checkpoint is expected to have (set when re-running
  /// from a manifest).
  std::optional<std::string> expected_hash;

  AutoencoderConfig architecture() const { return make_config(variant, cpp, height, width); }
  DenoiserConfig denoiser_architecture() const {
    return {denoiser_depth, 3, denoiser_hidden, architecture().codeword_channels, true};
  }
  CheckpointExpectation expectation(bool require_denoiser) const {
    CheckpointExpectation e;
    e.variant = variant;
    e.cpp = cpp;
    e.snr_train_db = snr_train_db;
    e.require_denoiser = require_denoiser;
    return e;
  }
};

struct ChannelBlock {
  NoiseFamily family = NoiseFamily::gaussian;
  std::vector<double> snr_test_db;
  /// Alternative to snr_test_db: offsets from the training SNR.
  std::vector<double> snr_offsets_db;

  std::vector<double> resolve(double snr_train_db) const {
    std::vector<double> out = snr_test_db;
    for (double o : snr_offsets_db) out.push_back(snr_train_db + o);
    if (out.empty()) out.push_back(snr_train_db);
    return out;
  }
};

struct IsecBlock {
  std::optional<std::string> table;
  std::optional<double> alpha, eta, delta;
  std::optional<int> steps;
  bool use_denoiser = true;

  IsecConfig resolve(Rational cpp, double snr_train_db, double snr_test_db) const {
    IsecConfig c;
    if (table) {
      c = default_params(parse_param_table(*table), cpp, snr_train_db, snr_test_db);
    } else if (!alpha || !eta || !delta) {
      throw ConfigError("isec block needs either a table key or all of alpha, eta and delta");
    }
    if (alpha) c.alpha = *alpha;
    if (eta) c.eta = *eta;
    if (delta) c.delta = *delta;
    if (steps) c.steps = *steps;
    c.use_denoiser = use_denoiser;
    c.sigma = sigma_from_snr(snr_test_db);
    c.sigma_train = sigma_from_snr(snr_train_db);
    c.validate();
    return c;
  }
};

struct AblationBlock {
  std::vector<double> alphas{0.0, 1.0, 4.0, 8.0};
  /// Test SNR relative to the training SNR.
  double snr_offset_db = -5.0;
  /// Number of leading images whose per-step traces are written.
  int trace_images = 16;
};

struct PatchBlock {
  int size = 256;
  int per_image = 30;
  int bins = 40;
};

struct TraceBlock {
  std::vector<int> images{0};
  std::vector<double> alphas;  ///< empty: the isec block's alpha
};

struct TrainBlock {
  int batch_size = 32;
  long steps = 2000;
  long denoiser_steps = 2000;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double denoiser_beta1 = 0.9;
  double denoiser_beta2 = 0.999;
  /// Decay step; negative means the midpoint.
  long decay_step = -1;
  double decay_factor = 0.5;
  long log_every = 100;
  long checkpoint_every = 0;

  TrainConfig jscc(const ModelBlock& m, std::uint64_t seed) const { return make(m, seed, steps, beta1, beta2); }
  TrainConfig denoiser(const ModelBlock& m, std::uint64_t seed) const {
    return make(m, seed, denoiser_steps, denoiser_beta1, denoiser_beta2);
  }

 private:
  TrainConfig make(const ModelBlock& m, std::uint64_t seed, long n, double b1, double b2) const {
    TrainConfig c;
    c.batch_size = batch_size;
    c.total_steps = n;
    c.optimizer = {learning_rate, b1, b2};
    c.lr_decay = {decay_step < 0 ? n / 2 : decay_step, decay_factor};
    c.snr_train_db = m.snr_train_db;
    c.cpp = m.cpp;
    c.seed = seed;
    c.log_every = log_every;
    c.checkpoint_every = checkpoint_every;
    return c;
  }
};

struct OutputBlock {
  std::string dir = "out";
  /// Destination of train-jscc / train-denoiser.
  std::string checkpoint;
  /// Line-delimited JSON training log; empty = stdout.
  std::string log;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  ModelBlock model;
  DatasetConfig dataset;
  ChannelBlock channel;
  IsecBlock isec;
  int realizations = 1;
  int batch_size = 16;
  int workers = 1;
  OutputBlock outputs;
  AblationBlock ablation;
  PatchBlock patch;
  TraceBlock trace;
  TrainBlock train;

  void validate() const {
    if (realizations < 1) throw ConfigError("realizations must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    for (double s : channel.resolve(model.snr_train_db)) {
      if (!std::isfinite(sigma_from_snr(s))) throw ConfigError("test SNR " + std::to_string(s) + " dB is not usable");
    }
    if (patch.size < 4 || patch.per_image < 1 || patch.bins < 1) throw ConfigError("invalid patch block");
    if (ablation.alphas.empty()) throw ConfigError("ablation.alphas must not be empty");
    for (double a : ablation.alphas)
      if (!(a >= 0)) throw ConfigError("ablation alphas must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

/// Rejects keys outside `allowed` so that misspelt options are not ignored.
inline void check_keys(const json& j, const char* block, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(block) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + block);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

template <typename V>
void read(const json& j, const char* key, std::optional<V>& out) {
  if (j.contains(key) && !j.at(key).is_null()) {
    V v{};
    read(j, key, v);
    out = v;
  }
}

template <typename V>
json opt(const std::optional<V>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const json& j) {
  using detail::check_keys;
  using detail::read;
  ExperimentConfig c;
  check_keys(j, "config", {"name", "seed", "model", "dataset", "channel", "isec", "realizations", "batch_size",
                           "workers", "outputs", "ablation", "patch", "trace", "train"});
  read(j, "name", c.name);
  read(j, "seed", c.seed);
  read(j, "realizations", c.realizations);
  read(j, "batch_size", c.batch_size);
  read(j, "workers", c.workers);

  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"checkpoint", "variant", "cpp", "snr_train_db", "height", "width", "denoiser",
                            "expected_hash"});
    read(m, "checkpoint", c.model.checkpoint);
    if (m.contains("variant")) c.model.variant = parse_variant(m["variant"].get<std::string>());
    if (m.contains("cpp")) c.model.cpp = Rational::parse(m["cpp"].get<std::string>());
    read(m, "snr_train_db", c.model.snr_train_db);
    read(m, "height", c.model.height);
    read(m, "width", c.model.width);
    read(m, "expected_hash", c.model.expected_hash);
    if (m.contains("denoiser")) {
      check_keys(m["denoiser"], "model.denoiser", {"depth", "hidden"});
      read(m["denoiser"], "depth", c.model.denoiser_depth);
      read(m["denoiser"], "hidden", c.model.denoiser_hidden);
    }
  }
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, "dataset", {"source", "split", "path", "count", "crop_size", "hflip", "seed", "height", "width"});
    if (d.contains("source")) c.dataset.source = parse_dataset_source(d["source"].get<std::string>());
    if (d.contains("split")) c.dataset.split = parse_split(d["split"].get<std::string>());
    read(d, "path", c.dataset.path);
    read(d, "count", c.dataset.count);
    read(d, "crop_size", c.dataset.crop_size);
    read(d, "hflip", c.dataset.hflip);
    read(d, "seed", c.dataset.seed);
    read(d, "height", c.dataset.height);
    read(d, "width", c.dataset.width);
  }
  if (j.contains("channel")) {
    const auto& ch = j["channel"];
    check_keys(ch, "channel", {"family", "snr_test_db", "snr_offsets_db"});
    if (ch.contains("family")) c.channel.family = parse_noise_family(ch["family"].get<std::string>());
    read(ch, "snr_test_db", c.channel.snr_test_db);
    read(ch, "snr_offsets_db", c.channel.snr_offsets_db);
  }
  if (j.contains("isec")) {
    const auto& i = j["isec"];
    check_keys(i, "isec", {"table", "alpha", "eta", "delta", "steps", "use_denoiser"});
    read(i, "table", c.isec.table);
    read(i, "alpha", c.isec.alpha);
    read(i, "eta", c.isec.eta);
    read(i, "delta", c.isec.delta);
    read(i, "steps", c.isec.steps);
    read(i, "use_denoiser", c.isec.use_denoiser);
  }
  if (j.contains("outputs")) {
    const auto& o = j["outputs"];
    check_keys(o, "outputs", {"dir", "checkpoint", "log"});
    read(o, "dir", c.outputs.dir);
    read(o, "checkpoint", c.outputs.checkpoint);
    read(o, "log", c.outputs.log);
  }
  if (j.contains("ablation")) {
    const auto& a = j["ablation"];
    check_keys(a, "ablation", {"alphas", "snr_offset_db", "trace_images"});
    read(a, "alphas", c.ablation.alphas);
    read(a, "snr_offset_db", c.ablation.snr_offset_db);
    read(a, "trace_images", c.ablation.trace_images);
  }
  if (j.contains("patch")) {
    const auto& p = j["patch"];
    check_keys(p, "patch", {"size", "per_image", "bins"});
    read(p, "size", c.patch.size);
    read(p, "per_image", c.patch.per_image);
    read(p, "bins", c.patch.bins);
  }
  if (j.contains("trace")) {
    const auto& t = j["trace"];
    check_keys(t, "trace", {"images", "alphas"});
    read(t, "images", c.trace.images);
    read(t, "alphas", c.trace.alphas);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train", {"batch_size", "steps", "denoiser_steps", "learning_rate", "beta1", "beta2",
                            "denoiser_beta1", "denoiser_beta2", "decay_step", "decay_factor", "log_every",
                            "checkpoint_every"});
    auto& tr = c.train;
    read(t, "batch_size", tr.batch_size);
    read(t, "steps", tr.steps);
    read(t, "denoiser_steps", tr.denoiser_steps);
    read(t, "learning_rate", tr.learning_rate);
    read(t, "beta1", tr.beta1);
    read(t, "beta2", tr.beta2);
    read(t, "denoiser_beta1", tr.denoiser_beta1);
    read(t, "denoiser_beta2", tr.denoiser_beta2);
    read(t, "decay_step", tr.decay_step);
    read(t, "decay_factor", tr.decay_factor);
    read(t, "log_every", tr.log_every);
    read(t, "checkpoint_every", tr.checkpoint_every);
  }
  c.validate();
  return c;
}

/// Fully resolved configuration (every default written out); feeding it
/// back to parse_experiment yields the same configuration.
inline json to_json(const ExperimentConfig& c) {
  using detail::opt;
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["realizations"] = c.realizations;
  j["batch_size"] = c.batch_size;
  j["workers"] = c.workers;
  j["model"] = {{"checkpoint", c.model.checkpoint},
                {"variant", to_string(c.model.variant)},
                {"cpp", c.model.cpp.str()},
                {"snr_train_db", c.model.snr_train_db},
                {"height", c.model.height},
                {"width", c.model.width},
                {"denoiser", {{"depth", c.model.denoiser_depth}, {"hidden", c.model.denoiser_hidden}}},
                {"expected_hash", opt(c.model.expected_hash)}};
  j["dataset"] = {{"source", to_string(c.dataset.source)},
                  {"split", c.dataset.split == Split::train ? "train" : "test"},
                  {"path", c.dataset.path},
                  {"count", c.dataset.count},
                  {"crop_size", opt(c.dataset.crop_size)},
                  {"hflip", c.dataset.hflip},
                  {"seed", c.dataset.seed},
                  {"height", c.dataset.height},
                  {"width", c.dataset.width}};
  j["channel"] = {{"family", to_string(c.channel.family)},
                  {"snr_test_db", c.channel.snr_test_db},
                  {"snr_offsets_db", c.channel.snr_offsets_db}};
  j["isec"] = {{"table", opt(c.isec.table)}, {"alpha", opt(c.isec.alpha)}, {"eta", opt(c.isec.eta)},
               {"delta", opt(c.isec.delta)}, {"steps", opt(c.isec.steps)}, {"use_denoiser", c.isec.use_denoiser}};
  j["outputs"] = {{"dir", c.outputs.dir}, {"checkpoint", c.outputs.checkpoint}, {"log", c.outputs.log}};
  j["ablation"] = {{"alphas", c.ablation.alphas},
                   {"snr_offset_db", c.ablation.snr_offset_db},
                   {"trace_images", c.ablation.trace_images}};
  j["patch"] = {{"size", c.patch.size}, {"per_image", c.patch.per_image}, {"bins", c.patch.bins}};
  j["trace"] = {{"images", c.trace.images}, {"alphas", c.trace.alphas}};
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},         {"steps", t.steps},
                {"denoiser_steps", t.denoiser_steps}, {"learning_rate", t.learning_rate},
                {"beta1", t.beta1},                   {"beta2", t.beta2},
                {"denoiser_beta1", t.denoiser_beta1}, {"denoiser_beta2", t.denoiser_beta2},
                {"decay_step", t.decay_step},         {"decay_factor", t.decay_factor},
                {"log_every", t.log_every},           {"checkpoint_every", t.checkpoint_every}};
  return j;
}

/// Applies a dotted-path override such as "channel.snr_test_db=[0,5]" or
/// "isec.alpha=4". The value is parsed as JSON, falling back to a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("override path '" + path + "' crosses a non-object value");
    node = &next;
  }
  (*node)[parts.back()] = value;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

/// Loads a config file or a run manifest (whose "config" member holds the
/// resolved configuration), then applies overrides.
inline ExperimentConfig load_experiment(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json j = read_json_file(path);
  if (j.contains("manifest_version") && j.contains("config")) {
    json cfg = j["config"];
    if (j.contains("checkpoint") && j["checkpoint"].contains("fnv1a64")) {
      cfg["model"]["expected_hash"] = j["checkpoint"]["fnv1a64"];
    }
    j = cfg;
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_experiment(j);
}

}  // namespace jscc

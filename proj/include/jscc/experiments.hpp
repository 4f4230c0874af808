#pragma once

// Experiment runners: paired one-shot / ISEC evaluation over test SNRs,
// alpha ablation with per-step traces, patch-gain histograms, and training
// front ends. Every run writes a CSV table plus manifest.json.

#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "jscc/channel.hpp"
#include "jscc/checkpoint.hpp"
#include "jscc/data.hpp"
#include "jscc/experiment_config.hpp"
#include "jscc/hash.hpp"
#include "jscc/isec.hpp"
#include "jscc/metrics.hpp"
#include "jscc/models.hpp"
#include "jscc/report.hpp"
#include "jscc/training.hpp"
#include "jscc/version.hpp"

namespace jscc {

/// PSNR values above this are clipped when averaged; rows keep the raw value.
inline constexpr double kPsnrCap = 100.0;

/// A source to transmit: which image and which noise draw.
struct EvalItem {
  int image = 0;
  int realization = 0;
};

struct ItemResult {
  MetricReport oneshot;
  MetricReport isec;
  IsecTrace<float> trace;
};

namespace detail {

/// Runs fn(i) for i in [0, n) on `workers` threads. Results must be stored
/// by index; scheduling order does not affect them.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&]() {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Channel noise for one (image, realization) pair. The draw depends only on
/// the run seed and the pair, so it is shared across SNRs and workers.
inline Tensor<float> keyed_noise(const Shape& item_shape, NoiseFamily family, double sigma, std::uint64_t seed,
                                 const EvalItem& item) {
  Rng rng(seed, {0x6e6f697365, std::uint64_t(item.image), std::uint64_t(item.realization)});
  const auto n = sample_noise(ChannelSpec{family, sigma, seed}, item_shape.item_size(), rng);
  Tensor<float> out(item_shape);
  for (std::size_t i = 0; i < n.size(); ++i) out[i] = float(n[i]);
  return out;
}

}  // namespace detail

using SourceFn = std::function<Tensor<float>(const EvalItem&)>;

/// Transmits every item once and decodes the same received codeword both
/// one-shot and with ISEC. Items are processed in batches of consecutive
/// same-shaped sources.
inline std::vector<ItemResult> evaluate_items(const ModelBundle<float>& model, const SourceFn& source,
                                              const std::vector<EvalItem>& items, const IsecConfig& isec,
                                              NoiseFamily family, std::uint64_t seed, int batch_size, int workers,
                                              const MetricPlugins* plugins = nullptr) {
  std::vector<ItemResult> out(items.size());
  std::vector<std::pair<std::size_t, std::size_t>> batches;
  for (std::size_t i = 0; i < items.size(); i += std::size_t(batch_size)) {
    batches.emplace_back(i, std::min(items.size(), i + std::size_t(batch_size)));
  }
  detail::parallel_for(int(batches.size()), workers, [&](int b) {
    const auto [first, last] = batches[std::size_t(b)];
    std::vector<Tensor<float>> xs;
    for (std::size_t i = first; i < last; ++i) xs.push_back(source(items[i]));
    std::size_t start = 0;
    while (start < xs.size()) {
      std::size_t stop = start + 1;
      while (stop < xs.size() && xs[stop].shape() == xs[start].shape()) ++stop;
      std::vector<Tensor<float>> group(xs.begin() + std::ptrdiff_t(start), xs.begin() + std::ptrdiff_t(stop));
      const Tensor<float> x = stack(group);
      Tensor<float> y = model.encode(x).values;
      for (std::size_t i = start; i < stop; ++i) {
        const Tensor<float> n = detail::keyed_noise(y.shape().with_batch(1), family, isec.sigma, seed,
                                                    items[first + i]);
        auto yi = y.item(int(i - start));
        for (std::size_t k = 0; k < yi.size(); ++k) yi[k] += n[k];
      }
      const Tensor<float> oneshot = model.decode(y);
      auto result = isec_decode(model, y, isec, &x);
      for (std::size_t i = start; i < stop; ++i) {
        const int n = int(i - start);
        auto& r = out[first + i];
        const Tensor<float> xi = x.slice(n);
        r.oneshot = evaluate_metrics(xi, oneshot.slice(n), plugins);
        r.isec = evaluate_metrics(xi, result.images.slice(n), plugins);
        r.trace = std::move(result.traces[std::size_t(n)]);
      }
      start = stop;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Result tables

inline std::vector<std::string> results_header(const std::vector<std::string>& plugin_names) {
  std::vector<std::string> h{"image_id",     "realization",  "snr_train",       "snr_test",    "channel_family",
                             "alpha",        "eta",          "delta",           "steps",       "psnr_oneshot",
                             "psnr_isec",    "psnr_delta",   "ssim_oneshot",    "ssim_isec",   "ms_ssim_oneshot",
                             "ms_ssim_isec"};
  for (const auto& p : plugin_names) {
    h.push_back(p + "_oneshot");
    h.push_back(p + "_isec");
  }
  h.push_back("psnr_capped");
  h.push_back("isec_failed");
  return h;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

inline std::vector<std::string> result_row(const EvalItem& item, double snr_train, double snr_test, NoiseFamily family,
                                           const IsecConfig& isec, const ItemResult& r,
                                           const std::vector<std::string>& plugin_names) {
  const bool capped = r.oneshot.psnr_db > kPsnrCap || r.isec.psnr_db > kPsnrCap;
  std::vector<std::string> row{std::to_string(item.image),
                               std::to_string(item.realization),
                               format_number(snr_train, 3),
                               format_number(snr_test, 3),
                               to_string(family),
                               format_number(isec.alpha),
                               format_number(isec.eta, 8),
                               format_number(isec.delta),
                               std::to_string(isec.steps),
                               format_number(r.oneshot.psnr_db),
                               format_number(r.isec.psnr_db),
                               format_number(std::min(r.isec.psnr_db, kPsnrCap) - std::min(r.oneshot.psnr_db, kPsnrCap)),
                               format_number(r.oneshot.ssim),
                               format_number(r.isec.ssim),
                               format_optional(r.oneshot.ms_ssim),
                               format_optional(r.isec.ms_ssim)};
  for (const auto& p : plugin_names) {
    auto get = [&](const MetricReport& m) -> std::optional<double> {
      auto it = m.plugin_scores.find(p);
      return it == m.plugin_scores.end() ? std::nullopt : it->second;
    };
    row.push_back(format_optional(get(r.oneshot)));
    row.push_back(format_optional(get(r.isec)));
  }
  row.push_back(capped ? "1" : "0");
  row.push_back(r.trace.failed ? "1" : "0");
  return row;
}

struct GroupSummary {
  double snr_test = 0.0;
  double alpha = 0.0;
  PairedSummary psnr;
  PairedSummary ssim;
  std::optional<PairedSummary> ms_ssim;
  long capped = 0;
  long failed = 0;
};

/// Aggregates a results table per (snr_test, alpha), reading only the CSV
/// cells, so that the figures can be recomputed from the file alone.
inline std::vector<GroupSummary> summarize_results(const CsvTable& table) {
  const auto c_snr = table.column("snr_test"), c_alpha = table.column("alpha");
  const auto c_p1 = table.column("psnr_oneshot"), c_p2 = table.column("psnr_isec");
  const auto c_s1 = table.column("ssim_oneshot"), c_s2 = table.column("ssim_isec");
  const auto c_m1 = table.column("ms_ssim_oneshot"), c_m2 = table.column("ms_ssim_isec");
  const auto c_cap = table.column("psnr_capped"), c_fail = table.column("isec_failed");
  struct Acc {
    std::vector<double> p1, p2, s1, s2, m1, m2;
    long capped = 0, failed = 0;
  };
  std::map<std::pair<std::string, std::string>, Acc> groups;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : table.rows()) {
    const auto key = std::make_pair(r[c_snr], r[c_alpha]);
    if (!groups.count(key)) order.push_back(key);
    auto& a = groups[key];
    a.p1.push_back(parse_number(r[c_p1]));
    a.p2.push_back(parse_number(r[c_p2]));
    a.s1.push_back(parse_number(r[c_s1]));
    a.s2.push_back(parse_number(r[c_s2]));
    if (!r[c_m1].empty() && !r[c_m2].empty()) {
      a.m1.push_back(parse_number(r[c_m1]));
      a.m2.push_back(parse_number(r[c_m2]));
    }
    a.capped += r[c_cap] == "1";
    a.failed += r[c_fail] == "1";
  }
  std::vector<GroupSummary> out;
  for (const auto& key : order) {
    const auto& a = groups[key];
    GroupSummary g;
    g.snr_test = parse_number(key.first);
    g.alpha = parse_number(key.second);
    g.psnr = summarize_pairs(a.p1, a.p2, kPsnrCap);
    g.ssim = summarize_pairs(a.s1, a.s2);
    if (!a.m1.empty()) g.ms_ssim = summarize_pairs(a.m1, a.m2);
    g.capped = a.capped;
    g.failed = a.failed;
    out.push_back(g);
  }
  return out;
}

inline CsvTable summary_table(const std::vector<GroupSummary>& groups) {
  CsvTable t({"snr_test", "alpha", "count", "psnr_oneshot", "psnr_isec", "psnr_delta", "positives", "negatives",
              "ties", "sign_test_p", "ssim_oneshot", "ssim_isec", "ms_ssim_oneshot", "ms_ssim_isec", "psnr_capped",
              "isec_failed"});
  for (const auto& g : groups) {
    t.add_row({format_number(g.snr_test, 3), format_number(g.alpha), std::to_string(g.psnr.count),
               format_number(g.psnr.mean_a), format_number(g.psnr.mean_b), format_number(g.psnr.mean_delta),
               std::to_string(g.psnr.positives), std::to_string(g.psnr.negatives), std::to_string(g.psnr.ties),
               format_number(g.psnr.p_value, 8), format_number(g.ssim.mean_a), format_number(g.ssim.mean_b),
               g.ms_ssim ? format_number(g.ms_ssim->mean_a) : "", g.ms_ssim ? format_number(g.ms_ssim->mean_b) : "",
               std::to_string(g.capped), std::to_string(g.failed)});
  }
  return t;
}

inline CsvTable trace_table() {
  return CsvTable({"image_id", "realization", "snr_test", "alpha", "t", "nll", "prior_norm_sq", "psnr"});
}

inline void add_trace_rows(CsvTable& t, const EvalItem& item, double snr_test, double alpha,
                           const IsecTrace<float>& trace) {
  for (const auto& s : trace.steps) {
    t.add_row({std::to_string(item.image), std::to_string(item.realization), format_number(snr_test, 3),
               format_number(alpha), std::to_string(s.t), format_number(s.nll), format_number(s.prior_norm_sq),
               format_number(s.psnr)});
  }
}

// ---------------------------------------------------------------------------
// Run setup

struct PreparedRun {
  ModelBundle<float> model;
  DatasetHandle data;
  std::string checkpoint_hash;
  bool hash_mismatch = false;
};

/// Loads and cross-checks checkpoint and dataset. Everything that can be
/// rejected is rejected here, before any evaluation starts.
/// Patch runs crop the images first, so `check_images` is off for them.
inline PreparedRun prepare_run(const ExperimentConfig& cfg, bool need_denoiser, bool check_images = true) {
  if (cfg.model.checkpoint.empty()) throw ConfigError("model.checkpoint is not set");
  PreparedRun run;
  run.checkpoint_hash = file_digest(cfg.model.checkpoint);
  run.hash_mismatch = cfg.model.expected_hash && *cfg.model.expected_hash != run.checkpoint_hash;
  if (run.hash_mismatch) {
    std::cerr << "warning: checkpoint " << cfg.model.checkpoint << " has digest " << run.checkpoint_hash
              << " but the manifest recorded " << *cfg.model.expected_hash << "\n";
  }
  run.model = load_bundle<float>(cfg.model.checkpoint, cfg.model.expectation(need_denoiser));
  run.data = load_dataset(cfg.dataset);
  if (run.data.empty()) throw DataError("dataset is empty");
  if (check_images) run.model.check_image(run.data.get(0));
  return run;
}

inline nlohmann::json base_manifest(const ExperimentConfig& cfg, const PreparedRun& run, const std::string& kind) {
  nlohmann::json m;
  m["manifest_version"] = 1;
  m["kind"] = kind;
  m["code_version"] = kVersion;
  ExperimentConfig resolved = cfg;
  resolved.model.expected_hash.reset();
  m["config"] = to_json(resolved);
  m["seeds"] = {{"run", cfg.seed}, {"dataset", cfg.dataset.seed}, {"noise_key", "run seed, image id, realization"}};
  m["checkpoint"] = {{"path", cfg.model.checkpoint}, {"fnv1a64", run.checkpoint_hash}};
  m["checkpoint_hash_mismatch"] = run.hash_mismatch;
  if (cfg.model.expected_hash) m["expected_checkpoint_hash"] = *cfg.model.expected_hash;
  m["dataset_size"] = run.data.size();
  return m;
}

inline nlohmann::json isec_json(double snr_test, const IsecConfig& c) {
  const auto s = scale_hyperparams(c);
  return {{"snr_test", snr_test}, {"alpha", c.alpha},         {"eta", c.eta},
          {"delta", c.delta},     {"steps", c.steps},         {"use_denoiser", c.use_denoiser},
          {"sigma", c.sigma},     {"sigma_train", c.sigma_train}, {"alpha_prime", s.alpha_prime},
          {"eta_prime", s.eta_prime}};
}

inline std::vector<EvalItem> all_items(std::size_t images, int realizations) {
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < images; ++i)
    for (int r = 0; r < realizations; ++r) items.push_back({int(i), r});
  return items;
}

inline std::vector<std::string> names_of(const MetricPlugins* plugins) {
  return plugins ? plugins->names() : std::vector<std::string>{};
}

// ---------------------------------------------------------------------------
// Operations

/// Paired one-shot vs ISEC evaluation for every test SNR. Writes
/// results.csv, summary.csv and manifest.json to outputs.dir.
inline Report run_eval(const ExperimentConfig& cfg, const MetricPlugins* plugins = nullptr, bool write = true) {
  if (write) ensure_writable(cfg.outputs.dir, {"results.csv", "summary.csv", "manifest.json"});
  const bool denoiser_needed = cfg.isec.use_denoiser;
  PreparedRun run = prepare_run(cfg, denoiser_needed);
  const auto snrs = cfg.channel.resolve(cfg.model.snr_train_db);
  std::vector<IsecConfig> isecs;
  for (double s : snrs) isecs.push_back(cfg.isec.resolve(cfg.model.cpp, cfg.model.snr_train_db, s));

  const auto plugin_names = names_of(plugins);
  CsvTable results(results_header(plugin_names));
  const auto items = all_items(run.data.size(), cfg.realizations);
  const SourceFn source = [&](const EvalItem& it) { return run.data.get(std::size_t(it.image)); };
  nlohmann::json resolved = nlohmann::json::array();
  for (std::size_t k = 0; k < snrs.size(); ++k) {
    const auto res = evaluate_items(run.model, source, items, isecs[k], cfg.channel.family, cfg.seed,
                                    cfg.batch_size, cfg.workers, plugins);
    for (std::size_t i = 0; i < items.size(); ++i) {
      results.add_row(result_row(items[i], cfg.model.snr_train_db, snrs[k], cfg.channel.family, isecs[k], res[i],
                                 plugin_names));
    }
    resolved.push_back(isec_json(snrs[k], isecs[k]));
  }

  Report report;
  report.dir = cfg.outputs.dir;
  report.files["results.csv"] = results.str();
  report.files["summary.csv"] = summary_table(summarize_results(results)).str();
  report.manifest = base_manifest(cfg, run, "eval");
  report.manifest["resolved_isec"] = resolved;
  report.manifest["outputs"] = {"results.csv", "summary.csv"};
  if (write) emit_report(report);
  return report;
}

/// Per-alpha evaluation at snr_train + ablation.snr_offset_db, plus per-step
/// traces. Writes results.csv (one block per alpha), summary.csv,
/// traces.csv, ablation.json and manifest.json.
inline Report run_alpha_ablation(const ExperimentConfig& cfg, const MetricPlugins* plugins = nullptr,
                                 bool write = true) {
  const std::vector<std::string> files{"results.csv", "summary.csv", "traces.csv", "ablation.json", "manifest.json"};
  if (write) ensure_writable(cfg.outputs.dir, files);
  PreparedRun run = prepare_run(cfg, true);
  const double snr_test = cfg.model.snr_train_db + cfg.ablation.snr_offset_db;
  const auto plugin_names = names_of(plugins);
  CsvTable results(results_header(plugin_names));
  CsvTable traces = trace_table();
  const auto items = all_items(run.data.size(), cfg.realizations);
  const SourceFn source = [&](const EvalItem& it) { return run.data.get(std::size_t(it.image)); };

  nlohmann::json per_alpha = nlohmann::json::array();
  nlohmann::json resolved = nlohmann::json::array();
  for (double alpha : cfg.ablation.alphas) {
    IsecBlock block = cfg.isec;
    block.alpha = alpha;
    block.use_denoiser = true;
    const IsecConfig isec = block.resolve(cfg.model.cpp, cfg.model.snr_train_db, snr_test);
    const auto res = evaluate_items(run.model, source, items, isec, cfg.channel.family, cfg.seed, cfg.batch_size,
                                    cfg.workers, plugins);
    long decreasing = 0, traced = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      results.add_row(result_row(items[i], cfg.model.snr_train_db, snr_test, cfg.channel.family, isec, res[i],
                                 plugin_names));
      const auto& steps = res[i].trace.steps;
      if (!res[i].trace.failed && steps.size() >= 2) {
        ++traced;
        decreasing += steps.back().prior_norm_sq < steps.front().prior_norm_sq;
      }
      if (items[i].image < cfg.ablation.trace_images && items[i].realization == 0) {
        add_trace_rows(traces, items[i], snr_test, alpha, res[i].trace);
      }
    }
    per_alpha.push_back({{"alpha", alpha},
                         {"prior_norm_decreasing", decreasing},
                         {"traced_images", traced},
                         {"prior_norm_decreasing_fraction", traced ? double(decreasing) / double(traced) : 0.0}});
    resolved.push_back(isec_json(snr_test, isec));
  }
  const auto groups = summarize_results(results);
  double best_alpha = groups.front().alpha, best = -INFINITY;
  for (const auto& g : groups) {
    if (g.psnr.mean_b > best) {
      best = g.psnr.mean_b;
      best_alpha = g.alpha;
    }
  }
  for (auto& pa : per_alpha) {
    for (const auto& g : groups) {
      if (format_number(g.alpha) == format_number(pa["alpha"].get<double>())) {
        pa["mean_psnr_isec"] = g.psnr.mean_b;
        pa["mean_psnr_delta"] = g.psnr.mean_delta;
      }
    }
  }
  nlohmann::json summary = {{"snr_test", snr_test}, {"best_alpha", best_alpha}, {"alphas", per_alpha}};

  Report report;
  report.dir = cfg.outputs.dir;
  report.files["results.csv"] = results.str();
  report.files["summary.csv"] = summary_table(groups).str();
  report.files["traces.csv"] = traces.str();
  report.files["ablation.json"] = summary.dump(2) + "\n";
  report.manifest = base_manifest(cfg, run, "ablate-alpha");
  report.manifest["resolved_isec"] = resolved;
  report.manifest["outputs"] = {"results.csv", "summary.csv", "traces.csv", "ablation.json"};
  if (write) emit_report(report);
  return report;
}

/// Per-step ISEC traces (T + 1 rows per image and alpha) for the images in
/// trace.images, at every test SNR. Writes traces.csv and manifest.json.
inline Report run_trace(const ExperimentConfig& cfg, bool write = true) {
  if (write) ensure_writable(cfg.outputs.dir, {"traces.csv", "manifest.json"});
  PreparedRun run = prepare_run(cfg, cfg.isec.use_denoiser);
  std::vector<EvalItem> items;
  for (int i : cfg.trace.images) {
    if (i < 0 || std::size_t(i) >= run.data.size()) {
      throw ConfigError("trace image " + std::to_string(i) + " is outside the dataset (size " +
                        std::to_string(run.data.size()) + ")");
    }
    items.push_back({i, 0});
  }
  const SourceFn source = [&](const EvalItem& it) { return run.data.get(std::size_t(it.image)); };
  CsvTable traces = trace_table();
  nlohmann::json resolved = nlohmann::json::array();
  for (double snr : cfg.channel.resolve(cfg.model.snr_train_db)) {
    std::vector<std::optional<double>> alphas;
    if (cfg.trace.alphas.empty()) alphas.push_back(std::nullopt);
    for (double a : cfg.trace.alphas) alphas.push_back(a);
    for (const auto& a : alphas) {
      IsecBlock block = cfg.isec;
      if (a) block.alpha = *a;
      const IsecConfig isec = block.resolve(cfg.model.cpp, cfg.model.snr_train_db, snr);
      const auto res = evaluate_items(run.model, source, items, isec, cfg.channel.family, cfg.seed, cfg.batch_size,
                                      cfg.workers);
      for (std::size_t i = 0; i < items.size(); ++i) add_trace_rows(traces, items[i], snr, isec.alpha, res[i].trace);
      resolved.push_back(isec_json(snr, isec));
    }
  }
  Report report;
  report.dir = cfg.outputs.dir;
  report.files["traces.csv"] = traces.str();
  report.manifest = base_manifest(cfg, run, "trace");
  report.manifest["resolved_isec"] = resolved;
  report.manifest["outputs"] = {"traces.csv"};
  if (write) emit_report(report);
  return report;
}

/// Random square patches (patch.per_image per image), each transmitted once
/// at every test SNR; per-patch metric deltas and their histograms. Writes
/// patches.csv, histogram.csv and manifest.json.
inline Report run_patch_histogram(const ExperimentConfig& cfg, const MetricPlugins* plugins = nullptr,
                                  bool write = true) {
  if (write) ensure_writable(cfg.outputs.dir, {"patches.csv", "histogram.csv", "manifest.json"});
  PreparedRun run = prepare_run(cfg, cfg.isec.use_denoiser, false);
  const int size = cfg.patch.size;
  for (std::size_t i = 0; i < run.data.size(); ++i) {
    const Shape s = run.data.get(i).shape();
    if (s.h < size || s.w < size) {
      throw DataError("image " + std::to_string(i) + " is " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      ", smaller than the " + std::to_string(size) + " pixel patch");
    }
  }
  {
    Tensor<float> probe({1, 3, size, size});
    run.model.check_image(probe);
  }
  // Patch p of image i uses crop and noise keys (i, p).
  const auto items = all_items(run.data.size(), cfg.patch.per_image);
  struct Corner {
    int top = 0, left = 0;
  };
  auto corner = [&](const EvalItem& it) {
    const Shape s = run.data.get(std::size_t(it.image)).shape();
    Rng rng(cfg.seed, {0x7061746368, std::uint64_t(it.image), std::uint64_t(it.realization)});
    return Corner{rng.integer(0, s.h - size), rng.integer(0, s.w - size)};
  };
  const SourceFn source = [&](const EvalItem& it) {
    const Corner c = corner(it);
    return crop(run.data.get(std::size_t(it.image)), c.top, c.left, size, size);
  };

  const auto plugin_names = names_of(plugins);
  std::vector<std::string> header{"image_id", "patch", "top", "left", "snr_test", "psnr_oneshot", "psnr_isec",
                                  "psnr_delta", "ms_ssim_delta"};
  for (const auto& p : plugin_names) header.push_back(p + "_delta");
  CsvTable patches(header);
  CsvTable hist({"snr_test", "metric", "bin", "lo", "hi", "count"});
  nlohmann::json resolved = nlohmann::json::array();
  for (double snr : cfg.channel.resolve(cfg.model.snr_train_db)) {
    const IsecConfig isec = cfg.isec.resolve(cfg.model.cpp, cfg.model.snr_train_db, snr);
    const auto res = evaluate_items(run.model, source, items, isec, cfg.channel.family, cfg.seed, cfg.batch_size,
                                    cfg.workers, plugins);
    std::map<std::string, std::vector<double>> samples;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& r = res[i];
      const Corner c = corner(items[i]);
      const double dp = std::min(r.isec.psnr_db, kPsnrCap) - std::min(r.oneshot.psnr_db, kPsnrCap);
      std::vector<std::string> row{std::to_string(items[i].image), std::to_string(items[i].realization),
                                   std::to_string(c.top),          std::to_string(c.left),
                                   format_number(snr, 3),           format_number(r.oneshot.psnr_db),
                                   format_number(r.isec.psnr_db),   format_number(dp)};
      samples["psnr_delta"].push_back(parse_number(format_number(dp)));
      if (r.isec.ms_ssim && r.oneshot.ms_ssim) {
        const double dm = *r.isec.ms_ssim - *r.oneshot.ms_ssim;
        row.push_back(format_number(dm));
        samples["ms_ssim_delta"].push_back(parse_number(format_number(dm)));
      } else {
        row.emplace_back();
      }
      for (const auto& p : plugin_names) {
        const auto a = r.oneshot.plugin_scores.at(p), b = r.isec.plugin_scores.at(p);
        if (a && b) {
          row.push_back(format_number(*b - *a));
          samples[p + "_delta"].push_back(parse_number(format_number(*b - *a)));
        } else {
          row.emplace_back();
        }
      }
      patches.add_row(row);
    }
    for (const auto& [metric, values] : samples) {
      const Histogram h = make_histogram(values, cfg.patch.bins);
      const double width = h.counts.size() ? (h.hi - h.lo) / double(h.counts.size()) : 0.0;
      for (std::size_t b = 0; b < h.counts.size(); ++b) {
        hist.add_row({format_number(snr, 3), metric, std::to_string(b), format_number(h.lo + width * double(b)),
                      format_number(b + 1 == h.counts.size() ? h.hi : h.lo + width * double(b + 1)),
                      std::to_string(h.counts[b])});
      }
    }
    resolved.push_back(isec_json(snr, isec));
  }
  Report report;
  report.dir = cfg.outputs.dir;
  report.files["patches.csv"] = patches.str();
  report.files["histogram.csv"] = hist.str();
  report.manifest = base_manifest(cfg, run, "patch-hist");
  report.manifest["resolved_isec"] = resolved;
  report.manifest["outputs"] = {"patches.csv", "histogram.csv"};
  if (write) emit_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Training front ends

namespace detail {

inline std::ofstream open_log(const ExperimentConfig& cfg) {
  std::ofstream log;
  if (!cfg.outputs.log.empty()) {
    log.open(cfg.outputs.log, std::ios::app);
    if (!log) throw ConfigError("cannot open training log " + cfg.outputs.log);
  }
  return log;
}

inline void check_checkpoint_destination(const std::string& path) {
  if (path.empty()) throw ConfigError("outputs.checkpoint is not set");
  std::ofstream probe(path, std::ios::app | std::ios::binary);
  if (!probe) throw ConfigError("checkpoint destination is not writable: " + path);
}

}  // namespace detail

/// Trains encoder and decoder from scratch and saves the bundle to
/// outputs.checkpoint.
inline ModelBundle<float> run_train_jscc(const ExperimentConfig& cfg, TrainHistory* history = nullptr) {
  detail::check_checkpoint_destination(cfg.outputs.checkpoint);
  const DatasetHandle data = load_dataset(cfg.dataset);
  auto log = detail::open_log(cfg);
  TrainHooks hooks;
  hooks.log = log.is_open() ? static_cast<std::ostream*>(&log) : &std::cout;
  TrainConfig tc = cfg.train.jscc(cfg.model, cfg.seed);
  if (tc.checkpoint_every > 0) tc.checkpoint_path = cfg.outputs.checkpoint;
  auto model = train_jscc<float>(tc, cfg.model.architecture(), cfg.model.denoiser_architecture(), data, hooks, history);
  save_bundle(model, cfg.outputs.checkpoint);
  return model;
}

/// Loads model.checkpoint, trains a fresh denoiser shaped by model.denoiser
/// and saves the bundle to outputs.checkpoint.
inline ModelBundle<float> run_train_denoiser(const ExperimentConfig& cfg, TrainHistory* history = nullptr) {
  detail::check_checkpoint_destination(cfg.outputs.checkpoint);
  auto model = load_bundle<float>(cfg.model.checkpoint, cfg.model.expectation(false));
  model.set_denoiser_config(cfg.model.denoiser_architecture());
  const DatasetHandle data = load_dataset(cfg.dataset);
  auto log = detail::open_log(cfg);
  TrainHooks hooks;
  hooks.log = log.is_open() ? static_cast<std::ostream*>(&log) : &std::cout;
  TrainConfig tc = cfg.train.denoiser(cfg.model, cfg.seed);
  if (tc.checkpoint_every > 0) tc.checkpoint_path = cfg.outputs.checkpoint;
  train_denoiser(tc, model, data, hooks, history);
  save_bundle(model, cfg.outputs.checkpoint);
  return model;
}

}  // namespace jscc

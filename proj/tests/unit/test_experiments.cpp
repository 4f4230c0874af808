#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "jscc/checkpoint.hpp"
#include "jscc/experiments.hpp"
#include "support/fixtures.hpp"

using namespace jscc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Untrained tiny checkpoint with a denoiser, in a scratch directory.
class ExperimentTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "jscc_experiment_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto arch = tiny_config({1, 6});
    auto b = ModelBundle<float>::create(arch, DenoiserConfig{4, 3, 8, arch.codeword_channels, true}, 5.0, 1);
    b.init_denoiser(2);
    save_bundle(b, (dir_ / "m.ckpt").string());
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  ExperimentConfig config(const std::string& out) const {
    ExperimentConfig c;
    c.seed = 5;
    c.model.checkpoint = (dir_ / "m.ckpt").string();
    c.dataset.count = 3;
    c.dataset.seed = 9;
    c.channel.snr_test_db = {5.0, 15.0};
    c.isec.table = "cifar";
    c.isec.steps = 2;
    c.realizations = 2;
    c.batch_size = 4;
    c.outputs.dir = (dir_ / out).string();
    return c;
  }

  static fs::path dir_;
};

fs::path ExperimentTest::dir_;

}  // namespace

TEST(Report, SignTest) {
  EXPECT_DOUBLE_EQ(sign_test_p(5, 0), 1.0 / 32);
  EXPECT_DOUBLE_EQ(sign_test_p(3, 2), 16.0 / 32);
  EXPECT_DOUBLE_EQ(sign_test_p(0, 4), 1.0);
  EXPECT_EQ(sign_test_p(0, 0), 1.0);
  EXPECT_NEAR(sign_test_p(20, 0), std::pow(0.5, 20), 1e-18);
}

TEST(Report, PairedSummaryAndCap) {
  const auto s = summarize_pairs({10, 20, 30, 120}, {11, 19, 30, 130}, 100);
  EXPECT_EQ(s.count, 4);
  EXPECT_EQ(s.positives, 1);
  EXPECT_EQ(s.negatives, 1);
  EXPECT_EQ(s.ties, 2);  // both above the cap
  EXPECT_DOUBLE_EQ(s.mean_delta, 0.0);
  EXPECT_DOUBLE_EQ(s.mean_a, 40.0);
}

TEST(Report, HistogramCountsEverySample) {
  std::vector<double> v;
  for (int i = 0; i <= 100; ++i) v.push_back(i * 0.37 - 5);
  const auto h = make_histogram(v, 40);
  ASSERT_EQ(h.counts.size(), 40u);
  EXPECT_EQ(std::accumulate(h.counts.begin(), h.counts.end(), 0L), 101);
  EXPECT_EQ(h.lo, -5.0);
  EXPECT_GE(h.counts.back(), 1);
  const auto flat = make_histogram({2.0, 2.0, 2.0}, 10);
  EXPECT_EQ(flat.counts, (std::vector<long>{3}));
  EXPECT_TRUE(make_histogram({}, 5).counts.empty());
}

TEST(Report, NumberFormattingAndCsvRoundTrip) {
  EXPECT_EQ(format_number(-0.0), "0.000000");
  EXPECT_EQ(format_number(-1e-9), "0.000000");
  EXPECT_EQ(format_number(INFINITY), "inf");
  EXPECT_EQ(format_number(1.5, 3), "1.500");
  EXPECT_EQ(parse_number("inf"), INFINITY);
  EXPECT_TRUE(std::isnan(parse_number("")));
  CsvTable t({"a", "b", "c"});
  t.add_row({"1", "", "x"});
  t.add_row({"2", "3", ""});
  const auto back = CsvTable::parse(t.str());
  EXPECT_EQ(back.rows(), t.rows());
  EXPECT_THROW(t.add_row({"1"}), ConfigError);
  EXPECT_THROW(t.column("d"), ConfigError);
}

TEST(Config, ParseOverridesAndRejectUnknownKeys) {
  auto j = nlohmann::json::parse(R"({"name": "x", "model": {"cpp": "1/12", "snr_train_db": 10},
                                     "channel": {"snr_test_db": [3]}, "isec": {"table": "cifar"}})");
  apply_override(j, "isec.alpha=4");
  apply_override(j, "channel.snr_test_db=[0,5]");
  apply_override(j, "channel.family=laplace");
  apply_override(j, "outputs.dir=results/run1");
  const auto c = parse_experiment(j);
  EXPECT_EQ(*c.isec.alpha, 4.0);
  EXPECT_EQ(c.channel.snr_test_db, (std::vector<double>{0, 5}));
  EXPECT_EQ(c.channel.family, NoiseFamily::laplace);
  EXPECT_EQ(c.outputs.dir, "results/run1");
  EXPECT_EQ(c.model.cpp, (Rational{1, 12}));
  const auto isec = c.isec.resolve(c.model.cpp, 10, 0);
  EXPECT_EQ(isec.alpha, 4.0);
  EXPECT_EQ(isec.eta, 0.001);

  // Round trip through the resolved form.
  EXPECT_EQ(to_json(parse_experiment(to_json(c))), to_json(c));

  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(j, "name.sub=1"), ConfigError);
  auto bad = j;
  bad["isec"]["alhpa"] = 1;
  EXPECT_THROW(parse_experiment(bad), ConfigError);
  bad = j;
  bad["realizations"] = 0;
  EXPECT_THROW(parse_experiment(bad), ConfigError);
  IsecBlock partial;
  partial.alpha = 1;
  EXPECT_THROW(partial.resolve({1, 6}, 5, 5), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  const fs::path dir = JSCC_SOURCE_DIR "/configs";
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_experiment(e.path().string())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 5);
}

TEST_F(ExperimentTest, EvalWritesTwelveConsistentRows) {
  const auto cfg = config("eval");
  const auto report = run_eval(cfg);
  const auto results = CsvTable::parse(slurp(fs::path(cfg.outputs.dir) / "results.csv"));
  ASSERT_EQ(results.size(), 12u);  // 3 images x 2 realizations x 2 SNRs
  const auto p1 = results.column("psnr_oneshot"), p2 = results.column("psnr_isec"), d = results.column("psnr_delta");
  for (const auto& r : results.rows()) {
    EXPECT_NEAR(parse_number(r[d]), parse_number(r[p2]) - parse_number(r[p1]), 2e-6);
    EXPECT_EQ(r[results.column("steps")], "2");
    EXPECT_EQ(r[results.column("eta")], "0.00200000");
  }
  // summary.csv equals the aggregate recomputed from results.csv alone
  EXPECT_EQ(slurp(fs::path(cfg.outputs.dir) / "summary.csv"), summary_table(summarize_results(results)).str());
  const auto summary = CsvTable::parse(report.files.at("summary.csv"));
  ASSERT_EQ(summary.size(), 2u);
  double mean = 0;
  for (std::size_t i = 0; i < 6; ++i) mean += parse_number(results.rows()[i][d]) / 6;
  EXPECT_NEAR(parse_number(summary.rows()[0][summary.column("psnr_delta")]), mean, 1e-5);

  const auto manifest = nlohmann::json::parse(slurp(fs::path(cfg.outputs.dir) / "manifest.json"));
  EXPECT_EQ(manifest["kind"], "eval");
  EXPECT_EQ(manifest["checkpoint"]["fnv1a64"], file_digest(cfg.model.checkpoint));
  EXPECT_FALSE(manifest["checkpoint_hash_mismatch"].get<bool>());
  EXPECT_EQ(manifest["resolved_isec"].size(), 2u);
}

TEST_F(ExperimentTest, RerunFromManifestIsByteIdentical) {
  const auto cfg = config("first");
  run_eval(cfg);
  const auto manifest = (fs::path(cfg.outputs.dir) / "manifest.json").string();
  const auto again = load_experiment(manifest, {"outputs.dir=" + (dir_ / "second").string()});
  ASSERT_TRUE(again.model.expected_hash.has_value());
  run_eval(again);
  EXPECT_EQ(slurp(dir_ / "first" / "results.csv"), slurp(dir_ / "second" / "results.csv"));
  EXPECT_EQ(slurp(dir_ / "first" / "summary.csv"), slurp(dir_ / "second" / "summary.csv"));

  // More workers and a different batch size do not change a single byte.
  auto parallel = again;
  parallel.workers = 3;
  parallel.batch_size = 1;
  parallel.outputs.dir = (dir_ / "third").string();
  run_eval(parallel);
  EXPECT_EQ(slurp(dir_ / "first" / "results.csv"), slurp(dir_ / "third" / "results.csv"));
}

TEST_F(ExperimentTest, ChangedCheckpointIsFlagged) {
  const auto cfg = config("hash");
  run_eval(cfg);
  auto again = load_experiment((fs::path(cfg.outputs.dir) / "manifest.json").string(),
                               {"outputs.dir=" + (dir_ / "hash2").string()});
  const auto arch = tiny_config({1, 6});
  auto other = ModelBundle<float>::create(arch, DenoiserConfig{4, 3, 8, arch.codeword_channels, true}, 5.0, 77);
  other.init_denoiser(3);
  again.model.checkpoint = (dir_ / "other.ckpt").string();
  save_bundle(other, again.model.checkpoint);
  const auto r = run_eval(again);
  EXPECT_TRUE(r.manifest["checkpoint_hash_mismatch"].get<bool>());
  EXPECT_EQ(r.manifest["expected_checkpoint_hash"], file_digest(cfg.model.checkpoint));
}

TEST_F(ExperimentTest, UnwritableOutputFailsBeforeEvaluation) {
  auto cfg = config("x");
  std::ofstream(dir_ / "blocker") << "file";
  cfg.outputs.dir = (dir_ / "blocker" / "sub").string();
  EXPECT_THROW(run_eval(cfg), ConfigError);
  cfg.model.checkpoint = (dir_ / "missing.ckpt").string();  // never reached
  EXPECT_THROW(run_eval(cfg), ConfigError);
}

TEST_F(ExperimentTest, MissingDenoiserIsRejectedUpFront) {
  const auto arch = tiny_config({1, 6});
  auto b = ModelBundle<float>::create(arch, tiny_denoiser_config(arch.codeword_channels), 5.0, 1);
  auto cfg = config("nodenoiser");
  cfg.model.checkpoint = (dir_ / "bare.ckpt").string();
  save_bundle(b, cfg.model.checkpoint);
  EXPECT_THROW(run_eval(cfg), ConfigError);
  cfg.isec.use_denoiser = false;
  EXPECT_NO_THROW(run_eval(cfg, nullptr, false));
  cfg.model.snr_train_db = 10;
  EXPECT_THROW(run_eval(cfg, nullptr, false), ConfigError);
}

TEST_F(ExperimentTest, TrainDenoiserUsesConfiguredLayout) {
  auto cfg = config("retrain");
  cfg.dataset.count = 4;
  cfg.model.denoiser_depth = 3;
  cfg.model.denoiser_hidden = 6;
  cfg.train.batch_size = 2;
  cfg.train.denoiser_steps = 2;
  cfg.train.log_every = 0;
  cfg.outputs.checkpoint = (dir_ / "retrained.ckpt").string();
  run_train_denoiser(cfg);

  const auto before = load_bundle<float>(cfg.model.checkpoint);
  const auto after = load_bundle<float>(cfg.outputs.checkpoint);
  EXPECT_EQ(after.denoiser_config().depth, 3);
  EXPECT_EQ(after.denoiser_config().hidden_channels, 6);
  const auto layers = after.denoiser().named_arrays();
  EXPECT_EQ(layers.front().second->shape().n, 6) << layers.front().first;
  const auto a = before.encoder().named_arrays(), b = after.encoder().named_arrays();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second->values(), b[i].second->values()) << a[i].first;
}

TEST_F(ExperimentTest, AlphaAblationReportsEveryAlphaWithTraces) {
  auto cfg = config("ablation");
  cfg.realizations = 1;
  cfg.ablation.trace_images = 2;
  const auto r = run_alpha_ablation(cfg);
  const auto summary = nlohmann::json::parse(r.files.at("ablation.json"));
  EXPECT_DOUBLE_EQ(summary["snr_test"].get<double>(), 0.0);
  ASSERT_EQ(summary["alphas"].size(), 4u);
  const double best = summary["best_alpha"];
  double best_mean = -INFINITY;
  for (const auto& a : summary["alphas"]) {
    EXPECT_EQ(a["traced_images"], 3);
    best_mean = std::max(best_mean, a["mean_psnr_isec"].get<double>());
  }
  for (const auto& a : summary["alphas"])
    if (a["alpha"] == best) EXPECT_EQ(a["mean_psnr_isec"].get<double>(), best_mean);
  const auto traces = CsvTable::parse(r.files.at("traces.csv"));
  EXPECT_EQ(traces.size(), 2u * 4u * 3u);  // images x alphas x (T + 1)
  EXPECT_EQ(CsvTable::parse(r.files.at("results.csv")).size(), 12u);
}

TEST_F(ExperimentTest, TraceHasOneRowPerStep) {
  auto cfg = config("trace");
  cfg.trace.images = {0, 2};
  cfg.trace.alphas = {0, 8};
  cfg.channel.snr_test_db = {0};
  const auto r = run_trace(cfg);
  const auto t = CsvTable::parse(r.files.at("traces.csv"));
  EXPECT_EQ(t.size(), 2u * 2u * 3u);
  EXPECT_EQ(t.rows().back()[t.column("t")], "2");
  cfg.trace.images = {7};
  EXPECT_THROW(run_trace(cfg, false), ConfigError);
}

TEST_F(ExperimentTest, PatchHistogramSamplesEveryPatch) {
  auto cfg = config("patches");
  cfg.dataset.count = 24;
  cfg.dataset.height = 40;
  cfg.dataset.width = 44;
  cfg.channel.snr_test_db = {5};
  cfg.isec.steps = 1;
  cfg.patch = {32, 30, 40};
  cfg.batch_size = 32;
  const auto r = run_patch_histogram(cfg);
  const auto patches = CsvTable::parse(r.files.at("patches.csv"));
  ASSERT_EQ(patches.size(), 720u);
  for (const auto& row : patches.rows()) {
    EXPECT_LE(std::stoi(row[patches.column("top")]), 8);
    EXPECT_LE(std::stoi(row[patches.column("left")]), 12);
  }
  const auto hist = CsvTable::parse(r.files.at("histogram.csv"));
  long total = 0;
  for (const auto& row : hist.rows())
    if (row[hist.column("metric")] == "psnr_delta") total += std::stol(row[hist.column("count")]);
  EXPECT_EQ(total, 720);

  cfg.patch.size = 48;
  EXPECT_THROW(run_patch_histogram(cfg, nullptr, false), DataError);
}

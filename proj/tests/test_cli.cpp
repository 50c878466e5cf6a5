#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "srlvae/checkpoint.hpp"
#include "srlvae/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using srlvae::cli::kExitConfig;
using srlvae::cli::kExitOk;
using srlvae::cli::kExitRuntime;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("srlvae_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::setenv("SRLVAE_ARTIFACT_ROOT", (root_ / "runs").c_str(), 1);
    ASSERT_EQ(call({"make-corpus", "--out", corpus().string(), "--count", "24", "--size", "16", "--seed", "3"}).code,
              kExitOk);
    const Result r = call(with_model({"pretrain", "--run-dir", (root_ / "base").string(), "--total-steps", "3"}));
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static Result call(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = srlvae::cli::run(args, out, err);
    return {code, out.str(), err.str()};
  }

  static fs::path corpus() { return root_ / "corpus"; }
  static fs::path baseline() { return root_ / "base" / "checkpoint"; }
  static fs::path dir(const std::string& name) { return root_ / name; }

  static std::vector<std::string> with_data(std::vector<std::string> a) {
    for (const char* s : {"--data-root", "", "--resolution", "16", "--log-every", "0"}) a.emplace_back(s);
    a[a.size() - 5] = corpus().string();
    return a;
  }
  static std::vector<std::string> with_model(std::vector<std::string> a) {
    a = with_data(std::move(a));
    for (const char* s : {"--channels", "4,6,8", "--downsample-levels", "2", "--latent-channels", "2", "--batch-size", "4"})
      a.emplace_back(s);
    return a;
  }
  static std::vector<std::string> eval_args(const std::string& run, std::vector<std::string> extra = {}) {
    std::vector<std::string> a = {"eval", "--checkpoint", baseline().string(), "--run-dir", dir(run).string(),
                                  "--data-root", corpus().string(), "--resolution", "16", "--split", "val"};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }
  static json manifest(const std::string& run) { return json::parse(slurp(dir(run) / "manifest.json")); }

  static fs::path root_;
};

fs::path CliTest::root_;

}  // namespace

TEST(ParseFraction, DecimalsAndFractions) {
  EXPECT_DOUBLE_EQ(srlvae::cli::parse_fraction("8/255", "eps"), 8.0 / 255.0);
  EXPECT_DOUBLE_EQ(srlvae::cli::parse_fraction(" 0.25 ", "eps"), 0.25);
  EXPECT_THROW(srlvae::cli::parse_fraction("1/0", "eps"), srlvae::ConfigError);
  EXPECT_THROW(srlvae::cli::parse_fraction("abc", "eps"), srlvae::ConfigError);
}

TEST_F(CliTest, HelpAndUsageErrors) {
  EXPECT_EQ(call({"--help"}).code, kExitOk);
  EXPECT_EQ(call({"pretrain", "--help"}).code, kExitOk);
  EXPECT_EQ(call({}).code, kExitConfig);
  const Result r = call(with_model({"pretrain", "--total-steps", "1", "--no-such-flag", "1"}));
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("--no-such-flag"), std::string::npos) << r.err;
}

TEST_F(CliTest, PretrainWritesCheckpointAndManifest) {
  EXPECT_TRUE(fs::exists(baseline() / "meta.json"));
  const json m = json::parse(slurp(root_ / "base" / "manifest.json"));
  EXPECT_EQ(m["subcommand"], "pretrain");
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["config"]["total-steps"], "3");
  EXPECT_EQ(lines_of(root_ / "base" / "steps.csv").size(), 4u);
}

TEST_F(CliTest, ConfigFilePrecedence) {
  const fs::path cfg = root_ / "toy.toml";
  {
    std::ofstream os(cfg);
    os << "total_steps = 2\nlr = 0.002\n";
  }
  ASSERT_EQ(call(with_model({"pretrain", "--config", cfg.string(), "--run-dir", dir("cfg_a").string()})).code, kExitOk);
  EXPECT_EQ(manifest("cfg_a")["config"]["total-steps"], "2");
  EXPECT_EQ(manifest("cfg_a")["config"]["lr"], "0.002");
  ASSERT_EQ(call(with_model({"pretrain", "--config", cfg.string(), "--total-steps", "1", "--run-dir",
                             dir("cfg_b").string()}))
                .code,
            kExitOk);
  EXPECT_EQ(manifest("cfg_b")["config"]["total-steps"], "1");
  EXPECT_EQ(manifest("cfg_b")["config"]["lr"], "0.002");

  {
    std::ofstream os(cfg);
    os << "total_steps = 2\nbogus_key = 1\n";
  }
  const Result bad = call(with_model({"pretrain", "--config", cfg.string(), "--run-dir", dir("cfg_c").string()}));
  EXPECT_EQ(bad.code, kExitConfig);
  EXPECT_NE(bad.err.find("bogus"), std::string::npos) << bad.err;
}

TEST_F(CliTest, PretrainIsDeterministic) {
  for (const char* run : {"det_a", "det_b"}) {
    ASSERT_EQ(call(with_model({"pretrain", "--total-steps", "3", "--run-dir", dir(run).string()})).code, kExitOk);
  }
  EXPECT_EQ(slurp(dir("det_a") / "steps.csv"), slurp(dir("base") / "steps.csv"));
  EXPECT_EQ(slurp(dir("det_a") / "steps.csv"), slurp(dir("det_b") / "steps.csv"));
}

TEST_F(CliTest, DivergentPretrainExitsWithRuntimeError) {
  const Result r = call(with_model({"pretrain", "--total-steps", "50", "--lr", "10000", "--kl-weight", "1", "--run-dir",
                                    dir("halt").string()}));
  EXPECT_EQ(r.code, kExitRuntime) << r.err;
  EXPECT_EQ(manifest("halt")["status"], "halted");
  EXPECT_TRUE(fs::exists(dir("halt") / "halt.csv"));
}

TEST_F(CliTest, FinetuneFreezesDecoderAndUsesTrainingDefaults) {
  const auto base = srlvae::load_checkpoint(baseline());
  ASSERT_EQ(call(with_data({"finetune", "--baseline", baseline().string(), "--total-steps", "2", "--batch-size", "4",
                            "--run-dir", dir("ft").string()}))
                .code,
            kExitOk);
  const auto tuned = srlvae::load_checkpoint(dir("ft") / "checkpoint");
  EXPECT_EQ(srlvae::decoder_hash(tuned.model), srlvae::decoder_hash(base.model));
  ASSERT_TRUE(tuned.model.has_reference());
  EXPECT_EQ(tuned.model.reference_params(), base.model.encoder_params());

  const json m = manifest("ft");
  EXPECT_EQ(m["tags"], json::array({"srl"}));
  const auto& c = m["config"];
  EXPECT_DOUBLE_EQ(srlvae::cli::parse_fraction(c["epsilon"], "epsilon"), 8.0 / 255.0);
  EXPECT_EQ(c["iterations"], "10");
  EXPECT_DOUBLE_EQ(std::stod(c["step-size"].get<std::string>()), 0.02);
  EXPECT_DOUBLE_EQ(std::stod(c["orig-weight"].get<std::string>()), 0.01);
  EXPECT_DOUBLE_EQ(std::stod(c["lr"].get<std::string>()), 1e-4);
  EXPECT_EQ(c["total-steps"], "2");
}

TEST_F(CliTest, FinetuneAblationTagAndMismatch) {
  ASSERT_EQ(call(with_data({"finetune", "--baseline", baseline().string(), "--total-steps", "1", "--batch-size", "4",
                            "--iterations", "1", "--orig-weight", "0", "--run-dir", dir("ft_wo").string()}))
                .code,
            kExitOk);
  EXPECT_EQ(manifest("ft_wo")["tags"], json::array({"wo-originality"}));

  std::vector<std::string> a = with_data({"finetune", "--baseline", baseline().string(), "--total-steps", "1",
                                          "--run-dir", dir("ft_bad").string()});
  a.push_back("--resolution");
  a.push_back("32");
  EXPECT_EQ(call(a).code, kExitConfig);
  EXPECT_EQ(call(with_data({"finetune", "--baseline", (root_ / "nowhere").string(), "--run-dir",
                            dir("ft_missing").string()}))
                .code,
            kExitConfig);
}

TEST_F(CliTest, AttackSchemasAndZeroIterations) {
  const auto attack = [&](const std::string& method, const std::string& run, std::vector<std::string> extra = {}) {
    std::vector<std::string> a = {"attack", "--checkpoint", baseline().string(), "--method", method, "--run-dir",
                                  dir(run).string(), "--data-root", corpus().string(), "--resolution", "16",
                                  "--iterations", "2"};
    a.insert(a.end(), extra.begin(), extra.end());
    return call(a);
  };
  const Result unknown = attack("teleport", "att_unknown");
  EXPECT_EQ(unknown.code, kExitConfig);
  EXPECT_NE(unknown.err.find("pgd-recon"), std::string::npos) << unknown.err;

  ASSERT_EQ(attack("pgd-recon", "att_zero", {"--iterations", "0"}).code, kExitOk);
  const auto rows = lines_of(dir("att_zero") / "attack.csv");
  ASSERT_GT(rows.size(), 1u);
  EXPECT_EQ(rows[0], "id,initial_loss,final_loss,linf_norm");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::stringstream ss(rows[i]);
    std::string id, init, fin;
    std::getline(ss, id, ',');
    std::getline(ss, init, ',');
    std::getline(ss, fin, ',');
    EXPECT_EQ(init, fin) << rows[i];
  }

  ASSERT_EQ(attack("poison-probe", "att_poison").code, kExitOk);
  EXPECT_EQ(lines_of(dir("att_poison") / "attack.csv")[0], "id,initial_loss,final_loss,linf_norm,reduction_ratio");

  for (const char* run : {"att_a", "att_b"}) ASSERT_EQ(attack("encoder-target", run, {"--init", "uniform"}).code, kExitOk);
  EXPECT_EQ(slurp(dir("att_a") / "attack.csv"), slurp(dir("att_b") / "attack.csv"));
  ASSERT_EQ(attack("mist-textural", "att_png", {"--dump-png"}).code, kExitOk);
  EXPECT_FALSE(fs::is_empty(dir("att_png") / "adv"));
}

TEST_F(CliTest, EvalReportsAreCanonicalAndLedgered) {
  const fs::path ledger = root_ / "runs" / "results.csv";
  const std::size_t before = fs::exists(ledger) ? lines_of(ledger).size() : 0;
  const Result first = call(eval_args("ev_a", {"--attack", "pgd-recon", "--iterations", "2"}));
  ASSERT_EQ(first.code, kExitOk) << first.err;
  ASSERT_EQ(call(eval_args("ev_b", {"--attack", "pgd-recon", "--iterations", "2"})).code, kExitOk);
  const std::string report = slurp(dir("ev_a") / "report.json");
  EXPECT_EQ(report, slurp(dir("ev_b") / "report.json"));
  EXPECT_NE(report.find("rFID-proxy"), std::string::npos);
  const json j = json::parse(report);
  EXPECT_TRUE(j["metrics"].contains("adv_mse"));
  std::vector<std::string> keys;
  for (const auto& [k, v] : j["metrics"].items()) keys.push_back(k);
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  const auto rows = lines_of(ledger);
  EXPECT_EQ(rows.size(), before == 0 ? 3u : before + 2);
}

TEST_F(CliTest, AnalyzeArtifacts) {
  const auto analyze = [&](const std::string& run, std::vector<std::string> extra) {
    std::vector<std::string> a = {"analyze", "--checkpoint", baseline().string(), "--run-dir", dir(run).string(),
                                  "--data-root", corpus().string(), "--resolution", "16"};
    a.insert(a.end(), extra.begin(), extra.end());
    return call(a);
  };
  EXPECT_EQ(analyze("an_none", {}).code, kExitConfig);

  ASSERT_EQ(analyze("an_surf", {"--surface", "--half-res", "10", "--anchors", "1"}).code, kExitOk);
  const auto grid = lines_of(dir("an_surf") / "surface" / "anchor_000.csv");
  ASSERT_EQ(grid.size(), 21u);
  EXPECT_EQ(std::count(grid[0].begin(), grid[0].end(), ','), 20);
  EXPECT_TRUE(manifest("an_surf")["results"].contains("smoothness_score"));

  const Result pca = analyze("an_pca", {"--pca", "-k", "2", "--tightness", "--split", "train"});
  ASSERT_EQ(pca.code, kExitOk) << pca.err;
  EXPECT_EQ(lines_of(dir("an_pca") / "pca" / "projections.csv")[0], "id,pc1,pc2");
  EXPECT_TRUE(fs::exists(dir("an_pca") / "tightness.json"));
  EXPECT_TRUE(manifest("an_pca")["results"].contains("tightness_ratio"));
}

TEST_F(CliTest, EveryRunAppendsOneManifest) {
  const fs::path log = root_ / "runs" / "manifests.jsonl";
  const std::size_t before = lines_of(log).size();
  call({"make-corpus", "--count", "2", "--size", "8"});
  call(eval_args("mf_ok"));
  call(eval_args("mf_bad", {"--split", "nowhere"}));  // parse error: no run is opened
  const auto rows = lines_of(log);
  ASSERT_EQ(rows.size(), before + 2);
  EXPECT_EQ(json::parse(rows.back())["subcommand"], "eval");
}

TEST_F(CliTest, DefaultRunDirectoryUsesArtifactRoot) {
  ASSERT_EQ(call({"make-corpus", "--count", "2", "--size", "8"}).code, kExitOk);
  bool found = false;
  for (const auto& e : fs::directory_iterator(root_ / "runs")) {
    if (e.is_directory() && e.path().filename().string().rfind("make-corpus-", 0) == 0) found = true;
  }
  EXPECT_TRUE(found);
}

#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "schema_check.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path& work() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / "wmlab_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

int run(const std::string& args) {
  const std::string cmd = std::string(WMLAB_CLI_PATH) + " " + args + " >" + (work() / "stdout.txt").string() + " 2>" +
                          (work() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const std::string& name, const json& j) {
  const auto p = work() / name;
  std::ofstream(p) << j.dump();
  return p;
}

// A small corpus keeps the CLI runs short.
const json kSmallLab = {{"corpus", {{"synthetic_documents", 150}}}};

const fs::path& models() {
  static const fs::path d = [] {
    const auto out = work() / "models";
    const auto cfg = write_config("lab.json", kSmallLab);
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + out.string()), 0) << slurp(work() / "stderr.txt");
    return out;
  }();
  return d;
}

// Bound and closed again, so no listener is left behind on the port.
int free_port() {
  const int fd = socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  socklen_t len = sizeof(addr);
  int port = -1;
  if (bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0 &&
      getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0)
    port = ntohs(addr.sin_port);
  close(fd);
  return port;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("theory"), 1);
  EXPECT_EQ(run("generate --length 0"), 1);
}

TEST(Cli, TrainWritesModels) {
  for (const char* f : {"source_lm.json", "eval_lm.json", "human_lm.json", "params.json", "trained_detector.json"})
    EXPECT_TRUE(fs::exists(models() / f)) << f;
  const auto j = json::parse(slurp(models() / "eval_lm.json"));
  EXPECT_EQ(j.at("order"), 3);
}

TEST(Cli, ConfigErrorsExitOne) {
  EXPECT_EQ(run("eval run --config " + q(write_config("n9.json", {{"samples", 9}}))), 1);
  EXPECT_EQ(run("eval run --config " + q(work() / "missing.json")), 1);
  EXPECT_EQ(run("theory verify --config " + q(write_config("bad.json", {{"theory", {{"pairz", 3}}}}))), 1);
  EXPECT_EQ(run("train --config " + q(write_config("badtype.json", {{"lm", {{"alpha", "x"}}}}))), 1);
  std::ofstream(work() / "garbage.json") << "{not json";
  EXPECT_EQ(run("theory tightness --config " + q(work() / "garbage.json")), 1);
  EXPECT_EQ(run("detect --model " + q(models() / "eval_lm.json") + " --method oracle --text 'the man'"), 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  EXPECT_EQ(run("detect --model " + q(work() / "no_model.json") + " --text 'the old man'"), 2);
  EXPECT_EQ(run("detect --model " + q(models() / "eval_lm.json") + " --method watermark --text 'the'"), 2);
  EXPECT_NE(slurp(work() / "stderr.txt").find("too_short"), std::string::npos);
}

TEST(Cli, ShippedConfigsAreAccepted) {
  const fs::path root = WMLAB_SOURCE_DIR;
  const auto schema = json::parse(slurp(root / "schema/tool.schema.json"));
  for (const char* name : {"wmlab.json", "spoof.json"}) {
    const auto j = json::parse(slurp(root / "configs" / name));
    const auto errs = schema_check::errors(schema, j);
    EXPECT_TRUE(errs.empty()) << name << ": " << (errs.empty() ? "" : errs.front());
    EXPECT_EQ(run("theory tightness --config " + q(root / "configs" / name) + " --out " + q(work() / "shipped")), 0)
        << name << " " << slurp(work() / "stderr.txt");
  }
  EXPECT_FALSE(schema_check::errors(schema, {{"theory", {{"pairz", 3}}}}).empty());
  EXPECT_FALSE(schema_check::errors(schema, {{"service", {{"port", 70000}}}}).empty());
  EXPECT_EQ(run("theory tightness --config " + q(write_config("port.json", {{"service", {{"port", 70000}}}}))), 1);
}

TEST(Cli, TheoryVerifyAndTightness) {
  const auto cfg = write_config("campaign.json", {{"theory", {{"pairs", 30}, {"detectors_per_pair", 10}}}});
  const auto out = work() / "verify";
  ASSERT_EQ(run("theory verify --seed 3 --config " + q(cfg) + " --out " + q(out)), 0);
  const auto j = json::parse(slurp(out / "campaign.json"));
  EXPECT_EQ(j.at("violations"), 0);
  EXPECT_EQ(j.at("seed"), 3);
  EXPECT_EQ(j.at("detectors_checked"), 30 * 11);
  EXPECT_TRUE(fs::exists(out / "bound_curve.csv"));

  const auto tcfg = write_config("tight.json", {{"theory", {{"tightness_sizes", {256, 1024, 4096}}}}});
  ASSERT_EQ(run("theory tightness --config " + q(tcfg) + " --out " + q(work() / "tight")), 0);
  EXPECT_TRUE(json::parse(slurp(work() / "tight" / "tightness.json")).at("gap_within_tie_mass").get<bool>());
  // growing outcome spaces in the wrong order: the envelope check fails, exit 3
  const auto rev = write_config("tight_rev.json", {{"theory", {{"tightness_sizes", {4096, 256}}}}});
  EXPECT_EQ(run("theory tightness --config " + q(rev) + " --out " + q(work() / "tight_rev")), 3);
}

TEST(Cli, GenerateIsDeterministicAndDetected) {
  const auto model = models() / "source_lm.json";
  ASSERT_EQ(run("generate --model " + q(model) + " --length 150 --seed 5 --out " + q(work() / "g1")), 0);
  ASSERT_EQ(run("generate --model " + q(model) + " --length 150 --seed 5 --out " + q(work() / "g2")), 0);
  EXPECT_EQ(slurp(work() / "g1" / "generation.json"), slurp(work() / "g2" / "generation.json"));
  const auto gen = json::parse(slurp(work() / "g1" / "generation.json"));
  EXPECT_EQ(gen.at("tokens").size(), 150u);
  std::ofstream(work() / "text.txt") << gen.at("text").get<std::string>();
  ASSERT_EQ(run("detect --model " + q(model) + " --input " + q(work() / "text.txt") + " --out " + q(work() / "d")), 0);
  EXPECT_EQ(json::parse(slurp(work() / "d" / "detection.json")).at("verdict"), "watermarked");
  ASSERT_EQ(run("detect --model " + q(models() / "eval_lm.json") + " --method entropy --input " +
                q(work() / "text.txt") + " --out " + q(work() / "d2")),
            0);
  EXPECT_EQ(json::parse(slurp(work() / "d2" / "detection.json")).at("method"), "neg_entropy");
  const std::string trained = "detect --model " + q(models() / "eval_lm.json") + " --method trained --input " +
                              q(work() / "text.txt");
  ASSERT_EQ(run(trained + " --trained " + q(models() / "trained_detector.json") + " --out " + q(work() / "d3")), 0)
      << slurp(work() / "stderr.txt");
  const auto d3 = json::parse(slurp(work() / "d3" / "detection.json"));
  EXPECT_TRUE(d3.at("value").is_number());
  EXPECT_EQ(run(trained), 1);
}

TEST(Cli, AttacksWriteReports) {
  ASSERT_EQ(run("attack paraphrase --model " + q(models() / "eval_lm.json") +
                " --text 'the old man saw a small dog' --seed 2 --out " + q(work() / "p")),
            0);
  const auto p = json::parse(slurp(work() / "p" / "paraphrase.json"));
  EXPECT_EQ(p.at("tokens").size(), 7u);
  EXPECT_TRUE(p.at("quality").contains("ppl_after"));

  const auto cfg = write_config("spoof.json", {{"spoof", {{"budget", 20000}, {"common_tokens", 60}}}});
  ASSERT_EQ(run("attack spoof --model " + q(models() / "source_lm.json") + " --config " + q(cfg) + " --out " +
                q(work() / "s")),
            0);
  const auto s = json::parse(slurp(work() / "s" / "spoof.json"));
  EXPECT_EQ(s.at("N"), 60);
  EXPECT_EQ(s.at("params").at("delta"), 8.0);
  EXPECT_TRUE(fs::exists(work() / "s" / "score_table.json"));
}

TEST(Cli, EvalRunIsReproducible) {
  json cfg = kSmallLab;
  cfg["samples"] = 10;
  cfg["train_samples"] = 10;
  cfg["length"] = 60;
  cfg["curvature_k"] = 4;
  const auto path = write_config("exp.json", cfg);
  ASSERT_EQ(run("eval run --config " + q(path) + " --seed 4 --out " + q(work() / "e1")), 0) << slurp(work() / "stderr.txt");
  ASSERT_EQ(run("eval run --config " + q(path) + " --seed 4 --out " + q(work() / "e2")), 0);
  EXPECT_EQ(slurp(work() / "e1" / "report.json"), slurp(work() / "e2" / "report.json"));
  EXPECT_EQ(slurp(work() / "e1" / "scores.csv"), slurp(work() / "e2" / "scores.csv"));
  EXPECT_EQ(json::parse(slurp(work() / "e1" / "report.json")).at("config").at("seed"), 4);
  ASSERT_EQ(run("eval run --config " + q(path) + " --format csv --out " + q(work() / "e3")), 0);
  EXPECT_FALSE(fs::exists(work() / "e3" / "report.json"));
  EXPECT_TRUE(fs::exists(work() / "e3" / "scores.csv"));
}

TEST(Cli, ServeAnswersHealth) {
  const int port = free_port();
  ASSERT_GT(port, 0);
  const auto pidfile = work() / "serve.pid";
  const std::string cmd = "sh -c '" + std::string(WMLAB_CLI_PATH) + " serve --model " + (models() / "source_lm.json").string() +
                          " --eval-model " + (models() / "eval_lm.json").string() + " --port " + std::to_string(port) +
                          " --out " + (work() / "srv").string() + " >/dev/null 2>&1 & echo $! > " + pidfile.string() + "'";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  // stop the server however the test exits
  struct Stop {
    fs::path pidfile;
    ~Stop() {
      const std::string pid = slurp(pidfile);
      if (!pid.empty()) kill(std::stoi(pid), SIGTERM);
    }
  } stop{pidfile};
  httplib::Client client("127.0.0.1", port);
  httplib::Result res;
  int tries = 0;
  for (; tries < 100 && !res; ++tries) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    res = client.Get("/v1/health");
  }
  ASSERT_TRUE(res) << httplib::to_string(res.error());
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body).at("status"), "ok");
  const auto meta = client.Get("/v1/spoof/table/meta");
  ASSERT_TRUE(meta) << httplib::to_string(meta.error());
  EXPECT_EQ(meta->status, 409);
  EXPECT_TRUE(fs::exists(work() / "srv" / "server.json"));
}

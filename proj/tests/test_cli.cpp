#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "padellm/text.hpp"
#include "padellm//backend.hpp"
#include "padellm/cli.hpp"

using namespace padellm;
namespace fs = std::filesystem;

namespace {

const std::string kCuttittaRecord =
    R"({"id":"cuttitta","text":"Cuttitta announced his retirement after the 1995 World Cup , where he took issue with being dropped from the Italy side that faced England in the pool stages.","mentions":[{"label":"PER","text":"Cuttitta"},{"label":"MISC","text":"1995 World Cup"},{"label":"LOC","text":"Italy"},{"label":"LOC","text":"England"}]})";
const std::string kJapanRecord =
    R"({"id":"japan","text":"Japan, co-hosts of the World Cup in 2002 and ranked 20th in the world by FIFA, are favourites to regain their title here.","mentions":[{"label":"LOC","text":"Japan"},{"label":"MISC","text":"World Cup"},{"label":"ORG","text":"FIFA"}]})";
const std::string kEmptyRecord = R"({"id":"quiet","text":"Nothing happened today .","mentions":[]})";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("padellm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    corpus_ = write("corpus.jsonl", kCuttittaRecord + "\n" + kJapanRecord + "\n" + kEmptyRecord + "\n");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& content) {
    std::ofstream(dir_ / name, std::ios::binary) << content;
    return (dir_ / name).string();
  }
  static std::string read(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }
  static std::vector<std::string> lines(const fs::path& p) {
    std::vector<std::string> out;
    std::istringstream in(read(p));
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  }
  int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "padellm-ner");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return cli::run(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }
  std::string out(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string corpus_;
  std::ostringstream out_, err_;
};

// Answers completion requests from an oracle over HTTP.
class OracleServer {
 public:
  explicit OracleServer(Backend& oracle) {
    server_.Post("/v1/completions", [&oracle](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      CompletionRequest r;
      r.prompt = body.at("prompt");
      r.max_new_tokens = body.at("max_tokens");
      r.stop = body.at("stop").get<std::vector<std::string>>();
      auto result = oracle.generate(r);
      nlohmann::json reply{{"text", result.text},
                           {"tokens", result.tokens},
                           {"token_logprobs", result.token_logprobs},
                           {"finish_reason", result.stop_reason == StopReason::length ? "length" : "stop"}};
      if (result.stop_reason == StopReason::eos) reply["stop_reason"] = nullptr;
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~OracleServer() {
    server_.stop();
    thread_.join();
  }
  int port() const { return port_; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

const std::vector<std::string> kLabelsFlag{"--labels", "PER,MISC,LOC,ORG"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_F(CliTest, ReformatCuttittaGivesFivePadellmLines) {
  auto c = write("one.jsonl", kCuttittaRecord + "\n");
  ASSERT_EQ(cli(with({"reformat", "--corpus", c, "--out", out("r")}, kLabelsFlag)), 0) << err_.str();
  auto padellm = lines(out("r/train_padellm.jsonl"));
  ASSERT_EQ(padellm.size(), 5u);
  EXPECT_EQ(nlohmann::json::parse(padellm[2])["output"], "2\n<mention 1>Italy");
  EXPECT_EQ(nlohmann::json::parse(padellm[3])["output"], "2\n<mention 2>England");
  EXPECT_EQ(nlohmann::json::parse(padellm[4])["output"], "<eos>");
  EXPECT_EQ(lines(out("r/train_struct.jsonl")).size(), 1u);
  EXPECT_EQ(lines(out("r/train_onestep.jsonl")).size(), 4u);
  EXPECT_TRUE(fs::exists(out("r/config.json")));
  EXPECT_EQ(nlohmann::json::parse(read(out("r/stats.json")))["formats"]["padellm"]["count"], 5);
}

TEST_F(CliTest, ReformatEmptyCorpus) {
  auto c = write("empty.jsonl", "");
  ASSERT_EQ(cli(with({"reformat", "--corpus", c, "--out", out("r")}, kLabelsFlag)), 0) << err_.str();
  for (auto f : {"train_padellm.jsonl", "train_aug.jsonl", "train_struct.jsonl", "train_onestep.jsonl"}) {
    ASSERT_TRUE(fs::exists(dir_ / "r" / f));
    EXPECT_EQ(fs::file_size(dir_ / "r" / f), 0u);
  }
  auto stats = nlohmann::json::parse(read(out("r/stats.json")));
  EXPECT_EQ(stats["total"], 0);
  EXPECT_EQ(stats["documents"], 0);
}

TEST_F(CliTest, ReformatIsDeterministic) {
  ASSERT_EQ(cli(with({"reformat", "--corpus", corpus_, "--out", out("a")}, kLabelsFlag)), 0);
  ASSERT_EQ(cli(with({"reformat", "--corpus", corpus_, "--out", out("b")}, kLabelsFlag)), 0);
  for (auto f : {"train_padellm.jsonl", "train_aug.jsonl", "train_struct.jsonl", "train_onestep.jsonl", "stats.json"})
    EXPECT_EQ(read(dir_ / "a" / f), read(dir_ / "b" / f)) << f;
}

TEST_F(CliTest, DecodeNoiselessOracleReproducesGold) {
  ASSERT_EQ(cli(with({"decode", "--corpus", corpus_, "--out", out("d")}, kLabelsFlag)), 0) << err_.str();
  auto pred = lines(out("d/predictions.jsonl"));
  auto gold = lines(corpus_);
  ASSERT_EQ(pred.size(), gold.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto p = nlohmann::json::parse(pred[i]);
    auto g = nlohmann::json::parse(gold[i]);
    EXPECT_EQ(p["id"], g["id"]);
    auto sorted = [](nlohmann::json a) {
      std::vector<std::string> v;
      for (const auto& m : a) v.push_back(m.dump());
      std::sort(v.begin(), v.end());
      return v;
    };
    EXPECT_EQ(sorted(p["mentions"]), sorted(g["mentions"]));
  }
  EXPECT_EQ(lines(out("d/outcomes.jsonl")).size(), 3u);
  EXPECT_EQ(nlohmann::json::parse(read(out("d/defects.json")))["defects"], 0);

  ASSERT_EQ(cli(with({"eval", "--gold", corpus_, "--pred", out("d/predictions.jsonl"), "--outcomes",
                      out("d/outcomes.jsonl"), "--out", out("e")},
                     kLabelsFlag)),
            0)
      << err_.str();
  auto report = nlohmann::json::parse(read(out("e/eval.json")));
  EXPECT_EQ(report["methods"][0]["eval"]["f1"], 1.0);
  EXPECT_NE(read(out("e/eval.md")).find("Micro F1"), std::string::npos);
}

TEST_F(CliTest, BatchModeLogsStepBatchSizes) {
  auto c = write("one.jsonl", kCuttittaRecord + "\n");
  auto cfg = write("oracle.json", R"({"errors": {
      "count_overrides": [{"doc_id": "cuttitta", "label": "MISC", "count": 2}],
      "mention_overrides": [{"doc_id": "cuttitta", "label": "MISC", "index": 2, "text": "Italy", "probability": 0.61}]}})");
  ASSERT_EQ(cli(with({"decode", "--corpus", c, "--mode", "padellm-batch", "--backend-config", cfg, "--out", out("d")},
                     kLabelsFlag)),
            0)
      << err_.str();
  EXPECT_NE(read(out("d/decode.log")).find("cuttitta: step-1 batch size 4, step-2 batch size 5"), std::string::npos);
  EXPECT_NE(out_.str().find("step batch sizes 4 then 5"), std::string::npos);
}

TEST_F(CliTest, DecodeOverHttpStub) {
  Corpus corpus;
  corpus.documents.push_back({"cuttitta",
                              "Cuttitta announced his retirement after the 1995 World Cup , where he took issue with "
                              "being dropped from the Italy side that faced England in the pool stages."});
  corpus.gold.push_back(
      {"cuttitta", {{"PER", "Cuttitta"}, {"MISC", "1995 World Cup"}, {"LOC", "Italy"}, {"LOC", "England"}}});
  auto oracle = oracle_configure(corpus, LabelSet({"PER", "MISC", "LOC", "ORG"}), ErrorInjection{}, CostModel{}, 0);
  OracleServer server(*oracle);
  auto c = write("one.jsonl", kCuttittaRecord + "\n");
  auto cfg = write("http.json", R"({"base_url": "http://127.0.0.1:)" + std::to_string(server.port()) + R"(", "timeout_s": 5})");
  ASSERT_EQ(cli(with({"decode", "--corpus", c, "--backend", "http", "--backend-config", cfg, "--out", out("d")},
                     kLabelsFlag)),
            0)
      << err_.str();
  auto outcome = nlohmann::json::parse(lines(out("d/outcomes.jsonl")).at(0));
  EXPECT_EQ(outcome["mentions"].size(), 4u);
  EXPECT_GT(outcome["example_latency_ms"].get<double>(), 0.0);
  for (const auto& t : outcome["traces"]) EXPECT_GE(t["latency_ms"].get<double>(), 0.0);
}

TEST_F(CliTest, BenchOrdersMultiBatchAutoreg) {
  auto cfg = write("cost.json", R"({"cost": {"ms_per_token": 1.0, "fixed_overhead_ms": 5.0, "batch_alpha": 0.05}})");
  ASSERT_EQ(cli(with({"bench", "--corpus", corpus_, "--backend-config", cfg, "--dataset", "tiny", "--out", out("b")},
                     kLabelsFlag)),
            0)
      << err_.str();
  auto report = nlohmann::json::parse(read(out("b/bench.json")));
  std::map<std::string, double> latency;
  for (const auto& m : report["methods"]) latency[m["method"]] = m["latency"]["mean_example_latency_ms"];
  EXPECT_LT(latency.at("padellm-multi"), latency.at("padellm-batch"));
  EXPECT_LT(latency.at("padellm-batch"), latency.at("autoreg-struct"));
  const auto md = read(out("b/bench.md"));
  EXPECT_NE(md.find("### Generated tokens per sequence"), std::string::npos);
  EXPECT_NE(md.find("| Method | tiny | Mean |"), std::string::npos);
  EXPECT_NE(md.find("--dedup off"), std::string::npos);
}

TEST_F(CliTest, ConfigSnapshotReproducesRun) {
  ASSERT_EQ(cli(with({"decode", "--corpus", corpus_, "--seed", "7", "--parallelism", "3", "--out", out("a")},
                     kLabelsFlag)),
            0);
  ASSERT_EQ(cli({"decode", "--config", out("a/config.json"), "--out", out("b")}), 0) << err_.str();
  EXPECT_EQ(read(out("a/predictions.jsonl")), read(out("b/predictions.jsonl")));
  EXPECT_EQ(read(out("a/outcomes.jsonl")), read(out("b/outcomes.jsonl")));
  auto snapshot = nlohmann::json::parse(read(out("b/config.json")));
  EXPECT_EQ(snapshot["seed"], 7);
  EXPECT_EQ(snapshot["parallelism"], 3);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(cli({}), cli::kExitUsage);
  EXPECT_EQ(cli({"decode", "--no-such-flag"}), cli::kExitUsage);
  EXPECT_EQ(cli(with({"decode", "--corpus", out("missing.jsonl")}, kLabelsFlag)), cli::kExitUsage);
  EXPECT_NE(err_.str().find("missing.jsonl"), std::string::npos);
  EXPECT_EQ(cli({"decode", "--corpus", corpus_}), cli::kExitUsage);
  EXPECT_EQ(cli(with({"decode", "--corpus", corpus_, "--mode", "beam", "--out", out("x")}, kLabelsFlag)),
            cli::kExitUsage);
  EXPECT_EQ(cli({"--help"}), cli::kExitOk);

  auto fixtures = write("fixtures.jsonl", "");
  auto cfg = write("scripted.json", R"({"fixtures": ")" + fixtures + R"("})");
  EXPECT_EQ(cli(with({"decode", "--corpus", corpus_, "--backend", "scripted", "--backend-config", cfg, "--out",
                      out("d")},
                     kLabelsFlag)),
            cli::kExitDefects);
  EXPECT_GT(nlohmann::json::parse(read(out("d/defects.json")))["defect_rate"].get<double>(), 0.1);
}

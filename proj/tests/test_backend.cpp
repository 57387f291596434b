#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "padellm/text.hpp"
#include "padellm//backend.hpp"
#include "padellm/scheduler.hpp"
#include "support/synthetic.hpp"

using namespace padellm;

namespace {

const LabelSet kLabels({"PER", "MISC", "LOC", "ORG"});
const PromptTemplate kEn = PromptTemplate::english();

Corpus cuttitta() {
  Corpus c;
  c.documents.push_back({"cuttitta",
                         "Cuttitta announced his retirement after the 1995 World Cup , where he took issue with being "
                         "dropped from the Italy side that faced England in the pool stages."});
  c.gold.push_back(
      {"cuttitta", {{"PER", "Cuttitta"}, {"MISC", "1995 World Cup"}, {"LOC", "Italy"}, {"LOC", "England"}}});
  return c;
}

CompletionRequest request(std::string prompt, std::vector<std::string> stop = {}) {
  CompletionRequest r;
  r.prompt = std::move(prompt);
  r.stop = std::move(stop);
  return r;
}

// Serves canned completions on a free port for the lifetime of the object.
class StubServer {
 public:
  explicit StubServer(httplib::Server::Handler handler) {
    server_.Post("/v1/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  HttpEndpoint endpoint() const {
    HttpEndpoint e;
    e.base_url = "http://127.0.0.1:" + std::to_string(port_);
    e.backoff_ms = 1;
    e.timeout_s = 5;
    return e;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(CostModel, AffineLaw) {
  CostModel c{2.0, 5.0, 0.05};
  EXPECT_DOUBLE_EQ(c.latency(0), 5.0);
  EXPECT_DOUBLE_EQ(c.latency(10), 25.0);
  EXPECT_DOUBLE_EQ(c.latency(20) - c.latency(10), c.latency(10) - c.latency(0));
  EXPECT_DOUBLE_EQ(c.penalty(1), 1.0);
  EXPECT_DOUBLE_EQ(c.penalty(5), 1.2);
  EXPECT_DOUBLE_EQ(c.latency(10, 5), 5.0 + 2.0 * 10 * 1.2);
  EXPECT_THROW(CostModel::from_json({{"ms_per_token", -1}}), ConfigError);
  EXPECT_DOUBLE_EQ(CostModel::from_json(c.to_json()).batch_alpha, 0.05);
}

TEST(Truncation, StopsAtFirstStopCondition) {
  auto r = truncate_generation({"2", "\n", "<mention 1>"}, {-0.1, -0.1, -0.1}, request("p", {"\n"}), "<eos>");
  EXPECT_EQ(r.tokens, (std::vector<std::string>{"2", "\n"}));
  EXPECT_EQ(r.stop_reason, StopReason::stop_string);
  r = truncate_generation({"a", "<eos>", "b"}, {}, request("p"), "<eos>");
  EXPECT_EQ(r.tokens.size(), 2u);
  EXPECT_EQ(r.stop_reason, StopReason::eos);
  auto capped = request("p");
  capped.max_new_tokens = 2;
  r = truncate_generation({"a", "b", "c"}, {-1, -1, -1}, capped, "<eos>");
  EXPECT_EQ(r.tokens.size(), 2u);
  EXPECT_EQ(r.stop_reason, StopReason::length);
  r = truncate_generation({"ab", "cd"}, {}, request("p", {"bc"}), "<eos>");
  EXPECT_EQ(r.tokens.size(), 2u);
  EXPECT_EQ(r.stop_reason, StopReason::stop_string);
}

TEST(Scripted, ReplaysFixtureByExactPrompt) {
  std::istringstream in(R"({"prompt":"p1","tokens":["Ital","y","<eos>"],"logprobs":[-0.1,-0.2,-0.3],"finish":"eos"}
{"prompt":"p2","tokens":["x"],"logprobs":[-0.5],"finish":"length","latency_ms":7}
)");
  auto b = ScriptedBackend::load(in, CostModel{1.0, 3.0, 0.0});
  EXPECT_EQ(b.size(), 2u);
  auto r = b.generate(request("p1"));
  EXPECT_EQ(r.tokens, (std::vector<std::string>{"Ital", "y", "<eos>"}));
  EXPECT_EQ(r.token_logprobs, (std::vector<double>{-0.1, -0.2, -0.3}));
  EXPECT_EQ(r.text, "Italy");
  EXPECT_DOUBLE_EQ(r.latency_ms, 6.0);
  r = b.generate(request("p2"));
  EXPECT_EQ(r.stop_reason, StopReason::length);
  EXPECT_DOUBLE_EQ(r.latency_ms, 7.0);
  try {
    b.generate(request("p3"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::missing_fixture);
  }
  std::istringstream bad(R"({"prompt":"p","tokens":["a"],"logprobs":[-1,-2]})");
  EXPECT_THROW(ScriptedBackend::load(bad), ParseError);
}

TEST(Oracle, CountPromptForLoc) {
  const CostModel cost{3.0, 4.0, 0.05};
  auto oracle = oracle_configure(cuttitta(), kLabels, ErrorInjection{}, cost, 1);
  auto r = oracle->generate(request(build_count_prompt(cuttitta().documents[0], "LOC", kEn), {"\n"}));
  EXPECT_EQ(r.tokens, (std::vector<std::string>{"2", "\n"}));
  EXPECT_DOUBLE_EQ(r.latency_ms, 4.0 + 2 * 3.0);
  r = oracle->generate(request(build_count_prompt(cuttitta().documents[0], "ORG", kEn), {"\n"}));
  EXPECT_EQ(r.tokens, (std::vector<std::string>{"<eos>"}));
  const auto count = build_count_prompt(cuttitta().documents[0], "LOC", kEn);
  r = oracle->generate(request(build_mention_prompt(count, 2, 2, kEn)));
  EXPECT_EQ(r.text, "England");
  EXPECT_EQ(r.tokens.back(), "<eos>");
}

TEST(Oracle, UnknownDocumentIsTyped) {
  auto oracle = oracle_configure(cuttitta(), kLabels, ErrorInjection{}, CostModel{}, 1);
  try {
    oracle->generate(request(build_count_prompt(Document{"x", "unseen text"}, "LOC", kEn)));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::unknown_document);
  }
}

TEST(Oracle, IndexErrorsProduceLowerProbabilityDuplicates) {
  auto corpus = cuttitta();
  ErrorInjection errors;
  errors.p_index = 1.0;
  errors.jitter = 0.0;
  auto oracle = oracle_configure(corpus, kLabels, errors, CostModel{}, 3);
  const auto count = build_count_prompt(corpus.documents[0], "MISC", kEn);
  auto r = oracle->generate(request(build_mention_prompt(count, 1, 1, kEn)));
  EXPECT_NE(r.text, "1995 World Cup");
  ASSERT_EQ(r.tokens.back(), "<eos>");
  for (std::size_t i = 0; i + 1 < r.tokens.size(); ++i) EXPECT_NEAR(std::exp(r.token_logprobs[i]), errors.p_error, 1e-12);
}

TEST(Oracle, SeededRunsAreIdentical) {
  auto corpus = support::synthetic_corpus(5, {.documents = 40});
  ErrorInjection errors;
  errors.p_count = 0.2;
  errors.p_index = 0.2;
  auto dump = [&](std::size_t parallelism) {
    auto oracle = oracle_configure(corpus, kLabels, errors, CostModel{}, 42);
    RunOptions options;
    options.parallelism = parallelism;
    std::string out;
    for (const auto& o : run_corpus(corpus, kLabels, *oracle, options)) out += to_json(o).dump() + "\n";
    return out;
  };
  EXPECT_EQ(dump(1), dump(1));
  EXPECT_EQ(dump(1), dump(4));
}

TEST(Oracle, ValidatesErrorConfig) {
  EXPECT_THROW(ErrorInjection::from_json({{"p_count", 1.5}}), ConfigError);
  auto e = ErrorInjection::from_json(
      {{"mention_overrides", {{{"doc_id", "d"}, {"label", "MISC"}, {"index", 2}, {"text", "Italy"}, {"probability", 0.61}}}}});
  ASSERT_EQ(e.mention_overrides.size(), 1u);
  EXPECT_EQ(ErrorInjection::from_json(e.to_json()).mention_overrides[0].probability, 0.61);
}

TEST(Http, RequestBodyShape) {
  HttpEndpoint e;
  auto body = http_request_body(e, request("hello", {"\n"}));
  EXPECT_EQ(body["prompt"], "hello");
  EXPECT_EQ(body["max_tokens"], 512);
  EXPECT_EQ(body["temperature"], 1.0);
  EXPECT_EQ(body["stop"], nlohmann::json::array({"\n"}));
  EXPECT_EQ(body["logprobs"], true);
  EXPECT_EQ(body["echo"], false);
}

TEST(Http, ParsesTopLevelAndChoicesShapes) {
  auto r = parse_http_response(
      {{"text", "Italy"}, {"tokens", {"Ital", "y"}}, {"token_logprobs", {-0.1, -0.2}}, {"finish_reason", "stop"}}, true);
  EXPECT_EQ(r.tokens, (std::vector<std::string>{"Ital", "y"}));
  EXPECT_EQ(r.stop_reason, StopReason::stop_string);
  r = parse_http_response(
      {{"choices",
        {{{"text", "2"}, {"finish_reason", "length"}, {"logprobs", {{"tokens", {"2"}}, {"token_logprobs", {-0.01}}}}}}}},
      true);
  EXPECT_EQ(r.text, "2");
  EXPECT_EQ(r.stop_reason, StopReason::length);
  EXPECT_THROW(parse_http_response({{"text", "x"}}, true), BackendError);
  EXPECT_NO_THROW(parse_http_response({{"text", "x"}}, false));
}

TEST(Http, StubRoundTrip) {
  const nlohmann::json canned{
      {"text", "Italy"}, {"tokens", {"Ital", "y"}}, {"token_logprobs", {-0.07, -0.01}}, {"finish_reason", "stop"}};
  std::string seen;
  StubServer stub([&](const httplib::Request& req, httplib::Response& res) {
    seen = req.body;
    res.set_content(canned.dump(), "application/json");
  });
  auto r = http_call(stub.endpoint(), request("prompt text", {"\n"}));
  EXPECT_EQ(r.text, "Italy");
  EXPECT_EQ(r.tokens, (std::vector<std::string>{"Ital", "y"}));
  EXPECT_EQ(r.token_logprobs, (std::vector<double>{-0.07, -0.01}));
  EXPECT_EQ(r.stop_reason, StopReason::stop_string);
  EXPECT_EQ(nlohmann::json::parse(seen)["prompt"], "prompt text");
}

TEST(Http, ServerErrorBecomesTransportAfterRetries) {
  std::atomic<int> calls{0};
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  auto endpoint = stub.endpoint();
  endpoint.retries = 2;
  try {
    http_call(endpoint, request("p"));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.kind(), BackendErrorKind::transport);
  }
  EXPECT_EQ(calls.load(), 3);
}

TEST(Http, LatencyCoversServerDelay) {
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    res.set_content(R"({"text":"","tokens":[],"token_logprobs":[],"finish_reason":"stop"})", "application/json");
  });
  auto r = HttpBackend(stub.endpoint()).generate(request("p"));
  EXPECT_GE(r.latency_ms, 50.0);
}

TEST(Http, BoundsRequestsInFlight) {
  std::atomic<int> active{0}, peak{0};
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    const int now = ++active;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    --active;
    res.set_content(R"({"text":"","tokens":[],"token_logprobs":[]})", "application/json");
  });
  auto endpoint = stub.endpoint();
  endpoint.max_in_flight = 2;
  HttpBackend backend(endpoint);
  std::vector<CompletionRequest> reqs(8, request("p"));
  auto batch = backend.generate_batch(reqs);
  EXPECT_EQ(batch.results.size(), 8u);
  EXPECT_LE(peak.load(), 2);
}

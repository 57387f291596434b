#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <set>
#include <thread>

#include "padellm/text.hpp"
#include "padellm//backend.hpp"
#include "padellm/scheduler.hpp"
#include "padellm/tokenizer.hpp"
#include "support/synthetic.hpp"

using namespace padellm;

namespace {

const LabelSet kLabels({"PER", "MISC", "LOC", "ORG"});
const PromptTemplate kEn = PromptTemplate::english();
const Document kDoc{"cuttitta",
                    "Cuttitta announced his retirement after the 1995 World Cup , where he took issue with being "
                    "dropped from the Italy side that faced England in the pool stages."};

std::vector<Mention> sorted(std::vector<Mention> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// Step-1 counts PER=1, MISC=2, LOC=2, ORG=eos with the hand-picked latencies
// of the worked example.
ScriptedBackend cuttitta_fixtures() {
  ScriptedBackend b(CostModel{1.0, 0.0, 0.05});
  SimpleTokenizer tok({"<eos>"});
  auto add = [&](const std::string& prompt, std::vector<std::string> tokens, double latency) {
    std::vector<double> lp(tokens.size(), std::log(0.9));
    b.add({prompt, std::move(tokens), std::move(lp), StopReason::eos, latency});
  };
  auto mention = [&](const std::string& label, int count, int index, const std::string& text, double latency) {
    auto tokens = tok.tokenize(text);
    tokens.push_back("<eos>");
    add(build_mention_prompt(build_count_prompt(kDoc, label, kEn), count, index, kEn), tokens, latency);
  };
  add(build_count_prompt(kDoc, "PER", kEn), {"1", "\n"}, 10);
  add(build_count_prompt(kDoc, "MISC", kEn), {"2", "\n"}, 12);
  add(build_count_prompt(kDoc, "LOC", kEn), {"2", "\n"}, 11);
  add(build_count_prompt(kDoc, "ORG", kEn), {"<eos>"}, 9);
  mention("PER", 1, 1, "Cuttitta", 20);
  mention("MISC", 2, 1, "1995 World Cup", 15);
  mention("MISC", 2, 2, "Italy", 18);
  mention("LOC", 2, 1, "Italy", 22);
  mention("LOC", 2, 2, "England", 19);
  return b;
}

// Wraps a backend and sleeps a random few milliseconds before each call.
class JitteredBackend : public Backend {
 public:
  explicit JitteredBackend(Backend& inner) : inner_(inner) {}
  CompletionResult generate(const CompletionRequest& req) override {
    std::this_thread::sleep_for(std::chrono::microseconds(fnv1a(req.prompt) % 3000));
    return inner_.generate(req);
  }
  BatchResult generate_batch(std::span<const CompletionRequest> reqs) override { return inner_.generate_batch(reqs); }
  std::string_view name() const override { return "jittered"; }

 private:
  Backend& inner_;
};

class ThrowingBackend : public Backend {
 public:
  CompletionResult generate(const CompletionRequest& req) override {
    if (req.prompt.find("<mention") != std::string::npos)
      throw BackendError(BackendErrorKind::transport, "connection refused");
    return make_result({"1", "\n"}, {-0.1, -0.1}, StopReason::stop_string, "<eos>");
  }
  std::string_view name() const override { return "throwing"; }
};

}  // namespace

TEST(DecodePadellm, FanOutOnCuttittaScenario) {
  auto backend = cuttitta_fixtures();
  auto out = decode_padellm(kDoc, kLabels, backend, Parallelism::multi);
  std::size_t counts = 0, mentions = 0;
  for (const auto& t : out.traces) (t.kind == SequenceKind::count ? counts : mentions)++;
  EXPECT_EQ(counts, 4u);
  EXPECT_EQ(mentions, 5u);
  EXPECT_EQ(out.step2_batch_size, 5u);
  EXPECT_TRUE(out.defects.empty());
  EXPECT_EQ(out.raw_mentions.size(), 5u);
}

TEST(DecodePadellm, LatencyLawWorkedExample) {
  auto backend = cuttitta_fixtures();
  auto out = decode_padellm(kDoc, kLabels, backend, Parallelism::multi);
  std::map<std::string, double> by_seq;
  for (const auto& s : out.sequences) by_seq[s.seq_id] = s.latency_ms;
  EXPECT_EQ(by_seq.at("cuttitta/PER/mention-1"), 30);
  EXPECT_EQ(by_seq.at("cuttitta/MISC/mention-1"), 27);
  EXPECT_EQ(by_seq.at("cuttitta/MISC/mention-2"), 30);
  EXPECT_EQ(by_seq.at("cuttitta/LOC/mention-1"), 33);
  EXPECT_EQ(by_seq.at("cuttitta/LOC/mention-2"), 30);
  EXPECT_EQ(by_seq.at("cuttitta/ORG/count"), 9);
  EXPECT_EQ(out.example_latency_ms, 33);
}

TEST(DecodePadellm, BatchModeSizes) {
  auto backend = cuttitta_fixtures();
  auto out = decode_padellm(kDoc, kLabels, backend, Parallelism::batch);
  EXPECT_EQ(out.step1_batch_size, 4u);
  EXPECT_EQ(out.step2_batch_size, 5u);
  EXPECT_EQ(out.example_latency_ms, 12 + 22);
}

TEST(DecodePadellm, ZeroEntityDocument) {
  Corpus corpus;
  corpus.documents.push_back({"z", "nothing to see"});
  corpus.gold.push_back({"z", {}});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  auto out = decode_padellm(corpus.documents[0], kLabels, *oracle, Parallelism::multi);
  EXPECT_EQ(out.traces.size(), 4u);
  EXPECT_EQ(out.step2_batch_size, 0u);
  EXPECT_TRUE(out.raw_mentions.empty());
  EXPECT_EQ(out.sequences.size(), 4u);
}

TEST(DecodePadellm, BackendFailuresBecomeDefects) {
  ThrowingBackend backend;
  auto out = decode_padellm(kDoc, kLabels, backend, Parallelism::multi);
  EXPECT_EQ(out.defects.size(), 4u);
  EXPECT_EQ(out.defects[0].kind, "backend:transport");
  EXPECT_TRUE(out.raw_mentions.empty());
}

TEST(DecodePadellm, CountParseAndEmptyMentionDefects) {
  ScriptedBackend b;
  const LabelSet labels({"PER", "LOC"});
  b.add({build_count_prompt(kDoc, "PER", kEn), {"many", "\n"}, {}, StopReason::eos, 1.0});
  b.add({build_count_prompt(kDoc, "LOC", kEn), {"1", "\n"}, {}, StopReason::eos, 1.0});
  b.add({build_mention_prompt(build_count_prompt(kDoc, "LOC", kEn), 1, 1, kEn), {"<eos>"}, {}, StopReason::eos, 1.0});
  auto out = decode_padellm(kDoc, labels, b, Parallelism::multi);
  ASSERT_EQ(out.defects.size(), 2u);
  EXPECT_EQ(out.defects[0].kind, "count_parse");
  EXPECT_EQ(out.defects[1].kind, "empty_mention");
  EXPECT_TRUE(out.raw_mentions.empty());
}

TEST(DecodePadellm, ProbabilityIsExpOfSpanLogprobs) {
  auto backend = cuttitta_fixtures();
  auto out = decode_padellm(kDoc, kLabels, backend, Parallelism::multi);
  SimpleTokenizer tok;
  for (const auto& m : out.raw_mentions) {
    const double direct = std::pow(0.9, static_cast<double>(tok.tokenize(m.text).size()));
    EXPECT_NEAR(m.probability / direct, 1.0, 1e-12) << m.text;
  }
}

TEST(DecodePadellm, LawsHoldOnNoisyOracle) {
  auto corpus = support::synthetic_corpus(12, {.documents = 60});
  ErrorInjection errors;
  errors.p_count = 0.3;
  errors.p_index = 0.3;
  auto oracle = oracle_configure(corpus, kLabels, errors, CostModel{1.5, 2.0, 0.05}, 9);
  for (const auto& doc : corpus.documents) {
    auto out = decode_padellm(doc, kLabels, *oracle, Parallelism::multi);
    std::size_t step1 = 0, step2 = 0, expected_step2 = 0;
    std::map<std::string, double> count_latency;
    for (const auto& t : out.traces) {
      if (t.kind == SequenceKind::count) {
        ++step1;
        count_latency[t.label] = t.latency_ms;
        expected_step2 += static_cast<std::size_t>(parse_count(t.result, kEn).value);
      } else {
        ++step2;
      }
    }
    EXPECT_EQ(step1, kLabels.size());
    EXPECT_EQ(step2, expected_step2);
    double law = 0.0;
    std::set<std::string> with_mentions;
    for (const auto& t : out.traces) {
      if (t.kind != SequenceKind::mention) continue;
      with_mentions.insert(t.label);
      law = std::max(law, count_latency[t.label] + t.latency_ms);
    }
    for (const auto& [label, l] : count_latency)
      if (!with_mentions.count(label)) law = std::max(law, l);
    EXPECT_DOUBLE_EQ(out.example_latency_ms, law);
    double max_seq = 0.0;
    for (const auto& s : out.sequences) max_seq = std::max(max_seq, s.latency_ms);
    EXPECT_EQ(out.example_latency_ms, max_seq);
  }
}

TEST(DecodeAutoreg, StructuredNullCompletion) {
  ScriptedBackend b;
  const LabelSet labels({"PER"});
  b.add({build_autoreg_prompt(kDoc, Format::structured, labels, kEn),
         {"((", "PER", "):", " (", "NULL", "))", "<eos>"},
         {},
         StopReason::eos,
         5.0});
  auto out = decode_autoreg(kDoc, labels, b, Format::structured);
  EXPECT_TRUE(out.raw_mentions.empty());
  EXPECT_EQ(out.traces.size(), 1u);
  EXPECT_EQ(out.example_latency_ms, 5.0);
}

TEST(DecodeAutoreg, AugmentedJapanSentence) {
  Corpus corpus;
  corpus.documents.push_back({"japan",
                              "Japan, co-hosts of the World Cup in 2002 and ranked 20th in the world by FIFA, are "
                              "favourites to regain their title here."});
  corpus.gold.push_back({"japan", {{"LOC", "Japan"}, {"MISC", "World Cup"}, {"ORG", "FIFA"}}});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  auto out = decode_autoreg(corpus.documents[0], kLabels, *oracle, Format::augmented);
  std::vector<Mention> got;
  for (const auto& m : out.raw_mentions) got.push_back({m.label, m.text});
  EXPECT_EQ(got, corpus.gold[0].mentions);
}

TEST(DecodeAutoreg, TokenCountMatchesSerializerLength) {
  auto corpus = support::synthetic_corpus(13, {.documents = 30});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  SimpleTokenizer tok({"<eos>"});
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto out = decode_autoreg(corpus.documents[i], kLabels, *oracle, Format::structured);
    EXPECT_EQ(out.traces[0].result.generated_token_count,
              tok.tokenize(emit_structured(corpus.gold[i].mentions, kLabels)).size() + 1);
  }
}

TEST(DecodeOnestep, MoretDocument) {
  const LabelSet labels({"ORG", "PER", "GPE", "LOC"});
  Corpus corpus;
  corpus.documents.push_back({"moret", "a licensing deal with Jacques Moret allowing Moret to buy out their women 's"});
  corpus.gold.push_back(
      {"moret", {{"PER", "Jacques Moret"}, {"PER", "Moret"}, {"PER", "their"}, {"PER", "their women"}, {"ORG", "their"}}});
  auto oracle = oracle_configure(corpus, labels, ErrorInjection{}, CostModel{}, 0);
  auto out = decode_onestep(corpus.documents[0], labels, *oracle, Parallelism::multi);
  EXPECT_EQ(out.traces.size(), 4u);
  std::size_t per = 0;
  for (const auto& m : out.raw_mentions) per += m.label == "PER";
  EXPECT_EQ(per, 4u);
}

TEST(DecodeOnestep, AllEmptyLabels) {
  Corpus corpus;
  corpus.documents.push_back({"z", "nothing"});
  corpus.gold.push_back({"z", {}});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  auto out = decode_onestep(corpus.documents[0], kLabels, *oracle, Parallelism::multi);
  EXPECT_EQ(out.traces.size(), 4u);
  for (const auto& t : out.traces) EXPECT_EQ(t.result.text, "[]");
  EXPECT_TRUE(out.raw_mentions.empty());
}

TEST(RunCorpus, NoiselessOracleAgreesAcrossModes) {
  auto corpus = support::synthetic_corpus(14, {.documents = 50});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  for (auto mode : {"padellm-multi", "padellm-batch", "onestep", "autoreg-struct", "autoreg-aug"}) {
    RunOptions options;
    options.mode = decode_mode_from_string(mode);
    auto outcomes = run_corpus(corpus, kLabels, *oracle, options);
    ASSERT_EQ(outcomes.size(), corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i)
      EXPECT_EQ(sorted(outcomes[i].mentions), sorted(corpus.gold[i].mentions)) << mode << " " << corpus.gold[i].doc_id;
  }
}

TEST(RunCorpus, ParallelismDoesNotChangeOutputs) {
  auto corpus = support::synthetic_corpus(15, {.documents = 40});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  RunOptions serial, wide;
  wide.parallelism = 8;
  auto a = run_corpus(corpus, kLabels, *oracle, serial);
  auto b = run_corpus(corpus, kLabels, *oracle, wide);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].mentions, b[i].mentions);
}

TEST(RunCorpus, OrderSurvivesShuffledCompletion) {
  auto corpus = support::synthetic_corpus(16, {.documents = 24});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  JitteredBackend jittered(*oracle);
  RunOptions options;
  options.parallelism = 6;
  std::vector<std::string> streamed;
  auto outcomes = run_corpus(corpus, kLabels, jittered, options, [&](const DecodeOutcome& o) { streamed.push_back(o.doc_id); });
  ASSERT_EQ(streamed.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(streamed[i], corpus.documents[i].id);
    EXPECT_EQ(outcomes[i].doc_id, corpus.documents[i].id);
  }
}

TEST(RunCorpus, RepeatsAverageLatency) {
  auto corpus = support::synthetic_corpus(17, {.documents = 5});
  auto oracle = oracle_configure(corpus, kLabels, ErrorInjection{}, CostModel{}, 0);
  RunOptions options;
  options.repeats = 3;
  for (const auto& o : run_corpus(corpus, kLabels, *oracle, options)) {
    ASSERT_EQ(o.repeat_latencies_ms.size(), 3u);
    EXPECT_DOUBLE_EQ(o.example_latency_ms,
                     (o.repeat_latencies_ms[0] + o.repeat_latencies_ms[1] + o.repeat_latencies_ms[2]) / 3.0);
  }
  options.parallelism = 0;
  EXPECT_THROW(run_corpus(corpus, kLabels, *oracle, options), ConfigError);
}

TEST(Outcome, JsonRoundTrip) {
  auto backend = cuttitta_fixtures();
  auto out = decode_padellm(kDoc, kLabels, backend, Parallelism::multi);
  out.mentions = {{"LOC", "Italy"}};
  auto back = decode_outcome_from_json(to_json(out));
  EXPECT_EQ(to_json(back).dump(), to_json(out).dump());
  EXPECT_EQ(decode_mode_from_string("padellm-batch"), (DecodeMode{Method::padellm, Parallelism::batch}));
  EXPECT_THROW(decode_mode_from_string("beam"), ConfigError);
}

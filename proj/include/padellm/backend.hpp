#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "padellm/completion.hpp"
#include "padellm/corpus.hpp"
#include "padellm/error.hpp"
#include "padellm/templates.hpp"
#include "padellm/tokenizer.hpp"

namespace padellm {

enum class BackendErrorKind { transport, missing_fixture, unknown_document, bad_response };

std::string_view to_string(BackendErrorKind k);

class BackendError : public Error {
 public:
  BackendError(BackendErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  BackendErrorKind kind() const noexcept { return kind_; }

 private:
  BackendErrorKind kind_;
};

struct BatchResult {
  std::vector<CompletionResult> results;  // aligned with the requests
  double latency_ms = 0.0;                // the batch as a whole
};

// Completion backends accept concurrent generate() calls.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual CompletionResult generate(const CompletionRequest& req) = 0;

  // One logical batch. The default issues every request concurrently and
  // reports the wall-clock time of the whole group.
  virtual BatchResult generate_batch(std::span<const CompletionRequest> reqs);

  virtual std::string_view name() const = 0;
};

// Simulated latency: fixed_overhead + ms_per_token * tokens * penalty(batch),
// penalty(b) = 1 + batch_alpha * (b - 1).
struct CostModel {
  double ms_per_token = 1.0;
  double fixed_overhead_ms = 0.0;
  double batch_alpha = 0.05;

  double penalty(std::size_t batch) const;
  double latency(double tokens, std::size_t batch = 1) const;
  void validate() const;

  static CostModel from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Greedy truncation of a token stream: stops after an eos token, after the
// token completing a stop string, or at max_new_tokens.
CompletionResult truncate_generation(std::vector<std::string> tokens, std::vector<double> logprobs,
                                     const CompletionRequest& req, std::string_view eos);

// Replays recorded completions keyed by exact prompt.
class ScriptedBackend : public Backend {
 public:
  struct Fixture {
    std::string prompt;
    std::vector<std::string> tokens;
    std::vector<double> logprobs;
    StopReason finish = StopReason::eos;
    std::optional<double> latency_ms;  // else from the cost model
  };

  explicit ScriptedBackend(CostModel cost = {}, std::string eos = "<eos>");

  // JSON lines {prompt, tokens, logprobs, finish, latency_ms?}.
  static ScriptedBackend load(std::istream& in, CostModel cost = {}, std::string eos = "<eos>");

  void add(Fixture f);
  std::size_t size() const noexcept { return fixtures_.size(); }

  CompletionResult generate(const CompletionRequest& req) override;
  BatchResult generate_batch(std::span<const CompletionRequest> reqs) override;
  std::string_view name() const override { return "scripted"; }

 private:
  const Fixture& lookup(const std::string& prompt) const;
  CompletionResult replay(const Fixture& f, const CompletionRequest& req, std::size_t batch) const;

  CostModel cost_;
  std::string eos_;
  std::map<std::string, Fixture, std::less<>> fixtures_;
};

// Forced answers used to stage specific model errors.
struct CountOverride {
  std::string doc_id;
  std::string label;
  int count = 0;
};

struct MentionOverride {
  std::string doc_id;
  std::string label;
  int index = 1;
  std::string text;
  double probability = 0.5;  // of the whole mention span
};

struct ErrorInjection {
  double p_count = 0.0;  // count off by one
  double p_index = 0.0;  // mention replaced by another label's gold surface
  double p_correct = 0.97;
  double p_error = 0.6;
  double jitter = 0.02;  // uniform noise on per-token probabilities
  std::vector<CountOverride> count_overrides;
  std::vector<MentionOverride> mention_overrides;

  void validate() const;
  static ErrorInjection from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct OracleConfig {
  ErrorInjection errors;
  CostModel cost;
  std::uint64_t seed = 0;
  PromptTemplate tmpl;
};

// Answers every prompt family from gold annotations, tokenized with
// SimpleTokenizer. All randomness is keyed on (seed, prompt), so answers do
// not depend on call order or concurrency.
class OracleBackend : public Backend {
 public:
  OracleBackend(const Corpus& gold, LabelSet labels, OracleConfig config);

  CompletionResult generate(const CompletionRequest& req) override;
  BatchResult generate_batch(std::span<const CompletionRequest> reqs) override;
  std::string_view name() const override { return "oracle"; }

  const OracleConfig& config() const noexcept { return config_; }

 private:
  struct Answer {
    std::vector<std::string> tokens;
    std::vector<double> logprobs;
  };
  Answer answer(const std::string& prompt) const;
  CompletionResult respond(const CompletionRequest& req, std::size_t batch) const;

  std::vector<Document> documents_;
  std::vector<GoldAnnotation> gold_;
  std::map<std::string, std::size_t, std::less<>> by_text_;
  LabelSet labels_;
  OracleConfig config_;
  SimpleTokenizer tokenizer_;
};

std::unique_ptr<OracleBackend> oracle_configure(const Corpus& gold, const LabelSet& labels,
                                                const ErrorInjection& errors, const CostModel& cost,
                                                std::uint64_t seed, const PromptTemplate& t = {});

struct HttpEndpoint {
  std::string base_url = "http://127.0.0.1:8000";
  std::string path = "/v1/completions";
  std::string model;
  double timeout_s = 60.0;
  int retries = 2;
  double backoff_ms = 200.0;  // doubled after each failed attempt
  std::size_t max_in_flight = 8;
  bool require_logprobs = true;
  std::string api_key_env = "PADELLM_API_KEY";

  static HttpEndpoint from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Request body {prompt, max_tokens, temperature, stop, logprobs, echo}.
nlohmann::json http_request_body(const HttpEndpoint& endpoint, const CompletionRequest& req);
// Maps {text, tokens, token_logprobs, finish_reason} (top level, or OpenAI
// style under choices[0] with logprobs.{tokens, token_logprobs}).
CompletionResult parse_http_response(const nlohmann::json& body, bool require_logprobs);

// One request with retries; latency is wall-clock around the successful call.
CompletionResult http_call(const HttpEndpoint& endpoint, const CompletionRequest& req);

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpEndpoint endpoint);

  CompletionResult generate(const CompletionRequest& req) override;
  std::string_view name() const override { return "http"; }

 private:
  HttpEndpoint endpoint_;
  std::counting_semaphore<> in_flight_;
};

}  // namespace padellm

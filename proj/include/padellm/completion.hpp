#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace padellm {

// Greedy decoding (beam size 1) is the only supported mode.
struct CompletionRequest {
  std::string prompt;
  int max_new_tokens = 512;
  double temperature = 1.0;
  std::vector<std::string> stop;
  bool want_logprobs = true;
};

enum class StopReason { eos, stop_string, length };

std::string_view to_string(StopReason r);
StopReason stop_reason_from_string(std::string_view s);

struct CompletionResult {
  std::vector<std::string> tokens;
  std::vector<double> token_logprobs;  // natural log, aligned with tokens
  std::string text;                    // concatenated tokens, eos excluded
  StopReason stop_reason = StopReason::eos;
  double latency_ms = 0.0;
  std::size_t generated_token_count = 0;
};

// Half-open token index range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end <= begin; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Text the model produced before the first eos token.
std::string visible_text(const CompletionResult& r, std::string_view eos);

// Tokens overlapping the byte range [char_begin, char_end) of visible_text().
TokenSpan tokens_covering(const CompletionResult& r, std::string_view eos, std::size_t char_begin,
                          std::size_t char_end);

// exp of the summed log-probabilities over `span`; 1 when logprobs are absent.
double span_probability(const CompletionResult& r, TokenSpan span);

// Builds a result from tokens, filling text and count. An eos token, when
// present, must be last and is excluded from text.
CompletionResult make_result(std::vector<std::string> tokens, std::vector<double> logprobs,
                             StopReason reason, std::string_view eos);

nlohmann::json to_json(const CompletionRequest& r);
nlohmann::json to_json(const CompletionResult& r);
CompletionResult completion_result_from_json(const nlohmann::json& j);

}  // namespace padellm

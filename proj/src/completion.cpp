#include "padellm/completion.hpp"

#include <cmath>

#include "padellm/error.hpp"

namespace padellm {

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::eos: return "eos";
    case StopReason::stop_string: return "stop_string";
    case StopReason::length: return "length";
  }
  return "eos";
}

StopReason stop_reason_from_string(std::string_view s) {
  if (s == "eos" || s == "eos_token") return StopReason::eos;
  if (s == "stop" || s == "stop_string") return StopReason::stop_string;
  if (s == "length") return StopReason::length;
  throw ParseError("unknown finish reason '" + std::string(s) + "'");
}

namespace {

std::size_t visible_token_count(const CompletionResult& r, std::string_view eos) {
  for (std::size_t i = 0; i < r.tokens.size(); ++i)
    if (r.tokens[i] == eos) return i;
  return r.tokens.size();
}

}  // namespace

std::string visible_text(const CompletionResult& r, std::string_view eos) {
  if (r.tokens.empty()) {
    std::string_view t = r.text;
    if (auto pos = t.find(eos); !eos.empty() && pos != std::string_view::npos) t = t.substr(0, pos);
    return std::string(t);
  }
  std::string out;
  const std::size_t n = visible_token_count(r, eos);
  for (std::size_t i = 0; i < n; ++i) out += r.tokens[i];
  return out;
}

TokenSpan tokens_covering(const CompletionResult& r, std::string_view eos, std::size_t char_begin,
                          std::size_t char_end) {
  const std::size_t n = visible_token_count(r, eos);
  TokenSpan span{n, n};
  std::size_t offset = 0;
  bool found = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t tb = offset;
    const std::size_t te = offset + r.tokens[i].size();
    offset = te;
    if (te <= char_begin || tb >= char_end) continue;
    if (!found) span.begin = i;
    span.end = i + 1;
    found = true;
  }
  if (!found) return {0, 0};
  return span;
}

double span_probability(const CompletionResult& r, TokenSpan span) {
  if (r.token_logprobs.empty()) return 1.0;
  double sum = 0.0;
  for (std::size_t i = span.begin; i < span.end && i < r.token_logprobs.size(); ++i) sum += r.token_logprobs[i];
  return std::exp(sum);
}

CompletionResult make_result(std::vector<std::string> tokens, std::vector<double> logprobs, StopReason reason,
                             std::string_view eos) {
  CompletionResult r;
  r.tokens = std::move(tokens);
  r.token_logprobs = std::move(logprobs);
  r.stop_reason = reason;
  r.generated_token_count = r.tokens.size();
  r.text = visible_text(r, eos);
  return r;
}

nlohmann::json to_json(const CompletionRequest& r) {
  return {{"prompt", r.prompt},
          {"max_new_tokens", r.max_new_tokens},
          {"temperature", r.temperature},
          {"stop", r.stop},
          {"want_logprobs", r.want_logprobs}};
}

nlohmann::json to_json(const CompletionResult& r) {
  return {{"tokens", r.tokens},
          {"token_logprobs", r.token_logprobs},
          {"text", r.text},
          {"stop_reason", to_string(r.stop_reason)},
          {"latency_ms", r.latency_ms},
          {"generated_token_count", r.generated_token_count}};
}

CompletionResult completion_result_from_json(const nlohmann::json& j) {
  CompletionResult r;
  r.tokens = j.value("tokens", std::vector<std::string>{});
  r.token_logprobs = j.value("token_logprobs", std::vector<double>{});
  r.text = j.value("text", std::string{});
  r.stop_reason = stop_reason_from_string(j.value("stop_reason", std::string("eos")));
  r.latency_ms = j.value("latency_ms", 0.0);
  r.generated_token_count = j.value("generated_token_count", r.tokens.size());
  return r;
}

}  // namespace padellm

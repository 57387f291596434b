#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "padellm/backend.hpp"

namespace padellm {

HttpEndpoint HttpEndpoint::from_json(const nlohmann::json& j) {
  HttpEndpoint e;
  try {
    e.base_url = j.value("base_url", e.base_url);
    e.path = j.value("path", e.path);
    e.model = j.value("model", e.model);
    e.timeout_s = j.value("timeout_s", e.timeout_s);
    e.retries = j.value("retries", e.retries);
    e.backoff_ms = j.value("backoff_ms", e.backoff_ms);
    e.max_in_flight = j.value("max_in_flight", e.max_in_flight);
    e.require_logprobs = j.value("require_logprobs", e.require_logprobs);
    e.api_key_env = j.value("api_key_env", e.api_key_env);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid http endpoint config: ") + ex.what());
  }
  if (e.timeout_s <= 0 || e.retries < 0 || e.backoff_ms < 0 || e.max_in_flight == 0)
    throw ConfigError("http endpoint needs a positive timeout and in-flight limit, non-negative retries");
  return e;
}

nlohmann::json HttpEndpoint::to_json() const {
  return {{"base_url", base_url},       {"path", path},
          {"model", model},             {"timeout_s", timeout_s},
          {"retries", retries},         {"backoff_ms", backoff_ms},
          {"max_in_flight", max_in_flight}, {"require_logprobs", require_logprobs},
          {"api_key_env", api_key_env}};
}

nlohmann::json http_request_body(const HttpEndpoint& endpoint, const CompletionRequest& req) {
  nlohmann::json body{{"prompt", req.prompt},
                      {"max_tokens", req.max_new_tokens},
                      {"temperature", req.temperature},
                      {"stop", req.stop},
                      {"logprobs", true},
                      {"echo", false}};
  if (!endpoint.model.empty()) body["model"] = endpoint.model;
  return body;
}

CompletionResult parse_http_response(const nlohmann::json& body, bool require_logprobs) {
  try {
    const nlohmann::json* src = &body;
    const nlohmann::json* logprobs = &body;
    if (body.contains("choices")) {
      const auto& choices = body.at("choices");
      if (!choices.is_array() || choices.empty())
        throw BackendError(BackendErrorKind::bad_response, "response has no choices");
      src = &choices.front();
      logprobs = src->contains("logprobs") && (*src)["logprobs"].is_object() ? &(*src)["logprobs"] : nullptr;
    }
    CompletionResult r;
    r.text = src->value("text", std::string{});
    if (logprobs && logprobs->contains("tokens") && (*logprobs)["tokens"].is_array())
      r.tokens = (*logprobs)["tokens"].get<std::vector<std::string>>();
    if (logprobs && logprobs->contains("token_logprobs") && (*logprobs)["token_logprobs"].is_array())
      for (const auto& v : (*logprobs)["token_logprobs"]) r.token_logprobs.push_back(v.is_number() ? v.get<double>() : 0.0);
    if (require_logprobs && (r.token_logprobs.empty() && !r.text.empty()))
      throw BackendError(BackendErrorKind::bad_response, "response carries no token log-probabilities");
    if (!r.token_logprobs.empty() && r.token_logprobs.size() != r.tokens.size())
      throw BackendError(BackendErrorKind::bad_response, "tokens and token_logprobs differ in length");
    if (r.tokens.empty() && !r.text.empty()) r.tokens.push_back(r.text);

    const auto finish = src->contains("finish_reason") && (*src)["finish_reason"].is_string()
                            ? (*src)["finish_reason"].get<std::string>()
                            : std::string("eos");
    r.stop_reason = stop_reason_from_string(finish);
    // vLLM style: finish_reason "stop" with a null stop_reason means eos
    if (r.stop_reason == StopReason::stop_string && src->contains("stop_reason") && (*src)["stop_reason"].is_null())
      r.stop_reason = StopReason::eos;
    r.generated_token_count = r.tokens.size();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(BackendErrorKind::bad_response, std::string("malformed completion response: ") + e.what());
  } catch (const ParseError& e) {
    throw BackendError(BackendErrorKind::bad_response, e.what());
  }
}

CompletionResult http_call(const HttpEndpoint& endpoint, const CompletionRequest& req) {
  httplib::Client client(endpoint.base_url);
  const auto sec = static_cast<time_t>(endpoint.timeout_s);
  const auto usec = static_cast<time_t>((endpoint.timeout_s - static_cast<double>(sec)) * 1e6);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);

  httplib::Headers headers;
  if (const char* key = std::getenv(endpoint.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);
  const std::string payload = http_request_body(endpoint, req).dump();

  std::string last_error;
  double backoff = endpoint.backoff_ms;
  for (int attempt = 0; attempt <= endpoint.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(backoff));
      backoff *= 2;
    }
    const auto start = std::chrono::steady_clock::now();
    auto res = client.Post(endpoint.path, headers, payload, "application/json");
    const double elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(BackendErrorKind::bad_response, std::string("response is not JSON: ") + e.what());
    }
    auto r = parse_http_response(body, endpoint.require_logprobs && req.want_logprobs);
    r.latency_ms = elapsed;
    return r;
  }
  throw BackendError(BackendErrorKind::transport,
                     last_error + " after " + std::to_string(endpoint.retries + 1) + " attempt(s)");
}

HttpBackend::HttpBackend(HttpEndpoint endpoint)
    : endpoint_(std::move(endpoint)),
      in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(endpoint_.max_in_flight, 1))) {}

CompletionResult HttpBackend::generate(const CompletionRequest& req) {
  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<>& s;
    ~Release() { s.release(); }
  } release{in_flight_};
  return http_call(endpoint_, req);
}

}  // namespace padellm

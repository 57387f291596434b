#include "padellm/backend.hpp"

#include <chrono>
#include <istream>

#include "padellm/parallel.hpp"
#include "padellm/text.hpp"

namespace padellm {

std::string_view to_string(BackendErrorKind k) {
  switch (k) {
    case BackendErrorKind::transport: return "transport";
    case BackendErrorKind::missing_fixture: return "missing_fixture";
    case BackendErrorKind::unknown_document: return "unknown_document";
    case BackendErrorKind::bad_response: return "bad_response";
  }
  return "transport";
}

BatchResult Backend::generate_batch(std::span<const CompletionRequest> reqs) {
  BatchResult out;
  out.results.resize(reqs.size());
  const auto start = std::chrono::steady_clock::now();
  parallel_for(reqs.size(), reqs.size(), [&](std::size_t i) { out.results[i] = generate(reqs[i]); });
  out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// CostModel -----------------------------------------------------------------

double CostModel::penalty(std::size_t batch) const {
  return 1.0 + batch_alpha * static_cast<double>(batch > 0 ? batch - 1 : 0);
}

double CostModel::latency(double tokens, std::size_t batch) const {
  return fixed_overhead_ms + ms_per_token * tokens * penalty(batch);
}

void CostModel::validate() const {
  if (ms_per_token < 0 || fixed_overhead_ms < 0 || batch_alpha < 0)
    throw ConfigError("cost model components must be non-negative");
}

CostModel CostModel::from_json(const nlohmann::json& j) {
  CostModel c;
  c.ms_per_token = j.value("ms_per_token", c.ms_per_token);
  c.fixed_overhead_ms = j.value("fixed_overhead_ms", c.fixed_overhead_ms);
  c.batch_alpha = j.value("batch_alpha", c.batch_alpha);
  c.validate();
  return c;
}

nlohmann::json CostModel::to_json() const {
  return {{"ms_per_token", ms_per_token}, {"fixed_overhead_ms", fixed_overhead_ms}, {"batch_alpha", batch_alpha}};
}

CompletionResult truncate_generation(std::vector<std::string> tokens, std::vector<double> logprobs,
                                     const CompletionRequest& req, std::string_view eos) {
  StopReason reason = StopReason::eos;
  std::size_t keep = tokens.size();
  std::string text;
  const auto limit = static_cast<std::size_t>(std::max(req.max_new_tokens, 1));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::size_t scan_from = text.size();
    text += tokens[i];
    if (tokens[i] == eos) {
      reason = StopReason::eos;
      keep = i + 1;
      break;
    }
    bool stopped = false;
    for (const auto& s : req.stop) {
      if (s.empty()) continue;
      const std::size_t back = std::min(scan_from, s.size() - 1);
      if (text.find(s, scan_from - back) != std::string::npos) stopped = true;
    }
    if (stopped) {
      reason = StopReason::stop_string;
      keep = i + 1;
      break;
    }
    if (i + 1 == limit) {
      reason = StopReason::length;
      keep = i + 1;
      break;
    }
  }
  tokens.resize(keep);
  if (!req.want_logprobs) {
    logprobs.clear();
  } else {
    logprobs.resize(keep, 0.0);
  }
  return make_result(std::move(tokens), std::move(logprobs), reason, eos);
}

// ScriptedBackend -----------------------------------------------------------

ScriptedBackend::ScriptedBackend(CostModel cost, std::string eos) : cost_(cost), eos_(std::move(eos)) {}

ScriptedBackend ScriptedBackend::load(std::istream& in, CostModel cost, std::string eos) {
  ScriptedBackend backend(cost, std::move(eos));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Fixture f;
      f.prompt = j.at("prompt").get<std::string>();
      f.tokens = j.at("tokens").get<std::vector<std::string>>();
      f.logprobs = j.value("logprobs", std::vector<double>{});
      f.finish = stop_reason_from_string(j.value("finish", std::string("eos")));
      if (j.contains("latency_ms")) f.latency_ms = j["latency_ms"].get<double>();
      if (!f.logprobs.empty() && f.logprobs.size() != f.tokens.size())
        throw ParseError("logprobs and tokens differ in length", lineno);
      backend.add(std::move(f));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed fixture: ") + e.what(), lineno);
    }
  }
  return backend;
}

void ScriptedBackend::add(Fixture f) {
  auto key = f.prompt;
  fixtures_.insert_or_assign(std::move(key), std::move(f));
}

const ScriptedBackend::Fixture& ScriptedBackend::lookup(const std::string& prompt) const {
  auto it = fixtures_.find(prompt);
  if (it == fixtures_.end())
    throw BackendError(BackendErrorKind::missing_fixture, "no fixture for prompt: " + prompt.substr(0, 120));
  return it->second;
}

CompletionResult ScriptedBackend::replay(const Fixture& f, const CompletionRequest& req, std::size_t batch) const {
  auto r = truncate_generation(f.tokens, f.logprobs, req, eos_);
  if (r.tokens.size() == f.tokens.size() && (f.tokens.empty() || f.tokens.back() != eos_)) r.stop_reason = f.finish;
  r.latency_ms = f.latency_ms ? *f.latency_ms : cost_.latency(r.generated_token_count, batch);
  return r;
}

CompletionResult ScriptedBackend::generate(const CompletionRequest& req) { return replay(lookup(req.prompt), req, 1); }

BatchResult ScriptedBackend::generate_batch(std::span<const CompletionRequest> reqs) {
  BatchResult out;
  for (const auto& req : reqs) {
    out.results.push_back(replay(lookup(req.prompt), req, reqs.size()));
    out.latency_ms = std::max(out.latency_ms, out.results.back().latency_ms);
  }
  return out;
}

}  // namespace padellm

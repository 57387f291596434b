#include "padellm/backend.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "padellm/text.hpp"

namespace padellm {

void ErrorInjection::validate() const {
  auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!unit(p_count) || !unit(p_index)) throw ConfigError("error probabilities must lie in [0, 1]");
  if (!(p_correct > 0.0 && p_correct <= 1.0) || !(p_error > 0.0 && p_error <= 1.0))
    throw ConfigError("token probabilities must lie in (0, 1]");
  if (jitter < 0.0) throw ConfigError("jitter must be non-negative");
  for (const auto& o : mention_overrides)
    if (!(o.probability > 0.0 && o.probability <= 1.0))
      throw ConfigError("override probability must lie in (0, 1]");
}

ErrorInjection ErrorInjection::from_json(const nlohmann::json& j) {
  ErrorInjection e;
  try {
    e.p_count = j.value("p_count", e.p_count);
    e.p_index = j.value("p_index", e.p_index);
    e.p_correct = j.value("p_correct", e.p_correct);
    e.p_error = j.value("p_error", e.p_error);
    e.jitter = j.value("jitter", e.jitter);
    for (const auto& o : j.value("count_overrides", nlohmann::json::array()))
      e.count_overrides.push_back(
          {o.at("doc_id").get<std::string>(), o.at("label").get<std::string>(), o.at("count").get<int>()});
    for (const auto& o : j.value("mention_overrides", nlohmann::json::array()))
      e.mention_overrides.push_back({o.at("doc_id").get<std::string>(), o.at("label").get<std::string>(),
                                     o.at("index").get<int>(), o.at("text").get<std::string>(),
                                     o.value("probability", 0.5)});
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid error injection config: ") + ex.what());
  }
  e.validate();
  return e;
}

nlohmann::json ErrorInjection::to_json() const {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& o : count_overrides) counts.push_back({{"doc_id", o.doc_id}, {"label", o.label}, {"count", o.count}});
  nlohmann::json mentions = nlohmann::json::array();
  for (const auto& o : mention_overrides)
    mentions.push_back({{"doc_id", o.doc_id},
                        {"label", o.label},
                        {"index", o.index},
                        {"text", o.text},
                        {"probability", o.probability}});
  return {{"p_count", p_count},   {"p_index", p_index}, {"p_correct", p_correct},       {"p_error", p_error},
          {"jitter", jitter},     {"count_overrides", counts}, {"mention_overrides", mentions}};
}

OracleBackend::OracleBackend(const Corpus& gold, LabelSet labels, OracleConfig config)
    : documents_(gold.documents),
      gold_(gold.gold),
      labels_(std::move(labels)),
      config_(std::move(config)),
      tokenizer_({config_.tmpl.eos_literal}) {
  config_.errors.validate();
  config_.cost.validate();
  config_.tmpl.validate();
  for (std::size_t i = 0; i < documents_.size(); ++i) by_text_.emplace(documents_[i].text, i);
}

namespace {

class TokenScorer {
 public:
  TokenScorer(std::uint64_t seed, const ErrorInjection& e) : rng_(seed), errors_(e) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

  double logprob(bool correct) {
    const double base = correct ? errors_.p_correct : errors_.p_error;
    const double noise = errors_.jitter > 0 ? std::uniform_real_distribution<double>(-errors_.jitter, errors_.jitter)(rng_) : 0.0;
    return std::log(std::clamp(base + noise, 1e-6, 1.0));
  }

  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

 private:
  std::mt19937_64 rng_;
  const ErrorInjection& errors_;
};

}  // namespace

OracleBackend::Answer OracleBackend::answer(const std::string& prompt) const {
  const auto& t = config_.tmpl;
  const auto info = classify_prompt(prompt, t);
  if (!info) throw BackendError(BackendErrorKind::bad_response, "oracle cannot interpret prompt: " + prompt.substr(0, 120));
  auto found = by_text_.find(info->text);
  if (found == by_text_.end())
    throw BackendError(BackendErrorKind::unknown_document, "prompt matches no gold document: " + info->text.substr(0, 120));
  const Document& doc = documents_[found->second];
  const GoldAnnotation& gold = gold_[found->second];
  TokenScorer scorer(fnv1a(prompt, fnv1a(std::to_string(config_.seed))), config_.errors);

  std::optional<std::string> label;
  if (info->kind == PromptInfo::Kind::count || info->kind == PromptInfo::Kind::mention ||
      info->kind == PromptInfo::Kind::onestep) {
    label = labels_.resolve(info->label);
    if (!label) throw BackendError(BackendErrorKind::bad_response, "oracle does not know label '" + info->label + "'");
  }
  std::vector<std::string> same, other;
  for (const auto& m : gold.mentions) (label && m.label == *label ? same : other).push_back(m.text);

  Answer a;
  auto append = [&](std::string_view text, bool correct) {
    for (auto& tok : tokenizer_.tokenize(text)) {
      a.tokens.push_back(std::move(tok));
      a.logprobs.push_back(scorer.logprob(correct));
    }
  };
  auto append_eos = [&] {
    a.tokens.push_back(t.eos_literal);
    a.logprobs.push_back(scorer.logprob(true));
  };

  switch (info->kind) {
    case PromptInfo::Kind::count: {
      int count = static_cast<int>(same.size());
      bool correct = true;
      const auto& overrides = config_.errors.count_overrides;
      auto o = std::find_if(overrides.begin(), overrides.end(),
                            [&](const CountOverride& c) { return c.doc_id == doc.id && c.label == *label; });
      if (o != overrides.end()) {
        correct = o->count == count;
        count = o->count;
      } else if (scorer.uniform() < config_.errors.p_count) {
        count += (count == 0 || scorer.uniform() < 0.5) ? 1 : -1;
        correct = false;
      }
      if (count == 0) {
        append_eos();
      } else {
        append(std::to_string(count), correct);
        append(t.count_terminator, correct);
      }
      break;
    }
    case PromptInfo::Kind::mention: {
      const auto& overrides = config_.errors.mention_overrides;
      auto o = std::find_if(overrides.begin(), overrides.end(), [&](const MentionOverride& m) {
        return m.doc_id == doc.id && m.label == *label && m.index == info->index;
      });
      if (o != overrides.end()) {
        auto tokens = tokenizer_.tokenize(o->text);
        const double per_token = std::log(o->probability) / static_cast<double>(std::max<std::size_t>(tokens.size(), 1));
        for (auto& tok : tokens) {
          a.tokens.push_back(std::move(tok));
          a.logprobs.push_back(per_token);
        }
        append_eos();
        break;
      }
      const auto index = static_cast<std::size_t>(info->index);
      std::string text;
      bool correct = false;
      if (index >= 1 && index <= same.size()) {
        text = same[index - 1];
        correct = true;
        if (!other.empty() && scorer.uniform() < config_.errors.p_index) {
          text = other[scorer.pick(other.size())];
          correct = false;
        }
      } else if (!other.empty()) {
        text = other[scorer.pick(other.size())];
      } else if (!same.empty()) {
        text = same.back();
      }
      append(text, correct);
      append_eos();
      break;
    }
    case PromptInfo::Kind::onestep:
      append(emit_onestep(same), true);
      append_eos();
      break;
    case PromptInfo::Kind::autoreg_struct:
      append(emit_structured(gold.mentions, labels_), true);
      append_eos();
      break;
    case PromptInfo::Kind::autoreg_aug:
      append(emit_augmented(doc.text, gold.mentions, labels_).value_or(doc.text), true);
      append_eos();
      break;
  }
  return a;
}

CompletionResult OracleBackend::respond(const CompletionRequest& req, std::size_t batch) const {
  auto a = answer(req.prompt);
  auto r = truncate_generation(std::move(a.tokens), std::move(a.logprobs), req, config_.tmpl.eos_literal);
  r.latency_ms = config_.cost.latency(r.generated_token_count, batch);
  return r;
}

CompletionResult OracleBackend::generate(const CompletionRequest& req) { return respond(req, 1); }

BatchResult OracleBackend::generate_batch(std::span<const CompletionRequest> reqs) {
  BatchResult out;
  out.results.reserve(reqs.size());
  for (const auto& req : reqs) {
    out.results.push_back(respond(req, reqs.size()));
    out.latency_ms = std::max(out.latency_ms, out.results.back().latency_ms);
  }
  return out;
}

std::unique_ptr<OracleBackend> oracle_configure(const Corpus& gold, const LabelSet& labels,
                                                const ErrorInjection& errors, const CostModel& cost,
                                                std::uint64_t seed, const PromptTemplate& t) {
  return std::make_unique<OracleBackend>(gold, labels, OracleConfig{errors, cost, seed, t});
}

}  // namespace padellm

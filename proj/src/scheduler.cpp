#include "padellm/scheduler.hpp"

#include <algorithm>
#include <condition_variable>
#include <mutex>

#include "padellm/parallel.hpp"
#include "padellm/text.hpp"

namespace padellm {

std::string to_string(DecodeMode m) {
  const bool batch = m.parallelism == Parallelism::batch;
  switch (m.method) {
    case Method::padellm: return batch ? "padellm-batch" : "padellm-multi";
    case Method::onestep: return batch ? "onestep-batch" : "onestep";
    case Method::autoreg_aug: return "autoreg-aug";
    case Method::autoreg_struct: return "autoreg-struct";
  }
  return "padellm-multi";
}

DecodeMode decode_mode_from_string(std::string_view s) {
  if (s == "padellm-multi" || s == "padellm") return {Method::padellm, Parallelism::multi};
  if (s == "padellm-batch") return {Method::padellm, Parallelism::batch};
  if (s == "onestep" || s == "onestep-multi") return {Method::onestep, Parallelism::multi};
  if (s == "onestep-batch") return {Method::onestep, Parallelism::batch};
  if (s == "autoreg-aug") return {Method::autoreg_aug, Parallelism::multi};
  if (s == "autoreg-struct") return {Method::autoreg_struct, Parallelism::multi};
  throw ConfigError("unknown decode mode '" + std::string(s) + "'");
}

std::string_view to_string(SequenceKind k) {
  switch (k) {
    case SequenceKind::count: return "count";
    case SequenceKind::mention: return "mention";
    case SequenceKind::autoreg: return "autoreg";
    case SequenceKind::onestep: return "onestep";
  }
  return "count";
}

namespace {

SequenceKind sequence_kind_from_string(std::string_view s) {
  for (auto k : {SequenceKind::count, SequenceKind::mention, SequenceKind::autoreg, SequenceKind::onestep})
    if (to_string(k) == s) return k;
  throw ParseError("unknown sequence kind '" + std::string(s) + "'");
}

struct Call {
  SequenceTrace trace;
  bool ok = false;
};

CompletionRequest make_request(std::string prompt, std::vector<std::string> stop, const DecodeOptions& o) {
  CompletionRequest r;
  r.prompt = std::move(prompt);
  r.max_new_tokens = o.max_new_tokens;
  r.temperature = o.temperature;
  r.stop = std::move(stop);
  r.want_logprobs = true;
  return r;
}

Defect backend_defect(const std::string& seq_id, const BackendError& e) {
  return {seq_id, "backend:" + std::string(to_string(e.kind())), e.what()};
}

// Issues every call either concurrently (multi) or as one batch. Failed calls
// are recorded as defects and left with ok == false. Returns the batch
// latency in batch mode, 0 otherwise.
double execute(std::vector<Call>& calls, Backend& backend, Parallelism parallelism, const DecodeOptions& options,
               std::vector<Defect>& defects) {
  if (calls.empty()) return 0.0;
  std::vector<std::optional<Defect>> failures(calls.size());
  double batch_latency = 0.0;
  if (parallelism == Parallelism::multi) {
    parallel_for(calls.size(), options.max_in_flight, [&](std::size_t i) {
      try {
        calls[i].trace.result = backend.generate(calls[i].trace.request);
        calls[i].trace.latency_ms = calls[i].trace.result.latency_ms;
        calls[i].ok = true;
      } catch (const BackendError& e) {
        failures[i] = backend_defect(calls[i].trace.seq_id, e);
      }
    });
  } else {
    std::vector<CompletionRequest> reqs;
    reqs.reserve(calls.size());
    for (const auto& c : calls) reqs.push_back(c.trace.request);
    try {
      auto batch = backend.generate_batch(reqs);
      batch_latency = batch.latency_ms;
      for (std::size_t i = 0; i < calls.size(); ++i) {
        calls[i].trace.result = std::move(batch.results[i]);
        calls[i].trace.latency_ms = calls[i].trace.result.latency_ms;
        calls[i].ok = true;
      }
    } catch (const BackendError& e) {
      for (std::size_t i = 0; i < calls.size(); ++i) failures[i] = backend_defect(calls[i].trace.seq_id, e);
    }
  }
  for (auto& f : failures)
    if (f) defects.push_back(std::move(*f));
  return batch_latency;
}

std::string seq_prefix(const Document& doc, std::string_view label) { return doc.id + "/" + std::string(label); }

}  // namespace

DecodeOutcome decode_padellm(const Document& doc, const LabelSet& labels, Backend& backend, Parallelism parallelism,
                             const DecodeOptions& options) {
  if (labels.empty()) throw ConfigError("two-step decoding needs at least one label");
  const auto& t = options.tmpl;
  DecodeOutcome out;
  out.doc_id = doc.id;
  out.mode = to_string(DecodeMode{Method::padellm, parallelism});

  // Step 1: one count request per label.
  std::vector<Call> counts;
  std::vector<std::string> count_prompts;
  for (const auto& label : labels.labels()) {
    count_prompts.push_back(build_count_prompt(doc, labels.surface(label), t));
    Call c;
    c.trace.seq_id = seq_prefix(doc, label) + "/count";
    c.trace.label = label;
    c.trace.kind = SequenceKind::count;
    c.trace.request = make_request(count_prompts.back(), {t.count_terminator}, options);
    counts.push_back(std::move(c));
  }
  const double step1_batch = execute(counts, backend, parallelism, options, out.defects);
  out.step1_batch_size = counts.size();

  std::vector<int> parsed(counts.size(), 0);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (!counts[i].ok) continue;
    try {
      parsed[i] = parse_count(counts[i].trace.result, t).value;
    } catch (const CountParseError& e) {
      out.defects.push_back({counts[i].trace.seq_id, "count_parse", e.what()});
    }
  }

  // Step 2: one request per (label, index).
  std::vector<Call> mentions;
  std::vector<std::size_t> owner;  // index into counts
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (int n = 1; n <= parsed[i]; ++n) {
      Call c;
      c.trace.seq_id = seq_prefix(doc, counts[i].trace.label) + "/mention-" + std::to_string(n);
      c.trace.label = counts[i].trace.label;
      c.trace.kind = SequenceKind::mention;
      c.trace.mention_index = n;
      c.trace.request = make_request(build_mention_prompt(count_prompts[i], parsed[i], n, t), {}, options);
      mentions.push_back(std::move(c));
      owner.push_back(i);
    }
  }
  const double step2_batch = execute(mentions, backend, parallelism, options, out.defects);
  out.step2_batch_size = mentions.size();

  for (const auto& c : mentions) {
    if (!c.ok) continue;
    const auto parsed_mention = parse_mention(c.trace.result, t);
    if (parsed_mention.empty()) {
      out.defects.push_back({c.trace.seq_id, "empty_mention", "mention generation is empty"});
      continue;
    }
    out.raw_mentions.push_back({c.trace.label, parsed_mention.text,
                                span_probability(c.trace.result, parsed_mention.span), c.trace.seq_id,
                                *c.trace.mention_index});
  }

  // Latency and length bookkeeping.
  const bool batch = parallelism == Parallelism::batch;
  std::vector<bool> has_mentions(counts.size(), false);
  for (std::size_t k = 0; k < mentions.size(); ++k) {
    const auto& count = counts[owner[k]].trace;
    const auto& m = mentions[k].trace;
    has_mentions[owner[k]] = true;
    SequenceSummary s{m.seq_id, m.label, m.mention_index, 0.0, count.result.generated_token_count};
    s.latency_ms = batch ? step1_batch + step2_batch : count.latency_ms + m.latency_ms;
    if (mentions[k].ok) s.generated_tokens += m.result.generated_token_count;
    out.sequences.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (has_mentions[i]) continue;
    const auto& c = counts[i].trace;
    out.sequences.push_back(
        {c.seq_id, c.label, std::nullopt, batch ? step1_batch : c.latency_ms, c.result.generated_token_count});
  }
  if (batch) {
    out.example_latency_ms = step1_batch + (mentions.empty() ? 0.0 : step2_batch);
  } else {
    for (const auto& s : out.sequences) out.example_latency_ms = std::max(out.example_latency_ms, s.latency_ms);
  }

  for (auto& c : counts) out.traces.push_back(std::move(c.trace));
  for (auto& c : mentions) out.traces.push_back(std::move(c.trace));
  return out;
}

DecodeOutcome decode_autoreg(const Document& doc, const LabelSet& labels, Backend& backend, Format format,
                             const DecodeOptions& options) {
  if (format != Format::augmented && format != Format::structured)
    throw ConfigError("autoregressive decoding supports the aug and struct formats only");
  const auto& t = options.tmpl;
  DecodeOutcome out;
  out.doc_id = doc.id;
  out.mode = to_string(DecodeMode{format == Format::augmented ? Method::autoreg_aug : Method::autoreg_struct,
                                  Parallelism::multi});
  std::vector<Call> calls(1);
  calls[0].trace.seq_id = doc.id + "/autoreg";
  calls[0].trace.kind = SequenceKind::autoreg;
  calls[0].trace.request = make_request(build_autoreg_prompt(doc, format, labels, t), {}, options);
  execute(calls, backend, Parallelism::multi, options, out.defects);
  out.step1_batch_size = 1;

  const auto& trace = calls[0].trace;
  if (calls[0].ok) {
    const std::string visible = visible_text(trace.result, t.eos_literal);
    const auto extraction =
        format == Format::augmented ? parse_augmented(visible, labels) : parse_structured(visible, labels);
    for (const auto& d : extraction.defects) out.defects.push_back({trace.seq_id, "parse", d});
    std::map<std::string, int> per_label;
    for (const auto& item : extraction.items) {
      const auto span = tokens_covering(trace.result, t.eos_literal, item.char_begin, item.char_end);
      out.raw_mentions.push_back({item.mention.label, item.mention.text, span_probability(trace.result, span),
                                  trace.seq_id, ++per_label[item.mention.label]});
    }
  }
  out.sequences.push_back({trace.seq_id, "", std::nullopt, trace.latency_ms, trace.result.generated_token_count});
  out.example_latency_ms = trace.latency_ms;
  out.traces.push_back(std::move(calls[0].trace));
  return out;
}

DecodeOutcome decode_onestep(const Document& doc, const LabelSet& labels, Backend& backend, Parallelism parallelism,
                             const DecodeOptions& options) {
  if (labels.empty()) throw ConfigError("one-step decoding needs at least one label");
  const auto& t = options.tmpl;
  DecodeOutcome out;
  out.doc_id = doc.id;
  out.mode = to_string(DecodeMode{Method::onestep, parallelism});
  std::vector<Call> calls;
  for (const auto& label : labels.labels()) {
    Call c;
    c.trace.seq_id = seq_prefix(doc, label) + "/onestep";
    c.trace.label = label;
    c.trace.kind = SequenceKind::onestep;
    c.trace.request = make_request(build_onestep_prompt(doc, labels.surface(label), t), {}, options);
    calls.push_back(std::move(c));
  }
  const double batch_latency = execute(calls, backend, parallelism, options, out.defects);
  out.step1_batch_size = calls.size();

  for (const auto& c : calls) {
    const auto& trace = c.trace;
    out.sequences.push_back({trace.seq_id, trace.label, std::nullopt,
                             parallelism == Parallelism::batch ? batch_latency : trace.latency_ms,
                             trace.result.generated_token_count});
    if (!c.ok) continue;
    const std::string visible = visible_text(trace.result, t.eos_literal);
    const auto extraction = parse_onestep(visible);
    for (const auto& d : extraction.defects) out.defects.push_back({trace.seq_id, "parse", d});
    int index = 0;
    for (const auto& item : extraction.items) {
      ++index;
      if (trim(item.mention.text).empty()) {
        out.defects.push_back({trace.seq_id, "empty_mention", "empty list item " + std::to_string(index)});
        continue;
      }
      const auto span = tokens_covering(trace.result, t.eos_literal, item.char_begin, item.char_end);
      out.raw_mentions.push_back(
          {trace.label, item.mention.text, span_probability(trace.result, span), trace.seq_id, index});
    }
  }
  if (parallelism == Parallelism::batch) {
    out.example_latency_ms = batch_latency;
  } else {
    for (const auto& s : out.sequences) out.example_latency_ms = std::max(out.example_latency_ms, s.latency_ms);
  }
  for (auto& c : calls) out.traces.push_back(std::move(c.trace));
  return out;
}

DecodeOutcome decode_document(const Document& doc, const LabelSet& labels, Backend& backend, DecodeMode mode,
                              const DecodeOptions& options) {
  switch (mode.method) {
    case Method::padellm: return decode_padellm(doc, labels, backend, mode.parallelism, options);
    case Method::onestep: return decode_onestep(doc, labels, backend, mode.parallelism, options);
    case Method::autoreg_aug: return decode_autoreg(doc, labels, backend, Format::augmented, options);
    case Method::autoreg_struct: return decode_autoreg(doc, labels, backend, Format::structured, options);
  }
  throw ConfigError("unknown decode method");
}

std::vector<DecodeOutcome> run_corpus(const Corpus& corpus, const LabelSet& labels, Backend& backend,
                                      const RunOptions& options,
                                      const std::function<void(const DecodeOutcome&)>& sink) {
  if (options.parallelism < 1) throw ConfigError("parallelism must be at least 1");
  if (options.repeats < 1) throw ConfigError("repeats must be at least 1");
  std::vector<std::optional<DecodeOutcome>> slots(corpus.size());
  std::mutex mu;
  std::size_t next_to_emit = 0;

  parallel_for(corpus.size(), options.parallelism, [&](std::size_t i) {
    const auto& doc = corpus.documents[i];
    DecodeOutcome outcome = decode_document(doc, labels, backend, options.mode, options.decode);
    outcome.repeat_latencies_ms.push_back(outcome.example_latency_ms);
    for (int r = 1; r < options.repeats; ++r)
      outcome.repeat_latencies_ms.push_back(
          decode_document(doc, labels, backend, options.mode, options.decode).example_latency_ms);
    double sum = 0.0;
    for (double l : outcome.repeat_latencies_ms) sum += l;
    outcome.example_latency_ms = sum / static_cast<double>(outcome.repeat_latencies_ms.size());
    outcome.mentions = deduplicate(outcome.raw_mentions, options.dedup, labels);

    std::lock_guard lock(mu);
    slots[i] = std::move(outcome);
    while (next_to_emit < slots.size() && slots[next_to_emit]) {
      if (sink) sink(*slots[next_to_emit]);
      ++next_to_emit;
    }
  });

  std::vector<DecodeOutcome> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

DefectSummary summarize_defects(const std::vector<DecodeOutcome>& outcomes) {
  DefectSummary s;
  for (const auto& o : outcomes) {
    ++s.documents;
    s.sequences += o.traces.size();
    s.defects += o.defects.size();
    if (!o.defects.empty()) ++s.documents_with_defects;
    for (const auto& d : o.defects) ++s.by_kind[d.kind];
  }
  return s;
}

nlohmann::json to_json(const DefectSummary& s) {
  return {{"documents", s.documents}, {"documents_with_defects", s.documents_with_defects},
          {"sequences", s.sequences}, {"defects", s.defects},
          {"defect_rate", s.defect_rate()}, {"by_kind", s.by_kind}};
}

nlohmann::json to_json(const DecodeOutcome& o, bool include_traces) {
  nlohmann::json raw = nlohmann::json::array();
  for (const auto& m : o.raw_mentions)
    raw.push_back({{"label", m.label}, {"text", m.text}, {"probability", m.probability}, {"seq_id", m.seq_id},
                   {"index", m.index}});
  nlohmann::json mentions = nlohmann::json::array();
  for (const auto& m : o.mentions) mentions.push_back({{"label", m.label}, {"text", m.text}});
  nlohmann::json sequences = nlohmann::json::array();
  for (const auto& s : o.sequences) {
    nlohmann::json j{{"seq_id", s.seq_id}, {"label", s.label}, {"latency_ms", s.latency_ms},
                     {"generated_tokens", s.generated_tokens}};
    if (s.mention_index) j["mention_index"] = *s.mention_index;
    sequences.push_back(std::move(j));
  }
  nlohmann::json defects = nlohmann::json::array();
  for (const auto& d : o.defects) defects.push_back({{"seq_id", d.seq_id}, {"kind", d.kind}, {"message", d.message}});

  nlohmann::json j{{"doc_id", o.doc_id},
                   {"mode", o.mode},
                   {"mentions", std::move(mentions)},
                   {"raw_mentions", std::move(raw)},
                   {"sequences", std::move(sequences)},
                   {"defects", std::move(defects)},
                   {"example_latency_ms", o.example_latency_ms},
                   {"repeat_latencies_ms", o.repeat_latencies_ms},
                   {"step1_batch_size", o.step1_batch_size},
                   {"step2_batch_size", o.step2_batch_size}};
  if (include_traces) {
    nlohmann::json traces = nlohmann::json::array();
    for (const auto& t : o.traces) {
      nlohmann::json tj{{"seq_id", t.seq_id},         {"label", t.label},
                        {"kind", to_string(t.kind)},  {"request", to_json(t.request)},
                        {"result", to_json(t.result)}, {"latency_ms", t.latency_ms}};
      if (t.mention_index) tj["mention_index"] = *t.mention_index;
      traces.push_back(std::move(tj));
    }
    j["traces"] = std::move(traces);
  }
  return j;
}

DecodeOutcome decode_outcome_from_json(const nlohmann::json& j) {
  try {
    DecodeOutcome o;
    o.doc_id = j.at("doc_id").get<std::string>();
    o.mode = j.value("mode", std::string{});
    for (const auto& m : j.value("raw_mentions", nlohmann::json::array()))
      o.raw_mentions.push_back({m.at("label"), m.at("text"), m.at("probability"), m.value("seq_id", std::string{}),
                                m.value("index", 0)});
    for (const auto& m : j.value("mentions", nlohmann::json::array())) o.mentions.push_back({m.at("label"), m.at("text")});
    for (const auto& s : j.value("sequences", nlohmann::json::array())) {
      SequenceSummary summary{s.at("seq_id"), s.value("label", std::string{}), std::nullopt, s.at("latency_ms"),
                              s.at("generated_tokens")};
      if (s.contains("mention_index")) summary.mention_index = s["mention_index"].get<int>();
      o.sequences.push_back(std::move(summary));
    }
    for (const auto& d : j.value("defects", nlohmann::json::array()))
      o.defects.push_back({d.at("seq_id"), d.at("kind"), d.value("message", std::string{})});
    o.example_latency_ms = j.at("example_latency_ms").get<double>();
    o.repeat_latencies_ms = j.value("repeat_latencies_ms", std::vector<double>{});
    o.step1_batch_size = j.value("step1_batch_size", std::size_t{0});
    o.step2_batch_size = j.value("step2_batch_size", std::size_t{0});
    for (const auto& t : j.value("traces", nlohmann::json::array())) {
      SequenceTrace trace;
      trace.seq_id = t.at("seq_id").get<std::string>();
      trace.label = t.value("label", std::string{});
      trace.kind = sequence_kind_from_string(t.at("kind").get<std::string>());
      if (t.contains("mention_index")) trace.mention_index = t["mention_index"].get<int>();
      const auto& req = t.at("request");
      trace.request.prompt = req.at("prompt").get<std::string>();
      trace.request.max_new_tokens = req.value("max_new_tokens", 512);
      trace.request.temperature = req.value("temperature", 1.0);
      trace.request.stop = req.value("stop", std::vector<std::string>{});
      trace.request.want_logprobs = req.value("want_logprobs", true);
      trace.result = completion_result_from_json(t.at("result"));
      trace.latency_ms = t.value("latency_ms", trace.result.latency_ms);
      o.traces.push_back(std::move(trace));
    }
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed decode outcome: ") + e.what());
  }
}

}  // namespace padellm

#include "padellm/reformulate.hpp"

#include <algorithm>
#include <cmath>

#include "padellm/tokenizer.hpp"

namespace padellm {

nlohmann::json to_json(const TrainingExample& e) {
  nlohmann::json meta{{"doc_id", e.doc_id}, {"format", to_string(e.format)}};
  if (e.label) meta["label"] = *e.label;
  if (e.mention_index) meta["mention_index"] = *e.mention_index;
  if (e.mention_count) meta["mention_count"] = *e.mention_count;
  if (e.marker_span) meta["marker_span"] = {e.marker_span->first, e.marker_span->second};
  return {{"input", e.input}, {"output", e.output}, {"meta", std::move(meta)}};
}

TrainingExample training_example_from_json(const nlohmann::json& j) {
  TrainingExample e;
  e.input = j.at("input").get<std::string>();
  e.output = j.at("output").get<std::string>();
  const auto& meta = j.at("meta");
  e.doc_id = meta.value("doc_id", std::string{});
  e.format = format_from_string(meta.at("format").get<std::string>());
  if (meta.contains("label")) e.label = meta["label"].get<std::string>();
  if (meta.contains("mention_index")) e.mention_index = meta["mention_index"].get<int>();
  if (meta.contains("mention_count")) e.mention_count = meta["mention_count"].get<int>();
  if (meta.contains("marker_span"))
    e.marker_span = {meta["marker_span"][0].get<std::size_t>(), meta["marker_span"][1].get<std::size_t>()};
  return e;
}

std::vector<TrainingExample> generate_padellm_examples(const Document& doc, const GoldAnnotation& gold,
                                                       const LabelSet& labels, const PromptTemplate& t) {
  std::vector<TrainingExample> out;
  for (const auto& label : labels.labels()) {
    std::vector<const Mention*> of_label;
    for (const auto& m : gold.mentions)
      if (m.label == label) of_label.push_back(&m);
    const std::string input = build_count_prompt(doc, labels.surface(label), t);
    const int count = static_cast<int>(of_label.size());
    if (count == 0) {
      out.push_back({doc.id, input, t.eos_literal, Format::padellm, label, std::nullopt, 0, std::nullopt});
      continue;
    }
    for (int n = 1; n <= count; ++n) {
      TrainingExample e{doc.id, input, emit_padellm_target(count, n, of_label[n - 1]->text, t),
                        Format::padellm, label, n, count, std::nullopt};
      const auto marker_begin = std::to_string(count).size() + t.count_terminator.size();
      e.marker_span = {marker_begin, marker_begin + t.mention_marker(n).size()};
      out.push_back(std::move(e));
    }
  }
  return out;
}

BaselineExamples generate_baseline_examples(const Document& doc, const GoldAnnotation& gold, Format format,
                                            const LabelSet& labels, const PromptTemplate& t) {
  BaselineExamples out;
  switch (format) {
    case Format::structured:
      out.examples.push_back({doc.id, build_autoreg_prompt(doc, format, labels, t),
                              emit_structured(gold.mentions, labels), format, std::nullopt, std::nullopt,
                              std::nullopt, std::nullopt});
      break;
    case Format::augmented: {
      auto target = emit_augmented(doc.text, gold.mentions, labels);
      if (!target) {
        out.skipped = "document '" + doc.id + "': a gold mention does not occur verbatim in the text";
        break;
      }
      out.examples.push_back({doc.id, build_autoreg_prompt(doc, format, labels, t), std::move(*target), format,
                              std::nullopt, std::nullopt, std::nullopt, std::nullopt});
      break;
    }
    case Format::onestep:
      for (const auto& label : labels.labels()) {
        std::vector<std::string> surfaces;
        for (const auto& m : gold.mentions)
          if (m.label == label) surfaces.push_back(m.text);
        const int count = static_cast<int>(surfaces.size());
        out.examples.push_back({doc.id, build_onestep_prompt(doc, labels.surface(label), t), emit_onestep(surfaces),
                                format, label, std::nullopt, count, std::nullopt});
      }
      break;
    case Format::padellm:
      out.examples = generate_padellm_examples(doc, gold, labels, t);
      break;
  }
  return out;
}

namespace {

double percentile(std::vector<std::size_t> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double rank = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = static_cast<std::size_t>(std::ceil(rank));
  const double frac = rank - static_cast<double>(lo);
  return static_cast<double>(v[lo]) * (1.0 - frac) + static_cast<double>(v[hi]) * frac;
}

}  // namespace

CorpusStats corpus_stats(const std::vector<TrainingExample>& examples, const PromptTemplate& t) {
  const SimpleTokenizer tokenizer({t.eos_literal});
  std::map<std::string, std::vector<std::size_t>> tokens;
  std::map<std::string, std::size_t> chars;
  for (const auto& e : examples) {
    const std::string key(to_string(e.format));
    tokens[key].push_back(tokenizer.tokenize(e.output).size());
    chars[key] += e.output.size();
  }
  CorpusStats stats;
  stats.total = examples.size();
  for (auto& [key, lengths] : tokens) {
    LengthSummary s;
    s.count = lengths.size();
    std::size_t sum = 0;
    for (auto l : lengths) sum += l;
    s.mean_tokens = static_cast<double>(sum) / static_cast<double>(s.count);
    s.mean_chars = static_cast<double>(chars[key]) / static_cast<double>(s.count);
    s.p50_tokens = percentile(lengths, 0.5);
    s.p90_tokens = percentile(lengths, 0.9);
    s.max_tokens = *std::max_element(lengths.begin(), lengths.end());
    stats.per_format[key] = s;
  }
  return stats;
}

nlohmann::json to_json(const CorpusStats& s) {
  nlohmann::json formats = nlohmann::json::object();
  for (const auto& [key, v] : s.per_format) {
    formats[key] = {{"count", v.count},           {"mean_chars", v.mean_chars}, {"mean_tokens", v.mean_tokens},
                    {"p50_tokens", v.p50_tokens}, {"p90_tokens", v.p90_tokens}, {"max_tokens", v.max_tokens}};
  }
  return {{"total", s.total}, {"formats", std::move(formats)}};
}

}  // namespace padellm

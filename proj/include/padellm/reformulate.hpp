#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "padellm/corpus.hpp"
#include "padellm/templates.hpp"

namespace padellm {

struct TrainingExample {
  std::string doc_id;
  std::string input;
  std::string output;
  Format format = Format::padellm;
  std::optional<std::string> label;  // canonical
  std::optional<int> mention_index;
  std::optional<int> mention_count;
  // Byte range of the "<mention n>" marker inside `output`, for trainers that
  // mask it out of the loss.
  std::optional<std::pair<std::size_t, std::size_t>> marker_span;
};

nlohmann::json to_json(const TrainingExample& e);
TrainingExample training_example_from_json(const nlohmann::json& j);

// One example per (label, mention index); one eos-only example per label with
// no mentions. Index order follows gold source order.
std::vector<TrainingExample> generate_padellm_examples(const Document& doc, const GoldAnnotation& gold,
                                                       const LabelSet& labels, const PromptTemplate& t);

struct BaselineExamples {
  std::vector<TrainingExample> examples;
  std::optional<std::string> skipped;  // reason the document produced nothing
};

// aug/struct: one example per document. onestep: one example per label.
BaselineExamples generate_baseline_examples(const Document& doc, const GoldAnnotation& gold, Format format,
                                            const LabelSet& labels, const PromptTemplate& t);

struct LengthSummary {
  std::size_t count = 0;
  double mean_chars = 0.0;
  double mean_tokens = 0.0;
  double p50_tokens = 0.0;
  double p90_tokens = 0.0;
  std::size_t max_tokens = 0;
};

struct CorpusStats {
  std::map<std::string, LengthSummary> per_format;  // keyed by format name
  std::size_t total = 0;
};

// Output lengths measured in SimpleTokenizer tokens and in bytes.
CorpusStats corpus_stats(const std::vector<TrainingExample>& examples, const PromptTemplate& t);
nlohmann::json to_json(const CorpusStats& s);

}  // namespace padellm

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "padellm/backend.hpp"
#include "padellm/completion.hpp"
#include "padellm/corpus.hpp"
#include "padellm/dedup.hpp"
#include "padellm/templates.hpp"

namespace padellm {

enum class Method { padellm, onestep, autoreg_aug, autoreg_struct };

// multi: one sequence per worker, latency by per-sequence bookkeeping.
// batch: each decoding step is a single backend batch.
enum class Parallelism { multi, batch };

struct DecodeMode {
  Method method = Method::padellm;
  Parallelism parallelism = Parallelism::multi;

  friend bool operator==(const DecodeMode&, const DecodeMode&) = default;
};

// padellm-multi | padellm-batch | onestep | onestep-batch | autoreg-aug | autoreg-struct
std::string to_string(DecodeMode m);
DecodeMode decode_mode_from_string(std::string_view s);

enum class SequenceKind { count, mention, autoreg, onestep };
std::string_view to_string(SequenceKind k);

// One backend call.
struct SequenceTrace {
  std::string seq_id;
  std::string label;  // empty for autoregressive traces
  SequenceKind kind = SequenceKind::count;
  std::optional<int> mention_index;
  CompletionRequest request;
  CompletionResult result;
  double latency_ms = 0.0;
};

// One logical decoding sequence. For two-step decoding a mention sequence
// spans its label's count call plus its own mention call; labels that stop
// after Step 1 form count-only sequences.
struct SequenceSummary {
  std::string seq_id;
  std::string label;
  std::optional<int> mention_index;
  double latency_ms = 0.0;
  std::size_t generated_tokens = 0;
};

struct Defect {
  std::string seq_id;
  std::string kind;  // count_parse, empty_mention, parse, backend:<kind>
  std::string message;
};

struct DecodeOutcome {
  std::string doc_id;
  std::string mode;
  std::vector<ScoredMention> raw_mentions;
  std::vector<Mention> mentions;  // after de-duplication
  std::vector<SequenceTrace> traces;
  std::vector<SequenceSummary> sequences;
  std::vector<Defect> defects;
  double example_latency_ms = 0.0;
  std::vector<double> repeat_latencies_ms;
  std::size_t step1_batch_size = 0;
  std::size_t step2_batch_size = 0;
};

struct DecodeOptions {
  PromptTemplate tmpl;
  int max_new_tokens = 512;
  double temperature = 1.0;
  std::size_t max_in_flight = 16;  // concurrent calls per document in multi mode
};

DecodeOutcome decode_padellm(const Document& doc, const LabelSet& labels, Backend& backend, Parallelism parallelism,
                             const DecodeOptions& options = {});
// `format` is Format::augmented or Format::structured.
DecodeOutcome decode_autoreg(const Document& doc, const LabelSet& labels, Backend& backend, Format format,
                             const DecodeOptions& options = {});
DecodeOutcome decode_onestep(const Document& doc, const LabelSet& labels, Backend& backend, Parallelism parallelism,
                             const DecodeOptions& options = {});
DecodeOutcome decode_document(const Document& doc, const LabelSet& labels, Backend& backend, DecodeMode mode,
                              const DecodeOptions& options = {});

struct RunOptions {
  DecodeMode mode;
  DedupPolicy dedup;
  std::size_t parallelism = 1;  // documents in flight
  int repeats = 1;              // latency averaged over repeats
  DecodeOptions decode;
};

// Outcomes come back (and reach `sink`) in corpus order whatever the
// completion order. De-duplication fills DecodeOutcome::mentions.
std::vector<DecodeOutcome> run_corpus(const Corpus& corpus, const LabelSet& labels, Backend& backend,
                                      const RunOptions& options,
                                      const std::function<void(const DecodeOutcome&)>& sink = {});

struct DefectSummary {
  std::size_t documents = 0;
  std::size_t documents_with_defects = 0;
  std::size_t sequences = 0;
  std::size_t defects = 0;
  std::map<std::string, std::size_t> by_kind;

  double defect_rate() const { return sequences == 0 ? 0.0 : static_cast<double>(defects) / static_cast<double>(sequences); }
};

DefectSummary summarize_defects(const std::vector<DecodeOutcome>& outcomes);
nlohmann::json to_json(const DefectSummary& s);

nlohmann::json to_json(const DecodeOutcome& o, bool include_traces = true);
DecodeOutcome decode_outcome_from_json(const nlohmann::json& j);

}  // namespace padellm

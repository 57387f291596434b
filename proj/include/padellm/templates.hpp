#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "padellm/completion.hpp"
#include "padellm/corpus.hpp"
#include "padellm/error.hpp"

namespace padellm {

// Output formats: the two-step per-label format, the per-label list variant,
// and the two single-sequence baselines.
enum class Format { padellm, augmented, structured, onestep };

std::string_view to_string(Format f);
Format format_from_string(std::string_view s);

// Every marker string used to frame prompts and targets. Defaults are the
// English frame; chinese() swaps in the Chinese markers.
struct PromptTemplate {
  std::string text_header = "text:\n";
  std::string separator = "\n";
  std::string entity_header = "entity type:\n";
  std::string count_marker = "<num>\n";
  std::string mention_marker_pattern = "<mention {n}>";
  std::string count_terminator = "\n";
  std::string eos_literal = "<eos>";
  std::string onestep_entity_marker = "<entity>";
  std::string onestep_text_marker = "<text>";
  std::string aug_instruction = "Rewrite the text, marking every entity as [mention | type].\n";
  std::string struct_instruction = "List every entity in the text as ((type): (mention), ...).\n";
  std::string label_list_header = "entity types: ";
  std::string answer_header = "output:\n";
  int max_count = 100;

  static PromptTemplate english();
  static PromptTemplate chinese();
  // Overrides fields of `base` (or of the language named by "language").
  static PromptTemplate from_json(const nlohmann::json& j);
  static PromptTemplate load(const std::string& path);
  nlohmann::json to_json() const;

  // Throws ConfigError when a marker is empty or the mention pattern does not
  // carry exactly one "{n}" placeholder.
  void validate() const;

  std::string mention_marker(int index) const;
};

struct ParsedCount {
  int value = 0;
  bool eos = false;  // the model ended the sequence instead of emitting a count

  friend bool operator==(const ParsedCount&, const ParsedCount&) = default;
};

class CountParseError : public ParseError {
 public:
  CountParseError(const std::string& what, std::string raw) : ParseError(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

struct ParsedMention {
  std::string text;
  TokenSpan span;

  bool empty() const noexcept { return text.empty(); }
};

// A mention found in generated text with its byte range in that text.
struct ExtractedMention {
  Mention mention;
  std::size_t char_begin = 0;
  std::size_t char_end = 0;
};

struct Extraction {
  std::vector<ExtractedMention> items;
  std::vector<std::string> defects;

  bool clean() const noexcept { return defects.empty(); }
  std::vector<Mention> mentions() const;
};

// Prompt construction -------------------------------------------------------

std::string build_count_prompt(const Document& doc, std::string_view label_surface, const PromptTemplate& t);
// Throws Error unless 1 <= index <= count.
std::string build_mention_prompt(std::string_view count_prompt, int count, int index, const PromptTemplate& t);
std::string build_onestep_prompt(const Document& doc, std::string_view label_surface, const PromptTemplate& t);
// `format` must be augmented or structured.
std::string build_autoreg_prompt(const Document& doc, Format format, const LabelSet& labels,
                                 const PromptTemplate& t);

// Inverse of the builders above, used by replay backends.
struct PromptInfo {
  enum class Kind { count, mention, onestep, autoreg_aug, autoreg_struct };
  Kind kind = Kind::count;
  std::string text;
  std::string label;  // as written in the prompt (surface form)
  int count = 0;
  int index = 0;
};

std::optional<PromptInfo> classify_prompt(std::string_view prompt, const PromptTemplate& t);

// Target serializers --------------------------------------------------------

// count digits + terminator + marker + mention, or the eos literal when count is 0.
std::string emit_padellm_target(int count, int index, std::string_view mention, const PromptTemplate& t);
// "((PER): (Cuttitta), (LOC): (Italy), (LOC): (England), (ORG): (NULL))": one
// group per mention in source order, then "(NULL)" for labels without mentions.
std::string emit_structured(const std::vector<Mention>& mentions, const LabelSet& labels);
// Inline "[surface | LABEL]" annotations over `text`; nullopt when a mention
// cannot be placed on a free, non-overlapping occurrence.
std::optional<std::string> emit_augmented(std::string_view text, const std::vector<Mention>& mentions,
                                          const LabelSet& labels);
// JSON-style list: ["Jacques Moret", "Moret"].
std::string emit_onestep(const std::vector<std::string>& surfaces);

// Output parsers ------------------------------------------------------------

// Throws CountParseError for non-digit output or counts above t.max_count.
ParsedCount parse_count(const CompletionResult& r, const PromptTemplate& t);
ParsedMention parse_mention(const CompletionResult& r, const PromptTemplate& t);

// Accepts both one group per mention and comma-joined groups "(LOC): (Italy, England)".
Extraction parse_structured(std::string_view text, const LabelSet& labels);
Extraction parse_augmented(std::string_view text, const LabelSet& labels);
// Items carry an empty label.
Extraction parse_onestep(std::string_view text);

}  // namespace padellm

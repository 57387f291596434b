#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace padellm {

// Ordered set of entity labels with an optional display surface per label
// (e.g. "LOC" -> "地点"). Order drives fan-out order and output order.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> labels,
                    std::map<std::string, std::string> surface_map = {});

  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::map<std::string, std::string>& surface_map() const noexcept { return surface_map_; }
  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  bool has_surface_map() const noexcept { return !surface_map_.empty(); }

  bool contains(std::string_view label) const;
  // Position in label order. Throws Error for unknown labels.
  std::size_t index_of(std::string_view label) const;
  // Prompt-facing name: the mapped surface, or the label itself.
  const std::string& surface(std::string_view label) const;
  // Accepts either a canonical label or a mapped surface.
  std::optional<std::string> resolve(std::string_view name) const;

  LabelSet with_surface_map(std::map<std::string, std::string> surface_map) const;

  // {"labels": [...], "surface_map": {...}} or a bare array of labels.
  static LabelSet from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

 private:
  std::vector<std::string> labels_;
  std::map<std::string, std::string> surface_map_;
};

struct Mention {
  std::string label;
  std::string text;

  friend bool operator==(const Mention&, const Mention&) = default;
  friend auto operator<=>(const Mention&, const Mention&) = default;
};

struct Document {
  std::string id;
  std::string text;

  // Empty (after trim) documents are kept but cannot be meaningfully decoded.
  bool decodable() const;
};

struct GoldAnnotation {
  std::string doc_id;
  std::vector<Mention> mentions;  // source order
};

struct RejectedRecord {
  std::size_t line;
  std::string reason;
};

// documents[i] and gold[i] always describe the same document.
struct Corpus {
  std::vector<Document> documents;
  std::vector<GoldAnnotation> gold;
  std::vector<RejectedRecord> rejected;

  std::size_t size() const noexcept { return documents.size(); }
  bool empty() const noexcept { return documents.empty(); }
};

enum class BioPolicy { treat_as_begin, error };

struct BioOptions {
  std::string joiner = " ";  // "" for CJK corpora
  BioPolicy policy = BioPolicy::treat_as_begin;
  std::string id_prefix = "s";
};

Corpus parse_bio(std::istream& in, const LabelSet& labels, const BioOptions& options = {});

// Tags `tokens` with BIO so that decoding yields `mentions`. Each mention must
// match a run of whole tokens (joined with `joiner`), taken left to right.
std::vector<std::string> encode_bio(const std::vector<std::string>& tokens,
                                    const std::vector<Mention>& mentions,
                                    std::string_view joiner = " ");

// One JSON object per line: {"id", "text", "mentions": [{"label", "text"}]}.
Corpus parse_spans_json(std::istream& in, const LabelSet& labels);
void write_spans_json(std::ostream& out, const Corpus& corpus);
nlohmann::json to_json(const Document& doc, const GoldAnnotation& gold);

// Reads a corpus from disk; `format` is "bio" or "spans".
Corpus load_corpus(const std::string& path, std::string_view format, const LabelSet& labels,
                   const BioOptions& options = {});

// Drops documents with more than `max_mentions` gold mentions.
Corpus filter_max_mentions(const Corpus& corpus, std::size_t max_mentions);

// Rewrites canonical labels to their mapped surfaces, and back.
GoldAnnotation apply_label_map(const GoldAnnotation& gold, const LabelSet& labels);
GoldAnnotation invert_label_map(const GoldAnnotation& mapped, const LabelSet& labels);

// Label map file: JSON object {canonical: surface}.
std::map<std::string, std::string> load_label_map(const std::string& path);

}  // namespace padellm

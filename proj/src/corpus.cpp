#include "padellm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "padellm/error.hpp"
#include "padellm/text.hpp"

namespace padellm {

LabelSet::LabelSet(std::vector<std::string> labels, std::map<std::string, std::string> surface_map)
    : labels_(std::move(labels)), surface_map_(std::move(surface_map)) {
  std::set<std::string_view> seen;
  for (const auto& l : labels_) {
    if (l.empty()) throw ConfigError("empty label identifier");
    if (!seen.insert(l).second) throw ConfigError("duplicate label '" + l + "'");
  }
  std::set<std::string_view> surfaces;
  for (const auto& [key, surface] : surface_map_) {
    if (!seen.contains(key)) throw ConfigError("label map key '" + key + "' is not a known label");
    if (surface.empty()) throw ConfigError("empty surface for label '" + key + "'");
    if (!surfaces.insert(surface).second)
      throw ConfigError("surface '" + surface + "' is mapped from more than one label");
  }
}

bool LabelSet::contains(std::string_view label) const {
  return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

std::size_t LabelSet::index_of(std::string_view label) const {
  auto it = std::find(labels_.begin(), labels_.end(), label);
  if (it == labels_.end()) throw Error("unknown label '" + std::string(label) + "'");
  return static_cast<std::size_t>(it - labels_.begin());
}

const std::string& LabelSet::surface(std::string_view label) const {
  auto it = surface_map_.find(std::string(label));
  if (it != surface_map_.end()) return it->second;
  return labels_.at(index_of(label));
}

std::optional<std::string> LabelSet::resolve(std::string_view name) const {
  if (contains(name)) return std::string(name);
  for (const auto& [key, surface] : surface_map_)
    if (surface == name) return key;
  return std::nullopt;
}

LabelSet LabelSet::with_surface_map(std::map<std::string, std::string> surface_map) const {
  return LabelSet(labels_, std::move(surface_map));
}

LabelSet LabelSet::from_json(const nlohmann::json& j) {
  try {
    if (j.is_array()) return LabelSet(j.get<std::vector<std::string>>());
    std::map<std::string, std::string> map;
    if (j.contains("surface_map")) map = j.at("surface_map").get<std::map<std::string, std::string>>();
    return LabelSet(j.at("labels").get<std::vector<std::string>>(), std::move(map));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid label set: ") + e.what());
  }
}

nlohmann::json LabelSet::to_json() const {
  nlohmann::json j;
  j["labels"] = labels_;
  j["surface_map"] = nlohmann::json::object();
  for (const auto& [k, v] : surface_map_) j["surface_map"][k] = v;
  return j;
}

bool Document::decodable() const { return !trim(text).empty(); }

namespace {

struct BioTag {
  char prefix;  // 'B', 'I' or 'O'
  std::string label;
};

BioTag split_tag(const std::string& tag, std::size_t line) {
  if (tag == "O") return {'O', {}};
  if (tag.size() < 3 || tag[1] != '-' || (tag[0] != 'B' && tag[0] != 'I'))
    throw ParseError("malformed BIO tag '" + tag + "'", line);
  return {tag[0], tag.substr(2)};
}

class SentenceBuilder {
 public:
  SentenceBuilder(const LabelSet& labels, const BioOptions& options, Corpus& out)
      : labels_(labels), options_(options), out_(out) {}

  void add(std::string token, const std::string& tag, std::size_t line) {
    BioTag t = split_tag(tag, line);
    if (t.prefix != 'O' && !labels_.contains(t.label))
      throw ParseError("unknown label in tag '" + tag + "'", line);
    if (t.prefix == 'I' && (!open_ || open_label_ != t.label)) {
      if (options_.policy == BioPolicy::error)
        throw ParseError("tag '" + tag + "' without a preceding B-" + t.label, line);
      t.prefix = 'B';
    }
    if (t.prefix != 'I') close();
    if (t.prefix == 'B') {
      open_ = true;
      open_label_ = t.label;
      open_begin_ = tokens_.size();
    }
    tokens_.push_back(std::move(token));
  }

  void finish() {
    close();
    if (tokens_.empty()) return;
    Document doc{options_.id_prefix + std::to_string(out_.documents.size()), join(tokens_, options_.joiner)};
    out_.gold.push_back({doc.id, std::move(mentions_)});
    out_.documents.push_back(std::move(doc));
    tokens_.clear();
    mentions_.clear();
  }

 private:
  void close() {
    if (!open_) return;
    std::vector<std::string> run(tokens_.begin() + static_cast<std::ptrdiff_t>(open_begin_), tokens_.end());
    mentions_.push_back({open_label_, join(run, options_.joiner)});
    open_ = false;
  }

  const LabelSet& labels_;
  const BioOptions& options_;
  Corpus& out_;
  std::vector<std::string> tokens_;
  std::vector<Mention> mentions_;
  bool open_ = false;
  std::string open_label_;
  std::size_t open_begin_ = 0;
};

}  // namespace

Corpus parse_bio(std::istream& in, const LabelSet& labels, const BioOptions& options) {
  Corpus corpus;
  SentenceBuilder builder(labels, options, corpus);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto fields = split_whitespace(line);
    if (fields.empty()) {
      builder.finish();
      continue;
    }
    if (fields.front() == "-DOCSTART-") continue;
    if (fields.size() < 2) throw ParseError("expected a token and a tag", lineno);
    builder.add(std::string(fields.front()), std::string(fields.back()), lineno);
  }
  builder.finish();
  return corpus;
}

std::vector<std::string> encode_bio(const std::vector<std::string>& tokens,
                                    const std::vector<Mention>& mentions, std::string_view joiner) {
  std::vector<std::string> tags(tokens.size(), "O");
  std::size_t cursor = 0;
  for (const auto& m : mentions) {
    bool placed = false;
    for (std::size_t i = cursor; i < tokens.size() && !placed; ++i) {
      std::string run;
      for (std::size_t j = i; j < tokens.size(); ++j) {
        if (j > i) run += joiner;
        run += tokens[j];
        if (run.size() > m.text.size()) break;
        if (run == m.text) {
          tags[i] = "B-" + m.label;
          for (std::size_t k = i + 1; k <= j; ++k) tags[k] = "I-" + m.label;
          cursor = j + 1;
          placed = true;
          break;
        }
      }
    }
    if (!placed) throw Error("mention '" + m.text + "' does not align with the token sequence");
  }
  return tags;
}

Corpus parse_spans_json(std::istream& in, const LabelSet& labels) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    Document doc;
    GoldAnnotation gold;
    std::optional<std::string> rejection;
    try {
      auto j = nlohmann::json::parse(line);
      doc.id = j.at("id").get<std::string>();
      doc.text = j.at("text").get<std::string>();
      gold.doc_id = doc.id;
      for (const auto& m : j.at("mentions")) {
        auto label = m.at("label").get<std::string>();
        auto text = m.at("text").get<std::string>();
        auto canonical = labels.resolve(label);
        if (!canonical) {
          rejection = "unknown label '" + label + "'";
        } else if (text.empty()) {
          rejection = "empty mention text";
        } else {
          gold.mentions.push_back({*canonical, std::move(text)});
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), lineno);
    }
    if (!ids.insert(doc.id).second) throw ParseError("duplicate document id '" + doc.id + "'", lineno);
    if (rejection) {
      corpus.rejected.push_back({lineno, doc.id + ": " + *rejection});
      continue;
    }
    corpus.documents.push_back(std::move(doc));
    corpus.gold.push_back(std::move(gold));
  }
  return corpus;
}

nlohmann::json to_json(const Document& doc, const GoldAnnotation& gold) {
  nlohmann::json mentions = nlohmann::json::array();
  for (const auto& m : gold.mentions) mentions.push_back({{"label", m.label}, {"text", m.text}});
  return {{"id", doc.id}, {"text", doc.text}, {"mentions", std::move(mentions)}};
}

void write_spans_json(std::ostream& out, const Corpus& corpus) {
  for (std::size_t i = 0; i < corpus.size(); ++i) out << to_json(corpus.documents[i], corpus.gold[i]).dump() << '\n';
}

Corpus load_corpus(const std::string& path, std::string_view format, const LabelSet& labels,
                   const BioOptions& options) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus '" + path + "'");
  if (format == "bio") return parse_bio(in, labels, options);
  if (format == "spans" || format == "json") return parse_spans_json(in, labels);
  throw ConfigError("unknown corpus format '" + std::string(format) + "'");
}

Corpus filter_max_mentions(const Corpus& corpus, std::size_t max_mentions) {
  Corpus out;
  out.rejected = corpus.rejected;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus.gold[i].mentions.size() > max_mentions) continue;
    out.documents.push_back(corpus.documents[i]);
    out.gold.push_back(corpus.gold[i]);
  }
  return out;
}

GoldAnnotation apply_label_map(const GoldAnnotation& gold, const LabelSet& labels) {
  GoldAnnotation out{gold.doc_id, {}};
  out.mentions.reserve(gold.mentions.size());
  const auto& map = labels.surface_map();
  for (const auto& m : gold.mentions) {
    if (map.empty()) {
      out.mentions.push_back(m);
      continue;
    }
    auto it = map.find(m.label);
    if (it == map.end()) throw Error("label '" + m.label + "' is missing from the label map");
    out.mentions.push_back({it->second, m.text});
  }
  return out;
}

GoldAnnotation invert_label_map(const GoldAnnotation& mapped, const LabelSet& labels) {
  GoldAnnotation out{mapped.doc_id, {}};
  out.mentions.reserve(mapped.mentions.size());
  for (const auto& m : mapped.mentions) {
    std::optional<std::string> canonical;
    if (!labels.has_surface_map()) {
      if (labels.contains(m.label)) canonical = m.label;
    } else {
      for (const auto& [key, surface] : labels.surface_map())
        if (surface == m.label) canonical = key;
    }
    if (!canonical) throw Error("surface '" + m.label + "' has no inverse in the label map");
    out.mentions.push_back({*canonical, m.text});
  }
  return out;
}

std::map<std::string, std::string> load_label_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open label map '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid label map '" + path + "': " + e.what());
  }
}

}  // namespace padellm

#include "padellm/templates.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "padellm/text.hpp"

namespace padellm {

std::string_view to_string(Format f) {
  switch (f) {
    case Format::padellm: return "padellm";
    case Format::augmented: return "aug";
    case Format::structured: return "struct";
    case Format::onestep: return "onestep";
  }
  return "padellm";
}

Format format_from_string(std::string_view s) {
  if (s == "padellm") return Format::padellm;
  if (s == "aug" || s == "augmented") return Format::augmented;
  if (s == "struct" || s == "structured") return Format::structured;
  if (s == "onestep") return Format::onestep;
  throw ConfigError("unknown format '" + std::string(s) + "'");
}

// PromptTemplate ------------------------------------------------------------

PromptTemplate PromptTemplate::english() { return {}; }

PromptTemplate PromptTemplate::chinese() {
  PromptTemplate t;
  t.text_header = "文本:\n";
  t.entity_header = "指定NER标签:\n";
  t.count_marker = "<数量>\n";
  t.mention_marker_pattern = "<第{n}文段>";
  t.aug_instruction = "改写文本，将每个实体标注为[文段 | 类型]。\n";
  t.struct_instruction = "按((类型): (文段), ...)的格式列出文本中的所有实体。\n";
  t.label_list_header = "实体类型: ";
  t.answer_header = "输出:\n";
  return t;
}

#define PADELLM_TEMPLATE_FIELDS(X)                                                                  \
  X(text_header) X(separator) X(entity_header) X(count_marker) X(mention_marker_pattern)            \
  X(count_terminator) X(eos_literal) X(onestep_entity_marker) X(onestep_text_marker)                \
  X(aug_instruction) X(struct_instruction) X(label_list_header) X(answer_header) X(max_count)

PromptTemplate PromptTemplate::from_json(const nlohmann::json& j) {
  PromptTemplate t;
  try {
    const auto language = j.value("language", std::string("en"));
    if (language == "zh") {
      t = chinese();
    } else if (language != "en") {
      throw ConfigError("unknown template language '" + language + "'");
    }
#define X(field) \
  if (j.contains(#field)) j.at(#field).get_to(t.field);
    PADELLM_TEMPLATE_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid template config: ") + e.what());
  }
  t.validate();
  return t;
}

PromptTemplate PromptTemplate::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open template config '" + path + "'");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid template config '" + path + "': " + e.what());
  }
}

nlohmann::json PromptTemplate::to_json() const {
  nlohmann::json j;
#define X(field) j[#field] = field;
  PADELLM_TEMPLATE_FIELDS(X)
#undef X
  return j;
}

#undef PADELLM_TEMPLATE_FIELDS

void PromptTemplate::validate() const {
  const std::pair<const char*, const std::string*> markers[] = {
      {"text_header", &text_header},
      {"entity_header", &entity_header},
      {"count_marker", &count_marker},
      {"mention_marker_pattern", &mention_marker_pattern},
      {"count_terminator", &count_terminator},
      {"eos_literal", &eos_literal},
      {"onestep_entity_marker", &onestep_entity_marker},
      {"onestep_text_marker", &onestep_text_marker},
      {"aug_instruction", &aug_instruction},
      {"struct_instruction", &struct_instruction},
      {"answer_header", &answer_header},
  };
  for (const auto& [name, value] : markers)
    if (value->empty()) throw ConfigError(std::string("template marker '") + name + "' is empty");
  const auto first = mention_marker_pattern.find("{n}");
  if (first == std::string::npos || mention_marker_pattern.find("{n}", first + 1) != std::string::npos)
    throw ConfigError("mention_marker_pattern must contain exactly one {n} placeholder");
  if (max_count < 0) throw ConfigError("max_count must be non-negative");
}

std::string PromptTemplate::mention_marker(int index) const {
  std::string out = mention_marker_pattern;
  out.replace(out.find("{n}"), 3, std::to_string(index));
  return out;
}

std::vector<Mention> Extraction::mentions() const {
  std::vector<Mention> out;
  out.reserve(items.size());
  for (const auto& i : items) out.push_back(i.mention);
  return out;
}

// Prompt construction -------------------------------------------------------

std::string build_count_prompt(const Document& doc, std::string_view label_surface, const PromptTemplate& t) {
  std::string p;
  p.reserve(doc.text.size() + 64);
  p += t.text_header;
  p += doc.text;
  p += t.separator;
  p += t.entity_header;
  p += label_surface;
  p += t.separator;
  p += t.count_marker;
  return p;
}

std::string build_mention_prompt(std::string_view count_prompt, int count, int index, const PromptTemplate& t) {
  if (index < 1 || index > count)
    throw Error("mention index " + std::to_string(index) + " outside 1.." + std::to_string(count));
  std::string p(count_prompt);
  p += std::to_string(count);
  p += t.count_terminator;
  p += t.mention_marker(index);
  return p;
}

std::string build_onestep_prompt(const Document& doc, std::string_view label_surface, const PromptTemplate& t) {
  std::string p = t.onestep_entity_marker;
  p += label_surface;
  p += t.onestep_text_marker;
  p += doc.text;
  return p;
}

std::string build_autoreg_prompt(const Document& doc, Format format, const LabelSet& labels,
                                 const PromptTemplate& t) {
  std::string p;
  if (format == Format::augmented) {
    p = t.aug_instruction;
  } else if (format == Format::structured) {
    p = t.struct_instruction;
  } else {
    throw Error("autoregressive prompts exist only for the aug and struct formats");
  }
  std::vector<std::string> surfaces;
  for (const auto& l : labels.labels()) surfaces.push_back(labels.surface(l));
  p += t.label_list_header;
  p += join(surfaces, ", ");
  p += '\n';
  p += t.text_header;
  p += doc.text;
  p += t.separator;
  p += t.answer_header;
  return p;
}

namespace {

std::optional<int> parse_decimal(std::string_view s) {
  if (s.empty() || s.size() > 9) return std::nullopt;
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  if (!std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
  return v;
}

// Consumes a literal at the front of `s`.
bool consume(std::string_view& s, std::string_view lit) {
  if (!s.starts_with(lit)) return false;
  s.remove_prefix(lit.size());
  return true;
}

std::optional<PromptInfo> classify_autoreg(std::string_view prompt, std::string_view instruction,
                                           PromptInfo::Kind kind, const PromptTemplate& t) {
  if (!prompt.starts_with(instruction)) return std::nullopt;
  const std::string tail = t.separator + t.answer_header;
  if (!prompt.ends_with(tail)) return std::nullopt;
  const auto start = prompt.find(t.text_header, instruction.size());
  if (start == std::string_view::npos) return std::nullopt;
  const auto text_begin = start + t.text_header.size();
  const auto text_end = prompt.size() - tail.size();
  if (text_end < text_begin) return std::nullopt;
  PromptInfo info;
  info.kind = kind;
  info.text = std::string(prompt.substr(text_begin, text_end - text_begin));
  return info;
}

}  // namespace

std::optional<PromptInfo> classify_prompt(std::string_view prompt, const PromptTemplate& t) {
  if (auto info = classify_autoreg(prompt, t.aug_instruction, PromptInfo::Kind::autoreg_aug, t)) return info;
  if (auto info = classify_autoreg(prompt, t.struct_instruction, PromptInfo::Kind::autoreg_struct, t)) return info;

  if (prompt.starts_with(t.onestep_entity_marker)) {
    std::string_view rest = prompt.substr(t.onestep_entity_marker.size());
    const auto pos = rest.find(t.onestep_text_marker);
    if (pos == std::string_view::npos) return std::nullopt;
    PromptInfo info;
    info.kind = PromptInfo::Kind::onestep;
    info.label = std::string(rest.substr(0, pos));
    info.text = std::string(rest.substr(pos + t.onestep_text_marker.size()));
    return info;
  }

  if (!prompt.starts_with(t.text_header)) return std::nullopt;
  const std::string entity = t.separator + t.entity_header;
  const auto entity_pos = prompt.rfind(entity);
  if (entity_pos == std::string_view::npos || entity_pos < t.text_header.size()) return std::nullopt;
  PromptInfo info;
  info.text = std::string(prompt.substr(t.text_header.size(), entity_pos - t.text_header.size()));
  std::string_view rest = prompt.substr(entity_pos + entity.size());
  const std::string count = t.separator + t.count_marker;
  const auto count_pos = rest.find(count);
  if (count_pos == std::string_view::npos) return std::nullopt;
  info.label = std::string(rest.substr(0, count_pos));
  rest.remove_prefix(count_pos + count.size());
  if (rest.empty()) {
    info.kind = PromptInfo::Kind::count;
    return info;
  }

  // digits + terminator + marker prefix + index digits + marker suffix
  std::size_t digits = 0;
  while (digits < rest.size() && rest[digits] >= '0' && rest[digits] <= '9') ++digits;
  auto n = parse_decimal(rest.substr(0, digits));
  if (!n) return std::nullopt;
  rest.remove_prefix(digits);
  if (!consume(rest, t.count_terminator)) return std::nullopt;
  const auto ph = t.mention_marker_pattern.find("{n}");
  const std::string_view marker_prefix = std::string_view(t.mention_marker_pattern).substr(0, ph);
  const std::string_view marker_suffix = std::string_view(t.mention_marker_pattern).substr(ph + 3);
  if (!consume(rest, marker_prefix) || !rest.ends_with(marker_suffix)) return std::nullopt;
  auto index = parse_decimal(rest.substr(0, rest.size() - marker_suffix.size()));
  if (!index) return std::nullopt;
  info.kind = PromptInfo::Kind::mention;
  info.count = *n;
  info.index = *index;
  return info;
}

// Target serializers --------------------------------------------------------

std::string emit_padellm_target(int count, int index, std::string_view mention, const PromptTemplate& t) {
  if (count == 0) return t.eos_literal;
  std::string out = std::to_string(count);
  out += t.count_terminator;
  out += t.mention_marker(index);
  out += mention;
  return out;
}

std::string emit_structured(const std::vector<Mention>& mentions, const LabelSet& labels) {
  std::vector<std::string> groups;
  for (const auto& m : mentions) groups.push_back("(" + labels.surface(m.label) + "): (" + m.text + ")");
  for (const auto& label : labels.labels()) {
    if (std::none_of(mentions.begin(), mentions.end(), [&](const Mention& m) { return m.label == label; }))
      groups.push_back("(" + labels.surface(label) + "): (NULL)");
  }
  return "(" + join(groups, ", ") + ")";
}

std::optional<std::string> emit_augmented(std::string_view text, const std::vector<Mention>& mentions,
                                          const LabelSet& labels) {
  struct Claim {
    std::size_t begin, end;
    const Mention* mention;
  };
  std::vector<Claim> claims;
  auto overlaps = [&](std::size_t b, std::size_t e) {
    return std::any_of(claims.begin(), claims.end(), [&](const Claim& c) { return b < c.end && c.begin < e; });
  };
  std::size_t cursor = 0;
  for (const auto& m : mentions) {
    if (m.text.empty()) return std::nullopt;
    // Prefer the next occurrence after the previous mention (source order),
    // then fall back to any free occurrence.
    std::optional<std::size_t> at;
    for (std::size_t from : {cursor, std::size_t{0}}) {
      for (auto pos = text.find(m.text, from); pos != std::string_view::npos; pos = text.find(m.text, pos + 1)) {
        if (!overlaps(pos, pos + m.text.size())) {
          at = pos;
          break;
        }
      }
      if (at) break;
    }
    if (!at) return std::nullopt;
    claims.push_back({*at, *at + m.text.size(), &m});
    cursor = *at + m.text.size();
  }
  std::sort(claims.begin(), claims.end(), [](const Claim& a, const Claim& b) { return a.begin < b.begin; });
  std::string out;
  std::size_t pos = 0;
  for (const auto& c : claims) {
    out.append(text.substr(pos, c.begin - pos));
    out += '[';
    out += c.mention->text;
    out += " | ";
    out += labels.surface(c.mention->label);
    out += ']';
    pos = c.end;
  }
  out.append(text.substr(pos));
  return out;
}

std::string emit_onestep(const std::vector<std::string>& surfaces) {
  std::vector<std::string> items;
  items.reserve(surfaces.size());
  for (const auto& s : surfaces) items.push_back(nlohmann::json(s).dump());
  return "[" + join(items, ", ") + "]";
}

// Output parsers ------------------------------------------------------------

ParsedCount parse_count(const CompletionResult& r, const PromptTemplate& t) {
  std::string visible = visible_text(r, t.eos_literal);
  std::string_view body = visible;
  if (const auto pos = body.find(t.count_terminator); pos != std::string_view::npos) body = body.substr(0, pos);
  body = trim(body);
  if (body.empty()) {
    const bool ended = r.stop_reason == StopReason::eos || trim(r.text) == t.eos_literal ||
                       (!r.tokens.empty() && r.tokens.front() == t.eos_literal);
    if (ended) return {0, true};
    throw CountParseError("empty count prediction", visible);
  }
  auto value = parse_decimal(body);
  if (!value) throw CountParseError("count prediction '" + std::string(body) + "' is not a decimal number", visible);
  if (*value > t.max_count)
    throw CountParseError("count " + std::to_string(*value) + " exceeds the cap of " + std::to_string(t.max_count),
                          visible);
  return {*value, false};
}

ParsedMention parse_mention(const CompletionResult& r, const PromptTemplate& t) {
  const std::string visible = visible_text(r, t.eos_literal);
  std::string_view body = visible;
  while (!t.count_terminator.empty() && body.ends_with(t.count_terminator))
    body.remove_suffix(t.count_terminator.size());
  std::size_t begin = 0;
  std::size_t end = body.size();
  while (begin < end && is_space(body[begin])) ++begin;
  while (end > begin && is_space(body[end - 1])) --end;
  ParsedMention out;
  if (begin == end) return out;
  out.text = std::string(body.substr(begin, end - begin));
  out.span = tokens_covering(r, t.eos_literal, begin, end);
  return out;
}

namespace {

std::size_t skip_ws(std::string_view s, std::size_t pos) {
  while (pos < s.size() && is_space(s[pos])) ++pos;
  return pos;
}

// Closing parenthesis of a structured value: one followed by ", (", ")" or the end.
std::size_t find_value_end(std::string_view s, std::size_t from) {
  for (auto j = s.find(')', from); j != std::string_view::npos; j = s.find(')', j + 1)) {
    const auto look = skip_ws(s, j + 1);
    if (look >= s.size() || s[look] == ')') return j;
    if (s[look] == ',') {
      const auto next = skip_ws(s, look + 1);
      if (next < s.size() && s[next] == '(') return j;
    }
  }
  return std::string_view::npos;
}

}  // namespace

Extraction parse_structured(std::string_view s, const LabelSet& labels) {
  Extraction out;
  std::size_t pos = skip_ws(s, 0);
  if (pos >= s.size() || s[pos] != '(') {
    out.defects.push_back("structured output does not start with '('");
    return out;
  }
  ++pos;
  bool closed = false;
  while (true) {
    pos = skip_ws(s, pos);
    if (pos < s.size() && s[pos] == ')') {
      closed = true;
      ++pos;
      break;
    }
    if (pos >= s.size() || s[pos] != '(') {
      out.defects.push_back("expected '(' at offset " + std::to_string(pos));
      return out;
    }
    const auto colon = s.find("):", pos + 1);
    if (colon == std::string_view::npos) {
      out.defects.push_back("unterminated label at offset " + std::to_string(pos));
      return out;
    }
    const std::string label_name(trim(s.substr(pos + 1, colon - pos - 1)));
    pos = skip_ws(s, colon + 2);
    if (pos >= s.size() || s[pos] != '(') {
      out.defects.push_back("expected '(' before the mentions of '" + label_name + "'");
      return out;
    }
    const auto value_begin = pos + 1;
    const auto value_end = find_value_end(s, value_begin);
    if (value_end == std::string_view::npos) {
      out.defects.push_back("unterminated mention list for '" + label_name + "'");
      return out;
    }
    pos = value_end + 1;
    const auto label = labels.resolve(label_name);
    const std::string_view value = s.substr(value_begin, value_end - value_begin);
    if (!label) {
      out.defects.push_back("unknown label '" + label_name + "'");
    } else if (trim(value) != "NULL") {
      std::size_t item_begin = 0;
      while (item_begin <= value.size()) {
        auto comma = value.find(", ", item_begin);
        if (comma == std::string_view::npos) comma = value.size();
        std::size_t b = item_begin, e = comma;
        while (b < e && is_space(value[b])) ++b;
        while (e > b && is_space(value[e - 1])) --e;
        if (b < e) {
          out.items.push_back({{*label, std::string(value.substr(b, e - b))}, value_begin + b, value_begin + e});
        } else {
          out.defects.push_back("empty mention under '" + label_name + "'");
        }
        item_begin = comma + 2;
      }
    }
    pos = skip_ws(s, pos);
    if (pos < s.size() && s[pos] == ',') {
      ++pos;
      continue;
    }
    if (pos < s.size() && s[pos] == ')') {
      closed = true;
      ++pos;
      break;
    }
    out.defects.push_back("expected ',' or ')' at offset " + std::to_string(pos));
    return out;
  }
  if (closed && skip_ws(s, pos) != s.size()) out.defects.push_back("trailing text after structured output");
  return out;
}

Extraction parse_augmented(std::string_view s, const LabelSet& labels) {
  Extraction out;
  std::size_t pos = 0;
  while ((pos = s.find('[', pos)) != std::string_view::npos) {
    const auto close = s.find(']', pos + 1);
    if (close == std::string_view::npos) {
      out.defects.push_back("unclosed '[' at offset " + std::to_string(pos));
      break;
    }
    const std::string_view inner = s.substr(pos + 1, close - pos - 1);
    const auto bar = inner.rfind(" | ");
    if (bar == std::string_view::npos) {
      ++pos;  // plain bracketed text, not an annotation
      continue;
    }
    const std::string label_name(trim(inner.substr(bar + 3)));
    const auto label = labels.resolve(label_name);
    if (!label) {
      out.defects.push_back("unknown label '" + label_name + "' at offset " + std::to_string(pos));
    } else if (bar == 0) {
      out.defects.push_back("empty mention at offset " + std::to_string(pos));
    } else {
      out.items.push_back({{*label, std::string(inner.substr(0, bar))}, pos + 1, pos + 1 + bar});
    }
    pos = close + 1;
  }
  return out;
}

Extraction parse_onestep(std::string_view s) {
  Extraction out;
  std::size_t pos = skip_ws(s, 0);
  if (pos >= s.size() || s[pos] != '[') {
    out.defects.push_back("list does not start with '['");
    return out;
  }
  pos = skip_ws(s, pos + 1);
  if (pos < s.size() && s[pos] == ']') return out;
  while (true) {
    if (pos >= s.size() || s[pos] != '"') {
      out.defects.push_back("expected a quoted mention at offset " + std::to_string(pos));
      return out;
    }
    std::size_t end = pos + 1;
    while (end < s.size() && s[end] != '"') end += (s[end] == '\\') ? 2 : 1;
    if (end >= s.size()) {
      out.defects.push_back("unterminated string at offset " + std::to_string(pos));
      return out;
    }
    try {
      auto decoded = nlohmann::json::parse(s.substr(pos, end - pos + 1)).get<std::string>();
      out.items.push_back({{"", std::move(decoded)}, pos + 1, end});
    } catch (const nlohmann::json::exception&) {
      out.defects.push_back("invalid string literal at offset " + std::to_string(pos));
      return out;
    }
    pos = skip_ws(s, end + 1);
    if (pos < s.size() && s[pos] == ',') {
      pos = skip_ws(s, pos + 1);
      continue;
    }
    if (pos < s.size() && s[pos] == ']') break;
    out.defects.push_back("expected ',' or ']' at offset " + std::to_string(pos));
    return out;
  }
  if (skip_ws(s, pos + 1) != s.size()) out.defects.push_back("trailing text after list");
  return out;
}

}  // namespace padellm

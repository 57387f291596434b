#include "padellm/tokenizer.hpp"

#include <algorithm>

namespace padellm {

namespace {

constexpr std::size_t kChunk = 4;

bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }

std::size_t utf8_length(unsigned char lead) {
  if (lead >= 0xF0) return 4;
  if (lead >= 0xE0) return 3;
  if (lead >= 0xC0) return 2;
  return 1;
}

}  // namespace

SimpleTokenizer::SimpleTokenizer(std::vector<std::string> specials) : specials_(std::move(specials)) {
  std::erase_if(specials_, [](const std::string& s) { return s.empty(); });
  // longest first so overlapping specials resolve greedily
  std::sort(specials_.begin(), specials_.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
}

std::vector<std::string> SimpleTokenizer::tokenize(std::string_view text) const {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    bool special = false;
    for (const auto& s : specials_) {
      if (text.substr(i).starts_with(s)) {
        out.emplace_back(s);
        i += s.size();
        special = true;
        break;
      }
    }
    if (special) continue;

    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t start = i;
    if (c == ' ' && i + 1 < text.size()) {
      const auto next = static_cast<unsigned char>(text[i + 1]);
      if (is_letter(next) || next >= 0x80) ++i;  // space joins the following chunk
    }
    const auto head = static_cast<unsigned char>(text[i]);
    if (is_letter(head)) {
      std::size_t j = i;
      while (j < text.size() && j - i < kChunk && is_letter(static_cast<unsigned char>(text[j]))) ++j;
      out.emplace_back(text.substr(start, j - start));
      i = j;
    } else if (head >= 0x80) {
      const std::size_t len = std::min(utf8_length(head), text.size() - i);
      out.emplace_back(text.substr(start, i + len - start));
      i += len;
    } else {
      out.emplace_back(text.substr(start, i + 1 - start));
      i += 1;
    }
  }
  return out;
}

}  // namespace padellm

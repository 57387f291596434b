#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace padellm {

// Deterministic stand-in for a subword tokenizer, used by the simulated
// backends and by length statistics. Digits are single tokens, letter runs
// split into chunks of at most four bytes (a single leading space joins the
// first chunk), newlines and punctuation are single tokens, and each non-ASCII
// code point is its own token. Special strings are never split.
class SimpleTokenizer {
 public:
  explicit SimpleTokenizer(std::vector<std::string> specials = {});

  std::vector<std::string> tokenize(std::string_view text) const;

 private:
  std::vector<std::string> specials_;
};

}  // namespace padellm

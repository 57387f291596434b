#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "padellm/corpus.hpp"

namespace padellm {

// A predicted mention with the probability of its token span.
struct ScoredMention {
  std::string label;
  std::string text;
  double probability = 1.0;  // in (0, 1]
  std::string seq_id;
  int index = 0;  // order within its label (mention index for two-step decoding)
};

// keep_max_prob: a surface predicted under several labels survives only under
// the label of its most probable instance. reverse keeps the least probable
// one instead. off leaves predictions untouched.
enum class DedupMode { keep_max_prob, off, reverse };

std::string_view to_string(DedupMode m);
DedupMode dedup_mode_from_string(std::string_view s);

struct DedupPolicy {
  DedupMode mode = DedupMode::keep_max_prob;
};

inline constexpr double kProbabilityTieEpsilon = 1e-12;

// Among instances of equal probability, the one whose label comes first in
// label order (first in input order within a label).
std::size_t tie_break(std::span<const ScoredMention> instances, const LabelSet& labels);

// Output is ordered by label order, then by index.
std::vector<Mention> deduplicate(std::span<const ScoredMention> mentions, const DedupPolicy& policy,
                                 const LabelSet& labels);

}  // namespace padellm

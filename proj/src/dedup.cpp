#include "padellm/dedup.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "padellm/error.hpp"
#include "padellm/text.hpp"

namespace padellm {

std::string_view to_string(DedupMode m) {
  switch (m) {
    case DedupMode::keep_max_prob: return "keep-max";
    case DedupMode::off: return "off";
    case DedupMode::reverse: return "reverse";
  }
  return "keep-max";
}

DedupMode dedup_mode_from_string(std::string_view s) {
  if (s == "keep-max" || s == "keep_max_prob") return DedupMode::keep_max_prob;
  if (s == "off") return DedupMode::off;
  if (s == "reverse") return DedupMode::reverse;
  throw ConfigError("unknown dedup policy '" + std::string(s) + "'");
}

std::size_t tie_break(std::span<const ScoredMention> instances, const LabelSet& labels) {
  if (instances.empty()) throw Error("tie_break needs at least one instance");
  std::size_t best = 0;
  for (std::size_t i = 1; i < instances.size(); ++i)
    if (labels.index_of(instances[i].label) < labels.index_of(instances[best].label)) best = i;
  return best;
}

namespace {

// Instance chosen by the policy within one cross-label group.
std::size_t choose(std::span<const ScoredMention> group, DedupMode mode, const LabelSet& labels) {
  double target = group.front().probability;
  for (const auto& m : group)
    target = mode == DedupMode::reverse ? std::min(target, m.probability) : std::max(target, m.probability);
  std::vector<ScoredMention> tied;
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (std::abs(group[i].probability - target) <= kProbabilityTieEpsilon) {
      tied.push_back(group[i]);
      positions.push_back(i);
    }
  }
  return positions[tie_break(tied, labels)];
}

}  // namespace

std::vector<Mention> deduplicate(std::span<const ScoredMention> mentions, const DedupPolicy& policy,
                                 const LabelSet& labels) {
  std::vector<ScoredMention> ordered(mentions.begin(), mentions.end());
  std::stable_sort(ordered.begin(), ordered.end(), [&](const ScoredMention& a, const ScoredMention& b) {
    const auto la = labels.index_of(a.label), lb = labels.index_of(b.label);
    return la != lb ? la < lb : a.index < b.index;
  });

  std::vector<bool> keep(ordered.size(), true);
  if (policy.mode != DedupMode::off) {
    std::map<std::string, std::vector<std::size_t>, std::less<>> by_surface;
    for (std::size_t i = 0; i < ordered.size(); ++i) by_surface[std::string(trim(ordered[i].text))].push_back(i);
    for (const auto& [surface, members] : by_surface) {
      std::set<std::string_view> distinct;
      for (auto i : members) distinct.insert(ordered[i].label);
      if (distinct.size() < 2) continue;
      std::vector<ScoredMention> group;
      for (auto i : members) group.push_back(ordered[i]);
      const std::string& winner = group[choose(group, policy.mode, labels)].label;
      bool kept = false;
      for (auto i : members) {
        keep[i] = !kept && ordered[i].label == winner;
        kept = kept || keep[i];
      }
    }
  }

  std::vector<Mention> out;
  for (std::size_t i = 0; i < ordered.size(); ++i)
    if (keep[i]) out.push_back({ordered[i].label, ordered[i].text});
  return out;
}

}  // namespace padellm

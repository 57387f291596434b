#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "padellm/corpus.hpp"
#include "padellm/scheduler.hpp"

namespace padellm {

struct Score {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Fills precision/recall/f1 from the counts, with 0/0 taken as 0.
Score make_score(std::size_t tp, std::size_t fp, std::size_t fn);

struct EvalReport {
  Score micro;
  std::map<std::string, Score> per_label;
};

// multiset: repeated (label, text) pairs match up to min(pred, gold) times.
// set: each distinct pair counts once per document.
enum class MatchSemantics { multiset, set };

// Both sides must cover the same document ids; throws Error otherwise.
EvalReport micro_f1(const std::vector<GoldAnnotation>& pred, const std::vector<GoldAnnotation>& gold,
                    MatchSemantics semantics = MatchSemantics::multiset);

struct LatencyStats {
  double mean_example_latency_ms = 0.0;
  double mean_generated_tokens_per_sequence = 0.0;
  std::size_t documents = 0;
  std::size_t sequences = 0;
  std::size_t generated_tokens = 0;
  std::map<std::string, double> per_dataset_latency_ms;
  std::map<std::string, double> per_dataset_tokens_per_sequence;
};

// Mean example latency over documents and their repeats; tokens per sequence
// is total generated tokens over total sequences.
LatencyStats latency_stats(std::span<const DecodeOutcome> outcomes, std::string_view dataset = {});

// baseline / ours on mean example latency. Throws Error on a zero operand.
double speedup(const LatencyStats& baseline, const LatencyStats& ours);

struct MethodReport {
  std::string method;
  std::optional<EvalReport> eval;
  std::optional<LatencyStats> latency;
  std::optional<double> speedup;
};

struct BenchReport {
  std::string baseline;  // method the speedups are relative to
  std::vector<MethodReport> methods;
  std::vector<std::string> notes;
};

enum class ReportFormat { json, markdown };

nlohmann::json to_json(const Score& s);
nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const LatencyStats& s);
std::string emit_report(const BenchReport& report, ReportFormat format);

}  // namespace padellm

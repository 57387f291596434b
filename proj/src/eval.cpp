#include "padellm/eval.hpp"

#include <cstdio>
#include <set>
#include <sstream>

#include "padellm/error.hpp"

namespace padellm {

Score make_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  Score s{tp, fp, fn, 0.0, 0.0, 0.0};
  s.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  s.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

namespace {

using PairCounts = std::map<Mention, std::size_t>;

std::map<std::string, const GoldAnnotation*> index_by_doc(const std::vector<GoldAnnotation>& docs,
                                                          std::string_view side) {
  std::map<std::string, const GoldAnnotation*> out;
  for (const auto& d : docs)
    if (!out.emplace(d.doc_id, &d).second)
      throw Error("duplicate document id '" + d.doc_id + "' in " + std::string(side));
  return out;
}

PairCounts count_pairs(const GoldAnnotation& a, MatchSemantics semantics) {
  PairCounts counts;
  for (const auto& m : a.mentions) {
    auto& c = counts[m];
    c = semantics == MatchSemantics::set ? 1 : c + 1;
  }
  return counts;
}

}  // namespace

EvalReport micro_f1(const std::vector<GoldAnnotation>& pred, const std::vector<GoldAnnotation>& gold,
                    MatchSemantics semantics) {
  const auto pred_by_doc = index_by_doc(pred, "predictions");
  const auto gold_by_doc = index_by_doc(gold, "gold");
  for (const auto& [id, _] : pred_by_doc)
    if (!gold_by_doc.contains(id)) throw Error("document '" + id + "' has predictions but no gold annotation");
  for (const auto& [id, _] : gold_by_doc)
    if (!pred_by_doc.contains(id)) throw Error("document '" + id + "' has a gold annotation but no predictions");

  struct Tally {
    std::size_t tp = 0, predicted = 0, gold = 0;
  };
  Tally total;
  std::map<std::string, Tally> per_label;
  for (const auto& [id, g] : gold_by_doc) {
    const auto p_counts = count_pairs(*pred_by_doc.at(id), semantics);
    const auto g_counts = count_pairs(*g, semantics);
    for (const auto& [m, n] : p_counts) {
      total.predicted += n;
      per_label[m.label].predicted += n;
      if (auto it = g_counts.find(m); it != g_counts.end()) {
        const auto hit = std::min(n, it->second);
        total.tp += hit;
        per_label[m.label].tp += hit;
      }
    }
    for (const auto& [m, n] : g_counts) {
      total.gold += n;
      per_label[m.label].gold += n;
    }
  }
  EvalReport report;
  report.micro = make_score(total.tp, total.predicted - total.tp, total.gold - total.tp);
  for (const auto& [label, t] : per_label) report.per_label[label] = make_score(t.tp, t.predicted - t.tp, t.gold - t.tp);
  return report;
}

LatencyStats latency_stats(std::span<const DecodeOutcome> outcomes, std::string_view dataset) {
  LatencyStats s;
  double latency_sum = 0.0;
  for (const auto& o : outcomes) {
    ++s.documents;
    if (o.repeat_latencies_ms.empty()) {
      latency_sum += o.example_latency_ms;
    } else {
      double sum = 0.0;
      for (double l : o.repeat_latencies_ms) sum += l;
      latency_sum += sum / static_cast<double>(o.repeat_latencies_ms.size());
    }
    for (const auto& seq : o.sequences) {
      ++s.sequences;
      s.generated_tokens += seq.generated_tokens;
    }
  }
  if (s.documents > 0) s.mean_example_latency_ms = latency_sum / static_cast<double>(s.documents);
  if (s.sequences > 0)
    s.mean_generated_tokens_per_sequence = static_cast<double>(s.generated_tokens) / static_cast<double>(s.sequences);
  if (!dataset.empty()) {
    s.per_dataset_latency_ms[std::string(dataset)] = s.mean_example_latency_ms;
    s.per_dataset_tokens_per_sequence[std::string(dataset)] = s.mean_generated_tokens_per_sequence;
  }
  return s;
}

double speedup(const LatencyStats& baseline, const LatencyStats& ours) {
  if (baseline.mean_example_latency_ms == 0.0 || ours.mean_example_latency_ms == 0.0)
    throw Error("speedup is undefined for a zero mean latency");
  return baseline.mean_example_latency_ms / ours.mean_example_latency_ms;
}

nlohmann::json to_json(const Score& s) {
  return {{"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per_label = nlohmann::json::object();
  for (const auto& [label, s] : r.per_label) per_label[label] = to_json(s);
  auto j = to_json(r.micro);
  j["per_label"] = std::move(per_label);
  return j;
}

nlohmann::json to_json(const LatencyStats& s) {
  return {{"mean_example_latency_ms", s.mean_example_latency_ms},
          {"mean_generated_tokens_per_sequence", s.mean_generated_tokens_per_sequence},
          {"documents", s.documents},
          {"sequences", s.sequences},
          {"generated_tokens", s.generated_tokens},
          {"per_dataset_latency_ms", s.per_dataset_latency_ms},
          {"per_dataset_tokens_per_sequence", s.per_dataset_tokens_per_sequence}};
}

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Method rows, one column per dataset plus Mean.
void markdown_table(std::ostringstream& out, const std::string& title, const std::vector<std::string>& datasets,
                    const std::vector<std::pair<std::string, std::vector<std::optional<double>>>>& rows) {
  out << "### " << title << "\n\n| Method |";
  for (const auto& d : datasets) out << ' ' << d << " |";
  out << " Mean |\n|---|";
  for (std::size_t i = 0; i <= datasets.size(); ++i) out << "---:|";
  out << '\n';
  for (const auto& [method, cells] : rows) {
    out << "| " << method << " |";
    for (const auto& c : cells) out << ' ' << (c ? fixed(*c) : "-") << " |";
    out << '\n';
  }
  out << '\n';
}

}  // namespace

std::string emit_report(const BenchReport& report, ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& m : report.methods) {
      nlohmann::json j{{"method", m.method}};
      if (m.eval) j["eval"] = to_json(*m.eval);
      if (m.latency) j["latency"] = to_json(*m.latency);
      if (m.speedup) j["speedup"] = *m.speedup;
      methods.push_back(std::move(j));
    }
    nlohmann::json j{{"baseline", report.baseline}, {"methods", std::move(methods)}, {"notes", report.notes}};
    return j.dump(2) + "\n";
  }

  std::set<std::string> dataset_set;
  for (const auto& m : report.methods)
    if (m.latency)
      for (const auto& [d, _] : m.latency->per_dataset_latency_ms) dataset_set.insert(d);
  const std::vector<std::string> datasets(dataset_set.begin(), dataset_set.end());

  std::ostringstream out;
  out << "## Benchmark report\n\n";
  const LatencyStats* baseline = nullptr;
  for (const auto& m : report.methods)
    if (m.method == report.baseline && m.latency) baseline = &*m.latency;
  using Rows = std::vector<std::pair<std::string, std::vector<std::optional<double>>>>;
  Rows latency, tokens, speedups;
  for (const auto& m : report.methods) {
    if (!m.latency) continue;
    std::vector<std::optional<double>> lat, tok;
    for (const auto& d : datasets) {
      auto l = m.latency->per_dataset_latency_ms.find(d);
      lat.push_back(l == m.latency->per_dataset_latency_ms.end() ? std::nullopt : std::optional(l->second));
      auto t = m.latency->per_dataset_tokens_per_sequence.find(d);
      tok.push_back(t == m.latency->per_dataset_tokens_per_sequence.end() ? std::nullopt : std::optional(t->second));
    }
    lat.push_back(m.latency->mean_example_latency_ms);
    tok.push_back(m.latency->mean_generated_tokens_per_sequence);
    latency.emplace_back(m.method, std::move(lat));
    tokens.emplace_back(m.method, std::move(tok));
    if (m.speedup) {
      std::vector<std::optional<double>> sp;
      for (const auto& d : datasets) {
        const auto ours = m.latency->per_dataset_latency_ms.find(d);
        const auto base = baseline ? baseline->per_dataset_latency_ms.find(d) : ours;
        if (!baseline || ours == m.latency->per_dataset_latency_ms.end() ||
            base == baseline->per_dataset_latency_ms.end() || ours->second == 0.0) {
          sp.push_back(std::nullopt);
        } else {
          sp.push_back(base->second / ours->second);
        }
      }
      sp.push_back(*m.speedup);
      speedups.emplace_back(m.method, std::move(sp));
    }
  }
  markdown_table(out, "Mean example latency (ms)", datasets, latency);
  if (!speedups.empty())
    markdown_table(out, "Speedup over " + (report.baseline.empty() ? std::string("baseline") : report.baseline),
                   datasets, speedups);
  markdown_table(out, "Generated tokens per sequence", datasets, tokens);

  out << "### Micro F1\n\n| Method | P | R | F1 | TP | FP | FN |\n|---|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& m : report.methods) {
    if (!m.eval) continue;
    const auto& s = m.eval->micro;
    out << "| " << m.method << " | " << fixed(s.precision, 4) << " | " << fixed(s.recall, 4) << " | "
        << fixed(s.f1, 4) << " | " << s.tp << " | " << s.fp << " | " << s.fn << " |\n";
  }
  if (!report.notes.empty()) {
    out << "\n";
    for (const auto& n : report.notes) out << "> " << n << "\n";
  }
  return out.str();
}

}  // namespace padellm

#include "padellm/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "padellm/eval.hpp"
#include "padellm/reformulate.hpp"

namespace padellm::cli {

namespace fs = std::filesystem;

// RunConfig -----------------------------------------------------------------

#define PADELLM_RUN_FIELDS(X)                                                                               \
  X(corpus_path) X(corpus_format) X(dataset) X(labels_path) X(labels) X(label_map_path) X(template_path)     \
  X(language) X(joiner) X(bio_policy) X(max_mentions) X(backend) X(backend_config) X(backend_config_path)   \
  X(mode) X(modes) X(baseline) X(dedup) X(parallelism) X(repeats) X(seed) X(max_new_tokens)                 \
  X(max_defect_rate) X(formats) X(output_dir) X(pred_path) X(outcomes_path) X(set_semantics)

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
#define X(field) \
  if (j.contains(#field)) j.at(#field).get_to(c.field);
    PADELLM_RUN_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid config '" + path + "': " + e.what());
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
#define X(field) j[#field] = field;
  PADELLM_RUN_FIELDS(X)
#undef X
  return j;
}

#undef PADELLM_RUN_FIELDS

// Resolution ----------------------------------------------------------------

namespace {

nlohmann::json read_json_file(const std::string& path, std::string_view what) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + std::string(what) + " '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid " + std::string(what) + " '" + path + "': " + e.what());
  }
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  return out;
}

void write_text(const fs::path& path, const std::string& text) { open_output(path) << text; }

fs::path prepare_output(const RunConfig& c) {
  fs::path dir(c.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + c.output_dir + "': " + ec.message());
  write_text(dir / "config.json", c.to_json().dump(2) + "\n");
  return dir;
}

DecodeOptions decode_options(const RunConfig& c, const PromptTemplate& t) {
  DecodeOptions o;
  o.tmpl = t;
  o.max_new_tokens = c.max_new_tokens;
  return o;
}

}  // namespace

LabelSet resolve_labels(const RunConfig& c) {
  LabelSet labels;
  if (!c.labels_path.empty()) {
    labels = LabelSet::from_json(read_json_file(c.labels_path, "label set"));
  } else if (!c.labels.empty()) {
    labels = LabelSet(c.labels);
  } else {
    throw ConfigError("no label set given (use --labels or --labels-file)");
  }
  if (!c.label_map_path.empty()) labels = labels.with_surface_map(load_label_map(c.label_map_path));
  return labels;
}

PromptTemplate resolve_template(const RunConfig& c) {
  if (!c.template_path.empty()) return PromptTemplate::load(c.template_path);
  if (c.language == "zh") return PromptTemplate::chinese();
  if (c.language != "en") throw ConfigError("unknown language '" + c.language + "'");
  return PromptTemplate::english();
}

Corpus resolve_corpus(const RunConfig& c, const LabelSet& labels) {
  if (c.corpus_path.empty()) throw ConfigError("no corpus given (use --corpus)");
  BioOptions bio;
  bio.joiner = c.joiner;
  if (c.bio_policy == "treat-as-b") {
    bio.policy = BioPolicy::treat_as_begin;
  } else if (c.bio_policy == "error") {
    bio.policy = BioPolicy::error;
  } else {
    throw ConfigError("unknown BIO policy '" + c.bio_policy + "'");
  }
  Corpus corpus = load_corpus(c.corpus_path, c.corpus_format, labels, bio);
  if (c.max_mentions > 0) corpus = filter_max_mentions(corpus, c.max_mentions);
  return corpus;
}

std::unique_ptr<Backend> make_backend(const RunConfig& c, const Corpus& corpus, const LabelSet& labels,
                                      const PromptTemplate& t) {
  const nlohmann::json cfg =
      c.backend_config_path.empty() ? c.backend_config : read_json_file(c.backend_config_path, "backend config");
  if (c.backend == "oracle") {
    return oracle_configure(corpus, labels, ErrorInjection::from_json(cfg.value("errors", nlohmann::json::object())),
                            CostModel::from_json(cfg.value("cost", nlohmann::json::object())), c.seed, t);
  }
  if (c.backend == "scripted") {
    const auto path = cfg.value("fixtures", std::string{});
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scripted fixtures '" + path + "'");
    return std::make_unique<ScriptedBackend>(ScriptedBackend::load(
        in, CostModel::from_json(cfg.value("cost", nlohmann::json::object())), t.eos_literal));
  }
  if (c.backend == "http") return std::make_unique<HttpBackend>(HttpEndpoint::from_json(cfg));
  throw ConfigError("unknown backend '" + c.backend + "'");
}

// Commands ------------------------------------------------------------------

int cmd_reformat(const RunConfig& c, std::ostream& log) {
  const auto labels = resolve_labels(c);
  const auto tmpl = resolve_template(c);
  const auto corpus = resolve_corpus(c, labels);
  std::vector<Format> formats;
  for (const auto& f : c.formats) formats.push_back(format_from_string(f));
  const auto dir = prepare_output(c);

  std::vector<TrainingExample> all;
  nlohmann::json skipped = nlohmann::json::array();
  for (auto format : formats) {
    auto out = open_output(dir / ("train_" + std::string(to_string(format)) + ".jsonl"));
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      auto produced = format == Format::padellm
                          ? BaselineExamples{generate_padellm_examples(corpus.documents[i], corpus.gold[i], labels, tmpl),
                                             std::nullopt}
                          : generate_baseline_examples(corpus.documents[i], corpus.gold[i], format, labels, tmpl);
      if (produced.skipped) skipped.push_back({{"format", to_string(format)}, {"reason", *produced.skipped}});
      for (auto& e : produced.examples) {
        out << to_json(e).dump() << '\n';
        all.push_back(std::move(e));
      }
    }
  }
  auto stats = to_json(corpus_stats(all, tmpl));
  stats["documents"] = corpus.size();
  stats["skipped"] = skipped;
  nlohmann::json rejected = nlohmann::json::array();
  for (const auto& r : corpus.rejected) rejected.push_back({{"line", r.line}, {"reason", r.reason}});
  stats["rejected_records"] = rejected;
  write_text(dir / "stats.json", stats.dump(2) + "\n");

  log << "reformat: " << corpus.size() << " documents, " << all.size() << " examples written to "
      << dir.string() << "\n";
  const double attempts = static_cast<double>(corpus.size() * formats.size());
  const double skip_rate = attempts == 0 ? 0.0 : static_cast<double>(skipped.size()) / attempts;
  if (!skipped.empty() || !corpus.rejected.empty())
    log << "defects: " << skipped.size() << " skipped documents, " << corpus.rejected.size()
        << " rejected records\n";
  return skip_rate > c.max_defect_rate ? kExitDefects : kExitOk;
}

int cmd_decode(const RunConfig& c, std::ostream& log) {
  const auto labels = resolve_labels(c);
  const auto tmpl = resolve_template(c);
  const auto corpus = resolve_corpus(c, labels);
  auto backend = make_backend(c, corpus, labels, tmpl);
  RunOptions options;
  options.mode = decode_mode_from_string(c.mode);
  options.dedup.mode = dedup_mode_from_string(c.dedup);
  options.parallelism = c.parallelism;
  options.repeats = c.repeats;
  options.decode = decode_options(c, tmpl);
  const auto dir = prepare_output(c);

  auto outcomes_file = open_output(dir / "outcomes.jsonl");
  auto predictions_file = open_output(dir / "predictions.jsonl");
  auto decode_log = open_output(dir / "decode.log");
  std::size_t emitted = 0;
  const auto outcomes = run_corpus(corpus, labels, *backend, options, [&](const DecodeOutcome& o) {
    outcomes_file << to_json(o).dump() << '\n';
    predictions_file << to_json(corpus.documents[emitted], GoldAnnotation{o.doc_id, o.mentions}).dump() << '\n';
    ++emitted;
    if (options.mode.parallelism == Parallelism::batch) {
      decode_log << o.doc_id << ": step-1 batch size " << o.step1_batch_size << ", step-2 batch size "
                 << o.step2_batch_size << '\n';
    }
    for (const auto& d : o.defects) decode_log << o.doc_id << ": defect " << d.kind << " at " << d.seq_id << '\n';
  });
  const auto summary = summarize_defects(outcomes);
  write_text(dir / "defects.json", to_json(summary).dump(2) + "\n");

  const auto stats = latency_stats(outcomes, c.dataset);
  log << "decode: " << outcomes.size() << " documents, mode " << c.mode << ", mean example latency "
      << stats.mean_example_latency_ms << " ms, " << summary.defects << " defects\n";
  if (options.mode.parallelism == Parallelism::batch && outcomes.size() <= 20)
    for (const auto& o : outcomes)
      log << "  " << o.doc_id << ": step batch sizes " << o.step1_batch_size << " then " << o.step2_batch_size << "\n";
  return summary.defect_rate() > c.max_defect_rate ? kExitDefects : kExitOk;
}

int cmd_eval(const RunConfig& c, std::ostream& log) {
  const auto labels = resolve_labels(c);
  const auto gold = resolve_corpus(c, labels);
  if (c.pred_path.empty()) throw ConfigError("no predictions given (use --pred)");
  std::ifstream pred_in(c.pred_path);
  if (!pred_in) throw ConfigError("cannot open predictions '" + c.pred_path + "'");
  const auto pred = parse_spans_json(pred_in, labels);

  MethodReport method;
  method.method = c.mode;
  method.eval = micro_f1(pred.gold, gold.gold, c.set_semantics ? MatchSemantics::set : MatchSemantics::multiset);
  // decode writes outcomes.jsonl beside predictions.jsonl
  auto outcomes_path = c.outcomes_path;
  if (outcomes_path.empty()) {
    const auto sibling = fs::path(c.pred_path).parent_path() / "outcomes.jsonl";
    if (fs::exists(sibling)) outcomes_path = sibling.string();
  }
  if (!outcomes_path.empty()) {
    std::ifstream in(outcomes_path);
    if (!in) throw ConfigError("cannot open outcomes '" + outcomes_path + "'");
    std::vector<DecodeOutcome> outcomes;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) outcomes.push_back(decode_outcome_from_json(nlohmann::json::parse(line)));
    method.latency = latency_stats(outcomes, c.dataset);
  }
  BenchReport report;
  report.methods.push_back(std::move(method));
  const auto dir = prepare_output(c);
  write_text(dir / "eval.json", emit_report(report, ReportFormat::json));
  const auto md = emit_report(report, ReportFormat::markdown);
  write_text(dir / "eval.md", md);
  log << md;
  return kExitOk;
}

int cmd_bench(const RunConfig& c, std::ostream& log) {
  const auto labels = resolve_labels(c);
  const auto tmpl = resolve_template(c);
  const auto corpus = resolve_corpus(c, labels);
  auto backend = make_backend(c, corpus, labels, tmpl);
  const std::vector<std::string> modes =
      c.modes.empty() ? std::vector<std::string>{"autoreg-struct", "padellm-multi", "padellm-batch"} : c.modes;
  const auto dir = prepare_output(c);
  const std::string dataset = c.dataset.empty() ? fs::path(c.corpus_path).stem().string() : c.dataset;

  BenchReport report;
  report.baseline = c.baseline;
  DefectSummary defects;
  for (const auto& mode : modes) {
    RunOptions options;
    options.mode = decode_mode_from_string(mode);
    options.dedup.mode = dedup_mode_from_string(c.dedup);
    options.parallelism = c.parallelism;
    options.repeats = c.repeats;
    options.decode = decode_options(c, tmpl);
    const auto outcomes = run_corpus(corpus, labels, *backend, options);
    std::vector<GoldAnnotation> pred;
    for (const auto& o : outcomes) pred.push_back({o.doc_id, o.mentions});
    MethodReport m;
    m.method = mode;
    m.eval = micro_f1(pred, corpus.gold);
    m.latency = latency_stats(outcomes, dataset);
    report.methods.push_back(std::move(m));
    const auto s = summarize_defects(outcomes);
    defects.sequences += s.sequences;
    defects.defects += s.defects;
  }
  const auto base = std::find_if(report.methods.begin(), report.methods.end(),
                                 [&](const MethodReport& m) { return m.method == c.baseline; });
  if (base != report.methods.end() && base->latency->mean_example_latency_ms > 0) {
    for (auto& m : report.methods)
      if (m.latency->mean_example_latency_ms > 0) m.speedup = speedup(*base->latency, *m.latency);
  }
  if (dedup_mode_from_string(c.dedup) == DedupMode::keep_max_prob)
    report.notes.push_back(
        "De-duplication keeps one label per surface; mentions that legitimately carry several labels are dropped. "
        "Compare with --dedup off.");
  write_text(dir / "bench.json", emit_report(report, ReportFormat::json));
  const auto md = emit_report(report, ReportFormat::markdown);
  write_text(dir / "bench.md", md);
  log << md;
  return defects.defect_rate() > c.max_defect_rate ? kExitDefects : kExitOk;
}

// Argument parsing ----------------------------------------------------------

namespace {

using Bindings = std::vector<std::function<void(RunConfig&)>>;

template <typename T>
void bind_option(CLI::App* app, Bindings& b, const std::string& flag, T RunConfig::*field, const std::string& help) {
  auto value = std::make_shared<T>();
  auto* opt = app->add_option(flag, *value, help);
  if constexpr (std::is_same_v<T, std::vector<std::string>>) opt->delimiter(',');
  b.push_back([opt, value, field](RunConfig& c) {
    if (opt->count() > 0) c.*field = *value;
  });
}

void bind_flag(CLI::App* app, Bindings& b, const std::string& flag, bool RunConfig::*field, const std::string& help) {
  auto* opt = app->add_flag(flag, help);
  b.push_back([opt, field](RunConfig& c) {
    if (opt->count() > 0) c.*field = true;
  });
}

struct Subcommand {
  CLI::App* app = nullptr;
  std::shared_ptr<std::string> config_path = std::make_shared<std::string>();
  Bindings bindings;

  RunConfig resolve() const {
    RunConfig c = config_path->empty() ? RunConfig{} : RunConfig::load(*config_path);
    for (const auto& apply : bindings) apply(c);
    return c;
  }
};

Subcommand add_common(CLI::App& root, const std::string& name, const std::string& help) {
  Subcommand s;
  s.app = root.add_subcommand(name, help);
  s.app->add_option("--config", *s.config_path, "JSON run config; flags override its fields");
  auto& b = s.bindings;
  bind_option(s.app, b, "--corpus,--gold", &RunConfig::corpus_path, "corpus file");
  bind_option(s.app, b, "--corpus-format", &RunConfig::corpus_format, "spans | bio");
  bind_option(s.app, b, "--dataset", &RunConfig::dataset, "dataset name used in reports");
  bind_option(s.app, b, "--labels", &RunConfig::labels, "comma-separated label list");
  bind_option(s.app, b, "--labels-file", &RunConfig::labels_path, "label set JSON");
  bind_option(s.app, b, "--label-map", &RunConfig::label_map_path, "label map JSON {canonical: surface}");
  bind_option(s.app, b, "--template", &RunConfig::template_path, "prompt template JSON");
  bind_option(s.app, b, "--language", &RunConfig::language, "en | zh default template");
  bind_option(s.app, b, "--joiner", &RunConfig::joiner, "token joiner for BIO corpora");
  bind_option(s.app, b, "--bio-policy", &RunConfig::bio_policy, "treat-as-b | error");
  bind_option(s.app, b, "--max-mentions", &RunConfig::max_mentions, "drop documents with more gold mentions");
  bind_option(s.app, b, "--out", &RunConfig::output_dir, "output directory");
  bind_option(s.app, b, "--max-defect-rate", &RunConfig::max_defect_rate, "exit 2 above this defect rate");
  return s;
}

void add_backend_options(Subcommand& s) {
  auto& b = s.bindings;
  bind_option(s.app, b, "--backend", &RunConfig::backend, "oracle | scripted | http");
  bind_option(s.app, b, "--backend-config", &RunConfig::backend_config_path, "backend config JSON");
  bind_option(s.app, b, "--dedup", &RunConfig::dedup, "keep-max | off | reverse");
  bind_option(s.app, b, "--parallelism", &RunConfig::parallelism, "documents decoded concurrently");
  bind_option(s.app, b, "--repeats", &RunConfig::repeats, "runs averaged for latency");
  bind_option(s.app, b, "--seed", &RunConfig::seed, "seed for simulated backends");
  bind_option(s.app, b, "--max-new-tokens", &RunConfig::max_new_tokens, "generation cap per request");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parallel two-step decoding for LLM named entity recognition"};
  app.require_subcommand(1);

  auto reformat = add_common(app, "reformat", "write training files for each output format");
  bind_option(reformat.app, reformat.bindings, "--formats", &RunConfig::formats, "padellm,aug,struct,onestep");

  auto decode = add_common(app, "decode", "decode a corpus through a completion backend");
  add_backend_options(decode);
  bind_option(decode.app, decode.bindings, "--mode", &RunConfig::mode,
       "padellm-multi | padellm-batch | onestep | onestep-batch | autoreg-aug | autoreg-struct");

  auto eval = add_common(app, "eval", "score predictions against gold");
  bind_option(eval.app, eval.bindings, "--pred", &RunConfig::pred_path, "predictions JSON lines");
  bind_option(eval.app, eval.bindings, "--outcomes", &RunConfig::outcomes_path, "decode outcomes for latency statistics");
  bind_option(eval.app, eval.bindings, "--mode", &RunConfig::mode, "method name shown in the report");
  bind_flag(eval.app, eval.bindings, "--set-semantics", &RunConfig::set_semantics, "match distinct pairs only");

  auto bench = add_common(app, "bench", "compare decoding modes on one corpus");
  add_backend_options(bench);
  bind_option(bench.app, bench.bindings, "--modes", &RunConfig::modes, "comma-separated modes");
  bind_option(bench.app, bench.bindings, "--baseline", &RunConfig::baseline, "mode speedups are relative to");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (reformat.app->parsed()) return cmd_reformat(reformat.resolve(), out);
    if (decode.app->parsed()) return cmd_decode(decode.resolve(), out);
    if (eval.app->parsed()) return cmd_eval(eval.resolve(), out);
    if (bench.app->parsed()) return cmd_bench(bench.resolve(), out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace padellm::cli

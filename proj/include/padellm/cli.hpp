#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "padellm/backend.hpp"
#include "padellm/corpus.hpp"
#include "padellm/scheduler.hpp"
#include "padellm/templates.hpp"

namespace padellm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitDefects = 2;

// Everything a run needs; written beside the outputs as config.json so the
// run can be repeated from the snapshot alone.
struct RunConfig {
  std::string corpus_path;
  std::string corpus_format = "spans";  // spans | bio
  std::string dataset;                  // display name in reports
  std::string labels_path;              // label set JSON
  std::vector<std::string> labels;      // inline alternative to labels_path
  std::string label_map_path;
  std::string template_path;
  std::string language = "en";
  std::string joiner = " ";
  std::string bio_policy = "treat-as-b";  // treat-as-b | error
  std::size_t max_mentions = 0;           // 0 disables the outlier filter

  std::string backend = "oracle";  // oracle | scripted | http
  nlohmann::json backend_config = nlohmann::json::object();
  std::string backend_config_path;

  std::string mode = "padellm-multi";
  std::vector<std::string> modes;  // bench
  std::string baseline = "autoreg-struct";
  std::string dedup = "keep-max";
  std::size_t parallelism = 1;
  int repeats = 1;
  std::uint64_t seed = 0;
  int max_new_tokens = 512;
  double max_defect_rate = 0.1;

  std::vector<std::string> formats = {"padellm", "aug", "struct", "onestep"};
  std::string output_dir = "out";

  // eval
  std::string pred_path;
  std::string outcomes_path;
  bool set_semantics = false;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;
};

LabelSet resolve_labels(const RunConfig& c);
PromptTemplate resolve_template(const RunConfig& c);
Corpus resolve_corpus(const RunConfig& c, const LabelSet& labels);
std::unique_ptr<Backend> make_backend(const RunConfig& c, const Corpus& corpus, const LabelSet& labels,
                                      const PromptTemplate& t);

// Each returns a process exit code; progress goes to `log`.
int cmd_reformat(const RunConfig& c, std::ostream& log);
int cmd_decode(const RunConfig& c, std::ostream& log);
int cmd_eval(const RunConfig& c, std::ostream& log);
int cmd_bench(const RunConfig& c, std::ostream& log);

// Entry point for `padellm-ner reformat|decode|eval|bench`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace padellm::cli

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace copywriter::pipeline {

// A config value is unknown, mistyped or out of range. The message starts
// with the dotted field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// A stage needs an artifact that an earlier subcommand produces.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& producer)
      : std::runtime_error("missing " + path.string() + ": run " + producer + " first"), producer_(producer) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

class RunLocked : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct JudgeSection {
  std::string endpoint;
  std::string model = "gpt-3.5-turbo";
  double temperature = 0.0;
  int max_words = 30;
  int max_tokens = 128;
  int timeout_seconds = 60;
  // Name of the environment variable holding the bearer token.
  std::string api_key_env = "COPYWRITER_JUDGE_API_KEY";
};

struct CorpusSection {
  std::string reviews;
  // Transcript file read in replay mode; empty means the run's own.
  std::string transcripts;
  // Directory with summary.txt and compare.txt; empty means built-in.
  std::string prompts_dir;
  int aspects_per_review = 3;
  int pair_budget = 0;
  int workers = 1;
  double train = 0.7;
  double dev = 0.1;
  double test = 0.2;
};

struct GraphSection {
  bool before_cleaning = false;
};

struct AllureSection {
  std::string kind = "regression";
  double lr = 2e-5;
  int batch = 32;
  int epochs = 5;
  int embed_dim = 32;
  int hidden = 32;
  int max_tokens = 128;
  bool sweep = false;
};

struct SftSection {
  double lr = 1e-3;
  int batch = 8;
  int epochs = 10;
  int embed_dim = 32;
  int hidden = 64;
  int max_source_tokens = 256;
};

struct RlSection {
  double lr = 1e-6;
  int batch = 32;
  int epochs = 20;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  bool use_allure = true;
  bool use_veracity = true;
  bool use_information = true;
  double clip_ratio = 0.2;
  int rollouts_per_prompt = 1;
  bool per_token_kl = false;
  double kl_ceiling = 50.0;
  double temperature = 1.0;
  int max_new_tokens = 30;
};

struct GroundingSection {
  int max_premise_words = 512;
  double answer_threshold = 0.5;
  bool normalize_veracity = false;
  // Facet template file; empty means the built-in twelve.
  std::string facets;
};

struct EvalSection {
  std::string policy = "rl";
  std::string decode = "beam";
  int beam_width = 4;
  double temperature = 1.0;
  int max_new_tokens = 30;
  std::vector<std::string> metrics = {"rouge", "ppl", "info", "length"};
  // Generations file to evaluate; empty means the run's own for `policy`.
  std::string generations;
  // Second system for ballot export ("sft" or "rl"); empty disables.
  std::string baseline;
  std::uint64_t ballot_seed = 0;
};

struct RunConfig {
  std::string run_dir = "runs/default";
  std::uint64_t seed = 13;
  JudgeSection judge;
  CorpusSection corpus;
  GraphSection graph;
  AllureSection allure;
  SftSection sft;
  RlSection rl;
  GroundingSection grounding;
  EvalSection eval;
};

nlohmann::json to_json(const RunConfig& cfg);

// Starts from the defaults, merges `file` when given, then applies each
// "section.key=value" override. Values parse as JSON when they can and as
// strings otherwise. Throws ConfigError.
RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

// Range and consistency checks. Throws ConfigError.
void validate(const RunConfig& cfg);

inline const std::vector<std::string> kStages = {"build-corpus", "break-cycles", "train-allure", "train-sft",
                                                 "train-rl",     "generate",     "evaluate"};

struct StageOptions {
  bool replay = false;
  bool force = false;
};

enum class StageOutcome { kRan, kUpToDate };

// Holds {run_dir}/.lock for its lifetime. Throws RunLocked if another
// process holds it.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Runs one stage under the run lock. Skips it when its manifest matches the
// current config hash, input digests and output digests.
StageOutcome run_stage(const std::string& stage, const RunConfig& cfg, const StageOptions& options = {});

// Directory holding a stage's outputs and manifest.json.
std::filesystem::path stage_dir(const RunConfig& cfg, const std::string& stage);

}  // namespace copywriter::pipeline

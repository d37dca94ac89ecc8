#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "copywriter/pipeline.hpp"
#include "copywriter/records.hpp"

using namespace copywriter;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kLocked = 4 };

std::string join_metrics(const std::vector<std::string>& parts) {
  std::string out = "[";
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? ",\"" : "\"") + parts[i] + "\"";
  return out + "]";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aspect-conditioned marketing copy from customer reviews"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  bool force = false;
  bool verbose = false;
  app.add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config value, e.g. --set rl.lr=1e-5")->allow_extra_args(false);
  app.add_flag("--force", force, "Re-run a stage even when its manifest is current");
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::string replay_source;
  auto* build = app.add_subcommand("build-corpus", "Extract aspects, request summaries and comparisons");
  auto* replay = build->add_option("--replay", replay_source,
                                   "Answer judge requests from a transcript only; optional file or directory "
                                   "holding transcripts.jsonl")
                     ->expected(0, 1);

  app.add_subcommand("break-cycles", "Remove preference cycles and compute win rates");
  app.add_subcommand("train-allure", "Train the attractiveness reward model");
  app.add_subcommand("train-sft", "Supervised fine-tuning of the generator");

  bool no_allure = false, no_veracity = false, no_information = false;
  auto* rl = app.add_subcommand("train-rl", "PPO fine-tuning under the composite reward");
  rl->add_flag("--no-allure", no_allure, "Drop the attractiveness reward");
  rl->add_flag("--no-veracity", no_veracity, "Drop the entailment reward");
  rl->add_flag("--no-information", no_information, "Drop the facet information reward");

  std::string policy;
  auto* generate = app.add_subcommand("generate", "Write copies for the test split");
  generate->add_option("--policy", policy, "rl or sft")->check(CLI::IsMember({"rl", "sft"}));

  std::vector<std::string> metrics;
  std::string generations, baseline;
  auto* evaluate = app.add_subcommand("evaluate", "Score generations and export ballots");
  evaluate->add_option("--metrics", metrics, "Comma list of rouge, ppl, info, length")->delimiter(',');
  evaluate->add_option("--policy", policy, "rl or sft")->check(CLI::IsMember({"rl", "sft"}));
  evaluate->add_option("--generations", generations, "Generations file to score");
  evaluate->add_option("--baseline", baseline, "Second system for ballot export")->check(CLI::IsMember({"rl", "sft"}));

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  if (no_allure) overrides.push_back("rl.use_allure=false");
  if (no_veracity) overrides.push_back("rl.use_veracity=false");
  if (no_information) overrides.push_back("rl.use_information=false");
  if (!policy.empty()) overrides.push_back("eval.policy=\"" + policy + "\"");
  if (!metrics.empty()) overrides.push_back("eval.metrics=" + join_metrics(metrics));
  if (!generations.empty()) overrides.push_back("eval.generations=" + nlohmann::json(generations).dump());
  if (!replay_source.empty()) {
    std::filesystem::path source(replay_source);
    if (std::filesystem::is_directory(source)) source /= "transcripts.jsonl";
    overrides.push_back("corpus.transcripts=" + nlohmann::json(source.string()).dump());
  }
  if (!baseline.empty()) overrides.push_back("eval.baseline=\"" + baseline + "\"");

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    const auto cfg = pipeline::load_config(
        config_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_file), overrides);
    const auto outcome = pipeline::run_stage(stage, cfg, {.replay = replay->count() > 0, .force = force});
    std::printf("%s: %s (%s)\n", stage.c_str(), outcome == pipeline::StageOutcome::kRan ? "done" : "up to date",
                pipeline::stage_dir(cfg, stage).c_str());
    return kOk;
  } catch (const pipeline::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const pipeline::MissingArtifact& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kMissing;
  } catch (const pipeline::RunLocked& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kLocked;
  } catch (const DecodeError& e) {
    std::fprintf(stderr, "malformed record: %s\n", e.what());
    return kFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}

#include "copywriter/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "copywriter/allure_rm.hpp"
#include "copywriter/corpus_builder.hpp"
#include "copywriter/digest.hpp"
#include "copywriter/evaluator.hpp"
#include "copywriter/generation.hpp"
#include "copywriter/grounding.hpp"
#include "copywriter/preference_graph.hpp"
#include "copywriter/records.hpp"
#include "copywriter/rl_trainer.hpp"

namespace copywriter::pipeline {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(JudgeSection, endpoint, model, temperature, max_words, max_tokens,
                                   timeout_seconds, api_key_env)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CorpusSection, reviews, transcripts, prompts_dir, aspects_per_review,
                                   pair_budget, workers, train, dev, test)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GraphSection, before_cleaning)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AllureSection, kind, lr, batch, epochs, embed_dim, hidden, max_tokens, sweep)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SftSection, lr, batch, epochs, embed_dim, hidden, max_source_tokens)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RlSection, lr, batch, epochs, alpha, beta, gamma, use_allure, use_veracity,
                                   use_information, clip_ratio, rollouts_per_prompt, per_token_kl, kl_ceiling,
                                   temperature, max_new_tokens)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GroundingSection, max_premise_words, answer_threshold, normalize_veracity,
                                   facets)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalSection, policy, decode, beam_width, temperature, max_new_tokens, metrics,
                                   generations, baseline, ballot_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunConfig, run_dir, seed, judge, corpus, graph, allure, sft, rl, grounding,
                                   eval)

namespace fs = std::filesystem;
using nlohmann::json;

nlohmann::json to_json(const RunConfig& cfg) {
  json j;
  nlohmann::to_json(j, cfg);
  return j;
}

namespace {

bool looks_like_credential(const std::string& key) {
  for (const char* word : {"key", "token", "secret", "password", "bearer"}) {
    if (key.find(word) != std::string::npos && key != "api_key_env") return true;
  }
  return false;
}

std::string type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer() || j.is_number_unsigned()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

void assign(json& target, const json& value, const std::string& path) {
  const std::string want = type_name(target);
  const std::string got = type_name(value);
  const bool ok = want == got || (want == "number" && got == "integer");
  if (!ok) throw ConfigError(path, "expected " + want + ", got " + got);
  if (target.is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0) {
    throw ConfigError(path, "expected a non-negative integer");
  }
  if (target.is_array()) {
    for (const auto& item : value) {
      if (!item.is_string()) throw ConfigError(path, "expected an array of strings");
    }
  }
  target = value;
}

void merge(json& target, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!target.contains(key)) {
      if (looks_like_credential(key)) {
        throw ConfigError(path, "credentials are never read from config; set the environment variable named by "
                                "judge.api_key_env");
      }
      throw ConfigError(path, "unknown key");
    }
    if (target[key].is_object()) {
      merge(target[key], value, path);
    } else {
      assign(target[key], value, path);
    }
  }
}

void apply_override(json& target, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(text, "override must look like section.key=value");
  const std::string path = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json nested = value;
  std::vector<std::string> parts;
  for (std::size_t start = 0;;) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) nested = json{{*it, nested}};
  merge(target, nested, "");
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

}  // namespace

RunConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  json merged = to_json(RunConfig{});
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("--config", "cannot read " + file->string());
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("--config", "invalid JSON in " + file->string());
    merge(merged, user, "");
  }
  for (const auto& o : overrides) apply_override(merged, o);
  RunConfig cfg = merged.get<RunConfig>();
  validate(cfg);
  return cfg;
}

void validate(const RunConfig& cfg) {
  require(!cfg.run_dir.empty(), "run_dir", "must not be empty");
  const auto& j = cfg.judge;
  require(j.temperature >= 0.0, "judge.temperature", "must be >= 0");
  require(j.max_words >= 1, "judge.max_words", "must be >= 1");
  require(j.max_tokens >= 1, "judge.max_tokens", "must be >= 1");
  require(j.timeout_seconds >= 1, "judge.timeout_seconds", "must be >= 1");
  require(!j.api_key_env.empty(), "judge.api_key_env", "must name an environment variable");

  const auto& c = cfg.corpus;
  require(c.aspects_per_review >= 1, "corpus.aspects_per_review", "must be >= 1");
  require(c.pair_budget >= 0, "corpus.pair_budget", "must be >= 0");
  require(c.workers >= 1, "corpus.workers", "must be >= 1");
  require(c.train >= 0.0 && c.dev >= 0.0 && c.test >= 0.0, "corpus.train", "split ratios must be >= 0");
  require(std::abs(c.train + c.dev + c.test - 1.0) < 1e-9, "corpus.train", "split ratios must sum to 1");

  const auto& a = cfg.allure;
  require(a.kind == "regression" || a.kind == "siamese", "allure.kind", "must be regression or siamese");
  require(a.lr > 0.0, "allure.lr", "must be > 0");
  require(a.batch >= 1, "allure.batch", "must be >= 1");
  require(a.epochs >= 1, "allure.epochs", "must be >= 1");
  require(a.embed_dim >= 1, "allure.embed_dim", "must be >= 1");
  require(a.hidden >= 1, "allure.hidden", "must be >= 1");
  require(a.max_tokens >= 2, "allure.max_tokens", "must be >= 2");

  const auto& s = cfg.sft;
  require(s.lr > 0.0, "sft.lr", "must be > 0");
  require(s.batch >= 1, "sft.batch", "must be >= 1");
  require(s.epochs >= 1, "sft.epochs", "must be >= 1");
  require(s.embed_dim >= 1, "sft.embed_dim", "must be >= 1");
  require(s.hidden >= 1, "sft.hidden", "must be >= 1");
  require(s.max_source_tokens >= 2, "sft.max_source_tokens", "must be >= 2");

  const auto& r = cfg.rl;
  require(r.lr > 0.0, "rl.lr", "must be > 0");
  require(r.batch >= 1, "rl.batch", "must be >= 1");
  require(r.epochs >= 1, "rl.epochs", "must be >= 1");
  require(r.clip_ratio > 0.0, "rl.clip_ratio", "must be > 0");
  require(r.rollouts_per_prompt >= 1, "rl.rollouts_per_prompt", "must be >= 1");
  require(r.kl_ceiling > 0.0, "rl.kl_ceiling", "must be > 0");
  require(r.temperature > 0.0, "rl.temperature", "must be > 0");
  require(r.max_new_tokens >= 1 && r.max_new_tokens <= kMaxReferenceWords, "rl.max_new_tokens",
          "must be in [1, 30]; tokens are words");

  const auto& g = cfg.grounding;
  require(g.max_premise_words >= 1, "grounding.max_premise_words", "must be >= 1");
  require(g.answer_threshold >= 0.0 && g.answer_threshold <= 1.0, "grounding.answer_threshold",
          "must be in [0, 1]");

  const auto& e = cfg.eval;
  require(e.policy == "rl" || e.policy == "sft", "eval.policy", "must be rl or sft");
  try {
    gen::parse_decode_mode(e.decode);
  } catch (const std::invalid_argument&) {
    throw ConfigError("eval.decode", "must be greedy, sample or beam");
  }
  require(e.beam_width >= 1, "eval.beam_width", "must be >= 1");
  require(e.temperature > 0.0, "eval.temperature", "must be > 0");
  require(e.max_new_tokens >= 1 && e.max_new_tokens <= kMaxReferenceWords, "eval.max_new_tokens",
          "must be in [1, 30]; tokens are words");
  require(!e.metrics.empty(), "eval.metrics", "must not be empty");
  for (const auto& m : e.metrics) {
    require(m == "rouge" || m == "ppl" || m == "info" || m == "length", "eval.metrics",
            "unknown metric '" + m + "' (rouge, ppl, info, length)");
  }
  require(e.baseline.empty() || e.baseline == "rl" || e.baseline == "sft", "eval.baseline",
          "must be empty, rl or sft");
  require(e.baseline != e.policy, "eval.baseline", "must differ from eval.policy");
}

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    std::string holder;
    std::ifstream(path_) >> holder;
    throw RunLocked("run directory " + run_dir.string() + " is locked by process " +
                    (holder.empty() ? "?" : holder) + "; remove " + path_.string() + " if it is stale");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

fs::path stage_dir(const RunConfig& cfg, const std::string& stage) {
  const fs::path run = cfg.run_dir;
  if (stage == "build-corpus") return run / "corpus";
  if (stage == "break-cycles") return run / "graph";
  if (stage == "train-allure") return run / "allure";
  if (stage == "train-sft") return run / "sft";
  if (stage == "train-rl") return run / "rl";
  if (stage == "generate") return run / "generate" / cfg.eval.policy;
  if (stage == "evaluate") return run / "eval" / cfg.eval.policy;
  throw std::invalid_argument("unknown stage: " + stage);
}

namespace {

struct Paths {
  fs::path run;
  fs::path reviews, summaries, comparisons, transcripts, stats;
  fs::path win_rates, removed, kept;
  fs::path allure, sft, rl;

  explicit Paths(const RunConfig& cfg) : run(cfg.run_dir) {
    reviews = run / "corpus" / "reviews.jsonl";
    summaries = run / "corpus" / "summaries.jsonl";
    comparisons = run / "corpus" / "comparisons.jsonl";
    transcripts = run / "corpus" / corpus::kTranscriptFile;
    win_rates = run / "graph" / "winrates.jsonl";
    removed = run / "graph" / "removed_edges.jsonl";
    kept = run / "graph" / "kept_edges.jsonl";
    allure = run / "allure" / "best";
    sft = run / "sft" / "best";
    rl = run / "rl" / "best";
  }
  fs::path generations(const std::string& policy) const { return run / "generate" / policy / "generations.jsonl"; }
};

void need(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw MissingArtifact(p, producer);
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Digest of a file, or of every regular file under a directory in path order.
std::string tree_digest(const fs::path& p) {
  if (fs::is_regular_file(p)) return file_sha256(p);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += fs::relative(f, p).generic_string() + "\t" + file_sha256(f) + "\n";
  return sha256_hex(acc);
}

std::string key_for(const fs::path& p, const fs::path& run) {
  const auto rel = fs::relative(p, run);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

std::map<std::string, Review> reviews_by_id(const fs::path& path) {
  std::map<std::string, Review> out;
  for (auto& r : read_records<Review>(path)) out.emplace(r.id, std::move(r));
  return out;
}

std::vector<AspectedSummary> summaries_in(const std::vector<AspectedSummary>& all, Split split) {
  std::vector<AspectedSummary> out;
  for (const auto& s : all) {
    if (s.split == split) out.push_back(s);
  }
  return out;
}

struct GenerationRecord {
  std::string summary_id;
  std::string review_id;
  Aspect aspect;
  std::string text;
  std::string decode_mode;
  std::uint64_t decode_seed = 0;
  bool empty = false;
};

std::string to_line(const GenerationRecord& g) {
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["summary_id"] = g.summary_id;
  j["review_id"] = g.review_id;
  j["aspect"] = g.aspect.surface;
  j["text"] = g.text;
  j["decode_mode"] = g.decode_mode;
  j["decode_seed"] = g.decode_seed;
  j["empty"] = g.empty;
  return j.dump();
}

std::vector<GenerationRecord> read_generations(const fs::path& path) {
  std::vector<GenerationRecord> out;
  for (const auto& line : read_lines(path)) {
    const auto j = json::parse(line);
    if (j.at("v") != kSchemaVersion) throw DecodeError(path.string() + ": unsupported schema version");
    GenerationRecord g;
    g.summary_id = j.at("summary_id");
    g.review_id = j.at("review_id");
    g.aspect = Aspect::from_surface(j.at("aspect").get<std::string>());
    g.text = j.at("text");
    g.decode_mode = j.at("decode_mode");
    g.decode_seed = j.at("decode_seed");
    g.empty = j.value("empty", false);
    out.push_back(std::move(g));
  }
  return out;
}

grounding::FacetQuerySet facets_for(const RunConfig& cfg) {
  return cfg.grounding.facets.empty() ? grounding::FacetQuerySet::defaults()
                                      : grounding::FacetQuerySet::load(cfg.grounding.facets);
}

// ---- stages ------------------------------------------------------------

std::vector<fs::path> build_corpus_inputs(const RunConfig& cfg, const StageOptions& opt) {
  if (cfg.corpus.reviews.empty()) throw ConfigError("corpus.reviews", "required");
  std::vector<fs::path> in = {cfg.corpus.reviews};
  if (!fs::exists(in[0])) throw ConfigError("corpus.reviews", "no such file " + cfg.corpus.reviews);
  if (opt.replay) {
    const fs::path t = cfg.corpus.transcripts.empty() ? Paths(cfg).transcripts : fs::path(cfg.corpus.transcripts);
    if (!fs::exists(t)) throw ConfigError("corpus.transcripts", "replay needs a transcript file; none at " + t.string());
    in.push_back(t);
  }
  if (!cfg.corpus.prompts_dir.empty()) {
    in.push_back(fs::path(cfg.corpus.prompts_dir) / "summary.txt");
    in.push_back(fs::path(cfg.corpus.prompts_dir) / "compare.txt");
  }
  return in;
}

std::vector<fs::path> build_corpus(const RunConfig& cfg, const StageOptions& opt) {
  const Paths p(cfg);
  const auto reviews = read_records<Review>(cfg.corpus.reviews);
  for (const auto& r : reviews) {
    const auto report = validate(r);
    if (!report.ok()) {
      throw std::runtime_error("review " + r.id + ": " + report.violations.front().field + ": " +
                               report.violations.front().message);
    }
  }
  fs::create_directories(p.run / "corpus");
  std::shared_ptr<corpus::JudgeBackend> backend;
  fs::path transcript = p.transcripts;
  if (opt.replay) {
    if (!cfg.corpus.transcripts.empty()) transcript = cfg.corpus.transcripts;
  } else {
    if (cfg.judge.endpoint.empty()) throw ConfigError("judge.endpoint", "required unless --replay is given");
    backend = std::make_shared<corpus::HttpJudgeBackend>(corpus::HttpJudgeConfig{
        cfg.judge.endpoint, cfg.judge.api_key_env, cfg.judge.max_tokens, cfg.judge.timeout_seconds});
  }
  corpus::JudgeClient judge(transcript, opt.replay ? corpus::JudgeMode::kReplay : corpus::JudgeMode::kRecord,
                            backend);
  const auto prompts = cfg.corpus.prompts_dir.empty() ? corpus::PromptSet::defaults()
                                                      : corpus::PromptSet::load(cfg.corpus.prompts_dir);
  corpus::CorpusConfig cc;
  cc.judge = {cfg.judge.model, cfg.judge.temperature, cfg.judge.max_words};
  cc.ratios = {cfg.corpus.train, cfg.corpus.dev, cfg.corpus.test};
  cc.seed = cfg.seed;
  cc.aspects_per_review = static_cast<std::size_t>(cfg.corpus.aspects_per_review);
  cc.pair_budget = static_cast<std::size_t>(cfg.corpus.pair_budget);
  cc.workers = static_cast<std::size_t>(cfg.corpus.workers);
  const auto result = corpus::build_corpus(reviews, corpus::FrequencyKeyphraseExtractor{}, judge, prompts, cc);

  const auto report = validate_corpus(reviews, result.summaries, result.comparisons);
  if (!report.ok()) {
    throw std::runtime_error("corpus failed validation: " + report.violations.front().field + ": " +
                             report.violations.front().message);
  }
  write_records(p.reviews, reviews);
  write_records(p.summaries, result.summaries);
  write_records(p.comparisons, result.comparisons);
  nlohmann::ordered_json stats;
  stats["reviews"] = reviews.size();
  stats["summaries"] = result.summaries.size();
  stats["skipped_summaries"] = result.skipped_summaries;
  stats["comparisons"] = result.comparisons.size();
  stats["comparison_retries"] = result.comparison_stats.retried;
  stats["comparisons_dropped"] = result.comparison_stats.dropped;
  stats["pairs_per_split"] = result.pairs_per_split;
  stats["backend_calls"] = judge.backend_calls();
  write_json(p.run / "corpus" / "stats.json", stats);
  spdlog::info("build-corpus: {} summaries, {} comparisons", result.summaries.size(), result.comparisons.size());
  std::vector<fs::path> out = {p.reviews, p.summaries, p.comparisons, p.run / "corpus" / "stats.json"};
  if (!opt.replay) out.push_back(p.transcripts);
  return out;
}

std::vector<fs::path> break_cycles_inputs(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  need(p.summaries, "build-corpus");
  need(p.comparisons, "build-corpus");
  return {p.summaries, p.comparisons};
}

std::vector<fs::path> break_cycles(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  const auto summaries = read_records<AspectedSummary>(p.summaries);
  const auto comparisons = read_records<PairwiseComparison>(p.comparisons);
  const auto cleaned = graph::clean_and_score(comparisons, summaries, cfg.graph.before_cleaning);
  write_records(p.win_rates, cleaned.win_rates);

  std::set<graph::Edge> removed(cleaned.removed.begin(), cleaned.removed.end());
  std::set<std::pair<std::string, std::string>> conflicted;
  for (const auto& [a, b] : cleaned.conflicts) {
    conflicted.insert({a, b});
    conflicted.insert({b, a});
  }
  std::set<graph::Edge> kept;
  for (const auto& c : comparisons) {
    const graph::Edge e{c.winner_id(), c.loser_id()};
    if (cfg.graph.before_cleaning || (!removed.count(e) && !conflicted.count({e.winner, e.loser}))) kept.insert(e);
  }
  std::vector<std::string> removed_lines, kept_lines;
  for (const auto& e : cleaned.removed) removed_lines.push_back(graph::to_line(e));
  for (const auto& e : kept) kept_lines.push_back(graph::to_line(e));
  write_lines(p.removed, removed_lines);
  write_lines(p.kept, kept_lines);
  nlohmann::ordered_json stats;
  stats["groups"] = cleaned.groups;
  stats["comparisons"] = comparisons.size();
  stats["removed_edges"] = cleaned.removed.size();
  stats["conflicting_pairs"] = cleaned.conflicts.size();
  stats["kept_edges"] = kept.size();
  stats["before_cleaning"] = cfg.graph.before_cleaning;
  write_json(p.run / "graph" / "stats.json", stats);
  spdlog::info("break-cycles: {} groups, {} edges removed", cleaned.groups, cleaned.removed.size());
  return {p.win_rates, p.removed, p.kept, p.run / "graph" / "stats.json"};
}

std::vector<fs::path> train_allure_inputs(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  need(p.summaries, "build-corpus");
  need(p.win_rates, "break-cycles");
  need(p.kept, "break-cycles");
  return {p.summaries, p.win_rates, p.kept};
}

std::vector<fs::path> train_allure(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  const auto summaries = read_records<AspectedSummary>(p.summaries);
  std::map<std::string, const AspectedSummary*> by_id;
  for (const auto& s : summaries) by_id[s.id] = &s;
  std::map<Split, std::vector<allure::AllureExample>> examples;
  for (const auto& w : read_records<WinRateRecord>(p.win_rates)) {
    const auto* s = by_id.at(w.summary_id);
    examples[s->split].push_back({s->aspect, s->text, w.win_rate, s->split});
  }
  std::map<Split, std::vector<allure::PairExample>> pairs;
  for (const auto& line : read_lines(p.kept)) {
    const auto e = graph::edge_from_line(line);
    const auto* w = by_id.at(e.winner);
    pairs[w->split].push_back({w->aspect, w->text, by_id.at(e.loser)->text});
  }

  allure::TrainConfig tc;
  tc.lr = cfg.allure.lr;
  tc.batch = cfg.allure.batch;
  tc.epochs = cfg.allure.epochs;
  tc.seed = cfg.seed;
  tc.run_dir = p.run;
  allure::EncoderConfig ec{cfg.allure.embed_dim, cfg.allure.hidden, cfg.allure.max_tokens};
  std::vector<allure::AllureExample> all_examples;
  std::vector<allure::PairExample> all_pairs;
  for (const auto& [split, xs] : examples) all_examples.insert(all_examples.end(), xs.begin(), xs.end());
  for (const auto& [split, xs] : pairs) all_pairs.insert(all_pairs.end(), xs.begin(), xs.end());
  const Vocabulary vocab = allure::build_vocabulary(all_examples, all_pairs);

  nlohmann::ordered_json report;
  report["kind"] = cfg.allure.kind;
  std::optional<allure::AllureModel> best;
  if (cfg.allure.kind == "regression") {
    if (examples[Split::kTrain].empty()) throw std::runtime_error("train-allure: no train-split win rates");
    if (cfg.allure.sweep) {
      const auto sweep = allure::sweep_regression(examples[Split::kTrain], examples[Split::kDev], tc);
      report["best_lr"] = sweep.best_lr;
      report["dev_rmse_by_lr"] = sweep.dev_rmse_by_lr;
      best = sweep.fit.best;
    } else {
      best = allure::fit_regression(examples[Split::kTrain], examples[Split::kDev], tc, ec, vocab).best;
    }
  } else {
    if (pairs[Split::kTrain].empty()) throw std::runtime_error("train-allure: no train-split comparisons");
    best = allure::fit_siamese(pairs[Split::kTrain], pairs[Split::kDev], tc, ec, vocab).best;
  }
  for (Split split : {Split::kDev, Split::kTest}) {
    if (examples[split].empty() && pairs[split].empty()) continue;
    const auto m = allure::evaluate_rm(allure::as_score_fn(*best), pairs[split], examples[split]);
    report[std::string(to_string(split))] = {{"rmse", m.rmse},
                                             {"pairwise_accuracy", m.pairwise_accuracy},
                                             {"examples", examples[split].size()},
                                             {"pairs", pairs[split].size()}};
  }
  write_json(p.run / "allure" / "eval.json", report);
  return {p.run / "allure" / "best", p.run / "allure" / "last", p.run / "allure" / "metrics.jsonl",
          p.run / "allure" / "eval.json"};
}

std::vector<fs::path> train_sft_inputs(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  need(p.reviews, "build-corpus");
  need(p.summaries, "build-corpus");
  return {p.reviews, p.summaries};
}

std::vector<fs::path> train_sft(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  const auto reviews = reviews_by_id(p.reviews);
  const auto summaries = read_records<AspectedSummary>(p.summaries);
  std::vector<gen::SftExample> train, dev, vocab_corpus;
  for (const auto& s : summaries) {
    gen::SftExample e{reviews.at(s.review_id), s.aspect, s.text};
    if (s.split == Split::kTrain) train.push_back(e);
    if (s.split == Split::kDev) dev.push_back(e);
    // Test references stay out of the vocabulary; their sources do not.
    if (s.split == Split::kTest) e.reference.clear();
    vocab_corpus.push_back(std::move(e));
  }
  if (train.empty()) throw std::runtime_error("train-sft: no train-split references");
  gen::ModelConfig mc{cfg.sft.embed_dim, cfg.sft.hidden, cfg.sft.max_source_tokens};
  gen::PolicyHandle policy(std::make_unique<gen::Seq2SeqModel>(gen::build_vocabulary(vocab_corpus), mc, cfg.seed));
  gen::SftConfig sc;
  sc.lr = cfg.sft.lr;
  sc.batch = cfg.sft.batch;
  sc.epochs = cfg.sft.epochs;
  sc.seed = cfg.seed;
  sc.run_dir = p.run;
  const auto result = gen::train_sft(policy, train, dev, sc);
  spdlog::info("train-sft: best epoch {} loss {:.4f}", result.best_epoch, result.best_loss);
  return {p.run / "sft" / "best", p.run / "sft" / "last", p.run / "sft" / "metrics.jsonl"};
}

std::vector<fs::path> train_rl_inputs(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  need(p.reviews, "build-corpus");
  need(p.summaries, "build-corpus");
  need(p.sft / "model.json", "train-sft");
  std::vector<fs::path> in = {p.reviews, p.summaries, p.sft};
  if (cfg.rl.use_allure) {
    need(p.allure / "model.json", "train-allure");
    in.push_back(p.allure);
  }
  if (!cfg.grounding.facets.empty()) in.push_back(cfg.grounding.facets);
  return in;
}

std::vector<fs::path> train_rl(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  const auto reviews = reviews_by_id(p.reviews);
  std::vector<rl::Prompt> prompts;
  for (const auto& s : read_records<AspectedSummary>(p.summaries)) {
    if (s.split == Split::kTrain) prompts.push_back({reviews.at(s.review_id), s.aspect});
  }
  if (prompts.empty()) throw std::runtime_error("train-rl: no train-split prompts");

  gen::PolicyHandle policy(gen::Seq2SeqModel::load(p.sft));
  const gen::PolicyHandle reference = policy.frozen_copy();

  rl::RewardModels rewards;
  std::optional<allure::AllureModel> allure_model;
  if (cfg.rl.use_allure) {
    allure_model = allure::AllureModel::load(p.allure);
    rewards.allure = allure::as_score_fn(*allure_model);
  }
  const auto entail = std::make_shared<grounding::LexicalEntailmentScorer>(
      static_cast<std::size_t>(cfg.grounding.max_premise_words));
  const auto answer = std::make_shared<grounding::KeywordAnswerabilityScorer>();
  const auto facets = std::make_shared<grounding::FacetQuerySet>(facets_for(cfg));
  const bool normalize = cfg.grounding.normalize_veracity;
  const double threshold = cfg.grounding.answer_threshold;
  rewards.veracity = [entail, normalize](const std::string& review, const std::string& text) {
    return grounding::veracity_reward(*entail, review, text, {.normalize = normalize}).value;
  };
  rewards.information = [answer, facets, threshold](const Aspect& a, const std::string& review,
                                                    const std::string& text) {
    return grounding::information_reward(*answer, *facets, a, review, text, threshold).value;
  };

  rl::RLConfig rc;
  rc.lr = cfg.rl.lr;
  rc.batch = cfg.rl.batch;
  rc.epochs = cfg.rl.epochs;
  rc.weights = {cfg.rl.alpha, cfg.rl.beta, cfg.rl.gamma};
  rc.use_allure = cfg.rl.use_allure;
  rc.use_veracity = cfg.rl.use_veracity;
  rc.use_information = cfg.rl.use_information;
  rc.rollout = {gen::DecodeMode::kSample, cfg.rl.temperature, 1, cfg.rl.max_new_tokens, 0};
  rc.seed = cfg.seed;
  rc.clip_ratio = cfg.rl.clip_ratio;
  rc.rollouts_per_prompt = cfg.rl.rollouts_per_prompt;
  rc.per_token_kl = cfg.rl.per_token_kl;
  rc.kl_ceiling = cfg.rl.kl_ceiling;
  rc.run_dir = p.run;
  const auto result = rl::ppo_train(policy, reference, rewards, prompts, rc);
  spdlog::info("train-rl: best epoch {} mean total {:.4f}", result.best_epoch, result.best_mean_total);
  return {p.run / "rl" / "best", p.run / "rl" / "last", p.run / "rl" / "metrics.jsonl", p.run / "rl" / "rewards.jsonl"};
}

fs::path policy_checkpoint(const RunConfig& cfg, const std::string& policy) {
  return (policy == "rl" ? Paths(cfg).rl : Paths(cfg).sft);
}

std::vector<fs::path> generate_inputs(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  need(p.reviews, "build-corpus");
  need(p.summaries, "build-corpus");
  const fs::path ckpt = policy_checkpoint(cfg, cfg.eval.policy);
  need(ckpt / "model.json", cfg.eval.policy == "rl" ? "train-rl" : "train-sft");
  return {p.reviews, p.summaries, ckpt};
}

std::vector<fs::path> generate(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  const auto reviews = reviews_by_id(p.reviews);
  const gen::PolicyHandle policy(gen::Seq2SeqModel::load(policy_checkpoint(cfg, cfg.eval.policy)));
  gen::DecodeConfig dc;
  dc.mode = gen::parse_decode_mode(cfg.eval.decode);
  dc.temperature = cfg.eval.temperature;
  dc.beam_width = cfg.eval.beam_width;
  dc.max_new_tokens = cfg.eval.max_new_tokens;
  std::vector<std::string> lines;
  int empty = 0;
  for (const auto& s : summaries_in(read_records<AspectedSummary>(p.summaries), Split::kTest)) {
    dc.seed = stable_hash64(std::to_string(cfg.seed) + ":" + s.id);
    const auto g = gen::generate(policy, s.aspect, reviews.at(s.review_id), dc);
    empty += g.empty ? 1 : 0;
    lines.push_back(to_line(GenerationRecord{s.id, s.review_id, s.aspect, g.text, cfg.eval.decode, dc.seed, g.empty}));
  }
  const fs::path out = p.generations(cfg.eval.policy);
  fs::create_directories(out.parent_path());
  write_lines(out, lines);
  spdlog::info("generate: {} copies from the {} policy, {} empty", lines.size(), cfg.eval.policy, empty);
  return {out};
}

fs::path generations_path(const RunConfig& cfg) {
  return cfg.eval.generations.empty() ? Paths(cfg).generations(cfg.eval.policy) : fs::path(cfg.eval.generations);
}

std::vector<fs::path> evaluate_inputs(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  need(p.reviews, "build-corpus");
  need(p.summaries, "build-corpus");
  const fs::path gens = generations_path(cfg);
  need(gens, "generate");
  std::vector<fs::path> in = {p.reviews, p.summaries, gens};
  if (!cfg.eval.baseline.empty()) {
    need(p.generations(cfg.eval.baseline), "generate --set eval.policy=" + cfg.eval.baseline);
    in.push_back(p.generations(cfg.eval.baseline));
  }
  if (!cfg.grounding.facets.empty()) in.push_back(cfg.grounding.facets);
  return in;
}

std::vector<fs::path> evaluate(const RunConfig& cfg, const StageOptions&) {
  const Paths p(cfg);
  const fs::path dir = stage_dir(cfg, "evaluate");
  const auto reviews = reviews_by_id(p.reviews);
  const auto summaries = read_records<AspectedSummary>(p.summaries);
  std::map<std::string, const AspectedSummary*> by_id;
  for (const auto& s : summaries) by_id[s.id] = &s;
  const auto gens = read_generations(generations_path(cfg));
  if (gens.empty()) throw std::runtime_error("evaluate: no generations in " + generations_path(cfg).string());

  std::vector<std::string> candidates, references;
  std::vector<eval::InfoSample> samples;
  for (const auto& g : gens) {
    const auto it = by_id.find(g.summary_id);
    if (it == by_id.end()) throw std::runtime_error("evaluate: unknown summary id " + g.summary_id);
    candidates.push_back(g.text);
    references.push_back(it->second->text);
    samples.push_back({g.aspect, reviews.at(g.review_id).text, g.text});
  }
  const std::set<std::string> wanted(cfg.eval.metrics.begin(), cfg.eval.metrics.end());
  eval::MetricReport report;
  if (wanted.count("rouge")) report.rouge = eval::rouge_scores(candidates, references);
  if (wanted.count("ppl")) {
    std::vector<std::string> train_refs;
    for (const auto& s : summaries_in(summaries, Split::kTrain)) train_refs.push_back(s.text);
    if (train_refs.empty()) throw std::runtime_error("evaluate: perplexity needs train-split references");
    const auto lm = eval::BigramLm::train(train_refs);
    report.ppl_by_lm[lm.name()] = eval::perplexity(lm, candidates).value;
  }
  if (wanted.count("info")) {
    report.info_score = eval::information_score_dataset(grounding::KeywordAnswerabilityScorer{}, facets_for(cfg),
                                                        samples, cfg.grounding.answer_threshold);
  }
  report.length = eval::length_stats(candidates);
  write_json(dir / "report.json", report.to_json());
  std::vector<fs::path> out = {dir / "report.json"};

  if (!cfg.eval.baseline.empty()) {
    std::map<std::string, std::string> other;
    for (const auto& g : read_generations(p.generations(cfg.eval.baseline))) other[g.summary_id] = g.text;
    std::vector<eval::InfoSample> ours;
    std::vector<std::string> theirs;
    for (std::size_t i = 0; i < gens.size(); ++i) {
      const auto it = other.find(gens[i].summary_id);
      if (it == other.end()) continue;
      ours.push_back(samples[i]);
      theirs.push_back(it->second);
    }
    std::vector<std::string> lines;
    for (const auto& b : eval::make_ballots(ours, cfg.eval.policy, theirs, cfg.eval.baseline, cfg.eval.ballot_seed)) {
      lines.push_back(eval::to_line(b));
    }
    write_lines(dir / "ballots.jsonl", lines);
    out.push_back(dir / "ballots.jsonl");
  }
  return out;
}

nlohmann::json stage_slice(const std::string& stage, const RunConfig& cfg, const StageOptions& opt) {
  const json full = to_json(cfg);
  json slice;
  slice["stage"] = stage;
  slice["seed"] = cfg.seed;
  if (stage == "build-corpus") {
    slice["judge"] = full["judge"];
    slice["corpus"] = full["corpus"];
    slice["replay"] = opt.replay;
  } else if (stage == "break-cycles") {
    slice["graph"] = full["graph"];
  } else if (stage == "train-allure") {
    slice["allure"] = full["allure"];
  } else if (stage == "train-sft") {
    slice["sft"] = full["sft"];
  } else if (stage == "train-rl") {
    slice["rl"] = full["rl"];
    slice["grounding"] = full["grounding"];
  } else if (stage == "generate") {
    json e = full["eval"];
    for (const char* k : {"metrics", "generations", "baseline", "ballot_seed"}) e.erase(k);
    slice["eval"] = e;
  } else {
    slice["eval"] = full["eval"];
    slice["grounding"] = full["grounding"];
  }
  return slice;
}

struct StageImpl {
  std::function<std::vector<fs::path>(const RunConfig&, const StageOptions&)> inputs;
  std::function<std::vector<fs::path>(const RunConfig&, const StageOptions&)> run;
};

const std::map<std::string, StageImpl>& stages() {
  static const std::map<std::string, StageImpl> table = {
      {"build-corpus", {build_corpus_inputs, build_corpus}},
      {"break-cycles", {break_cycles_inputs, break_cycles}},
      {"train-allure", {train_allure_inputs, train_allure}},
      {"train-sft", {train_sft_inputs, train_sft}},
      {"train-rl", {train_rl_inputs, train_rl}},
      {"generate", {generate_inputs, generate}},
      {"evaluate", {evaluate_inputs, evaluate}},
  };
  return table;
}

nlohmann::ordered_json digests(const std::vector<fs::path>& paths, const fs::path& run) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& path : paths) out[key_for(path, run)] = tree_digest(path);
  return out;
}

bool up_to_date(const fs::path& manifest, const std::string& config_hash, const nlohmann::ordered_json& inputs,
                const fs::path& run) {
  if (!fs::exists(manifest)) return false;
  const auto m = nlohmann::ordered_json::parse(std::ifstream(manifest), nullptr, false);
  if (m.is_discarded() || m.value("config_hash", "") != config_hash || !m.contains("inputs") || m.at("inputs") != inputs) {
    return false;
  }
  for (const auto& [key, digest] : m.at("outputs").items()) {
    const fs::path path = fs::path(key).is_absolute() ? fs::path(key) : run / key;
    if (!fs::exists(path) || tree_digest(path) != digest.get<std::string>()) return false;
  }
  return true;
}

}  // namespace

StageOutcome run_stage(const std::string& stage, const RunConfig& cfg, const StageOptions& options) {
  const auto it = stages().find(stage);
  if (it == stages().end()) throw std::invalid_argument("unknown stage: " + stage);
  validate(cfg);
  const fs::path run = cfg.run_dir;
  RunLock lock(run);
  const auto inputs = it->second.inputs(cfg, options);
  const std::string config_hash = sha256_hex(stage_slice(stage, cfg, options).dump());
  const auto input_digests = digests(inputs, run);
  const fs::path manifest = stage_dir(cfg, stage) / "manifest.json";
  if (!options.force && up_to_date(manifest, config_hash, input_digests, run)) {
    spdlog::info("{}: up to date", stage);
    return StageOutcome::kUpToDate;
  }
  const auto outputs = it->second.run(cfg, options);
  nlohmann::ordered_json m;
  m["v"] = kSchemaVersion;
  m["stage"] = stage;
  m["config_hash"] = config_hash;
  m["seed"] = cfg.seed;
  m["inputs"] = input_digests;
  m["outputs"] = digests(outputs, run);
  write_json(manifest, m);
  return StageOutcome::kRan;
}

}  // namespace copywriter::pipeline

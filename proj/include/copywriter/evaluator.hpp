#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "copywriter/grounding.hpp"
#include "copywriter/records.hpp"

namespace copywriter::eval {

struct RougeScores {
  double rouge_1 = 0.0;
  double rouge_2 = 0.0;
  double rouge_l = 0.0;
};

// Lowercase, strip non-alphanumerics from each whitespace token, drop
// tokens that end up empty. No stemming.
std::vector<std::string> rouge_tokens(std::string_view text);

// F1 for a single candidate/reference pair.
RougeScores rouge_pair(std::string_view candidate, std::string_view reference);

// Corpus mean of per-pair F1. Throws on length mismatch.
RougeScores rouge_scores(const std::vector<std::string>& candidates,
                         const std::vector<std::string>& references);

// Causal LM contract: natural-log probability of every scored token of
// `text`, including the end-of-sequence token if the model scores one.
class CausalLm {
 public:
  virtual ~CausalLm() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> token_log_probs(std::string_view text) const = 0;
};

// Uniform distribution over a fixed vocabulary; one score per word.
class UniformLm final : public CausalLm {
 public:
  explicit UniformLm(std::size_t vocab_size) : vocab_size_(vocab_size) {}
  std::string name() const override { return "uniform"; }
  std::vector<double> token_log_probs(std::string_view text) const override;

 private:
  std::size_t vocab_size_;
};

// Add-k smoothed word bigram model over lowercased whitespace tokens, with
// sentence boundary tokens and an <unk> slot.
class BigramLm final : public CausalLm {
 public:
  static BigramLm train(const std::vector<std::string>& texts, double add_k = 0.1);
  std::string name() const override { return "bigram"; }
  std::vector<double> token_log_probs(std::string_view text) const override;

  nlohmann::json to_json() const;
  static BigramLm from_json(const nlohmann::json& j);

 private:
  std::map<std::string, int> vocab_;
  std::map<std::pair<int, int>, double> bigram_;
  std::vector<double> context_totals_;
  double add_k_ = 0.1;
  int id(const std::string& w) const;
};

struct PerplexityResult {
  double value = 0.0;
  std::size_t tokens = 0;
  std::size_t skipped = 0;
};

// exp of the token-weighted mean negative log-likelihood across all texts.
// Empty texts are skipped with a warning.
PerplexityResult perplexity(const CausalLm& lm, const std::vector<std::string>& texts);

struct LengthStats {
  double avg_words = 0.0;
  double std_words = 0.0;  // population standard deviation
};

LengthStats length_stats(const std::vector<std::string>& texts);

struct InfoSample {
  Aspect aspect;
  std::string review;
  std::string candidate;
};

// 100 x mean information reward over samples; 0 for an empty set.
double information_score_dataset(const grounding::AnswerabilityScorer& scorer,
                                 const grounding::FacetQuerySet& facets,
                                 const std::vector<InfoSample>& samples,
                                 double threshold = grounding::kDefaultAnswerThreshold);

enum class Verdict { kFirst, kSecond, kTie };

inline constexpr std::array<std::string_view, 3> kBallotQuestions = {"attractiveness", "faithfulness",
                                                                     "fluency"};

struct PairwiseBallot {
  std::string ballot_id;
  std::string review;
  Aspect aspect;
  std::string copy_1;
  std::string copy_2;
  std::string system_1;  // system that produced copy_1
  std::string system_2;
  std::uint64_t side_seed = 0;
  // question -> raw verdict string as collected ("first", "second", "tie").
  std::map<std::string, std::string> verdicts;
};

std::optional<Verdict> parse_verdict(std::string_view raw);

// Randomizes which system is shown first, per ballot, from `seed`.
std::vector<PairwiseBallot> make_ballots(const std::vector<InfoSample>& system_a_outputs,
                                         const std::string& system_a,
                                         const std::vector<std::string>& system_b_outputs,
                                         const std::string& system_b, std::uint64_t seed);

std::string to_line(const PairwiseBallot& b);
PairwiseBallot ballot_from_line(std::string_view line);

struct NetPreference {
  // question -> baseline net percentage: loss% - win% of the system under test.
  std::map<std::string, double> net;
  std::map<std::string, double> win_pct;
  std::map<std::string, double> loss_pct;
  std::map<std::string, double> tie_pct;
  std::size_t excluded = 0;
};

// De-randomizes each ballot to the perspective of `system_under_test`.
// Ballots whose verdict does not parse, or that do not involve the system,
// are excluded from that question and counted.
NetPreference net_preference(const std::vector<PairwiseBallot>& ballots,
                             const std::string& system_under_test);

struct MetricReport {
  std::optional<RougeScores> rouge;
  std::map<std::string, double> ppl_by_lm;
  std::optional<LengthStats> length;
  std::optional<double> info_score;

  nlohmann::ordered_json to_json() const;
};

}  // namespace copywriter::eval

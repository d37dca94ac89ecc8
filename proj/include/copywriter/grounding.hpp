#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "copywriter/records.hpp"

namespace copywriter::grounding {

// Two-way NLI classifier: (premise, hypothesis) -> logits over
// {entailment, not-entailment}.
class EntailmentScorer {
 public:
  virtual ~EntailmentScorer() = default;
  virtual std::array<double, 2> logits(std::string_view premise,
                                       std::string_view hypothesis) const = 0;
  // Premise budget in whitespace words; longer premises are cut from the right.
  virtual std::size_t max_premise_words() const { return 512; }
};

// QNLI-style classifier: probability that `paragraph` answers `question`.
class AnswerabilityScorer {
 public:
  virtual ~AnswerabilityScorer() = default;
  virtual double score(std::string_view question, std::string_view paragraph) const = 0;
};

// Deterministic lexical stand-in for an NLI model. The entailment logit
// grows with the share of hypothesis content words found in the premise,
// jumps when the hypothesis occurs verbatim in the premise, and drops when
// the two disagree on negation.
class LexicalEntailmentScorer final : public EntailmentScorer {
 public:
  explicit LexicalEntailmentScorer(std::size_t max_premise_words = 512)
      : max_premise_words_(max_premise_words) {}

  std::array<double, 2> logits(std::string_view premise,
                               std::string_view hypothesis) const override;
  std::size_t max_premise_words() const override { return max_premise_words_; }

 private:
  std::size_t max_premise_words_;
};

// Keyword-overlap stand-in for a QNLI model. Question content words that
// name a known facet ("price", "smell", ...) are facet words; the rest are
// subject words. A facet is hit when the paragraph contains the facet word
// or one of its cues ("price" is hit by "$", "costs", ...).
// Score = [any facet hit] * (0.5 + 0.5 * subject coverage); questions with
// no facet word count as hit.
class KeywordAnswerabilityScorer final : public AnswerabilityScorer {
 public:
  KeywordAnswerabilityScorer();

  double score(std::string_view question, std::string_view paragraph) const override;

 private:
  std::map<std::string, std::set<std::string>> cues_;
};

// Content words: lowercased, punctuation stripped (except '$'), stopwords
// removed, trailing plural 's' folded.
std::vector<std::string> content_words(std::string_view text);

class FacetQuerySet {
 public:
  // The twelve restaurant facets, in fixed order.
  static FacetQuerySet defaults();
  // One template per line with a `{k}` placeholder; blank lines skipped.
  static FacetQuerySet load(const std::filesystem::path& path);
  explicit FacetQuerySet(std::vector<std::string> templates);

  const std::vector<std::string>& templates() const { return templates_; }
  std::size_t size() const { return templates_.size(); }

 private:
  std::vector<std::string> templates_;
};

void write_facets(const std::filesystem::path& path, const FacetQuerySet& facets);

std::vector<std::string> instantiate_facets(const FacetQuerySet& facets, const Aspect& aspect);

inline constexpr double kDefaultAnswerThreshold = 0.5;

bool answerable(const AnswerabilityScorer& scorer, std::string_view question,
                std::string_view text, double threshold = kDefaultAnswerThreshold);

struct VeracityOptions {
  // Report softmax P(entailment) instead of the raw entailment logit.
  bool normalize = false;
};

struct VeracityResult {
  double value = 0.0;
  bool premise_truncated = false;
};

// Premise = review, hypothesis = candidate. Both must be non-empty.
VeracityResult veracity_reward(const EntailmentScorer& scorer, std::string_view review_text,
                               std::string_view candidate, VeracityOptions options = {});

struct InformationResult {
  double value = 0.0;
  int grounded = 0;         // answerable in both review and candidate
  int answered = 0;         // answerable in candidate
};

// Fraction of candidate-answerable facets also answerable from the
// review; 0 when the candidate answers none.
InformationResult information_reward(const AnswerabilityScorer& scorer, const FacetQuerySet& facets,
                                     const Aspect& aspect, std::string_view review_text,
                                     std::string_view candidate,
                                     double threshold = kDefaultAnswerThreshold);

}  // namespace copywriter::grounding

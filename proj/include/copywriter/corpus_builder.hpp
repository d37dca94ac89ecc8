#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "copywriter/random.hpp"
#include "copywriter/records.hpp"

namespace copywriter::corpus {

// A review could not be processed; carries the review id.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string review_id, const std::string& what)
      : std::runtime_error(review_id + ": " + what), review_id_(std::move(review_id)) {}
  const std::string& review_id() const { return review_id_; }

 private:
  std::string review_id_;
};

// The judge produced no usable summary text.
class SummaryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Replay mode found no transcript for a request.
class CacheMiss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Keyphrase {
  std::string text;
  double confidence = 0.0;
};

class KeyphraseExtractor {
 public:
  virtual ~KeyphraseExtractor() = default;
  virtual std::vector<Keyphrase> extract(std::string_view text) const = 0;
};

// Ranks single content words by frequency, ties broken by first
// occurrence. Plurals fold onto their singular.
class FrequencyKeyphraseExtractor final : public KeyphraseExtractor {
 public:
  std::vector<Keyphrase> extract(std::string_view text) const override;
};

// Deduplicated by normalized form, highest confidence first.
std::vector<Aspect> extract_aspects(const Review& review, const KeyphraseExtractor& extractor);

struct JudgeRequest {
  std::string kind;  // "summary" or "compare"
  std::string prompt;
  std::string model;
  double temperature = 0.0;
};

// Cache key: SHA-256 over the canonical serialization of the request.
std::string request_key(const JudgeRequest& request);

class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  virtual std::string complete(const JudgeRequest& request) = 0;
};

struct HttpJudgeConfig {
  std::string endpoint;  // e.g. "https://host:443/v1/completions"
  std::string api_key_env = "COPYWRITER_JUDGE_API_KEY";
  int max_tokens = 128;
  int timeout_seconds = 60;
};

// POSTs {"model","prompt","temperature","max_tokens"} as JSON and accepts
// either {"text": ...} or {"choices":[{"text": ...}]} back. The bearer
// token is read from the environment variable named in the config.
class HttpJudgeBackend final : public JudgeBackend {
 public:
  explicit HttpJudgeBackend(HttpJudgeConfig config);
  std::string complete(const JudgeRequest& request) override;

 private:
  HttpJudgeConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::string api_key_;
};

enum class JudgeMode { kRecord, kReplay };

// Transcript-caching front of a judge. In record mode a miss goes to the
// backend and the response is appended to the transcript file before it is
// returned. In replay mode a miss throws CacheMiss. Safe for concurrent
// callers; the transcript file has a single writer.
class JudgeClient {
 public:
  JudgeClient(std::filesystem::path transcript_path, JudgeMode mode,
              std::shared_ptr<JudgeBackend> backend = nullptr);

  std::string complete(const JudgeRequest& request);

  JudgeMode mode() const { return mode_; }
  std::size_t cache_size() const;
  std::size_t backend_calls() const;

 private:
  std::filesystem::path path_;
  JudgeMode mode_;
  std::shared_ptr<JudgeBackend> backend_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::string> cache_;
  std::size_t backend_calls_ = 0;
};

inline constexpr const char* kTranscriptFile = "transcripts.jsonl";

struct PromptSet {
  std::string summary;  // placeholders {aspect} {review} {max_words}
  std::string compare;  // placeholders {aspect} {first} {second}

  static PromptSet defaults();
  // Reads summary.txt and compare.txt from `dir`.
  static PromptSet load(const std::filesystem::path& dir);
};

struct JudgeSettings {
  std::string model = "gpt-3.5-turbo";
  double temperature = 0.0;
  int max_words = kMaxReferenceWords;
};

std::string summary_id(const std::string& review_id, const Aspect& aspect);

// Returns the judge's text (surrounding whitespace trimmed) with its word
// count; texts over the limit are kept and flagged "over_word_limit".
AspectedSummary request_summary(JudgeClient& judge, const PromptSet& prompts,
                                const JudgeSettings& settings, const Review& review,
                                const Aspect& aspect, Split split);

enum class ComparisonVerdict { kFirst, kSecond, kTie, kUnparseable };

ComparisonVerdict parse_comparison_verdict(std::string_view response);

struct ComparisonStats {
  std::size_t requested = 0;
  std::size_t retried = 0;
  std::size_t dropped = 0;
};

// Presentation order is drawn from (seed, pair ids) so results do not depend
// on scheduling. A tie or unparseable answer is retried once in swapped
// order; a second failure drops the pair.
std::optional<PairwiseComparison> request_comparison(JudgeClient& judge, const PromptSet& prompts,
                                                     const JudgeSettings& settings,
                                                     const AspectedSummary& a,
                                                     const AspectedSummary& b, std::uint64_t seed,
                                                     ComparisonStats* stats = nullptr);

struct SplitRatios {
  double train = 0.7;
  double dev = 0.1;
  double test = 0.2;
};

struct SplitAssignment {
  std::map<std::string, Split> by_review;
  SplitRatios ratios;
  std::uint64_t seed = 0;

  std::size_t count(Split split) const;
};

// Shuffles the sorted review ids with `seed` and cuts contiguous blocks of
// round(n * train) and round(n * dev); the rest is test.
SplitAssignment assign_splits(const std::vector<Review>& reviews, SplitRatios ratios,
                              std::uint64_t seed);

using PairSchedule = std::vector<std::pair<std::string, std::string>>;

// Groups are keyed by (normalized aspect, split) and scheduled in key order.
// Within a group every unordered pair appears once; with a budget below
// C(n,2) a seeded sample of `budget` pairs is kept. budget 0 means no cap.
PairSchedule build_pair_schedule(const std::vector<AspectedSummary>& summaries,
                                 std::size_t budget, std::uint64_t seed);

struct CorpusConfig {
  JudgeSettings judge;
  SplitRatios ratios;
  std::uint64_t seed = 13;
  std::size_t aspects_per_review = 3;
  std::size_t pair_budget = 0;
  std::size_t workers = 1;
};

struct CorpusResult {
  SplitAssignment splits;
  std::vector<AspectedSummary> summaries;
  std::vector<PairwiseComparison> comparisons;
  std::size_t skipped_summaries = 0;
  ComparisonStats comparison_stats;
  std::map<std::string, std::size_t> pairs_per_split;
};

// Full dataset-construction pass. Judge calls may run on `workers` threads;
// outputs are committed in schedule order.
CorpusResult build_corpus(const std::vector<Review>& reviews, const KeyphraseExtractor& extractor,
                          JudgeClient& judge, const PromptSet& prompts, const CorpusConfig& config);

}  // namespace copywriter::corpus

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace copywriter {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kMaxReferenceWords = 30;

enum class Split { kTrain, kDev, kTest };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct Review {
  std::string id;
  std::string text;
  std::map<std::string, std::string> meta;

  bool operator==(const Review&) const = default;
};

struct Aspect {
  std::string surface;
  std::string normalized;

  // Builds an aspect whose normalized form is derived from `surface`.
  static Aspect from_surface(std::string_view surface);

  bool operator==(const Aspect&) const = default;
};

struct AspectedSummary {
  std::string id;
  std::string review_id;
  Aspect aspect;
  std::string text;
  Split split = Split::kTrain;
  int word_count = 0;
  // Non-fatal conditions noticed at creation time, e.g. "over_word_limit".
  std::vector<std::string> flags;

  bool operator==(const AspectedSummary&) const = default;
};

enum class Winner { kA, kB };

struct PairwiseComparison {
  Aspect aspect;
  std::string id_a;
  std::string id_b;
  Winner winner = Winner::kA;
  std::map<std::string, std::string> judge_meta;

  const std::string& winner_id() const { return winner == Winner::kA ? id_a : id_b; }
  const std::string& loser_id() const { return winner == Winner::kA ? id_b : id_a; }

  bool operator==(const PairwiseComparison&) const = default;
};

struct WinRateRecord {
  std::string summary_id;
  int wins = 0;
  int total = 0;
  double win_rate = 0.0;

  bool operator==(const WinRateRecord&) const = default;
};

struct RewardWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;

  bool operator==(const RewardWeights&) const = default;
};

struct RewardBundle {
  double r_a = 0.0;
  double r_v = 0.0;
  double r_i = 0.0;
  double kl_penalty = 0.0;
  double total = 0.0;
  RewardWeights weights;

  bool operator==(const RewardBundle&) const = default;
};

// Raised when a record line is not well-formed: bad JSON, wrong types,
// missing or unknown keys, unsupported schema version. Distinct from an
// invariant violation on a well-formed record.
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Violation {
  std::string field;
  std::string message;

  bool operator==(const Violation&) const = default;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(std::string_view field) const;
};

ValidationReport validate(const Review& r);
ValidationReport validate(const Aspect& a);
ValidationReport validate(const AspectedSummary& s);
ValidationReport validate(const PairwiseComparison& c);
ValidationReport validate(const WinRateRecord& w);
ValidationReport validate(const RewardBundle& b);

enum class RecordKind { kReview, kSummary, kComparison, kWinRate, kReward };

// Decodes one line as the given kind and validates it. Throws DecodeError
// for malformed input; invariant problems come back in the report.
ValidationReport validate_record(std::string_view line, RecordKind kind);

// Cross-record checks: unique ids, references that resolve, and every
// comparison staying inside one (aspect, split) group.
ValidationReport validate_corpus(const std::vector<Review>& reviews,
                                 const std::vector<AspectedSummary>& summaries,
                                 const std::vector<PairwiseComparison>& comparisons);

// One line, no trailing newline, keys in fixed order with "v" first.
std::string to_line(const Review& r);
std::string to_line(const AspectedSummary& s);
std::string to_line(const PairwiseComparison& c);
std::string to_line(const WinRateRecord& w);
std::string to_line(const RewardBundle& b);

template <typename T>
T from_line(std::string_view line);

template <>
Review from_line<Review>(std::string_view line);
template <>
AspectedSummary from_line<AspectedSummary>(std::string_view line);
template <>
PairwiseComparison from_line<PairwiseComparison>(std::string_view line);
template <>
WinRateRecord from_line<WinRateRecord>(std::string_view line);
template <>
RewardBundle from_line<RewardBundle>(std::string_view line);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

template <typename T>
std::vector<T> read_records(const std::filesystem::path& path) {
  std::vector<T> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    try {
      out.push_back(from_line<T>(line));
    } catch (const DecodeError& e) {
      throw DecodeError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

template <typename T>
void write_records(const std::filesystem::path& path, const std::vector<T>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(to_line(r));
  write_lines(path, lines);
}

}  // namespace copywriter

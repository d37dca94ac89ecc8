#include "copywriter/records.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "copywriter/text.hpp"

namespace copywriter {

using ojson = nlohmann::ordered_json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "dev") return Split::kDev;
  if (name == "test") return Split::kTest;
  throw DecodeError("unknown split '" + std::string(name) + "'");
}

Aspect Aspect::from_surface(std::string_view surface) {
  return Aspect{std::string(surface), normalize_phrase(surface)};
}

bool ValidationReport::has(std::string_view field) const {
  for (const auto& v : violations) {
    if (v.field == field) return true;
  }
  return false;
}

namespace {

// Strict object reader: every key must be consumed exactly once, and no
// unknown key may remain.
class ObjectReader {
 public:
  explicit ObjectReader(std::string_view line) {
    try {
      doc_ = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DecodeError(std::string("malformed JSON: ") + e.what());
    }
    if (!doc_.is_object()) throw DecodeError("record must be a JSON object");
    const auto v = doc_.find("v");
    if (v == doc_.end()) throw DecodeError("missing schema version 'v'");
    if (!v->is_number_integer() || v->get<int>() != kSchemaVersion) {
      throw DecodeError("unsupported schema version");
    }
    seen_.insert("v");
  }

  explicit ObjectReader(ojson nested, std::string prefix)
      : doc_(std::move(nested)), prefix_(std::move(prefix)) {
    if (!doc_.is_object()) throw DecodeError(prefix_ + " must be an object");
  }

  const ojson& require(const std::string& key) {
    const auto it = doc_.find(key);
    if (it == doc_.end()) throw DecodeError("missing key '" + prefix_ + key + "'");
    seen_.insert(key);
    return *it;
  }

  const ojson* optional(const std::string& key) {
    const auto it = doc_.find(key);
    if (it == doc_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  std::string string(const std::string& key) {
    const auto& j = require(key);
    if (!j.is_string()) throw DecodeError("'" + prefix_ + key + "' must be a string");
    return j.get<std::string>();
  }

  long long integer(const std::string& key) {
    const auto& j = require(key);
    if (!j.is_number_integer()) throw DecodeError("'" + prefix_ + key + "' must be an integer");
    return j.get<long long>();
  }

  double real(const std::string& key) {
    const auto& j = require(key);
    if (!j.is_number()) throw DecodeError("'" + prefix_ + key + "' must be a number");
    return j.get<double>();
  }

  std::map<std::string, std::string> string_map(const std::string& key) {
    std::map<std::string, std::string> out;
    const ojson* j = optional(key);
    if (j == nullptr) return out;
    if (!j->is_object()) throw DecodeError("'" + prefix_ + key + "' must be an object");
    for (const auto& [k, val] : j->items()) {
      if (!val.is_string()) throw DecodeError("'" + prefix_ + key + "." + k + "' must be a string");
      out.emplace(k, val.get<std::string>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [k, _] : doc_.items()) {
      if (!seen_.contains(k)) throw DecodeError("unknown key '" + prefix_ + k + "'");
    }
  }

 private:
  ojson doc_;
  std::string prefix_;
  std::set<std::string> seen_;
};

ojson header() {
  ojson j;
  j["v"] = kSchemaVersion;
  return j;
}

ojson aspect_json(const Aspect& a) {
  ojson j;
  j["surface"] = a.surface;
  j["normalized"] = a.normalized;
  return j;
}

Aspect read_aspect(ObjectReader& outer) {
  ObjectReader r(outer.require("aspect"), "aspect.");
  Aspect a;
  a.surface = r.string("surface");
  a.normalized = r.string("normalized");
  r.finish();
  return a;
}

ojson map_json(const std::map<std::string, std::string>& m) {
  ojson j = ojson::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::string dump(const ojson& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
}

void add(ValidationReport& report, std::string field, std::string message) {
  report.violations.push_back({std::move(field), std::move(message)});
}

void merge(ValidationReport& into, const ValidationReport& from, const std::string& prefix) {
  for (const auto& v : from.violations) add(into, prefix + v.field, v.message);
}

}  // namespace

ValidationReport validate(const Review& r) {
  ValidationReport report;
  if (r.id.empty()) add(report, "id", "id must be non-empty");
  if (word_count(r.text) == 0) add(report, "text", "text must contain a word");
  return report;
}

ValidationReport validate(const Aspect& a) {
  ValidationReport report;
  if (a.normalized.empty()) add(report, "normalized", "aspect must be non-empty");
  if (a.normalized != normalize_phrase(a.surface)) {
    add(report, "normalized", "normalized form does not match surface");
  }
  return report;
}

ValidationReport validate(const AspectedSummary& s) {
  ValidationReport report;
  if (s.id.empty()) add(report, "id", "id must be non-empty");
  if (s.review_id.empty()) add(report, "review_id", "review_id must be non-empty");
  merge(report, validate(s.aspect), "aspect.");
  if (s.text.empty()) add(report, "text", "text must be non-empty");
  const int counted = word_count(s.text);
  if (s.word_count != counted) {
    add(report, "word_count",
        "word_count " + std::to_string(s.word_count) + " != whitespace token count " +
            std::to_string(counted));
  }
  if (counted > kMaxReferenceWords) {
    add(report, "word_count",
        "reference has " + std::to_string(counted) + " words, limit is " +
            std::to_string(kMaxReferenceWords));
  }
  return report;
}

ValidationReport validate(const PairwiseComparison& c) {
  ValidationReport report;
  merge(report, validate(c.aspect), "aspect.");
  if (c.id_a.empty()) add(report, "id_a", "id_a must be non-empty");
  if (c.id_b.empty()) add(report, "id_b", "id_b must be non-empty");
  if (c.id_a == c.id_b) add(report, "id_b", "id_a and id_b must differ");
  return report;
}

ValidationReport validate(const WinRateRecord& w) {
  ValidationReport report;
  if (w.summary_id.empty()) add(report, "summary_id", "summary_id must be non-empty");
  if (w.wins < 0) add(report, "wins", "wins must be non-negative");
  if (w.total <= 0) add(report, "total", "total must be positive");
  if (w.wins > w.total) add(report, "wins", "wins must not exceed total");
  if (w.total > 0) {
    const double expected = static_cast<double>(w.wins) / static_cast<double>(w.total);
    if (std::abs(w.win_rate - expected) > std::abs(std::nextafter(expected, 2.0) - expected)) {
      add(report, "win_rate", "win_rate must equal wins / total");
    }
  }
  return report;
}

ValidationReport validate(const RewardBundle& b) {
  ValidationReport report;
  for (auto [name, value] : {std::pair{"r_a", b.r_a}, std::pair{"r_v", b.r_v},
                             std::pair{"r_i", b.r_i}, std::pair{"kl_penalty", b.kl_penalty},
                             std::pair{"total", b.total}}) {
    if (!std::isfinite(value)) add(report, name, "must be finite");
  }
  if (b.r_i < 0.0 || b.r_i > 1.0) add(report, "r_i", "information reward must lie in [0,1]");
  const double composed = b.weights.alpha * b.r_a + b.weights.beta * b.r_v +
                          b.weights.gamma * b.r_i - b.kl_penalty;
  if (composed != b.total) add(report, "total", "total does not match composed reward");
  return report;
}

ValidationReport validate_record(std::string_view line, RecordKind kind) {
  switch (kind) {
    case RecordKind::kReview: return validate(from_line<Review>(line));
    case RecordKind::kSummary: return validate(from_line<AspectedSummary>(line));
    case RecordKind::kComparison: return validate(from_line<PairwiseComparison>(line));
    case RecordKind::kWinRate: return validate(from_line<WinRateRecord>(line));
    case RecordKind::kReward: return validate(from_line<RewardBundle>(line));
  }
  throw DecodeError("unknown record kind");
}

ValidationReport validate_corpus(const std::vector<Review>& reviews,
                                 const std::vector<AspectedSummary>& summaries,
                                 const std::vector<PairwiseComparison>& comparisons) {
  ValidationReport report;
  std::unordered_set<std::string> review_ids;
  for (std::size_t i = 0; i < reviews.size(); ++i) {
    const std::string path = "reviews[" + std::to_string(i) + "].";
    merge(report, validate(reviews[i]), path);
    if (!review_ids.insert(reviews[i].id).second) add(report, path + "id", "duplicate review id");
  }
  std::unordered_map<std::string, const AspectedSummary*> by_id;
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const auto& s = summaries[i];
    const std::string path = "summaries[" + std::to_string(i) + "].";
    merge(report, validate(s), path);
    if (!by_id.emplace(s.id, &s).second) add(report, path + "id", "duplicate summary id");
    if (!review_ids.contains(s.review_id)) {
      add(report, path + "review_id", "review '" + s.review_id + "' does not resolve");
    }
  }
  for (std::size_t i = 0; i < comparisons.size(); ++i) {
    const auto& c = comparisons[i];
    const std::string path = "comparisons[" + std::to_string(i) + "].";
    merge(report, validate(c), path);
    const auto a = by_id.find(c.id_a);
    const auto b = by_id.find(c.id_b);
    if (a == by_id.end()) add(report, path + "id_a", "summary '" + c.id_a + "' does not resolve");
    if (b == by_id.end()) add(report, path + "id_b", "summary '" + c.id_b + "' does not resolve");
    if (a == by_id.end() || b == by_id.end()) continue;
    if (a->second->split != b->second->split) add(report, path + "split", "pair crosses splits");
    if (a->second->aspect.normalized != b->second->aspect.normalized ||
        a->second->aspect.normalized != c.aspect.normalized) {
      add(report, path + "aspect", "pair crosses aspects");
    }
  }
  return report;
}

std::string to_line(const Review& r) {
  ojson j = header();
  j["id"] = r.id;
  j["text"] = r.text;
  if (!r.meta.empty()) j["meta"] = map_json(r.meta);
  return dump(j);
}

std::string to_line(const AspectedSummary& s) {
  ojson j = header();
  j["id"] = s.id;
  j["review_id"] = s.review_id;
  j["aspect"] = aspect_json(s.aspect);
  j["text"] = s.text;
  j["split"] = std::string(to_string(s.split));
  j["word_count"] = s.word_count;
  if (!s.flags.empty()) j["flags"] = s.flags;
  return dump(j);
}

std::string to_line(const PairwiseComparison& c) {
  ojson j = header();
  j["aspect"] = aspect_json(c.aspect);
  j["id_a"] = c.id_a;
  j["id_b"] = c.id_b;
  j["winner"] = c.winner == Winner::kA ? "a" : "b";
  if (!c.judge_meta.empty()) j["judge_meta"] = map_json(c.judge_meta);
  return dump(j);
}

std::string to_line(const WinRateRecord& w) {
  ojson j = header();
  j["summary_id"] = w.summary_id;
  j["wins"] = w.wins;
  j["total"] = w.total;
  j["win_rate"] = w.win_rate;
  return dump(j);
}

std::string to_line(const RewardBundle& b) {
  ojson j = header();
  j["r_a"] = b.r_a;
  j["r_v"] = b.r_v;
  j["r_i"] = b.r_i;
  j["kl_penalty"] = b.kl_penalty;
  j["total"] = b.total;
  j["weights"] = {b.weights.alpha, b.weights.beta, b.weights.gamma};
  return dump(j);
}

template <>
Review from_line<Review>(std::string_view line) {
  ObjectReader r(line);
  Review out;
  out.id = r.string("id");
  out.text = r.string("text");
  out.meta = r.string_map("meta");
  r.finish();
  return out;
}

template <>
AspectedSummary from_line<AspectedSummary>(std::string_view line) {
  ObjectReader r(line);
  AspectedSummary out;
  out.id = r.string("id");
  out.review_id = r.string("review_id");
  out.aspect = read_aspect(r);
  out.text = r.string("text");
  out.split = parse_split(r.string("split"));
  out.word_count = static_cast<int>(r.integer("word_count"));
  if (const ojson* flags = r.optional("flags")) {
    if (!flags->is_array()) throw DecodeError("'flags' must be an array");
    for (const auto& f : *flags) {
      if (!f.is_string()) throw DecodeError("'flags' entries must be strings");
      out.flags.push_back(f.get<std::string>());
    }
  }
  r.finish();
  return out;
}

template <>
PairwiseComparison from_line<PairwiseComparison>(std::string_view line) {
  ObjectReader r(line);
  PairwiseComparison out;
  out.aspect = read_aspect(r);
  out.id_a = r.string("id_a");
  out.id_b = r.string("id_b");
  const std::string winner = r.string("winner");
  if (winner == "a") {
    out.winner = Winner::kA;
  } else if (winner == "b") {
    out.winner = Winner::kB;
  } else {
    throw DecodeError("winner must be 'a' or 'b'");
  }
  out.judge_meta = r.string_map("judge_meta");
  r.finish();
  return out;
}

template <>
WinRateRecord from_line<WinRateRecord>(std::string_view line) {
  ObjectReader r(line);
  WinRateRecord out;
  out.summary_id = r.string("summary_id");
  out.wins = static_cast<int>(r.integer("wins"));
  out.total = static_cast<int>(r.integer("total"));
  out.win_rate = r.real("win_rate");
  r.finish();
  return out;
}

template <>
RewardBundle from_line<RewardBundle>(std::string_view line) {
  ObjectReader r(line);
  RewardBundle out;
  out.r_a = r.real("r_a");
  out.r_v = r.real("r_v");
  out.r_i = r.real("r_i");
  out.kl_penalty = r.real("kl_penalty");
  out.total = r.real("total");
  const auto& w = r.require("weights");
  if (!w.is_array() || w.size() != 3) throw DecodeError("'weights' must be [alpha, beta, gamma]");
  for (const auto& x : w) {
    if (!x.is_number()) throw DecodeError("'weights' entries must be numbers");
  }
  out.weights = {w[0].get<double>(), w[1].get<double>(), w[2].get<double>()};
  r.finish();
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& line : lines) out << line << '\n';
}

}  // namespace copywriter

#include "copywriter/corpus_builder.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include "json.hpp"
#include <spdlog/spdlog.h>

#include "copywriter/digest.hpp"
#include "copywriter/grounding.hpp"
#include "copywriter/text.hpp"

namespace copywriter::corpus {

namespace {

const std::set<std::string>& extractor_stopwords() {
  static const std::set<std::string> kWords = {
      "got",   "get",   "decided", "make",  "made",   "go",    "went",  "really", "great",
      "good",  "back",  "time",    "next",  "place",  "like",  "also",  "all",    "some",
      "most",  "well",  "way",     "sure",  "little", "big",   "first", "even",   "only",
      "not",   "no",    "don't",   "eat",   "new",    "came",  "come",  "need",   "needed",
      "want",  "wanted", "wanting", "said", "told",   "know",  "think", "lot",    "bit",
      "much",  "many",  "more",    "other", "another", "every", "always", "ever", "still",
      "out",   "up",    "off",     "over",  "into",   "after", "before", "while", "when",
      "where", "why",   "if",      "because", "since", "again", "once",  "each",  "both",
      "such",  "nice",  "best",    "better", "around", "same", "own",   "try",    "tried"};
  return kWords;
}

bool extractable(const std::string& w) {
  if (w.size() < 3 || extractor_stopwords().contains(w)) return false;
  return std::all_of(w.begin(), w.end(), [](char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '-';
  });
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs fn(i) for i in [0, n) on up to `workers` threads and rethrows the
// first failure after all threads finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

constexpr const char* kDefaultSummaryPrompt =
    "You are a copywriter for a restaurant guide. Read the customer review below and write an "
    "attractive summary that focuses on \"{aspect}\". Use only facts stated in the review. Write at "
    "most {max_words} words and reply with the summary only.\n"
    "\n"
    "Review: {review}\n";

constexpr const char* kDefaultComparePrompt =
    "Two short copies were written about \"{aspect}\". Which one is more attractive to a potential "
    "customer? Answer with exactly one word: first or second.\n"
    "\n"
    "First copy: {first}\n"
    "Second copy: {second}\n";

}  // namespace

std::vector<Keyphrase> FrequencyKeyphraseExtractor::extract(std::string_view text) const {
  std::map<std::string, std::pair<int, std::size_t>> stats;  // word -> (count, first position)
  std::size_t position = 0;
  for (const auto& w : grounding::content_words(text)) {
    ++position;
    if (!extractable(w)) continue;
    auto [it, inserted] = stats.try_emplace(w, 0, position);
    ++it->second.first;
  }
  std::vector<std::pair<std::string, std::pair<int, std::size_t>>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    if (x.second.first != y.second.first) return x.second.first > y.second.first;
    return x.second.second < y.second.second;
  });
  std::vector<Keyphrase> out;
  out.reserve(ranked.size());
  const double total = static_cast<double>(std::max<std::size_t>(position, 1));
  for (const auto& [word, s] : ranked) out.push_back({word, s.first / total});
  return out;
}

std::vector<Aspect> extract_aspects(const Review& review, const KeyphraseExtractor& extractor) {
  std::vector<Keyphrase> phrases;
  try {
    phrases = extractor.extract(review.text);
  } catch (const std::exception& e) {
    throw PipelineError(review.id, std::string("keyphrase extraction failed: ") + e.what());
  }
  std::stable_sort(phrases.begin(), phrases.end(),
                   [](const Keyphrase& a, const Keyphrase& b) { return a.confidence > b.confidence; });
  std::vector<Aspect> out;
  std::set<std::string> seen;
  for (const auto& p : phrases) {
    Aspect a = Aspect::from_surface(trim(p.text));
    if (a.normalized.empty() || !seen.insert(a.normalized).second) continue;
    out.push_back(std::move(a));
  }
  return out;
}

std::string request_key(const JudgeRequest& request) {
  nlohmann::ordered_json j;
  j["kind"] = request.kind;
  j["model"] = request.model;
  j["temperature"] = request.temperature;
  j["prompt"] = request.prompt;
  return sha256_hex(j.dump());
}

HttpJudgeBackend::HttpJudgeBackend(HttpJudgeConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) {
    throw std::invalid_argument("judge endpoint must look like scheme://host[:port]/path: " +
                                config_.endpoint);
  }
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_port_ = config_.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
  const char* key = std::getenv(config_.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw std::runtime_error("judge credential missing: set the environment variable " +
                             config_.api_key_env);
  }
  api_key_ = key;
}

std::string HttpJudgeBackend::complete(const JudgeRequest& request) {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  client.set_bearer_token_auth(api_key_);
  nlohmann::ordered_json body;
  body["model"] = request.model;
  body["prompt"] = request.prompt;
  body["temperature"] = request.temperature;
  body["max_tokens"] = config_.max_tokens;
  const auto res = client.Post(path_, body.dump(), "application/json");
  if (!res) {
    throw std::runtime_error("judge request failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw std::runtime_error("judge returned HTTP " + std::to_string(res->status));
  }
  const auto reply = nlohmann::json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.is_object()) throw std::runtime_error("judge reply is not JSON");
  if (reply.contains("text") && reply["text"].is_string()) return reply["text"].get<std::string>();
  if (reply.contains("choices") && reply["choices"].is_array() && !reply["choices"].empty()) {
    const auto& first = reply["choices"][0];
    if (first.contains("text") && first["text"].is_string()) return first["text"].get<std::string>();
  }
  throw std::runtime_error("judge reply has no text field");
}

JudgeClient::JudgeClient(std::filesystem::path transcript_path, JudgeMode mode,
                         std::shared_ptr<JudgeBackend> backend)
    : path_(std::move(transcript_path)), mode_(mode), backend_(std::move(backend)) {
  if (mode_ == JudgeMode::kRecord && !backend_) {
    throw std::invalid_argument("record mode needs a judge backend");
  }
  if (!std::filesystem::exists(path_)) {
    if (mode_ == JudgeMode::kReplay) throw CacheMiss("no transcript file at " + path_.string());
    return;
  }
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path_)) {
    ++line_no;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("key") || !j.contains("response") ||
        !j["key"].is_string() || !j["response"].is_string()) {
      throw DecodeError(path_.string() + ":" + std::to_string(line_no) + ": bad transcript line");
    }
    cache_[j["key"].get<std::string>()] = j["response"].get<std::string>();
  }
}

std::string JudgeClient::complete(const JudgeRequest& request) {
  const std::string key = request_key(request);
  {
    std::lock_guard lock(mutex_);
    const auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    if (mode_ == JudgeMode::kReplay) {
      throw CacheMiss("replay transcript has no entry for " + request.kind + " request " + key);
    }
  }
  std::string response = backend_->complete(request);
  std::lock_guard lock(mutex_);
  const auto [it, inserted] = cache_.emplace(key, response);
  if (!inserted) return it->second;
  ++backend_calls_;
  nlohmann::ordered_json line;
  line["v"] = kSchemaVersion;
  line["key"] = key;
  line["kind"] = request.kind;
  line["model"] = request.model;
  line["temperature"] = request.temperature;
  line["prompt"] = request.prompt;
  line["response"] = response;
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  out << line.dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("cannot append to " + path_.string());
  return response;
}

std::size_t JudgeClient::cache_size() const {
  std::lock_guard lock(mutex_);
  return cache_.size();
}

std::size_t JudgeClient::backend_calls() const {
  std::lock_guard lock(mutex_);
  return backend_calls_;
}

PromptSet PromptSet::defaults() { return PromptSet{kDefaultSummaryPrompt, kDefaultComparePrompt}; }

PromptSet PromptSet::load(const std::filesystem::path& dir) {
  return PromptSet{read_file(dir / "summary.txt"), read_file(dir / "compare.txt")};
}

std::string summary_id(const std::string& review_id, const Aspect& aspect) {
  std::string slug = aspect.normalized;
  std::replace(slug.begin(), slug.end(), ' ', '_');
  return review_id + ":" + slug;
}

AspectedSummary request_summary(JudgeClient& judge, const PromptSet& prompts,
                                const JudgeSettings& settings, const Review& review,
                                const Aspect& aspect, Split split) {
  std::string prompt = substitute(prompts.summary, "aspect", aspect.surface);
  prompt = substitute(prompt, "max_words", std::to_string(settings.max_words));
  prompt = substitute(prompt, "review", review.text);
  const std::string text = trim(judge.complete({"summary", prompt, settings.model, settings.temperature}));
  if (text.empty()) {
    throw SummaryError("empty summary for review " + review.id + ", aspect " + aspect.surface);
  }
  AspectedSummary s;
  s.id = summary_id(review.id, aspect);
  s.review_id = review.id;
  s.aspect = aspect;
  s.text = text;
  s.split = split;
  s.word_count = word_count(text);
  if (s.word_count > settings.max_words) s.flags.push_back("over_word_limit");
  return s;
}

ComparisonVerdict parse_comparison_verdict(std::string_view response) {
  std::string word;
  for (char c : response) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else if (!word.empty()) {
      break;
    }
  }
  if (word == "first" || word == "1") return ComparisonVerdict::kFirst;
  if (word == "second" || word == "2") return ComparisonVerdict::kSecond;
  if (word == "tie" || word == "both" || word == "neither" || word == "equal") {
    return ComparisonVerdict::kTie;
  }
  return ComparisonVerdict::kUnparseable;
}

std::optional<PairwiseComparison> request_comparison(JudgeClient& judge, const PromptSet& prompts,
                                                     const JudgeSettings& settings,
                                                     const AspectedSummary& a,
                                                     const AspectedSummary& b, std::uint64_t seed,
                                                     ComparisonStats* stats) {
  if (a.id == b.id) throw std::invalid_argument("cannot compare " + a.id + " with itself");
  if (a.aspect.normalized != b.aspect.normalized) {
    throw std::invalid_argument("comparison crosses aspects: " + a.id + " vs " + b.id);
  }
  if (a.split != b.split) throw std::invalid_argument("comparison crosses splits: " + a.id + " vs " + b.id);
  ComparisonStats local;
  ComparisonStats& st = stats ? *stats : local;
  ++st.requested;

  Rng rng(seed ^ stable_hash64(a.id + "\n" + b.id));
  bool a_first = rng.coin();
  for (int attempt = 1; attempt <= 2; ++attempt) {
    const AspectedSummary& first = a_first ? a : b;
    const AspectedSummary& second = a_first ? b : a;
    std::string prompt = substitute(prompts.compare, "aspect", a.aspect.surface);
    prompt = substitute(prompt, "first", first.text);
    prompt = substitute(prompt, "second", second.text);
    const auto verdict =
        parse_comparison_verdict(judge.complete({"compare", prompt, settings.model, settings.temperature}));
    if (verdict == ComparisonVerdict::kFirst || verdict == ComparisonVerdict::kSecond) {
      PairwiseComparison c;
      c.aspect = a.aspect;
      c.id_a = a.id;
      c.id_b = b.id;
      const bool first_won = verdict == ComparisonVerdict::kFirst;
      c.winner = (first_won == a_first) ? Winner::kA : Winner::kB;
      c.judge_meta["attempts"] = std::to_string(attempt);
      c.judge_meta["order"] = a_first ? "ab" : "ba";
      return c;
    }
    if (attempt == 1) ++st.retried;
    a_first = !a_first;
  }
  ++st.dropped;
  spdlog::info("dropped tied pair {} / {}", a.id, b.id);
  return std::nullopt;
}

std::size_t SplitAssignment::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(by_review.begin(), by_review.end(),
                                                [&](const auto& kv) { return kv.second == split; }));
}

SplitAssignment assign_splits(const std::vector<Review>& reviews, SplitRatios ratios,
                              std::uint64_t seed) {
  if (reviews.empty()) throw std::invalid_argument("assign_splits needs at least one review");
  for (double r : {ratios.train, ratios.dev, ratios.test}) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw std::invalid_argument("split ratios must be non-negative");
  }
  const double sum = ratios.train + ratios.dev + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  if (reviews.size() < 10) spdlog::warn("only {} reviews; the dev split may be empty", reviews.size());

  std::vector<std::string> ids;
  ids.reserve(reviews.size());
  for (const auto& r : reviews) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw std::invalid_argument("duplicate review ids");
  }
  Rng rng(seed);
  rng.shuffle(ids);

  const double n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * ratios.train));
  const auto n_dev = std::min(ids.size() - n_train, static_cast<std::size_t>(std::llround(n * ratios.dev)));
  SplitAssignment out;
  out.ratios = ratios;
  out.seed = seed;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Split s = i < n_train ? Split::kTrain : (i < n_train + n_dev ? Split::kDev : Split::kTest);
    out.by_review[ids[i]] = s;
  }
  return out;
}

PairSchedule build_pair_schedule(const std::vector<AspectedSummary>& summaries, std::size_t budget,
                                 std::uint64_t seed) {
  std::map<std::pair<std::string, int>, std::vector<std::string>> groups;
  for (const auto& s : summaries) {
    groups[{s.aspect.normalized, static_cast<int>(s.split)}].push_back(s.id);
  }
  PairSchedule out;
  for (auto& [key, ids] : groups) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    PairSchedule pairs;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = i + 1; j < ids.size(); ++j) pairs.emplace_back(ids[i], ids[j]);
    }
    if (budget > 0 && pairs.size() > budget) {
      Rng rng(seed ^ stable_hash64(key.first + "\n" + std::to_string(key.second)));
      rng.shuffle(pairs);
      pairs.resize(budget);
      std::sort(pairs.begin(), pairs.end());
    }
    out.insert(out.end(), pairs.begin(), pairs.end());
  }
  return out;
}

CorpusResult build_corpus(const std::vector<Review>& reviews, const KeyphraseExtractor& extractor,
                          JudgeClient& judge, const PromptSet& prompts, const CorpusConfig& config) {
  CorpusResult result;
  result.splits = assign_splits(reviews, config.ratios, config.seed);

  struct Task {
    const Review* review;
    Aspect aspect;
  };
  std::vector<Task> tasks;
  for (const auto& review : reviews) {
    auto aspects = extract_aspects(review, extractor);
    if (aspects.size() > config.aspects_per_review) aspects.resize(config.aspects_per_review);
    if (aspects.empty()) spdlog::warn("review {} yielded no aspects", review.id);
    for (auto& a : aspects) tasks.push_back({&review, std::move(a)});
  }

  std::vector<std::optional<AspectedSummary>> made(tasks.size());
  std::atomic<std::size_t> skipped{0};
  parallel_for(tasks.size(), config.workers, [&](std::size_t i) {
    const auto& t = tasks[i];
    try {
      made[i] = request_summary(judge, prompts, config.judge, *t.review, t.aspect,
                                result.splits.by_review.at(t.review->id));
    } catch (const SummaryError& e) {
      spdlog::warn("skipping sample: {}", e.what());
      ++skipped;
    }
  });
  result.skipped_summaries = skipped;
  std::map<std::string, const AspectedSummary*> by_id;
  for (auto& m : made) {
    if (!m) continue;
    result.summaries.push_back(std::move(*m));
  }
  for (const auto& s : result.summaries) by_id[s.id] = &s;

  const auto schedule = build_pair_schedule(result.summaries, config.pair_budget, config.seed);
  std::vector<std::optional<PairwiseComparison>> judged(schedule.size());
  std::vector<ComparisonStats> per_pair(schedule.size());
  parallel_for(schedule.size(), config.workers, [&](std::size_t i) {
    judged[i] = request_comparison(judge, prompts, config.judge, *by_id.at(schedule[i].first),
                                   *by_id.at(schedule[i].second), config.seed, &per_pair[i]);
  });
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    result.comparison_stats.requested += per_pair[i].requested;
    result.comparison_stats.retried += per_pair[i].retried;
    result.comparison_stats.dropped += per_pair[i].dropped;
    if (!judged[i]) continue;
    const auto split = by_id.at(schedule[i].first)->split;
    ++result.pairs_per_split[std::string(to_string(split))];
    result.comparisons.push_back(std::move(*judged[i]));
  }
  spdlog::info("corpus: {} summaries ({} skipped), {} comparisons ({} dropped ties)",
               result.summaries.size(), result.skipped_summaries, result.comparisons.size(),
               result.comparison_stats.dropped);
  for (const auto& [split, n] : result.pairs_per_split) spdlog::info("  {} pairs in {}", n, split);
  return result;
}

}  // namespace copywriter::corpus

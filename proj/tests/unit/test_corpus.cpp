#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include "json.hpp"

#include "copywriter/corpus_builder.hpp"
#include "scripted_judge.hpp"

using namespace copywriter;
using namespace copywriter::corpus;

namespace {

const char* kTampaReview =
    "We got diverted to Tampa and decided to make the drive to Orlando, but first we needed somewhere "
    "to eat. Wanting to avoid chain restaurants, yelp steered us toward this little local gem! They "
    "grill their steaks over oak, and citrus Wood and the smoky flavor is to die for! We are big fans "
    "of our smoker back home and cook our steaks this way as well. It's rare to find steak cooked over "
    "woodsmoke in most places, and this was worth the side trip! The sides were veggies and sweet "
    "potatoes. The wines on offer were so reasonably priced - most under $20 a bottle, but a decent "
    "selection. They just don't mark them up 5x like most places! Bookmarking this place for a return "
    "trip next time I am in Tampa for sure!";

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("copywriter_corpus_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

class FixedJudge final : public JudgeBackend {
 public:
  explicit FixedJudge(std::string reply) : reply_(std::move(reply)) {}
  std::string complete(const JudgeRequest&) override {
    ++calls;
    return reply_;
  }
  int calls = 0;

 private:
  std::string reply_;
};

class ListExtractor final : public KeyphraseExtractor {
 public:
  std::vector<Keyphrase> phrases;
  std::vector<Keyphrase> extract(std::string_view) const override { return phrases; }
};

class FailingExtractor final : public KeyphraseExtractor {
 public:
  std::vector<Keyphrase> extract(std::string_view) const override {
    throw std::runtime_error("model not loaded");
  }
};

AspectedSummary summary(const std::string& id, const std::string& text, Split split = Split::kTrain,
                        const char* aspect = "steak") {
  AspectedSummary s;
  s.id = id;
  s.review_id = "r-" + id;
  s.aspect = Aspect::from_surface(aspect);
  s.text = text;
  s.split = split;
  s.word_count = word_count(text);
  return s;
}

std::vector<Review> numbered_reviews(int n) {
  std::vector<Review> out;
  for (int i = 0; i < n; ++i) out.push_back({"rev" + std::to_string(1000 + i), "text", {}});
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("aspect extraction") {
  const FrequencyKeyphraseExtractor extractor;
  const auto aspects = extract_aspects({"t7", kTampaReview, {}}, extractor);
  REQUIRE_FALSE(aspects.empty());
  CHECK(aspects.front().normalized == "steak");
  CHECK(std::any_of(aspects.begin(), aspects.end(), [](const Aspect& a) { return a.normalized == "tampa"; }));

  CHECK(extract_aspects({"bang", "!!!", {}}, extractor).empty());

  ListExtractor dup;
  dup.phrases = {{"Steak", 0.9}, {"steak", 0.8}, {"wine", 0.95}};
  const auto deduped = extract_aspects({"d", "x", {}}, dup);
  REQUIRE(deduped.size() == 2);
  CHECK(deduped[0].normalized == "wine");
  CHECK(deduped[1].surface == "Steak");

  try {
    extract_aspects({"broken-1", "x", {}}, FailingExtractor{});
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.review_id() == "broken-1");
  }
}

TEST_CASE("prompt files match the built-in prompts") {
  const auto loaded = PromptSet::load(std::filesystem::path(COPYWRITER_SOURCE_DIR) / "prompts");
  const auto builtin = PromptSet::defaults();
  CHECK(loaded.summary == builtin.summary);
  CHECK(loaded.compare == builtin.compare);
}

TEST_CASE("request_summary") {
  const auto dir = scratch("summary");
  const Review review{"t7", kTampaReview, {}};
  const auto steak = Aspect::from_surface("steak");

  SUBCASE("scripted judge mentions the aspect") {
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, std::make_shared<oracle::ScriptedJudge>());
    const auto s = request_summary(judge, PromptSet::defaults(), {}, review, steak, Split::kTest);
    CHECK_FALSE(s.text.empty());
    CHECK(to_lower(s.text).find("steak") != std::string::npos);
    CHECK(s.split == Split::kTest);
    CHECK(s.id == "t7:steak");
    CHECK(validate(s).ok());

    JudgeClient replay(dir / kTranscriptFile, JudgeMode::kReplay);
    CHECK(request_summary(replay, PromptSet::defaults(), {}, review, steak, Split::kTest) == s);
  }
  SUBCASE("40-word reply is kept and flagged") {
    std::string forty;
    for (int i = 0; i < 40; ++i) forty += (i ? " w" : "w") + std::to_string(i);
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, std::make_shared<FixedJudge>(forty));
    const auto s = request_summary(judge, PromptSet::defaults(), {}, review, steak, Split::kTrain);
    CHECK(s.word_count == 40);
    CHECK(s.flags == std::vector<std::string>{"over_word_limit"});
    CHECK(validate(s).has("word_count"));
  }
  SUBCASE("empty reply is a summary error") {
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, std::make_shared<FixedJudge>("  \n"));
    CHECK_THROWS_AS(request_summary(judge, PromptSet::defaults(), {}, review, steak, Split::kTrain),
                    SummaryError);
  }
}

TEST_CASE("verdict parsing") {
  CHECK(parse_comparison_verdict("First") == ComparisonVerdict::kFirst);
  CHECK(parse_comparison_verdict("  second.") == ComparisonVerdict::kSecond);
  CHECK(parse_comparison_verdict("2") == ComparisonVerdict::kSecond);
  CHECK(parse_comparison_verdict("Tie.") == ComparisonVerdict::kTie);
  CHECK(parse_comparison_verdict("I cannot decide") == ComparisonVerdict::kUnparseable);
  CHECK(parse_comparison_verdict("") == ComparisonVerdict::kUnparseable);
}

TEST_CASE("request_comparison") {
  const auto dir = scratch("compare");
  const auto a = summary("a", "Juicy smoky oak grilled steak with sweet potatoes");
  const auto b = summary("b", "Steak was fine");

  SUBCASE("verdicts map back through the presentation order") {
    auto backend = std::make_shared<oracle::ScriptedJudge>();
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, backend);
    std::set<std::string> orders;
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
      const auto c = request_comparison(judge, PromptSet::defaults(), {}, a, b, seed);
      REQUIRE(c.has_value());
      CHECK(c->winner_id() == "a");
      CHECK(c->id_a == "a");
      orders.insert(c->judge_meta.at("order"));
    }
    CHECK(orders.size() == 2);
  }
  SUBCASE("raw 'first' picks whichever copy was shown first") {
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, std::make_shared<FixedJudge>("first"));
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const auto c = request_comparison(judge, PromptSet::defaults(), {}, a, b, seed);
      REQUIRE(c.has_value());
      CHECK((c->winner == Winner::kA) == (c->judge_meta.at("order") == "ab"));
    }
  }
  SUBCASE("persistent tie drops the pair after one swapped retry") {
    auto tie = std::make_shared<FixedJudge>("tie");
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, tie);
    ComparisonStats stats;
    CHECK_FALSE(request_comparison(judge, PromptSet::defaults(), {}, a, b, 1, &stats).has_value());
    CHECK(stats.dropped == 1);
    CHECK(stats.retried == 1);
    CHECK(tie->calls == 2);
  }
  SUBCASE("preconditions") {
    JudgeClient judge(dir / kTranscriptFile, JudgeMode::kRecord, std::make_shared<FixedJudge>("first"));
    const auto other_split = summary("c", "steak", Split::kDev);
    const auto other_aspect = summary("d", "wine", Split::kTrain, "wine");
    CHECK_THROWS_AS(request_comparison(judge, PromptSet::defaults(), {}, a, other_split, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(request_comparison(judge, PromptSet::defaults(), {}, a, other_aspect, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(request_comparison(judge, PromptSet::defaults(), {}, a, a, 0), std::invalid_argument);
  }
}

TEST_CASE("judge transcript cache") {
  const auto dir = scratch("cache");
  const auto path = dir / kTranscriptFile;
  CHECK_THROWS_AS(JudgeClient(path, JudgeMode::kReplay), CacheMiss);
  auto backend = std::make_shared<FixedJudge>("hello");
  {
    JudgeClient judge(path, JudgeMode::kRecord, backend);
    CHECK(judge.complete({"summary", "p1", "m", 0.0}) == "hello");
    CHECK(judge.complete({"summary", "p1", "m", 0.0}) == "hello");
    CHECK(backend->calls == 1);
  }
  CHECK(read_lines(path).size() == 1);
  JudgeClient replay(path, JudgeMode::kReplay);
  CHECK(replay.complete({"summary", "p1", "m", 0.0}) == "hello");
  CHECK_THROWS_AS(replay.complete({"summary", "p2", "m", 0.0}), CacheMiss);
  CHECK_THROWS_AS(replay.complete({"summary", "p1", "m", 0.7}), CacheMiss);
  CHECK(request_key({"summary", "p1", "m", 0.0}) != request_key({"compare", "p1", "m", 0.0}));
}

TEST_CASE("assign_splits") {
  const auto big = assign_splits(numbered_reviews(3622), {}, 7);
  CHECK(big.count(Split::kTrain) == 2535);
  CHECK(big.count(Split::kDev) == 362);
  CHECK(big.count(Split::kTest) == 725);

  const auto ten = assign_splits(numbered_reviews(10), {}, 7);
  CHECK(ten.count(Split::kTrain) == 7);
  CHECK(ten.count(Split::kDev) == 1);
  CHECK(ten.count(Split::kTest) == 2);

  CHECK(assign_splits(numbered_reviews(50), {}, 3).by_review ==
        assign_splits(numbered_reviews(50), {}, 3).by_review);
  auto reversed = numbered_reviews(50);
  std::reverse(reversed.begin(), reversed.end());
  CHECK(assign_splits(reversed, {}, 3).by_review == assign_splits(numbered_reviews(50), {}, 3).by_review);
  CHECK(assign_splits(numbered_reviews(50), {}, 3).by_review !=
        assign_splits(numbered_reviews(50), {}, 4).by_review);

  CHECK_THROWS_AS(assign_splits({}, {}, 1), std::invalid_argument);
  CHECK_THROWS_AS(assign_splits(numbered_reviews(5), {0.5, 0.5, 0.5}, 1), std::invalid_argument);

  for (int n = 1; n <= 60; ++n) {
    const auto s = assign_splits(numbered_reviews(n), {}, 11);
    CHECK(std::abs(static_cast<double>(s.count(Split::kTrain)) - 0.7 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.count(Split::kDev)) - 0.1 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.count(Split::kTest)) - 0.2 * n) <= 1.0);
  }
}

TEST_CASE("build_pair_schedule") {
  std::vector<AspectedSummary> three = {summary("x1", "a"), summary("x2", "b"), summary("x3", "c")};
  CHECK(build_pair_schedule(three, 0, 1).size() == 3);

  std::vector<AspectedSummary> five;
  for (int i = 0; i < 5; ++i) five.push_back(summary("y" + std::to_string(i), "t"));
  const auto capped = build_pair_schedule(five, 4, 9);
  CHECK(capped.size() == 4);
  CHECK(capped == build_pair_schedule(five, 4, 9));
  CHECK(build_pair_schedule(five, 100, 9).size() == 10);

  Rng rng(21);
  const char* aspects[] = {"steak", "wine", "tampa"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<AspectedSummary> mixed;
    for (int i = 0; i < 25; ++i) {
      mixed.push_back(summary("m" + std::to_string(i), "t", static_cast<Split>(rng.below(3)),
                              aspects[rng.below(3)]));
    }
    const std::size_t budget = rng.below(6);
    const auto schedule = build_pair_schedule(mixed, budget, trial);
    std::map<std::string, const AspectedSummary*> by_id;
    for (const auto& s : mixed) by_id[s.id] = &s;
    std::set<std::pair<std::string, std::string>> unordered;
    std::map<std::pair<std::string, int>, std::size_t> per_group, group_size;
    for (const auto& s : mixed) ++group_size[{s.aspect.normalized, static_cast<int>(s.split)}];
    for (const auto& [x, y] : schedule) {
      CHECK(x != y);
      CHECK(by_id[x]->split == by_id[y]->split);
      CHECK(by_id[x]->aspect.normalized == by_id[y]->aspect.normalized);
      CHECK(unordered.insert(std::minmax(x, y)).second);
      ++per_group[{by_id[x]->aspect.normalized, static_cast<int>(by_id[x]->split)}];
    }
    for (const auto& [key, n] : group_size) {
      const std::size_t all = n * (n - 1) / 2;
      const std::size_t expected = budget == 0 ? all : std::min(all, budget);
      CHECK(per_group[key] == expected);
    }
  }
}

TEST_CASE("build_corpus is deterministic across worker counts and replays exactly") {
  const auto dir = scratch("pipeline");
  std::vector<Review> reviews = {
      {"p1", "The steak was juicy and smoky. The wine list is long.", {}},
      {"p2", "Steak came cold. Wine was cheap and good value.", {}},
      {"p3", "Best steak in town, tender and grilled over oak. Wine pairing was perfect.", {}},
      {"p4", "Wine was sour. The steak was decent for the price.", {}},
      {"p5", "Great wine. The steak with pepper sauce was outstanding and huge.", {}},
  };
  CorpusConfig cfg;
  cfg.aspects_per_review = 2;
  CorpusResult serial, threaded;
  {
    JudgeClient judge(dir / "serial" / kTranscriptFile, JudgeMode::kRecord,
                      std::make_shared<oracle::ScriptedJudge>());
    serial = build_corpus(reviews, FrequencyKeyphraseExtractor{}, judge, PromptSet::defaults(), cfg);
  }
  cfg.workers = 4;
  {
    JudgeClient judge(dir / "threaded" / kTranscriptFile, JudgeMode::kRecord,
                      std::make_shared<oracle::ScriptedJudge>());
    threaded = build_corpus(reviews, FrequencyKeyphraseExtractor{}, judge, PromptSet::defaults(), cfg);
  }
  CHECK(serial.summaries == threaded.summaries);
  CHECK(serial.comparisons == threaded.comparisons);
  CHECK_FALSE(serial.comparisons.empty());

  JudgeClient replay(dir / "threaded" / kTranscriptFile, JudgeMode::kReplay);
  const auto replayed = build_corpus(reviews, FrequencyKeyphraseExtractor{}, replay, PromptSet::defaults(), cfg);
  CHECK(replayed.summaries == serial.summaries);
  CHECK(replayed.comparisons == serial.comparisons);

  std::vector<std::string> lines_a, lines_b;
  for (const auto& c : serial.comparisons) lines_a.push_back(to_line(c));
  for (const auto& c : replayed.comparisons) lines_b.push_back(to_line(c));
  CHECK(lines_a == lines_b);
  CHECK(validate_corpus(reviews, serial.summaries, serial.comparisons).ok());

  JudgeClient empty(dir / "serial" / kTranscriptFile, JudgeMode::kReplay);
  reviews.push_back({"p6", "Unseen steak review with lobster.", {}});
  CHECK_THROWS_AS(build_corpus(reviews, FrequencyKeyphraseExtractor{}, empty, PromptSet::defaults(), cfg),
                  CacheMiss);
}

TEST_CASE("HTTP judge backend against a local server") {
  httplib::Server server;
  std::string seen_auth, seen_body;
  server.Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    seen_body = req.body;
    res.set_content(R"({"choices":[{"text":" first"}]})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("COPYWRITER_TEST_JUDGE_KEY", "sk-test", 1);
  HttpJudgeConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/completions";
  cfg.api_key_env = "COPYWRITER_TEST_JUDGE_KEY";
  HttpJudgeBackend backend(cfg);
  CHECK(backend.complete({"compare", "which?", "judge-model", 0.0}) == " first");
  CHECK(seen_auth == "Bearer sk-test");
  const auto body = nlohmann::json::parse(seen_body);
  CHECK(body.at("prompt") == "which?");
  CHECK(body.at("model") == "judge-model");

  cfg.api_key_env = "COPYWRITER_TEST_JUDGE_KEY_UNSET";
  ::unsetenv("COPYWRITER_TEST_JUDGE_KEY_UNSET");
  CHECK_THROWS_AS(HttpJudgeBackend{cfg}, std::runtime_error);
  cfg.endpoint = "no-scheme";
  CHECK_THROWS_AS(HttpJudgeBackend{cfg}, std::invalid_argument);

  server.stop();
  worker.join();
}

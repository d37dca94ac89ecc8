#include "doctest.h"

#include <cmath>

#include "copywriter/evaluator.hpp"
#include "copywriter/random.hpp"

using namespace copywriter;
using namespace copywriter::eval;

namespace {

PairwiseBallot ballot(const std::string& id, const std::string& first_system, const std::string& verdict) {
  PairwiseBallot b;
  b.ballot_id = id;
  b.review = "r";
  b.aspect = Aspect::from_surface("steak");
  b.copy_1 = "x";
  b.copy_2 = "y";
  b.system_1 = first_system;
  b.system_2 = first_system == "ours" ? "sft" : "ours";
  for (const auto q : kBallotQuestions) b.verdicts[std::string(q)] = verdict;
  return b;
}

// Ballots where "ours" wins `w`, loses `l`, ties `t`; sides alternate.
std::vector<PairwiseBallot> ballots(int w, int l, int t) {
  std::vector<PairwiseBallot> out;
  int n = 0;
  auto push = [&](bool ours_first, const char* ours_outcome) {
    std::string v = ours_outcome;
    if (v != "tie" && !ours_first) v = v == "first" ? "second" : "first";
    out.push_back(ballot("b" + std::to_string(n++), ours_first ? "ours" : "sft", v));
  };
  for (int i = 0; i < w; ++i) push(i % 2 == 0, "first");
  for (int i = 0; i < l; ++i) push(i % 2 == 1, "second");
  for (int i = 0; i < t; ++i) push(i % 2 == 0, "tie");
  return out;
}

}  // namespace

TEST_CASE("rouge golden values") {
  const auto r = rouge_scores({"the cat sat"}, {"the cat ran"});
  CHECK(r.rouge_1 == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
  CHECK(r.rouge_2 == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(r.rouge_l == doctest::Approx(2.0 / 3.0).epsilon(1e-4));

  const auto same = rouge_scores({"Great steak, great wine!"}, {"great steak great wine"});
  CHECK(same.rouge_1 == 1.0);
  CHECK(same.rouge_2 == 1.0);
  CHECK(same.rouge_l == 1.0);

  const auto disjoint = rouge_pair("alpha beta", "gamma delta");
  CHECK(disjoint.rouge_1 == 0.0);
  CHECK(disjoint.rouge_2 == 0.0);
  CHECK(disjoint.rouge_l == 0.0);

  CHECK_THROWS_AS(rouge_scores({"a"}, {"a", "b"}), std::invalid_argument);
}

TEST_CASE("rouge bounds and ordering on random pairs") {
  Rng rng(17);
  const std::vector<std::string> vocab = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 300; ++trial) {
    auto sentence = [&] {
      std::string s;
      const int n = 1 + static_cast<int>(rng.below(8));
      for (int i = 0; i < n; ++i) s += (i ? " " : "") + vocab[rng.below(vocab.size())];
      return s;
    };
    const auto r = rouge_pair(sentence(), sentence());
    for (double v : {r.rouge_1, r.rouge_2, r.rouge_l}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(r.rouge_l <= r.rouge_1 + 1e-12);
  }
}

TEST_CASE("uniform LM perplexity equals vocabulary size") {
  const UniformLm lm(5000);
  const auto r = perplexity(lm, {"the steak was grilled", "", "oak fire"});
  CHECK(r.value == doctest::Approx(5000.0).epsilon(1e-10));
  CHECK(std::abs(r.value - 5000.0) < 1e-6);
  CHECK(r.skipped == 1);
}

TEST_CASE("perplexity is duplication invariant") {
  const auto lm = BigramLm::train({"the steak was great", "the wine was great", "oak fire steak"});
  const std::vector<std::string> texts = {"the steak was great", "oak wine"};
  std::vector<std::string> doubled = texts;
  doubled.insert(doubled.end(), texts.begin(), texts.end());
  CHECK(perplexity(lm, doubled).value == doctest::Approx(perplexity(lm, texts).value).epsilon(1e-12));
  const auto reloaded = BigramLm::from_json(lm.to_json());
  CHECK(perplexity(reloaded, texts).value == perplexity(lm, texts).value);
}

TEST_CASE("bigram LM assigns higher likelihood to seen text") {
  const auto lm = BigramLm::train({"the steak was great", "the steak was tender"});
  CHECK(perplexity(lm, {"the steak was great"}).value < perplexity(lm, {"great was steak the"}).value);
}

TEST_CASE("length stats") {
  const auto s = length_stats({"a b", "a b c d"});
  CHECK(s.avg_words == 3.0);
  CHECK(s.std_words == 1.0);
  CHECK(length_stats({"one two three"}).std_words == 0.0);
  CHECK_THROWS_AS(length_stats({}), std::invalid_argument);
}

TEST_CASE("information score over a dataset") {
  const grounding::KeywordAnswerabilityScorer scorer;
  const auto facets = grounding::FacetQuerySet::defaults();
  const std::string review = "The steak costs $30 and tastes smoky.";
  const std::vector<InfoSample> identical = {{Aspect::from_surface("steak"), review, review},
                                             {Aspect::from_surface("steak"), review, review}};
  CHECK(information_score_dataset(scorer, facets, identical) == 100.0);

  // Second candidate answers price (grounded) and portion size (not grounded).
  const std::vector<InfoSample> mixed = {
      {Aspect::from_surface("steak"), review, review},
      {Aspect::from_surface("steak"), "The steak costs $30.", "Huge steak for $30."}};
  const double r0 = grounding::information_reward(scorer, facets, mixed[0].aspect, mixed[0].review,
                                                  mixed[0].candidate).value;
  const double r1 = grounding::information_reward(scorer, facets, mixed[1].aspect, mixed[1].review,
                                                  mixed[1].candidate).value;
  CHECK(r0 == 1.0);
  CHECK(r1 == 0.5);
  CHECK(information_score_dataset(scorer, facets, mixed) == 75.0);
  CHECK(information_score_dataset(scorer, facets, {}) == 0.0);
}

TEST_CASE("net preference") {
  SUBCASE("worked example: 166 wins, 103 losses, 31 ties of 300") {
    const auto np = net_preference(ballots(166, 103, 31), "ours");
    CHECK(np.net.at("faithfulness") == doctest::Approx(-21.0).epsilon(1e-12));
    CHECK(np.win_pct.at("faithfulness") == doctest::Approx(55.333333).epsilon(1e-6));
    CHECK(np.loss_pct.at("faithfulness") == doctest::Approx(34.333333).epsilon(1e-6));
    CHECK(np.tie_pct.at("faithfulness") == doctest::Approx(10.333333).epsilon(1e-6));
  }
  SUBCASE("6 wins 4 losses") {
    CHECK(net_preference(ballots(6, 4, 0), "ours").net.at("attractiveness") == -20.0);
  }
  SUBCASE("all ties") {
    CHECK(net_preference(ballots(0, 0, 7), "ours").net.at("fluency") == 0.0);
  }
  SUBCASE("antisymmetry") {
    for (auto [w, l, t] : {std::tuple{3, 5, 2}, std::tuple{10, 1, 0}, std::tuple{4, 4, 4}}) {
      const double forward = net_preference(ballots(w, l, t), "ours").net.at("fluency");
      const double backward = net_preference(ballots(l, w, t), "ours").net.at("fluency");
      CHECK(forward == doctest::Approx(-backward).epsilon(1e-12));
    }
  }
  SUBCASE("unparseable verdicts are excluded") {
    auto bs = ballots(2, 0, 0);
    bs.push_back(ballot("bad", "ours", "maybe"));
    const auto np = net_preference(bs, "ours");
    CHECK(np.excluded == 3);
    CHECK(np.net.at("fluency") == -100.0);
  }
}

TEST_CASE("ballot export round-trips and de-randomizes") {
  const std::vector<InfoSample> ours = {{Aspect::from_surface("steak"), "review one", "ours one"},
                                        {Aspect::from_surface("wine"), "review two", "ours two"},
                                        {Aspect::from_surface("oak"), "review three", "ours three"}};
  const std::vector<std::string> sft = {"sft one", "sft two", "sft three"};
  auto bs = make_ballots(ours, "ours", sft, "sft", 42);
  REQUIRE(bs.size() == 3);
  CHECK(make_ballots(ours, "ours", sft, "sft", 42)[1].system_1 == bs[1].system_1);
  for (auto& b : bs) {
    const std::string ours_copy = b.system_1 == "ours" ? b.copy_1 : b.copy_2;
    CHECK(ours_copy.rfind("ours", 0) == 0);
    b.verdicts["attractiveness"] = b.system_1 == "ours" ? "first" : "second";
    CHECK(ballot_from_line(to_line(b)).verdicts == b.verdicts);
    CHECK(to_line(ballot_from_line(to_line(b))) == to_line(b));
  }
  CHECK(net_preference(bs, "ours").net.at("attractiveness") == -100.0);
}

TEST_CASE("metric report json") {
  MetricReport m;
  m.rouge = RougeScores{0.5, 0.25, 0.4};
  m.ppl_by_lm["bigram"] = 12.0;
  m.length = LengthStats{3.0, 1.0};
  m.info_score = 75.0;
  const auto j = m.to_json();
  CHECK(j.at("rouge_1") == 0.5);
  CHECK(j.at("ppl_aggregation") == "token_weighted");
  CHECK(j.at("info_score") == 75.0);
}

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include "copywriter/generation.hpp"
#include "copywriter/text.hpp"

using namespace copywriter;
using namespace copywriter::gen;

namespace {

std::vector<SftExample> eight_samples() {
  const char* rows[][3] = {
      {"Great steak and a warm room, staff were quick.", "steak", "Juicy steak in a warm room"},
      {"The sushi was fresh and the rice was perfect.", "sushi", "Fresh sushi on perfect rice"},
      {"Our waiter was kind and the pasta came fast.", "pasta", "Pasta served fast by kind staff"},
      {"Tacos with bright salsa and cold beer on tap.", "tacos", "Bright salsa tacos with cold beer"},
      {"Crisp pizza crust and a smoky oven flavor.", "pizza", "Smoky crisp pizza from the oven"},
      {"The ramen broth was rich and the noodles springy.", "ramen", "Rich broth and springy ramen noodles"},
      {"Fluffy pancakes with maple syrup every morning.", "pancakes", "Fluffy pancakes with real maple syrup"},
      {"Dark coffee and flaky croissants by the window.", "coffee", "Dark coffee beside flaky croissants"},
  };
  std::vector<SftExample> out;
  int i = 0;
  for (const auto& r : rows) {
    out.push_back({Review{"r" + std::to_string(i++), r[0], {}}, Aspect::from_surface(r[1]), r[2]});
  }
  return out;
}

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.hidden = 32;
  cfg.max_source_tokens = 64;
  return cfg;
}

// Sum of per-token log-softmax values along the teacher-forced path,
// computed with the plain incremental decoder.
std::vector<double> oracle_token_log_probs(const Seq2SeqModel& m, const std::vector<int>& src,
                                           const std::vector<int>& tgt) {
  const EncoderState enc = m.encode(src);
  nn::Matrix h = enc.h0;
  int prev = Vocabulary::kBos;
  std::vector<double> out;
  for (int id : tgt) {
    const nn::Matrix logits = m.step_logits(enc, h, prev);
    double z = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) z += std::exp(logits(i, 0));
    out.push_back(logits(id, 0) - std::log(z));
    prev = id;
  }
  return out;
}

}  // namespace

TEST_CASE("encode_input layout, truncation and invalid aspects") {
  const auto data = eight_samples();
  const Vocabulary vocab = build_vocabulary(data);
  const Review review{"x", "Great place", {}};
  const auto ids = encode_input(Aspect::from_surface("steak"), review, vocab, 64);
  std::vector<int> expected = vocab.encode("steak");
  expected.push_back(Vocabulary::kSep);
  for (int id : vocab.encode("Great place")) expected.push_back(id);
  CHECK(ids == expected);

  const Review longer{"y", "Great steak and a warm room, staff were quick.", {}};
  const auto cut = encode_input(Aspect::from_surface("sweet potatoes"), longer, vocab, 5);
  CHECK(cut.size() == 5);
  CHECK(cut[2] == Vocabulary::kSep);
  CHECK(std::vector<int>(cut.begin(), cut.begin() + 2) == vocab.encode("sweet potatoes"));

  CHECK_THROWS_AS(encode_input(Aspect{"", ""}, review, vocab, 64), std::invalid_argument);
}

TEST_CASE("encode_input is injective on distinct untruncated inputs") {
  const auto data = eight_samples();
  const Vocabulary vocab = build_vocabulary(data);
  std::set<std::vector<int>> seen;
  int count = 0;
  for (const auto& a : data) {
    for (const auto& b : data) {
      seen.insert(encode_input(a.aspect, b.review, vocab, 64));
      ++count;
    }
  }
  CHECK(static_cast<int>(seen.size()) == count);
}

TEST_CASE("one-token loss is that token's negative log-probability") {
  const auto data = eight_samples();
  const Seq2SeqModel m(build_vocabulary(data), tiny(), 3);
  const auto src = encode_input(data[0].aspect, data[0].review, m.vocab(), 64);
  const std::vector<int> target = {m.vocab().id("Juicy")};
  const double loss = m.sequence_nll(src, target).scalar();
  CHECK(loss == doctest::Approx(-oracle_token_log_probs(m, src, target)[0]).epsilon(1e-12));
  CHECK(loss > 0.0);
}

TEST_CASE("batch loss matches an independent per-token log-softmax sum") {
  const auto data = eight_samples();
  const Seq2SeqModel m(build_vocabulary(data), tiny(), 5);
  const std::vector<const SftExample*> batch = {&data[1], &data[4]};
  double expected = 0.0;
  for (const auto* e : batch) {
    const auto src = encode_input(e->aspect, e->review, m.vocab(), 64);
    const auto tgt = target_ids(m.vocab(), e->reference);
    const auto lps = oracle_token_log_probs(m, src, tgt);
    double s = 0.0;
    for (double lp : lps) s -= lp;
    expected += s / static_cast<double>(lps.size());
  }
  expected /= 2.0;
  CHECK(std::abs(sft_loss(m, batch).scalar() - expected) < 1e-5);
}

TEST_CASE("targets end with EOS") {
  const auto data = eight_samples();
  const Vocabulary vocab = build_vocabulary(data);
  const auto t = target_ids(vocab, "Fresh sushi");
  REQUIRE(t.size() == 3);
  CHECK(t.back() == Vocabulary::kEos);
}

TEST_CASE("overfit eight samples and reproduce references under greedy decoding") {
  const auto data = eight_samples();
  PolicyHandle policy(std::make_unique<Seq2SeqModel>(build_vocabulary(data), tiny(), 7));
  SftConfig cfg;
  cfg.lr = 0.01;
  cfg.batch = 8;
  cfg.epochs = 500;
  cfg.target_loss = 0.1;
  const auto result = train_sft(policy, data, {}, cfg);
  CHECK(result.steps <= 500);
  CHECK(mean_loss(policy.model(), data) < 0.1);
  DecodeConfig greedy;
  greedy.mode = DecodeMode::kGreedy;
  DecodeConfig beam;
  beam.mode = DecodeMode::kBeam;
  for (const auto& e : data) {
    const auto g = generate(policy, e.aspect, e.review, greedy);
    CHECK(g.text == e.reference);
    CHECK(generate(policy, e.aspect, e.review, beam).text == e.reference);
    CHECK(word_count(g.text) <= greedy.max_new_tokens);
  }
}

TEST_CASE("decoding is deterministic and respects the token budget") {
  const auto data = eight_samples();
  PolicyHandle policy(std::make_unique<Seq2SeqModel>(build_vocabulary(data), tiny(), 9));
  DecodeConfig dc;
  dc.max_new_tokens = 6;
  for (DecodeMode mode : {DecodeMode::kGreedy, DecodeMode::kBeam, DecodeMode::kSample}) {
    dc.mode = mode;
    dc.seed = 42;
    const auto a = generate(policy, data[2].aspect, data[2].review, dc);
    const auto b = generate(policy, data[2].aspect, data[2].review, dc);
    CHECK(a.text == b.text);
    CHECK(a.ids == b.ids);
    CHECK(a.ids.size() <= 6);
    CHECK(word_count(a.text) <= 6);
  }
  dc.mode = DecodeMode::kSample;
  std::set<std::string> texts;
  for (std::uint64_t s = 0; s < 10; ++s) {
    dc.seed = s;
    texts.insert(generate(policy, data[2].aspect, data[2].review, dc).text);
  }
  CHECK(texts.size() > 1);
  CHECK(parse_decode_mode("beam") == DecodeMode::kBeam);
  CHECK_THROWS_AS(parse_decode_mode("nucleus"), std::invalid_argument);
}

TEST_CASE("sampled log-probability equals the teacher-forced score") {
  const auto data = eight_samples();
  const Seq2SeqModel m(build_vocabulary(data), tiny(), 11);
  const auto src = encode_input(data[3].aspect, data[3].review, m.vocab(), 64);
  DecodeConfig dc;
  dc.mode = DecodeMode::kSample;
  dc.seed = 5;
  dc.max_new_tokens = 8;
  const auto g = generate_from_ids(m, src, dc);
  std::vector<int> scored = g.ids;
  if (g.eos) scored.push_back(Vocabulary::kEos);
  if (scored.empty()) return;
  nn::NoGradGuard guard;
  const double tf = nn::sum(m.token_log_probs(src, scored)).scalar();
  CHECK(tf == doctest::Approx(g.log_prob).epsilon(1e-9));
}

TEST_CASE("reference handles are frozen") {
  const auto data = eight_samples();
  PolicyHandle policy(std::make_unique<Seq2SeqModel>(build_vocabulary(data), tiny(), 13));
  PolicyHandle reference = policy.frozen_copy();
  CHECK(reference.role() == Role::kReference);
  CHECK(reference.digest() == policy.digest());
  CHECK_THROWS_AS(reference.mutable_model(), std::logic_error);
  SftConfig cfg;
  cfg.lr = 0.01;
  cfg.epochs = 2;
  train_sft(policy, data, {}, cfg);
  CHECK(policy.digest() != reference.digest());
  CHECK(reference.frozen_intact());
  CHECK_THROWS_AS(train_sft(reference, data, {}, cfg), std::logic_error);
  CHECK_THROWS_AS(train_sft(policy, {}, {}, cfg), std::invalid_argument);
}

TEST_CASE("checkpoints and metrics under the run directory") {
  const auto dir = std::filesystem::temp_directory_path() / "copywriter_sft_run";
  std::filesystem::remove_all(dir);
  const auto data = eight_samples();
  PolicyHandle policy(std::make_unique<Seq2SeqModel>(build_vocabulary(data), tiny(), 17));
  SftConfig cfg;
  cfg.lr = 0.01;
  cfg.epochs = 3;
  cfg.run_dir = dir;
  const std::vector<SftExample> dev(data.begin(), data.begin() + 2);
  const auto result = train_sft(policy, data, dev, cfg);
  CHECK(read_lines(dir / "sft" / "metrics.jsonl").size() == 3);
  const auto best = Seq2SeqModel::load(dir / "sft" / "best");
  CHECK(nn::parameter_digest(best->parameters()) == policy.digest());
  CHECK(mean_loss(*best, dev) == doctest::Approx(result.best_loss).epsilon(1e-12));
  CHECK(std::filesystem::exists(dir / "sft" / "last" / "model.json"));
  std::filesystem::remove_all(dir);
}

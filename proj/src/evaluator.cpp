#include "copywriter/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "copywriter/digest.hpp"
#include "copywriter/random.hpp"
#include "copywriter/text.hpp"

namespace copywriter::eval {

namespace {

using NGramCounts = std::map<std::vector<std::string>, int>;

NGramCounts ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  NGramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<long>(i),
                                      tokens.begin() + static_cast<long>(i + n))];
  }
  return counts;
}

double f1(double overlap, double cand_total, double ref_total) {
  if (overlap <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
  const double p = overlap / cand_total;
  const double r = overlap / ref_total;
  return 2.0 * p * r / (p + r);
}

double rouge_n(const std::vector<std::string>& cand, const std::vector<std::string>& ref,
               std::size_t n) {
  const auto c = ngrams(cand, n);
  const auto r = ngrams(ref, n);
  double overlap = 0.0;
  for (const auto& [gram, count] : c) {
    const auto it = r.find(gram);
    if (it != r.end()) overlap += std::min(count, it->second);
  }
  const double cand_total = cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 0.0;
  const double ref_total = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
  return f1(overlap, cand_total, ref_total);
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Verdict flip(Verdict v) {
  if (v == Verdict::kFirst) return Verdict::kSecond;
  if (v == Verdict::kSecond) return Verdict::kFirst;
  return Verdict::kTie;
}

}  // namespace

std::vector<std::string> rouge_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& tok : whitespace_tokens(text)) {
    std::string w;
    for (char c : tok) {
      const auto u = static_cast<unsigned char>(c);
      if (std::isalnum(u)) w.push_back(static_cast<char>(std::tolower(u)));
    }
    if (!w.empty()) out.push_back(std::move(w));
  }
  return out;
}

RougeScores rouge_pair(std::string_view candidate, std::string_view reference) {
  const auto cand = rouge_tokens(candidate);
  const auto ref = rouge_tokens(reference);
  RougeScores s;
  s.rouge_1 = rouge_n(cand, ref, 1);
  s.rouge_2 = rouge_n(cand, ref, 2);
  s.rouge_l = f1(static_cast<double>(lcs_length(cand, ref)), static_cast<double>(cand.size()),
                 static_cast<double>(ref.size()));
  return s;
}

RougeScores rouge_scores(const std::vector<std::string>& candidates,
                         const std::vector<std::string>& references) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("rouge_scores: " + std::to_string(candidates.size()) +
                                " candidates vs " + std::to_string(references.size()) +
                                " references");
  }
  RougeScores mean;
  if (candidates.empty()) return mean;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto s = rouge_pair(candidates[i], references[i]);
    mean.rouge_1 += s.rouge_1;
    mean.rouge_2 += s.rouge_2;
    mean.rouge_l += s.rouge_l;
  }
  const double n = static_cast<double>(candidates.size());
  mean.rouge_1 /= n;
  mean.rouge_2 /= n;
  mean.rouge_l /= n;
  return mean;
}

std::vector<double> UniformLm::token_log_probs(std::string_view text) const {
  const double lp = -std::log(static_cast<double>(vocab_size_));
  return std::vector<double>(whitespace_tokens(text).size(), lp);
}

int BigramLm::id(const std::string& w) const {
  const auto it = vocab_.find(w);
  return it == vocab_.end() ? 1 : it->second;
}

BigramLm BigramLm::train(const std::vector<std::string>& texts, double add_k) {
  BigramLm lm;
  lm.add_k_ = add_k;
  lm.vocab_ = {{"<s>", 0}, {"<unk>", 1}, {"</s>", 2}};
  for (const auto& t : texts) {
    for (const auto& w : whitespace_tokens(to_lower(t))) {
      lm.vocab_.emplace(w, static_cast<int>(lm.vocab_.size()));
    }
  }
  lm.context_totals_.assign(lm.vocab_.size(), 0.0);
  for (const auto& t : texts) {
    int prev = 0;
    auto words = whitespace_tokens(to_lower(t));
    words.emplace_back("</s>");
    for (const auto& w : words) {
      const int cur = lm.id(w);
      lm.bigram_[{prev, cur}] += 1.0;
      lm.context_totals_[static_cast<std::size_t>(prev)] += 1.0;
      prev = cur;
    }
  }
  return lm;
}

std::vector<double> BigramLm::token_log_probs(std::string_view text) const {
  // <s> is never predicted, so the event space excludes it.
  const double outcomes = static_cast<double>(vocab_.size() - 1);
  std::vector<double> out;
  int prev = 0;
  auto words = whitespace_tokens(to_lower(text));
  words.emplace_back("</s>");
  for (const auto& w : words) {
    const int cur = id(w);
    const auto it = bigram_.find({prev, cur});
    const double count = it == bigram_.end() ? 0.0 : it->second;
    out.push_back(std::log((count + add_k_) /
                           (context_totals_[static_cast<std::size_t>(prev)] + add_k_ * outcomes)));
    prev = cur;
  }
  return out;
}

nlohmann::json BigramLm::to_json() const {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& [key, c] : bigram_) counts.push_back({key.first, key.second, c});
  return {{"add_k", add_k_}, {"vocab", vocab_}, {"bigrams", counts}};
}

BigramLm BigramLm::from_json(const nlohmann::json& j) {
  BigramLm lm;
  lm.add_k_ = j.at("add_k").get<double>();
  lm.vocab_ = j.at("vocab").get<std::map<std::string, int>>();
  lm.context_totals_.assign(lm.vocab_.size(), 0.0);
  for (const auto& row : j.at("bigrams")) {
    const int a = row[0].get<int>(), b = row[1].get<int>();
    const double c = row[2].get<double>();
    lm.bigram_[{a, b}] = c;
    lm.context_totals_[static_cast<std::size_t>(a)] += c;
  }
  return lm;
}

PerplexityResult perplexity(const CausalLm& lm, const std::vector<std::string>& texts) {
  PerplexityResult result;
  double nll = 0.0;
  for (const auto& text : texts) {
    if (whitespace_tokens(text).empty()) {
      spdlog::warn("perplexity: skipping empty text");
      ++result.skipped;
      continue;
    }
    for (double lp : lm.token_log_probs(text)) {
      nll -= lp;
      ++result.tokens;
    }
  }
  if (result.tokens == 0) throw std::invalid_argument("perplexity: no tokens to score");
  result.value = std::exp(nll / static_cast<double>(result.tokens));
  return result;
}

LengthStats length_stats(const std::vector<std::string>& texts) {
  if (texts.empty()) throw std::invalid_argument("length_stats: empty list");
  std::vector<double> counts;
  for (const auto& t : texts) counts.push_back(static_cast<double>(word_count(t)));
  double mean = 0.0;
  for (double c : counts) mean += c;
  mean /= static_cast<double>(counts.size());
  double var = 0.0;
  for (double c : counts) var += (c - mean) * (c - mean);
  var /= static_cast<double>(counts.size());
  return {mean, std::sqrt(var)};
}

double information_score_dataset(const grounding::AnswerabilityScorer& scorer,
                                 const grounding::FacetQuerySet& facets,
                                 const std::vector<InfoSample>& samples, double threshold) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) {
    total += grounding::information_reward(scorer, facets, s.aspect, s.review, s.candidate, threshold)
                 .value;
  }
  return 100.0 * total / static_cast<double>(samples.size());
}

std::optional<Verdict> parse_verdict(std::string_view raw) {
  const std::string v = normalize_phrase(raw);
  if (v == "first" || v == "first copywriting" || v == "1") return Verdict::kFirst;
  if (v == "second" || v == "second copywriting" || v == "2") return Verdict::kSecond;
  if (v == "tie") return Verdict::kTie;
  return std::nullopt;
}

std::vector<PairwiseBallot> make_ballots(const std::vector<InfoSample>& system_a_outputs,
                                         const std::string& system_a,
                                         const std::vector<std::string>& system_b_outputs,
                                         const std::string& system_b, std::uint64_t seed) {
  if (system_a_outputs.size() != system_b_outputs.size()) {
    throw std::invalid_argument("make_ballots: output lists differ in length");
  }
  std::vector<PairwiseBallot> ballots;
  for (std::size_t i = 0; i < system_a_outputs.size(); ++i) {
    const auto& a = system_a_outputs[i];
    PairwiseBallot b;
    b.ballot_id = "ballot-" + std::to_string(i);
    b.review = a.review;
    b.aspect = a.aspect;
    b.side_seed = stable_hash64(std::to_string(seed) + "/" + b.ballot_id);
    const bool a_first = !Rng(b.side_seed).coin();
    b.copy_1 = a_first ? a.candidate : system_b_outputs[i];
    b.copy_2 = a_first ? system_b_outputs[i] : a.candidate;
    b.system_1 = a_first ? system_a : system_b;
    b.system_2 = a_first ? system_b : system_a;
    ballots.push_back(std::move(b));
  }
  return ballots;
}

std::string to_line(const PairwiseBallot& b) {
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["ballot_id"] = b.ballot_id;
  j["review"] = b.review;
  j["aspect"] = b.aspect.surface;
  j["copy_1"] = b.copy_1;
  j["copy_2"] = b.copy_2;
  j["system_1"] = b.system_1;
  j["system_2"] = b.system_2;
  j["side_seed"] = b.side_seed;
  j["questions"] = kBallotQuestions;
  j["verdicts"] = b.verdicts;
  return j.dump();
}

PairwiseBallot ballot_from_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("v").get<int>() != kSchemaVersion) throw DecodeError("unsupported schema version");
    PairwiseBallot b;
    b.ballot_id = j.at("ballot_id").get<std::string>();
    b.review = j.at("review").get<std::string>();
    b.aspect = Aspect::from_surface(j.at("aspect").get<std::string>());
    b.copy_1 = j.at("copy_1").get<std::string>();
    b.copy_2 = j.at("copy_2").get<std::string>();
    b.system_1 = j.at("system_1").get<std::string>();
    b.system_2 = j.at("system_2").get<std::string>();
    b.side_seed = j.at("side_seed").get<std::uint64_t>();
    if (j.contains("verdicts")) b.verdicts = j.at("verdicts").get<std::map<std::string, std::string>>();
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("malformed ballot: ") + e.what());
  }
}

NetPreference net_preference(const std::vector<PairwiseBallot>& ballots,
                             const std::string& system_under_test) {
  NetPreference out;
  for (std::string_view question : kBallotQuestions) {
    const std::string q(question);
    std::size_t wins = 0, losses = 0, ties = 0;
    for (const auto& b : ballots) {
      const auto raw = b.verdicts.find(q);
      if (raw == b.verdicts.end()) continue;
      auto verdict = parse_verdict(raw->second);
      const bool first = b.system_1 == system_under_test;
      const bool second = b.system_2 == system_under_test;
      if (!verdict || first == second) {
        ++out.excluded;
        continue;
      }
      // Perspective of the system under test as if it were always first.
      const Verdict v = first ? *verdict : flip(*verdict);
      if (v == Verdict::kFirst) {
        ++wins;
      } else if (v == Verdict::kSecond) {
        ++losses;
      } else {
        ++ties;
      }
    }
    const std::size_t n = wins + losses + ties;
    if (n == 0) continue;
    auto pct = [n](double count) { return count * 100.0 / static_cast<double>(n); };
    out.win_pct[q] = pct(static_cast<double>(wins));
    out.loss_pct[q] = pct(static_cast<double>(losses));
    out.tie_pct[q] = pct(static_cast<double>(ties));
    out.net[q] = pct(static_cast<double>(losses) - static_cast<double>(wins));
  }
  return out;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (rouge) {
    j["rouge_1"] = rouge->rouge_1;
    j["rouge_2"] = rouge->rouge_2;
    j["rouge_l"] = rouge->rouge_l;
  }
  if (!ppl_by_lm.empty()) {
    j["ppl_by_lm"] = ppl_by_lm;
    j["ppl_aggregation"] = "token_weighted";
  }
  if (length) {
    j["avg_words"] = length->avg_words;
    j["std_words"] = length->std_words;
  }
  if (info_score) j["info_score"] = *info_score;
  return j;
}

}  // namespace copywriter::eval

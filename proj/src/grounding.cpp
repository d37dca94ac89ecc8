#include "copywriter/grounding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "copywriter/text.hpp"

namespace copywriter::grounding {

namespace {

const std::set<std::string>& stopwords() {
  static const std::set<std::string> kWords = {
      "a",    "an",   "the",  "is",   "are",  "was",  "were", "be",   "been", "of",   "to",
      "in",   "on",   "at",   "for",  "and",  "or",   "but",  "with", "it",   "its",  "it's",
      "this", "that", "these", "those", "what", "how", "does", "do",  "did",  "about", "by",
      "as",   "from", "they", "them", "their", "we",  "our",  "us",   "i",    "my",   "me",
      "you",  "your", "so",   "very", "just", "there", "here", "which", "who", "whom", "ones",
      "one",  "has",  "have", "had",  "will", "would", "can", "could", "than", "then", "too"};
  return kWords;
}

std::string fold_plural(std::string w) {
  if (w.size() > 3 && w.back() == 's' && w[w.size() - 2] != 's') w.pop_back();
  return w;
}

std::string strip_punct(std::string_view token) {
  std::string out;
  for (char c : token) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '$' || c == '\'' || c == '-') out.push_back(static_cast<char>(std::tolower(u)));
  }
  while (!out.empty() && (out.front() == '\'' || out.front() == '-')) out.erase(out.begin());
  while (!out.empty() && (out.back() == '\'' || out.back() == '-')) out.pop_back();
  return out;
}

std::set<std::string> word_set(std::string_view text) {
  std::set<std::string> out;
  for (const auto& tok : whitespace_tokens(text)) {
    const std::string w = strip_punct(tok);
    if (w.empty()) continue;
    out.insert(fold_plural(w));
    if (w.find('$') != std::string::npos) out.insert("$");
  }
  return out;
}

bool contains_negation(const std::set<std::string>& words) {
  for (const char* neg : {"not", "no", "never", "don't", "didn't", "isn't", "wasn't", "nothing"}) {
    if (words.contains(neg)) return true;
  }
  return false;
}

}  // namespace

std::vector<std::string> content_words(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& tok : whitespace_tokens(text)) {
    const std::string w = strip_punct(tok);
    if (w.empty() || stopwords().contains(w)) continue;
    out.push_back(fold_plural(w));
  }
  return out;
}

std::array<double, 2> LexicalEntailmentScorer::logits(std::string_view premise,
                                                      std::string_view hypothesis) const {
  const auto premise_words = word_set(premise);
  const auto hyp_content = content_words(hypothesis);
  double coverage = 1.0;
  if (!hyp_content.empty()) {
    std::size_t hit = 0;
    for (const auto& w : hyp_content) hit += premise_words.contains(w) ? 1 : 0;
    coverage = static_cast<double>(hit) / static_cast<double>(hyp_content.size());
  }
  double entail = 4.0 * coverage - 2.0;
  if (normalize_phrase(premise).find(normalize_phrase(hypothesis)) != std::string::npos) entail += 2.0;
  if (contains_negation(premise_words) != contains_negation(word_set(hypothesis))) entail -= 3.0;
  return {entail, -entail};
}

KeywordAnswerabilityScorer::KeywordAnswerabilityScorer() {
  const std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> groups = {
      {{"price"},
       {"$", "priced", "pricey", "cost", "costs", "dollar", "cheap", "expensive", "affordable",
        "reasonably", "bargain", "value", "overpriced"}},
      {{"cooking", "method"},
       {"cooked", "cook", "grilled", "grill", "fried", "baked", "roasted", "smoked", "smoker",
        "woodsmoke", "steamed", "braised", "seared", "charred", "wood", "oven"}},
      {{"taste"},
       {"tastes", "tasty", "flavor", "flavorful", "delicious", "savory", "sweet", "bland", "salty",
        "juicy", "yummy", "bitter"}},
      {{"smell"}, {"smells", "aroma", "smoky", "fragrant", "scent", "smelled"}},
      {{"look"}, {"looks", "presentation", "beautiful", "colorful", "plated", "golden", "pretty"}},
      {{"quality"}, {"fresh", "tender", "perfect", "excellent", "decent", "stale", "high-quality"}},
      {{"seasoning"}, {"seasoned", "spice", "spices", "spicy", "salt", "pepper", "herbs"}},
      {{"portion", "size"}, {"portions", "huge", "generous", "large", "small", "big", "tiny"}},
      {{"cleanliness"}, {"clean", "dirty", "spotless", "tidy", "filthy"}},
      {{"component"},
       {"sides", "topped", "served", "includes", "veggies", "ingredients", "sauce", "side"}},
      {{"opinion", "people"},
       {"love", "loved", "fans", "fan", "favorite", "recommend", "worth", "must-visit", "enjoy"}},
      {{"compare", "similar", "market"},
       {"better", "best", "compared", "unlike", "rare", "most", "other", "others"}},
  };
  for (const auto& [keys, cues] : groups) {
    std::set<std::string> folded;
    for (const auto& k : keys) folded.insert(fold_plural(k));
    for (const auto& c : cues) folded.insert(fold_plural(c));
    for (const auto& k : keys) cues_[fold_plural(k)] = folded;
  }
}

double KeywordAnswerabilityScorer::score(std::string_view question,
                                         std::string_view paragraph) const {
  const auto para = word_set(paragraph);
  if (para.empty()) return 0.0;
  bool has_facet = false;
  bool facet_hit = false;
  std::size_t subject_total = 0, subject_hit = 0;
  for (const auto& w : content_words(question)) {
    const auto it = cues_.find(w);
    if (it != cues_.end()) {
      has_facet = true;
      for (const auto& cue : it->second) {
        if (para.contains(cue)) {
          facet_hit = true;
          break;
        }
      }
    } else {
      ++subject_total;
      subject_hit += para.contains(w) ? 1 : 0;
    }
  }
  if (has_facet && !facet_hit) return 0.0;
  const double subject =
      subject_total == 0 ? 1.0 : static_cast<double>(subject_hit) / static_cast<double>(subject_total);
  return 0.5 + 0.5 * subject;
}

FacetQuerySet FacetQuerySet::defaults() {
  return FacetQuerySet({
      "What is the price of {k}?",
      "What is the cooking method of {k}?",
      "How does the {k} taste?",
      "How does the {k} smell?",
      "How does the {k} look?",
      "How is the quality of {k}?",
      "How is the seasoning of {k}?",
      "How is the portion size of {k} ?",
      "How is the cleanliness of {k}",
      "What are the components of the {k}?",
      "What is the opinion of the people about the {k}?",
      "How does {k} compare to similar ones on the market?",
  });
}

FacetQuerySet::FacetQuerySet(std::vector<std::string> templates) : templates_(std::move(templates)) {
  for (const auto& t : templates_) {
    if (t.find("{k}") == std::string::npos) {
      throw std::invalid_argument("facet template lacks {k}: " + t);
    }
  }
}

FacetQuerySet FacetQuerySet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> templates;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) templates.push_back(line);
  }
  return FacetQuerySet(std::move(templates));
}

void write_facets(const std::filesystem::path& path, const FacetQuerySet& facets) {
  std::vector<std::string> lines = facets.templates();
  write_lines(path, lines);
}

std::vector<std::string> instantiate_facets(const FacetQuerySet& facets, const Aspect& aspect) {
  if (aspect.normalized.empty()) throw std::invalid_argument("aspect must be non-empty");
  std::vector<std::string> out;
  out.reserve(facets.size());
  for (const auto& t : facets.templates()) out.push_back(substitute(t, "k", aspect.surface));
  return out;
}

bool answerable(const AnswerabilityScorer& scorer, std::string_view question,
                std::string_view text, double threshold) {
  if (question.empty() || text.empty()) return false;
  return scorer.score(question, text) >= threshold;
}

VeracityResult veracity_reward(const EntailmentScorer& scorer, std::string_view review_text,
                               std::string_view candidate, VeracityOptions options) {
  if (review_text.empty()) throw std::invalid_argument("veracity_reward: empty review");
  if (candidate.empty()) throw std::invalid_argument("veracity_reward: empty candidate");
  VeracityResult result;
  std::string premise(review_text);
  auto words = whitespace_tokens(review_text);
  if (words.size() > scorer.max_premise_words()) {
    words.resize(scorer.max_premise_words());
    premise = join(words, " ");
    result.premise_truncated = true;
  }
  const auto logits = scorer.logits(premise, candidate);
  if (options.normalize) {
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
    result.value = e0 / (e0 + e1);
  } else {
    result.value = logits[0];
  }
  return result;
}

InformationResult information_reward(const AnswerabilityScorer& scorer, const FacetQuerySet& facets,
                                     const Aspect& aspect, std::string_view review_text,
                                     std::string_view candidate, double threshold) {
  InformationResult result;
  for (const auto& question : instantiate_facets(facets, aspect)) {
    if (!answerable(scorer, question, candidate, threshold)) continue;
    ++result.answered;
    if (answerable(scorer, question, review_text, threshold)) ++result.grounded;
  }
  result.value = result.answered == 0
                     ? 0.0
                     : static_cast<double>(result.grounded) / static_cast<double>(result.answered);
  return result;
}

}  // namespace copywriter::grounding

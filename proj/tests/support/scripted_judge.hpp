#pragma once

// Deterministic offline judge. Summaries are the review sentences that
// mention the aspect, cut to a word budget; comparisons prefer the copy
// with more distinct descriptive words and answer "tie" on equal counts.

#include <algorithm>
#include <atomic>
#include <set>
#include <string>
#include <string_view>

#include "copywriter/corpus_builder.hpp"
#include "copywriter/grounding.hpp"
#include "copywriter/text.hpp"

namespace oracle {

inline std::string field_after(const std::string& prompt, const std::string& label) {
  const auto start = prompt.find(label);
  if (start == std::string::npos) return {};
  const auto begin = start + label.size();
  const auto end = prompt.find('\n', begin);
  return prompt.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
}

inline std::string quoted_aspect(const std::string& prompt) {
  const auto open = prompt.find('"');
  const auto close = prompt.find('"', open + 1);
  return prompt.substr(open + 1, close - open - 1);
}

class ScriptedJudge final : public copywriter::corpus::JudgeBackend {
 public:
  explicit ScriptedJudge(int word_budget = 24) : word_budget_(word_budget) {}

  std::string complete(const copywriter::corpus::JudgeRequest& request) override {
    ++calls;
    if (request.kind == "summary") return summarize(request.prompt);
    return compare(request.prompt);
  }

  std::atomic<int> calls{0};

 private:
  int word_budget_;

  std::string summarize(const std::string& prompt) const {
    const std::string aspect = copywriter::to_lower(quoted_aspect(prompt));
    const std::string review = field_after(prompt, "Review: ");
    std::vector<std::string> picked;
    std::string sentence;
    auto flush = [&] {
      if (copywriter::to_lower(sentence).find(aspect) != std::string::npos) {
        for (const auto& w : copywriter::whitespace_tokens(sentence)) picked.push_back(w);
      }
      sentence.clear();
    };
    for (char c : review) {
      sentence.push_back(c);
      if (c == '.' || c == '!' || c == '?') flush();
    }
    flush();
    if (static_cast<int>(picked.size()) > word_budget_) picked.resize(word_budget_);
    return copywriter::join(picked, " ");
  }

  static std::size_t richness(const std::string& text) {
    const auto words = copywriter::grounding::content_words(text);
    return std::set<std::string>(words.begin(), words.end()).size();
  }

  static std::string compare(const std::string& prompt) {
    const auto a = richness(field_after(prompt, "First copy: "));
    const auto b = richness(field_after(prompt, "Second copy: "));
    if (a == b) return "Tie.";
    return a > b ? "First" : "second";
  }
};

}  // namespace oracle

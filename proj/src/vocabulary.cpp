#include "copywriter/vocabulary.hpp"

#include <map>
#include <stdexcept>

#include "copywriter/text.hpp"

namespace copywriter {

Vocabulary::Vocabulary() {
  for (const char* special : {"<pad>", "<unk>", "<s>", "</s>", "<sep>"}) add(special);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, bool lowercase,
                             int min_count) {
  Vocabulary vocab;
  vocab.lowercase_ = lowercase;
  std::vector<std::string> order;
  std::map<std::string, int> counts;
  for (const auto& text : texts) {
    for (auto& tok : whitespace_tokens(lowercase ? to_lower(text) : text)) {
      if (counts[tok]++ == 0) order.push_back(tok);
    }
  }
  for (const auto& tok : order) {
    if (counts[tok] >= min_count) vocab.add(tok);
  }
  return vocab;
}

int Vocabulary::add(std::string_view token) {
  const auto it = index_.find(std::string(token));
  if (it != index_.end()) return it->second;
  const int id = size();
  tokens_.emplace_back(token);
  index_.emplace(std::string(token), id);
  return id;
}

int Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : whitespace_tokens(lowercase_ ? to_lower(text) : std::string(text))) {
    ids.push_back(id(tok));
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int id : ids) {
    if (!is_special(id)) words.push_back(token(id));
  }
  return join(words, " ");
}

nlohmann::json Vocabulary::to_json() const {
  return {{"lowercase", lowercase_}, {"tokens", tokens_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary vocab;
  vocab.lowercase_ = j.at("lowercase").get<bool>();
  const auto tokens = j.at("tokens").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i < static_cast<std::size_t>(vocab.size())) {
      if (tokens[i] != vocab.token(static_cast<int>(i))) {
        throw std::runtime_error("vocabulary specials do not match");
      }
      continue;
    }
    vocab.add(tokens[i]);
  }
  return vocab;
}

}  // namespace copywriter

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace copywriter {

// Word-level vocabulary over whitespace tokens with reserved specials.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kSep = 4;

  Vocabulary();

  // Tokens seen at least `min_count` times, ordered by first appearance.
  static Vocabulary build(const std::vector<std::string>& texts, bool lowercase = false,
                          int min_count = 1);

  int add(std::string_view token);
  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  bool lowercase() const { return lowercase_; }
  static bool is_special(int id) { return id <= kSep; }

  std::vector<int> encode(std::string_view text) const;
  // Drops special tokens and joins the rest with single spaces.
  std::string decode(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  bool lowercase_ = false;
};

}  // namespace copywriter

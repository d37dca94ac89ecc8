#include "copywriter/text.hpp"

#include <cctype>

namespace copywriter {

namespace {

bool is_space(char c) {
  return std::isspace(static_cast<unsigned char>(c)) != 0;
}

}  // namespace

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) tokens.emplace_back(text.substr(start, i - start));
  }
  return tokens;
}

int word_count(std::string_view text) {
  return static_cast<int>(whitespace_tokens(text).size());
}

std::string to_lower(std::string_view text) {
  std::string out(text);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string normalize_phrase(std::string_view text) {
  return join(whitespace_tokens(to_lower(text)), " ");
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

std::string substitute(std::string_view tmpl, std::string_view name,
                       std::string_view value) {
  const std::string key = "{" + std::string(name) + "}";
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t hit = tmpl.find(key, pos);
    if (hit == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, hit - pos));
    out.append(value);
    pos = hit + key.size();
  }
  return out;
}

}  // namespace copywriter

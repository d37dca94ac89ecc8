#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace copywriter {

// Whitespace-separated tokens, in order. Runs of whitespace never produce
// empty tokens.
std::vector<std::string> whitespace_tokens(std::string_view text);

int word_count(std::string_view text);

// Lowercases ASCII letters and collapses whitespace runs to one space,
// trimming both ends.
std::string normalize_phrase(std::string_view text);

std::string to_lower(std::string_view text);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Replaces every occurrence of `{name}` in `tmpl`.
std::string substitute(std::string_view tmpl, std::string_view name,
                       std::string_view value);

}  // namespace copywriter

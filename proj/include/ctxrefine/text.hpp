#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace ctxrefine::text {

std::string_view trim(std::string_view s);

// Lower-cases ASCII letters and collapses every whitespace run to one space.
std::string normalize_for_dedup(std::string_view s);

std::size_t count_words(std::string_view s);

std::vector<std::string> split_lines(std::string_view s);

std::string replace_all(std::string s, std::string_view from, std::string_view to);

bool starts_with_ci(std::string_view s, std::string_view prefix);

}  // namespace ctxrefine::text

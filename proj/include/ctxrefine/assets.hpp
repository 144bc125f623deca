#pragma once

#include <map>
#include <string>
#include <string_view>

namespace ctxrefine::assets {

// Prompt texts compiled in from assets/prompts, keyed by file stem.
const std::map<std::string, std::string, std::less<>>& embedded_prompts();

// Throws ConfigError for unknown names.
const std::string& prompt(std::string_view name);

}  // namespace ctxrefine::assets

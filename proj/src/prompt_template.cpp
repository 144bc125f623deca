#include "ctxrefine/prompt_template.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ctxrefine/assets.hpp"
#include "ctxrefine/errors.hpp"

namespace ctxrefine {
namespace {

bool slot_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_'; }

// Walks the template, calling on_text for literal runs and on_slot for each
// placeholder name.
template <typename OnText, typename OnSlot>
void scan(std::string_view text, std::string_view id, OnText on_text, OnSlot on_slot) {
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '{' && i + 1 < text.size() && text[i + 1] == '{') {
      on_text("{");
      i += 2;
    } else if (c == '}' && i + 1 < text.size() && text[i + 1] == '}') {
      on_text("}");
      i += 2;
    } else if (c == '{') {
      const auto close = text.find('}', i + 1);
      if (close == std::string_view::npos)
        throw TemplateError("template '" + std::string(id) + "': unterminated placeholder");
      const auto name = text.substr(i + 1, close - i - 1);
      if (name.empty() || !std::all_of(name.begin(), name.end(), slot_char))
        throw TemplateError("template '" + std::string(id) + "': malformed placeholder '{" + std::string(name) + "}'");
      on_slot(name);
      i = close + 1;
    } else {
      const auto next = text.find_first_of("{}", i + 1);
      const auto end = next == std::string_view::npos ? text.size() : next;
      on_text(text.substr(i, end - i));
      i = end;
    }
  }
}

}  // namespace

PromptTemplate::PromptTemplate(std::string id, std::string text) : id_(std::move(id)), text_(std::move(text)) {
  scan(text_, id_, [](std::string_view) {}, [&](std::string_view name) { placeholders_.emplace(name); });
}

PromptTemplate PromptTemplate::from_asset(std::string_view name, std::string_view version) {
  return PromptTemplate(std::string(name) + "." + std::string(version), assets::prompt(name));
}

PromptTemplate PromptTemplate::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open template '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return PromptTemplate(path.stem().string(), os.str());
}

std::string PromptTemplate::render(const std::map<std::string, std::string, std::less<>>& values) const {
  std::string out;
  out.reserve(text_.size() * 2);
  scan(
      text_, id_, [&](std::string_view t) { out += t; },
      [&](std::string_view name) {
        auto it = values.find(name);
        if (it == values.end())
          throw TemplateError("template '" + id_ + "': unresolved placeholder '" + std::string(name) + "'");
        out += it->second;
      });
  return out;
}

namespace assets {

const std::string& prompt(std::string_view name) {
  const auto& all = embedded_prompts();
  auto it = all.find(name);
  if (it == all.end()) throw ConfigError("no embedded prompt named '" + std::string(name) + "'");
  return it->second;
}

}  // namespace assets
}  // namespace ctxrefine

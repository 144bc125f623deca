#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>

namespace ctxrefine {

// Text with `{slot}` placeholders; `{{` and `}}` produce literal braces.
// Slot names are lower-case letters, digits and underscores.
class PromptTemplate {
 public:
  PromptTemplate(std::string id, std::string text);

  static PromptTemplate from_asset(std::string_view name, std::string_view version = "v1");
  static PromptTemplate from_file(const std::filesystem::path& path);

  const std::string& id() const noexcept { return id_; }
  const std::string& text() const noexcept { return text_; }
  const std::set<std::string, std::less<>>& placeholders() const noexcept { return placeholders_; }

  // Every placeholder must have a value; throws TemplateError naming the
  // first one that does not.
  std::string render(const std::map<std::string, std::string, std::less<>>& values) const;

 private:
  std::string id_;
  std::string text_;
  std::set<std::string, std::less<>> placeholders_;
};

}  // namespace ctxrefine

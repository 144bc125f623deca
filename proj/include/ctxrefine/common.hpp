#pragma once

#include <string>
#include <variant>

namespace ctxrefine {

// An item that did not make it through a stage: a backend error, a parse
// failure or a filter rejection.
struct ItemFailure {
  std::string id;
  std::string stage;
  std::string reason;
  std::string detail;

  bool operator==(const ItemFailure&) const = default;
};

template <typename T>
using ItemResult = std::variant<T, ItemFailure>;

}  // namespace ctxrefine

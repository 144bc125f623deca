#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace ctxrefine {

// 64-bit FNV-1a. Stable across platforms and runs, which std::hash is not.
class Fnv1a {
 public:
  Fnv1a& update(std::string_view bytes) noexcept {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::uint64_t v) noexcept {
    for (int i = 0; i < 8; ++i) {
      state_ ^= static_cast<unsigned char>(v >> (8 * i));
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  // Field separator so ("ab","c") and ("a","bc") hash differently.
  Fnv1a& separator() noexcept { return update(std::string_view("\x1f", 1)); }
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view bytes) { return Fnv1a{}.update(bytes).digest(); }

std::string to_hex(std::uint64_t v);

}  // namespace ctxrefine

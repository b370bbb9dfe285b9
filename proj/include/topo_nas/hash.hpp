#pragma once

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

namespace topo_nas {

// 64-bit FNV-1a, used for every content hash written to disk.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  Fnv1a& bytes(const void* data, std::size_t n) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= kPrime;
    }
    return *this;
  }

  Fnv1a& text(std::string_view s) noexcept { return bytes(s.data(), s.size()); }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  Fnv1a& value(const T& v) noexcept {
    return bytes(&v, sizeof(T));
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  Fnv1a& values(std::span<const T> v) noexcept {
    return bytes(v.data(), v.size_bytes());
  }

  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t hash_text(std::string_view s) noexcept { return Fnv1a{}.text(s).digest(); }

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::uint64_t parse_hex64(std::string_view s) {
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint64_t>(c - 'A' + 10);
    else throw std::invalid_argument("bad hex digit");
  }
  return v;
}

}  // namespace topo_nas

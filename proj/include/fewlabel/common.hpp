#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace fewlabel {

// Thrown when a precondition on an argument value is violated.
using ArgumentError = std::invalid_argument;

// Thrown when an object is used in a state that does not admit the operation.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Thrown when a run configuration references something that does not exist
// (missing artifact, bad method name, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Warning records. Non-fatal conditions (label clamping, rank-deficient
// covariances, ...) are reported through a process-wide sink so callers and
// tests can observe them. The default sink writes to stderr.
// ---------------------------------------------------------------------------

using WarningHandler = std::function<void(const std::string&)>;

namespace detail {
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
inline WarningHandler& warning_handler() {
  static WarningHandler h;  // empty => stderr
  return h;
}
}  // namespace detail

inline void set_warning_handler(WarningHandler h) {
  std::lock_guard<std::mutex> lock(detail::warning_mutex());
  detail::warning_handler() = std::move(h);
}

inline void emit_warning(const std::string& message) {
  std::lock_guard<std::mutex> lock(detail::warning_mutex());
  if (detail::warning_handler()) {
    detail::warning_handler()(message);
  } else {
    std::fprintf(stderr, "[fewlabel warning] %s\n", message.c_str());
  }
}

// RAII capture of warnings, used by tests and by the CLI to collect records.
class WarningCapture {
 public:
  WarningCapture() {
    set_warning_handler([this](const std::string& m) { messages_.push_back(m); });
  }
  ~WarningCapture() { set_warning_handler(nullptr); }
  const std::vector<std::string>& messages() const { return messages_; }
  bool contains(const std::string& needle) const {
    for (const auto& m : messages_) {
      if (m.find(needle) != std::string::npos) return true;
    }
    return false;
  }

 private:
  std::vector<std::string> messages_;
};

// ---------------------------------------------------------------------------
// Hashing. FNV-1a for byte strings plus a SplitMix64 mixer for combining
// integer stream identifiers into RNG seeds.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a + 0x9e3779b97f4a7c15ull + (b << 1));
}

template <typename... Rest>
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return hash_combine(hash_combine(a, b), static_cast<std::uint64_t>(rest)...);
}

}  // namespace fewlabel

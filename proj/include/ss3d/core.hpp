// SPDX-License-Identifier: Apache-2.0
//
// Shared vocabulary: object classes, the error type, seeded random streams
// and a small fan-out helper for per-scene work.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace ss3d {

enum class ClassId : std::uint8_t { Car = 0, Pedestrian = 1, Cyclist = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<ClassId, kNumClasses> kAllClasses = {
    ClassId::Car, ClassId::Pedestrian, ClassId::Cyclist};

inline constexpr std::size_t class_index(ClassId c) { return static_cast<std::size_t>(c); }

inline std::string_view class_name(ClassId c) {
  switch (c) {
    case ClassId::Car: return "Car";
    case ClassId::Pedestrian: return "Pedestrian";
    case ClassId::Cyclist: return "Cyclist";
  }
  return "Unknown";
}

inline std::optional<ClassId> parse_class(std::string_view name) {
  for (ClassId c : kAllClasses) {
    if (class_name(c) == name) return c;
  }
  return std::nullopt;
}

/// Per-class value table indexed by ClassId.
template <typename T>
struct PerClass {
  std::array<T, kNumClasses> values{};

  PerClass() = default;
  PerClass(T car, T ped, T cyc) : values{car, ped, cyc} {}
  static PerClass filled(T v) { return PerClass(v, v, v); }

  T& operator[](ClassId c) { return values[class_index(c)]; }
  const T& operator[](ClassId c) const { return values[class_index(c)]; }
  bool operator==(const PerClass&) const = default;
};

enum class ErrorCode {
  MalformedBinary,
  MalformedLabel,
  MalformedCalib,
  VersionMismatch,
  ChecksumMismatch,
  ConfigInvalid,
  EmptyScene,
  CapabilityDenied,
  EmptyTrainingSet,
  LayoutMismatch,
  Timeout,
  ProtocolViolation,
  ResponderError,
  UnknownScene,
  EmptyInput,
  NoGroundTruth,
  LatentUnavailable,
  DatasetEmpty,
  Io,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedBinary: return "MalformedBinary";
    case ErrorCode::MalformedLabel: return "MalformedLabel";
    case ErrorCode::MalformedCalib: return "MalformedCalib";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::EmptyScene: return "EmptyScene";
    case ErrorCode::CapabilityDenied: return "CapabilityDenied";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::LayoutMismatch: return "LayoutMismatch";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::ResponderError: return "ResponderError";
    case ErrorCode::UnknownScene: return "UnknownScene";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NoGroundTruth: return "NoGroundTruth";
    case ErrorCode::LatentUnavailable: return "LatentUnavailable";
    case ErrorCode::DatasetEmpty: return "DatasetEmpty";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// ---------------------------------------------------------------------------
// Seeding. All randomness flows through explicitly seeded 64-bit Mersenne
// Twister engines; the distributions below are written out so that draws are
// identical across standard library implementations.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ull));
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, Rest... rest) {
  return mix_seed(mix_seed(a, b), c, rest...);
}

/// FNV-1a, used to fold string identifiers into seeds.
inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) return 0;
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(index(static_cast<std::size_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Knuth's multiplication method; fine for the small rates used here.
  int poisson(double lambda) {
    if (!(lambda > 0.0)) return 0;
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = uniform();
    while (p > limit) {
      ++k;
      p *= uniform();
    }
    return k;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Runs fn(i) for i in [0, n) across `workers` threads. Results must be
/// written to per-index slots so output order never depends on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  const unsigned count = std::min<unsigned>(workers, static_cast<unsigned>(n));
  pool.reserve(count);
  for (unsigned w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ss3d

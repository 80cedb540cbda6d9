#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace canonreg {

enum class ErrorCode {
  EmptyCloud,
  BadParameter,
  DegenerateShape,
  DegenerateConfiguration,
  InsufficientPairs,
  SizeMismatch,
  ShapeError,
  StateError,
  TrainingDiverged,
  ConfigError,
  IoError,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::BadParameter: return "BadParameter";
    case ErrorCode::DegenerateShape: return "DegenerateShape";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::InsufficientPairs: return "InsufficientPairs";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::StateError: return "StateError";
    case ErrorCode::TrainingDiverged: return "TrainingDiverged";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// Process exit code buckets: 2 config, 3 data, 4 numerical.
inline int error_exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::BadParameter:
    case ErrorCode::ConfigError:
      return 2;
    case ErrorCode::EmptyCloud:
    case ErrorCode::SizeMismatch:
    case ErrorCode::InsufficientPairs:
    case ErrorCode::DegenerateShape:
    case ErrorCode::IoError:
      return 3;
    default:
      return 4;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

// ---------------------------------------------------------------------------
// Deterministic random numbers.
//
// std::mt19937_64 has a fully specified output sequence, but the standard
// distributions do not, so every draw here goes through hand-rolled,
// platform-independent mappings. All randomness in the project flows from a
// root seed through named substreams so stages can be re-seeded independently.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Stable per-stage seed derived from a root seed and a substream name.
inline std::uint64_t derive_seed(std::uint64_t root_seed, std::string_view name) {
  std::uint64_t s = root_seed ^ hash_name(name);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng substream(std::uint64_t root_seed, std::string_view name) {
    return Rng(derive_seed(root_seed, name));
  }

  std::uint64_t u64() { return engine_(); }

  // Unbiased integer in [0, n) via rejection: [0, limit) is a multiple of n.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail(ErrorCode::BadParameter, "Rng::below(0)");
    std::uint64_t limit = std::uint64_t(-1) - (std::uint64_t(-1) % n);
    for (;;) {
      std::uint64_t x = engine_();
      if (x < limit) return x % n;
    }
  }

  std::int64_t range(std::int64_t lo, std::int64_t hi) {  // inclusive
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  double unit() {  // [0, 1) with 53 random bits
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double a, double b) { return a + (b - a) * unit(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = unit(), u2 = unit();
    while (u1 <= 0.0) u1 = unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.28318530717958647692 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) fail(ErrorCode::BadParameter, "sample k > n");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Work pool. CANONREG_THREADS caps the worker count; results must be merged
// by index so parallel runs stay deterministic.
// ---------------------------------------------------------------------------

inline unsigned max_threads() {
  if (const char* env = std::getenv("CANONREG_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  unsigned workers = std::min<std::size_t>(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  std::mutex err_mutex;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!failed.exchange(true)) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace canonreg

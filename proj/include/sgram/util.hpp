#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace sg {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum class ErrorCode {
  kInvalidArgument = 1,
  kIo = 2,
  kSchema = 3,
  kNumeric = 4,
  kNoParse = 5,
  kInternal = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

const char* error_code_name(ErrorCode code);

// log(exp(a) + exp(b)) without leaving log space.
inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double hi = a > b ? a : b;
  double lo = a > b ? b : a;
  return hi + std::log1p(std::exp(lo - hi));
}

inline void log_add_to(double& acc, double value) { acc = log_add(acc, value); }

double log_sum_exp(const double* values, std::size_t n);
double log_sum_exp(const std::vector<double>& values);

// Deterministic RNG built on mt19937_64 raw draws. The derived helpers avoid
// std::uniform_*_distribution and std::shuffle, whose output sequences are
// implementation-defined; artifact files must be byte-identical across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}

  std::uint64_t next_u64() {
    // xorshift* step; state is never zero because splitmix never returns 0
    // for the seeds we feed it plus the constant below.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double next_double(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Uniform integer in [0, bound) by rejection.
  std::uint64_t next_below(std::uint64_t bound);

  // Seeded sub-stream, stable under the parent's draw history.
  Rng fork(std::uint64_t stream) const {
    return Rng(state_ ^ splitmix(stream ^ 0x9E3779B97F4A7C15ULL));
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x ? x : 0x1234567899ULL;
  }

  std::uint64_t state_;
};

// FNV-1a over bytes; used for artifact sidecar hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64_file(const std::string& path);
std::string hash_hex(std::uint64_t h);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to caller-owned per-index slots; reductions happen afterwards in
// index order so worker count never changes the outcome.
void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t)>& fn);

// Fixed-format float printing used by every artifact writer.
std::string format_double(double v);

}  // namespace sg

#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlmlab {

// Thrown for invalid user input: bad config keys, malformed files, violated
// preconditions. Everything else uses std::runtime_error.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

// Deterministic random source. All sampling is implemented on top of the
// raw mt19937_64 stream because the std distribution objects are
// implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), rejection-sampled so the map is exact.
  int64_t uniform_int(int64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  // N(0, sigma^2) via Box-Muller; one value per call, second root discarded.
  double normal(double sigma);

  // Failure-count geometric on {0,1,2,...}: P(k) = (1-p)^k * p.
  int64_t geometric(double p);

  // Independent stream for worker/batch index i (seed = base ^ mix(i)).
  static Rng fork(uint64_t base_seed, uint64_t index);

 private:
  std::mt19937_64 engine_;
};

// FNV-1a 64-bit, used for checkpoint digests and parameter checksums.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);
std::string to_hex(uint64_t v);

// Whole-file IO. Writes go through a temp file + rename so a crashed run
// never leaves a truncated artifact behind.
std::string read_file(const std::string& path);
void atomic_write_file(const std::string& path, const std::string& contents);
std::vector<std::string> read_lines(const std::string& path);

std::vector<std::string> split_ws(const std::string& s);
std::string trim(const std::string& s);

}  // namespace mlmlab

#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace canids {

// Error raised when input data (files, datasets, configs) is structurally
// invalid. CLI maps it to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Error raised when an operation is asked of a model family that does not
// support it (e.g. input gradients on the voting ensemble).
class CapabilityError : public std::runtime_error {
 public:
  explicit CapabilityError(const std::string& what) : std::runtime_error(what) {}
};

// Deterministic RNG. Wraps mt19937_64 but implements its own distributions so
// that streams are identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64() {
    // splitmix64; small, fast, and fully specified.
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free is not needed here; modulo bias is negligible for the
    // ranges used (n << 2^64) and the result stays deterministic.
    return n ? next_u64() % n : 0;
  }

  std::uint8_t byte() { return static_cast<std::uint8_t>(next_u64() & 0xff); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent stream (used to give each epoch/layer its own seed).
  std::uint64_t fork() { return next_u64(); }

 private:
  std::uint64_t state_;
};

// Runs fn(i) for i in [0, n). Work is chunked over a few threads. Callers must
// only perform element-disjoint writes and must not accumulate floats across
// threads; under that contract results are identical for any thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

// Like parallel_for but for a small number of coarse tasks (parallelizes even
// tiny n). Same disjoint-writes contract.
void parallel_tasks(std::int64_t n, const std::function<void(std::int64_t)>& fn);

// Number of worker threads parallel_for will use (CANIDS_THREADS overrides).
int worker_threads();

// FNV-1a over a byte string; used for config digests.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string to_hex(std::uint64_t value);

// Base64 helpers for embedding binary tensors in JSON checkpoints.
std::string base64_encode(const void* data, std::size_t bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// Bit-exact serialization of float vectors (little-endian IEEE 754).
std::string floats_to_base64(const std::vector<float>& v);
std::vector<float> base64_to_floats(const std::string& text);
std::string doubles_to_base64(const std::vector<double>& v);
std::vector<double> base64_to_doubles(const std::string& text);

}  // namespace canids

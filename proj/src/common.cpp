#include "canids/common.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>

namespace canids {

int worker_threads() {
  static int n = [] {
    if (const char* env = std::getenv("CANIDS_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 8u));
  }();
  return n;
}

namespace {

void run_chunked(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn) {
  threads = static_cast<int>(std::min<std::int64_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  std::int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    std::int64_t lo = t * chunk;
    std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  if (n <= 0) return;
  int threads = worker_threads();
  if (threads <= 1 || n < 256) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  run_chunked(n, threads, fn);
}

void parallel_tasks(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  if (n <= 0) return;
  int threads = worker_threads();
  if (threads <= 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  run_chunked(n, threads, fn);
}

std::string to_hex(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

namespace {
const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(const void* data, std::size_t bytes) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::string out;
  out.reserve((bytes + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes; i += 3) {
    std::uint32_t chunk = std::uint32_t(p[i]) << 16;
    if (i + 1 < bytes) chunk |= std::uint32_t(p[i + 1]) << 8;
    if (i + 2 < bytes) chunk |= std::uint32_t(p[i + 2]);
    out.push_back(kB64[(chunk >> 18) & 0x3f]);
    out.push_back(kB64[(chunk >> 12) & 0x3f]);
    out.push_back(i + 1 < bytes ? kB64[(chunk >> 6) & 0x3f] : '=');
    out.push_back(i + 2 < bytes ? kB64[chunk & 0x3f] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    int v = b64_value(c);
    if (v < 0) throw DataError("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

namespace {
template <class T>
std::string pod_vector_to_base64(const std::vector<T>& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::vector<std::uint8_t> bytes(v.size() * sizeof(T));
  if (!v.empty()) std::memcpy(bytes.data(), v.data(), bytes.size());
  return base64_encode(bytes.data(), bytes.size());
}

template <class T>
std::vector<T> base64_to_pod_vector(const std::string& text) {
  std::vector<std::uint8_t> bytes = base64_decode(text);
  if (bytes.size() % sizeof(T) != 0) throw DataError("base64: truncated numeric payload");
  std::vector<T> v(bytes.size() / sizeof(T));
  if (!v.empty()) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}
}  // namespace

std::string floats_to_base64(const std::vector<float>& v) { return pod_vector_to_base64(v); }
std::vector<float> base64_to_floats(const std::string& text) { return base64_to_pod_vector<float>(text); }
std::string doubles_to_base64(const std::vector<double>& v) { return pod_vector_to_base64(v); }
std::vector<double> base64_to_doubles(const std::string& text) { return base64_to_pod_vector<double>(text); }

}  // namespace canids

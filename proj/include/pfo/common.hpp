#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pfo {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors. Configuration errors are wiring mistakes (wrong dimensions, missing
// pieces); argument errors are bad call-site values; numeric errors are
// NaN/Inf or solver breakdowns detected at runtime.
// ---------------------------------------------------------------------------
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ArgumentError : std::invalid_argument {
  explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline bool all_finite(const Eigen::Ref<const Mat>& m) {
  return m.allFinite();
}

inline void require_finite(const Eigen::Ref<const Mat>& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value in ") + what);
}

// ---------------------------------------------------------------------------
// Seeded RNG streams. Stream k of a root seed is derived with SplitMix64 so
// that per-trajectory / per-start streams are independent of worker count.
// ---------------------------------------------------------------------------
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  return splitmix64(root ^ splitmix64(stream + 0x51ed2701a4d0f1ceULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  static Rng stream(std::uint64_t root, std::uint64_t stream_index) {
    return Rng(derive_seed(root, stream_index));
  }

  double uniform() { return unif_(eng_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unif_(eng_); }
  double normal() { return norm_(eng_); }
  int uniform_int(int lo, int hi) {  // inclusive bounds
    std::uniform_int_distribution<int> d(lo, hi);
    return d(eng_);
  }
  Vec normal_vec(int n) {
    Vec z(n);
    for (int i = 0; i < n; ++i) z[i] = norm_(eng_);
    return z;
  }
  Mat normal_mat(int r, int c) {
    Mat z(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) z(i, j) = norm_(eng_);
    return z;
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::normal_distribution<double> norm_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Deterministic parallel-for. Results are written into per-index slots, so
// the outcome never depends on the number of workers. Thread count comes from
// PFO_FDIR_THREADS (default: hardware concurrency, capped at 8).
// ---------------------------------------------------------------------------
int thread_count();

void parallel_for(int n, const std::function<void(int)>& body);

// FNV-1a over a string; used for config hashes embedded in reports.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v);

}  // namespace pfo

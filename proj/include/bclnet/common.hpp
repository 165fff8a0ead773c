#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bclnet {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Seeded PRNG with hand-rolled draw functions so that streams are stable
// across standard-library implementations and serializable for checkpoints.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Marsaglia polar method; the spare value is discarded so there is no
  // hidden state beyond the engine.
  double normal() {
    for (;;) {
      double u = uniform(-1.0, 1.0);
      double v = uniform(-1.0, 1.0);
      double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // uniform integer in [0, n)
  std::uint64_t index(std::uint64_t n) {
    // rejection to avoid modulo bias
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw DataError("invalid RNG state string");
  }

 private:
  std::mt19937_64 engine_;
};

// Worker count: BILATERAL_PRUNE_THREADS caps it, default machine parallelism.
int max_threads();

// Runs fn(begin, end) over [0, n) split into contiguous chunks. Falls back to
// a plain call when nested inside another parallel region or when n is small,
// so results are identical for any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t grain = 1);

// Marks the current thread as already-parallel; parallel_for calls inside the
// scope run inline.
struct SerialScope {
  SerialScope();
  ~SerialScope();
};

// Approximate floating-point operation counter for scaling experiments.
// Disabled (and free) unless a FlopCounterScope is active on the thread.
namespace flops {
extern thread_local bool enabled;
extern thread_local std::uint64_t count;
inline void add(std::uint64_t n) {
  if (enabled) count += n;
}
}  // namespace flops

struct FlopCounterScope {
  FlopCounterScope() {
    flops::enabled = true;
    flops::count = 0;
  }
  ~FlopCounterScope() { flops::enabled = false; }
  std::uint64_t total() const { return flops::count; }
};

// Records how close a forward pass came to a non-differentiable decision
// boundary (relu kinks, neighbor-order ties, pruning cut ties, eigen gaps).
// Gradient checking rejects sample points whose margin is too small.
namespace kink {
extern thread_local bool enabled;
extern thread_local double min_margin;
inline void note(double margin) {
  if (enabled && margin < min_margin) min_margin = margin;
}
}  // namespace kink

struct KinkMeterScope {
  KinkMeterScope() {
    kink::enabled = true;
    kink::min_margin = std::numeric_limits<double>::infinity();
  }
  ~KinkMeterScope() { kink::enabled = false; }
  double min_margin() const { return kink::min_margin; }
};

// Formats a double with enough digits to reproduce the bit pattern exactly.
std::string format_double(double v);

}  // namespace bclnet

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace poseidon {

// ---------------------------------------------------------------------------
// Errors. The C API maps these onto status codes; the CLI maps them onto
// exit codes (config/usage -> 2, everything else -> 1).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Logging. One global sink; the C API re-points it at the host callback.
// ---------------------------------------------------------------------------

using LogSink = std::function<void(const std::string&)>;

void set_log_sink(LogSink sink);  // empty sink restores the stderr default
void log_info(const std::string& msg);
void log_warn(const std::string& msg);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// the distributions are hand-rolled because the std ones are not.
// ---------------------------------------------------------------------------

uint64_t mix_seed(uint64_t seed, uint64_t tag);  // splitmix64 combine
uint64_t hash_str(const std::string& s);         // FNV-1a 64

class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed), seed_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0,1) with 53-bit resolution
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal();

    // normal(0, std) rejected outside +-clip*std (weight-init convention)
    double trunc_normal(double std_dev, double clip = 2.0);

    // unbiased integer in [0, n)
    int64_t randint(int64_t n);

    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(randint(i + 1))]);
        }
    }

    // independent stream derived from the construction seed, not from the
    // current engine state
    Rng child(uint64_t tag) const { return Rng(mix_seed(seed_, tag)); }
    Rng child(const std::string& tag) const { return child(hash_str(tag)); }

    uint64_t seed() const { return seed_; }

  private:
    std::mt19937_64 eng_;
    uint64_t seed_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Parallel loop over [begin, end) in fixed-size chunks. Chunk boundaries and
// per-element evaluation order do not depend on the worker count, so results
// are bit-identical for any thread count. Workers live in a process-wide
// pool sized by POSEIDON_THREADS (default: hardware concurrency, capped).
// ---------------------------------------------------------------------------

void parallel_for(int64_t begin, int64_t end, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& body);

int worker_count();

}  // namespace poseidon

#pragma once

#include <cstdint>
#include <string_view>

namespace latentlab {

// Deterministic splitmix64 stream. Substreams are derived from the root seed
// and a label, never from consumed state, so derivation order cannot change
// the numbers a substream produces.
class SeededRng {
  public:
    explicit SeededRng(uint64_t seed) : seed_(seed), state_(seed) {}

    uint64_t next_u64();
    double uniform();                   // [0, 1)
    double normal();                    // standard normal, Box-Muller
    double normal(double mu, double sigma) { return mu + sigma * normal(); }
    int uniform_int(int n);             // [0, n)
    bool bernoulli(double p) { return uniform() < p; }

    uint64_t seed() const { return seed_; }
    SeededRng derive(std::string_view label, uint64_t index = 0) const;

  private:
    uint64_t seed_;
    uint64_t state_;
};

uint64_t fnv1a64(const void *bytes, size_t n, uint64_t h = 1469598103934665603ULL);

}  // namespace latentlab

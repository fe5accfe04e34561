#include "latentlab/rng.hpp"

#include <cmath>

namespace latentlab {

uint64_t fnv1a64(const void *bytes, size_t n, uint64_t h) {
    const unsigned char *p = static_cast<const unsigned char *>(bytes);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t SeededRng::next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double SeededRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::normal() {
    // Box-Muller, cosine branch only; one fresh pair per value keeps the
    // stream position independent of how many normals were drawn before.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int SeededRng::uniform_int(int n) {
    if (n <= 0) return 0;
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
}

SeededRng SeededRng::derive(std::string_view label, uint64_t index) const {
    uint64_t h = fnv1a64(&seed_, sizeof(seed_));
    h = fnv1a64(label.data(), label.size(), h);
    h = fnv1a64(&index, sizeof(index), h);
    return SeededRng(h);
}

}  // namespace latentlab

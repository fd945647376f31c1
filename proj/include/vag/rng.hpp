#ifndef VAG_RNG_HPP
#define VAG_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>

#include "vag/common.hpp"

namespace vag {

// Counter-keyed deterministic generator. The core is splitmix64 over a
// (seed, counter) pair, so any stream can be reconstructed from its key
// alone: no generator state ever needs to be serialized. Child streams are
// derived by hashing a label into the seed, which keeps draws for different
// purposes (weights, noise, layout, ...) independent of call order.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), counter_(0) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * ++counter_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the spare value is cached so the stream is one draw per call.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    Rng child(const std::string& label) const {
        return Rng(fnv1a(label, seed_ ^ 0x517cc1b727220a95ull));
    }

    Rng child(uint64_t index) const {
        return Rng(fnv1a(&index, sizeof(index), seed_ ^ 0x2545f4914f6cdd1dull));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t counter_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace vag

#endif

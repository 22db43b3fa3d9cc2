#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "obrg/common.hpp"

namespace obrg {

// Counter-based splitmix64 stream. State is (key, counter), so streams are
// splittable by label and checkpointable with two integers. The raw u64
// stream is platform-independent; float construction uses exact 53-bit
// division.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(seed), counter_(0) {}

    Rng split(std::string_view label) const {
        uint64_t h = fnv1a64(label.data(), label.size());
        h = fnv1a64(&key_, sizeof(key_), h);
        return Rng(mix_(h));
    }

    uint64_t next_u64() {
        uint64_t z = key_ + 0x9E3779B97F4A7C15ull * ++counter_;
        return mix_(z);
    }

    // Uniform in [0, 1), 53 significant bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; one draw consumes two u64s and the
    // spare is discarded so the state stays two integers.
    double normal() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    uint64_t next_below(uint64_t n) {
        if (n == 0) fail(ErrKind::numeric, "rng: next_below(0)");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }
    void restore(uint64_t key, uint64_t counter) {
        key_ = key;
        counter_ = counter;
    }

private:
    static uint64_t mix_(uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    uint64_t key_;
    uint64_t counter_;
};

}  // namespace obrg

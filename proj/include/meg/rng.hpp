#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace meg {

// Deterministic RNG used everywhere in the project. std::mt19937_64 has a
// standardized bit-exact output sequence; the value mappings below are our
// own so results do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next() { return eng_(); }

    // [0, 1) with 53 random mantissa bits.
    double uniform() { return double(eng_() >> 11) * 0x1p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive range. Modulo bias is irrelevant for the ranges we draw.
    int uniform_int(int lo, int hi) {
        return lo + int(eng_() % uint64_t(hi - lo + 1));
    }

    // Box-Muller, one value per call (the spare is discarded so derived
    // streams never share hidden state).
    double normal(double mu, double sigma) {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) *
                   std::cos(2.0 * std::numbers::pi * u2);
        return mu + sigma * z;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(eng_() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Stable stream derivation: seed + ids -> child seed (splitmix64 mixing).
    static uint64_t derive(uint64_t seed, std::initializer_list<uint64_t> ids) {
        uint64_t x = seed;
        for (uint64_t id : ids) {
            x += 0x9e3779b97f4a7c15ull + id;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            x = z ^ (z >> 31);
        }
        return x;
    }

private:
    std::mt19937_64 eng_;
};

} // namespace meg

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace retrolens {

// Deterministic RNG used everywhere. Distributions are implemented explicitly
// (not via std:: distribution objects) so the draw sequence is pinned by this
// code alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t bits() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int uniform_int(int lo, int hi) {
        if (hi <= lo) return lo;
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(bits() % span);
    }

    // N(0,1) via Box-Muller; the second value of each pair is cached.
    double normal();

    std::string state_string() const;
    void restore_state(const std::string& s);

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer; combines a base seed with an index into a fresh seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

// Deterministic seed for a named stream ("vae1.init", "grain", ...).
std::uint64_t seed_for(std::uint64_t seed, std::string_view label);

}  // namespace retrolens

#include "retrolens/rng.hpp"

#include <cmath>
#include <sstream>

namespace retrolens {

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // u1 in (0,1] so log() is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

std::string Rng::state_string() const {
    std::ostringstream os;
    os << gen_ << ' ' << (have_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << spare_;
    return os.str();
}

void Rng::restore_state(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    is >> gen_ >> flag >> spare_;
    have_spare_ = flag != 0;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t seed_for(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char ch : label) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    return mix_seed(seed, h);
}

}  // namespace retrolens

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retrolens/image.hpp"
#include "retrolens/rng.hpp"

namespace retrolens {

// Structured-defect map: feathered alpha in [0,1]; the binary view thresholds
// at 0.5, so binary = 1 wherever alpha > 0.5.
struct DefectMask {
    int h = 0, w = 0;
    std::vector<double> alpha;

    static DefectMask empty(int h, int w) {
        DefectMask m;
        m.h = h;
        m.w = w;
        m.alpha.assign(static_cast<std::size_t>(h) * w, 0.0);
        return m;
    }
    std::vector<double> binary() const {
        std::vector<double> b(alpha.size());
        for (std::size_t i = 0; i < alpha.size(); ++i) b[i] = alpha[i] > 0.5 ? 1.0 : 0.0;
        return b;
    }
    void absorb_max(const std::vector<double>& other) {
        for (std::size_t i = 0; i < alpha.size(); ++i)
            if (other[i] > alpha[i]) alpha[i] = other[i];
    }
    Plane to_plane() const {
        Plane p = Plane::zeros(h, w);
        p.data = binary();
        return p;
    }
    static DefectMask from_plane(const Plane& p) {
        DefectMask m = empty(p.h, p.w);
        for (std::size_t i = 0; i < p.data.size(); ++i) m.alpha[i] = p.data[i] > 0.5 ? 1.0 : 0.0;
        return m;
    }
};

enum class BlendMode { addition, lighten_only, screen };

BlendMode blend_mode_from_string(const std::string& s);
std::string to_string(BlendMode m);

struct Recipe {
    std::uint64_t seed = 0;
    int scratch_count = 0;
    BlendMode blend_mode = BlendMode::screen;
    double opacity_lo = 0.0, opacity_hi = 0.0;
    int hole_count = 0;
    double feather_radius = 0.0;
    double grain_sigma = 0.0;
    double blur_sigma = 0.0;
    double fade_strength = 0.0;
    double elastic_amplitude = 0.0;
    double elastic_sigma = 1.0;
    // Stream prefix separating the pseudo-real domain's textures/draws from
    // the synthetic domain's.
    std::string stream_tag = "x";

    void validate() const;
};

struct DegradedPair {
    Image clean;
    Image degraded;
    DefectMask mask;
    Recipe recipe;
};

// ---- individual degradations ----
Image blend_scratch(const Image& image, const Plane& texture, BlendMode mode, double opacity);
Plane elastic_distort(const Plane& texture, double amplitude, double sigma, std::uint64_t seed);
// Composites a feathered random blob of paper texture; accumulates into mask.
Image punch_hole(const Image& image, const Plane& paper_texture, double cy, double cx,
                 double radius, double feather_radius, std::uint64_t seed, DefectMask& mask);
Image add_grain(const Image& image, double sigma, std::uint64_t seed);
Image gaussian_blur(const Image& image, double sigma);
Plane gaussian_blur(const Plane& plane, double sigma);
Image fade(const Image& image, double strength);

// ---- procedural textures ----
Plane scratch_texture(int h, int w, std::uint64_t seed);
Plane paper_texture(int h, int w, std::uint64_t seed);

// ---- pipelines ----
// fade -> blur -> scratches -> holes -> grain, fully determined by
// (clean, recipe).
DegradedPair synthesize_pair(const Image& clean, const Recipe& recipe);
// Same machinery under the recipe's stream tag, unpaired result.
Image make_domain_r(const Image& clean, Recipe recipe_r);

// Default degradation recipe for the synthetic (paired) domain X.
Recipe default_toy_recipe(std::uint64_t seed);
// Held-out ranges for the pseudo-real (unpaired) domain R.
Recipe default_real_recipe(std::uint64_t seed);

// ---- toy corpus ----
// Procedural RGB shapes/gradients/glyph-stroke images in [0,1].
std::vector<Image> toy_corpus(int count, int h, int w, std::uint64_t seed);

// ---- dataset manifest ----
struct ManifestEntry {
    std::string clean, degraded, mask;
    std::uint64_t seed = 0;
};
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace retrolens

#include "retrolens/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace retrolens {

namespace {

constexpr double kScratchMaskThreshold = 0.02;

double lerp(double a, double b, double t) { return a + (b - a) * t; }

// Tile/crop a texture plane to (h, w).
double tex_at(const Plane& t, int y, int x) {
    return t.at(y % t.h, x % t.w);
}

double bilinear_clamped(const Plane& p, double y, double x) {
    y = std::min(std::max(y, 0.0), static_cast<double>(p.h - 1));
    x = std::min(std::max(x, 0.0), static_cast<double>(p.w - 1));
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const int y1 = std::min(y0 + 1, p.h - 1), x1 = std::min(x0 + 1, p.w - 1);
    const double fy = y - y0, fx = x - x0;
    return (1 - fy) * ((1 - fx) * p.at(y0, x0) + fx * p.at(y0, x1)) +
           fy * ((1 - fx) * p.at(y1, x0) + fx * p.at(y1, x1));
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        s += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) v /= s;
    return k;
}

void blur_plane_inplace(std::vector<double>& data, int h, int w, const std::vector<double>& k) {
    const int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(data.size());
    // horizontal
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int xx = std::min(std::max(x + i, 0), w - 1);
                acc += k[static_cast<std::size_t>(i + radius)] *
                       data[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    // vertical
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int yy = std::min(std::max(y + i, 0), h - 1);
                acc += k[static_cast<std::size_t>(i + radius)] *
                       tmp[static_cast<std::size_t>(yy) * w + x];
            }
            data[static_cast<std::size_t>(y) * w + x] = acc;
        }
}

// Circularly smoothed per-angle profile in [0,1] from K control values.
struct AngularProfile {
    std::vector<double> ctrl;
    explicit AngularProfile(Rng& rng, int k = 16) : ctrl(static_cast<std::size_t>(k)) {
        for (auto& v : ctrl) v = rng.uniform();
        for (int pass = 0; pass < 2; ++pass) {
            std::vector<double> next(ctrl.size());
            for (std::size_t i = 0; i < ctrl.size(); ++i) {
                const std::size_t p = (i + ctrl.size() - 1) % ctrl.size();
                const std::size_t n = (i + 1) % ctrl.size();
                next[i] = 0.25 * ctrl[p] + 0.5 * ctrl[i] + 0.25 * ctrl[n];
            }
            ctrl = std::move(next);
        }
    }
    double at(double theta) const {
        const double tau = 2.0 * std::numbers::pi;
        double t = theta / tau;
        t -= std::floor(t);
        const double pos = t * static_cast<double>(ctrl.size());
        const std::size_t i = static_cast<std::size_t>(pos) % ctrl.size();
        const std::size_t j = (i + 1) % ctrl.size();
        return lerp(ctrl[i], ctrl[j], pos - std::floor(pos));
    }
};

// Stamp a soft-edged disc of the given half-width into the plane via max.
void stamp(Plane& tex, double cy, double cx, double half_width) {
    const int r = static_cast<int>(std::ceil(half_width + 1.0));
    for (int y = std::max(0, static_cast<int>(cy) - r);
         y <= std::min(tex.h - 1, static_cast<int>(cy) + r); ++y)
        for (int x = std::max(0, static_cast<int>(cx) - r);
             x <= std::min(tex.w - 1, static_cast<int>(cx) + r); ++x) {
            const double d = std::hypot(y - cy, x - cx);
            const double cov = clamp01(half_width + 0.5 - d);
            if (cov > tex.at(y, x)) tex.at(y, x) = cov;
        }
}

void rasterize_polyline(Plane& tex, Rng& rng, double y, double x, double angle, int nseg,
                        double seg_len, double width) {
    for (int s = 0; s < nseg; ++s) {
        const double len = seg_len * rng.uniform(0.7, 1.3);
        const double w = width * rng.uniform(0.8, 1.25);
        const double ny = y + len * std::sin(angle);
        const double nx = x + len * std::cos(angle);
        const int steps = std::max(1, static_cast<int>(len / 0.3));
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            stamp(tex, lerp(y, ny, t), lerp(x, nx, t), 0.5 * w);
        }
        y = ny;
        x = nx;
        angle += rng.uniform(-0.5, 0.5);
    }
}

}  // namespace

BlendMode blend_mode_from_string(const std::string& s) {
    if (s == "addition") return BlendMode::addition;
    if (s == "lighten_only") return BlendMode::lighten_only;
    if (s == "screen") return BlendMode::screen;
    throw ValueError("unknown blend mode: " + s);
}

std::string to_string(BlendMode m) {
    switch (m) {
        case BlendMode::addition: return "addition";
        case BlendMode::lighten_only: return "lighten_only";
        case BlendMode::screen: return "screen";
    }
    throw ValueError("bad blend mode value");
}

void Recipe::validate() const {
    if (scratch_count < 0 || hole_count < 0) throw ValueError("recipe: counts must be >= 0");
    if (opacity_lo < 0.0 || opacity_hi > 1.0 || opacity_lo > opacity_hi)
        throw ValueError("recipe: opacity range must be well-ordered within [0,1]");
    if (feather_radius < 0.0) throw ValueError("recipe: feather_radius must be >= 0");
    if (grain_sigma < 0.0 || blur_sigma < 0.0) throw ValueError("recipe: sigmas must be >= 0");
    if (fade_strength < 0.0 || fade_strength > 1.0)
        throw ValueError("recipe: fade must be within [0,1]");
    if (elastic_amplitude < 0.0) throw ValueError("recipe: elastic amplitude must be >= 0");
    if (elastic_sigma <= 0.0) throw ValueError("recipe: elastic sigma must be > 0");
}

Image blend_scratch(const Image& image, const Plane& texture, BlendMode mode, double opacity) {
    if (opacity < 0.0 || opacity > 1.0) throw ValueError("blend_scratch: opacity outside [0,1]");
    Image out = image;
    for (int ch = 0; ch < image.c; ++ch)
        for (int y = 0; y < image.h; ++y)
            for (int x = 0; x < image.w; ++x) {
                const double tex = tex_at(texture, y, x);
                const double t = opacity * tex;
                const double c = image.at(ch, y, x);
                double v = c;
                switch (mode) {
                    case BlendMode::addition: v = std::min(c + t, 1.0); break;
                    case BlendMode::lighten_only:
                        v = std::max(c, opacity * tex + (1.0 - opacity) * c);
                        break;
                    case BlendMode::screen: v = 1.0 - (1.0 - c) * (1.0 - t); break;
                }
                out.at(ch, y, x) = clamp01(v);
            }
    return out;
}

Plane elastic_distort(const Plane& texture, double amplitude, double sigma, std::uint64_t seed) {
    if (amplitude < 0.0) throw ValueError("elastic_distort: amplitude must be >= 0");
    if (amplitude == 0.0) return texture;
    Rng rng(seed);
    Plane dy = Plane::zeros(texture.h, texture.w);
    Plane dx = Plane::zeros(texture.h, texture.w);
    for (auto& v : dy.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : dx.data) v = rng.uniform(-1.0, 1.0);
    if (sigma > 0.0) {
        const auto k = gaussian_kernel(sigma);
        blur_plane_inplace(dy.data, dy.h, dy.w, k);
        blur_plane_inplace(dx.data, dx.h, dx.w, k);
    }
    double maxabs = 0.0;
    for (double v : dy.data) maxabs = std::max(maxabs, std::fabs(v));
    for (double v : dx.data) maxabs = std::max(maxabs, std::fabs(v));
    if (maxabs > 0.0) {
        const double s = amplitude / maxabs;
        for (auto& v : dy.data) v *= s;
        for (auto& v : dx.data) v *= s;
    }
    Plane out = Plane::zeros(texture.h, texture.w);
    for (int y = 0; y < texture.h; ++y)
        for (int x = 0; x < texture.w; ++x)
            out.at(y, x) = bilinear_clamped(texture, y + dy.at(y, x), x + dx.at(y, x));
    return out;
}

Image punch_hole(const Image& image, const Plane& paper_texture, double cy, double cx,
                 double radius, double feather_radius, std::uint64_t seed, DefectMask& mask) {
    if (radius <= 0.0) throw ValueError("punch_hole: radius must be > 0");
    if (feather_radius < 0.0) throw ValueError("punch_hole: feather_radius must be >= 0");
    const double reach = radius + feather_radius;
    if (cy + reach < 0.0 || cy - reach > image.h - 1 || cx + reach < 0.0 ||
        cx - reach > image.w - 1)
        return image;  // fully outside: no-op, no mask contribution
    Rng rng(seed);
    AngularProfile profile(rng);
    Image out = image;
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            const double d = std::hypot(y - cy, x - cx);
            if (d > reach) continue;
            const double theta = std::atan2(y - cy, x - cx);
            // perturbed radius never exceeds the nominal radius
            const double re = radius * (0.65 + 0.35 * profile.at(theta));
            double a;
            if (d <= re)
                a = 1.0;
            else if (feather_radius > 0.0)
                a = clamp01(1.0 - (d - re) / feather_radius);
            else
                a = 0.0;
            if (a <= 0.0) continue;
            const double paper = tex_at(paper_texture, y, x);
            for (int ch = 0; ch < image.c; ++ch)
                out.at(ch, y, x) = (1.0 - a) * image.at(ch, y, x) + a * paper;
            auto& m = mask.alpha[static_cast<std::size_t>(y) * image.w + x];
            if (a > m) m = a;
        }
    return out;
}

Image add_grain(const Image& image, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ValueError("add_grain: sigma must be >= 0");
    if (sigma == 0.0) return image;
    Rng rng(seed);
    Image out = image;
    for (auto& v : out.data) v = clamp01(v + sigma * rng.normal());
    return out;
}

Image gaussian_blur(const Image& image, double sigma) {
    if (sigma < 0.0) throw ValueError("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0) return image;
    const auto k = gaussian_kernel(sigma);
    Image out = image;
    for (int ch = 0; ch < image.c; ++ch) {
        std::vector<double> plane(static_cast<std::size_t>(image.h) * image.w);
        std::copy_n(out.data.begin() + static_cast<std::ptrdiff_t>(ch) * image.h * image.w,
                    plane.size(), plane.begin());
        blur_plane_inplace(plane, image.h, image.w, k);
        std::copy(plane.begin(), plane.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(ch) * image.h * image.w);
    }
    return out;
}

Plane gaussian_blur(const Plane& plane, double sigma) {
    if (sigma < 0.0) throw ValueError("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0) return plane;
    Plane out = plane;
    blur_plane_inplace(out.data, out.h, out.w, gaussian_kernel(sigma));
    return out;
}

Image fade(const Image& image, double strength) {
    if (strength < 0.0 || strength > 1.0) throw ValueError("fade: strength outside [0,1]");
    if (strength == 0.0) return image;
    Image out = image;
    const std::size_t plane = static_cast<std::size_t>(image.h) * image.w;
    for (std::size_t i = 0; i < plane; ++i) {
        double sep[3];
        if (image.c == 3) {
            const double r = image.data[i], g = image.data[plane + i], b = image.data[2 * plane + i];
            sep[0] = 0.393 * r + 0.769 * g + 0.189 * b;
            sep[1] = 0.349 * r + 0.686 * g + 0.168 * b;
            sep[2] = 0.272 * r + 0.534 * g + 0.131 * b;
        } else {
            // gray: mean of the sepia responses of (v,v,v)
            const double v = image.data[i];
            const double m = (1.351 + 1.203 + 0.937) / 3.0;
            sep[0] = m * v;
        }
        for (int ch = 0; ch < image.c; ++ch) {
            const double faded = 0.5 + 0.6 * (clamp01(sep[ch]) - 0.5);
            const double c = image.data[static_cast<std::size_t>(ch) * plane + i];
            out.data[static_cast<std::size_t>(ch) * plane + i] =
                clamp01((1.0 - strength) * c + strength * faded);
        }
    }
    return out;
}

Plane scratch_texture(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Plane tex = Plane::zeros(h, w);
    // random border start walking inward
    const int side = rng.uniform_int(0, 3);
    double y, x, angle;
    const double tau = 2.0 * std::numbers::pi;
    switch (side) {
        case 0: y = 0; x = rng.uniform(0.0, w - 1.0); break;
        case 1: y = h - 1.0; x = rng.uniform(0.0, w - 1.0); break;
        case 2: y = rng.uniform(0.0, h - 1.0); x = 0; break;
        default: y = rng.uniform(0.0, h - 1.0); x = w - 1.0; break;
    }
    angle = rng.uniform(0.0, tau);
    const int nseg = 3 + rng.uniform_int(0, 3);
    const double seg_len = 0.22 * std::min(h, w);
    const double width = rng.uniform(0.6, 1.4);
    rasterize_polyline(tex, rng, y, x, angle, nseg, seg_len, width);
    return tex;
}

Plane paper_texture(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Plane p = Plane::zeros(h, w);
    for (auto& v : p.data) v = rng.uniform();
    p = gaussian_blur(p, 2.0);
    double lo = p.data[0], hi = p.data[0];
    for (double v : p.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    for (auto& v : p.data) {
        const double t = span > 0.0 ? (v - lo) / span : 0.5;
        v = clamp01(0.55 + 0.35 * t + 0.03 * rng.uniform(-1.0, 1.0));
    }
    return p;
}

DegradedPair synthesize_pair(const Image& clean, const Recipe& recipe) {
    recipe.validate();
    const std::string& tag = recipe.stream_tag;
    auto lbl = [&tag](const std::string& name, int i) {
        return tag + "/" + name + "/" + std::to_string(i);
    };
    Rng draw(seed_for(recipe.seed, tag + "/draw"));

    Image x = fade(clean, recipe.fade_strength);
    x = gaussian_blur(x, recipe.blur_sigma);
    DefectMask mask = DefectMask::empty(clean.h, clean.w);

    for (int i = 0; i < recipe.scratch_count; ++i) {
        Plane tex = scratch_texture(clean.h, clean.w, seed_for(recipe.seed, lbl("scratch", i)));
        tex = elastic_distort(tex, recipe.elastic_amplitude, recipe.elastic_sigma,
                              seed_for(recipe.seed, lbl("elastic", i)));
        const double opacity = draw.uniform(recipe.opacity_lo, recipe.opacity_hi);
        x = blend_scratch(x, tex, recipe.blend_mode, opacity);
        std::vector<double> contrib(mask.alpha.size(), 0.0);
        for (std::size_t p = 0; p < contrib.size(); ++p)
            if (opacity * tex.data[p] > kScratchMaskThreshold) contrib[p] = 1.0;
        mask.absorb_max(contrib);
    }
    for (int j = 0; j < recipe.hole_count; ++j) {
        Plane paper = paper_texture(clean.h, clean.w, seed_for(recipe.seed, lbl("paper", j)));
        const double cy = draw.uniform(0.0, clean.h - 1.0);
        const double cx = draw.uniform(0.0, clean.w - 1.0);
        const double radius = draw.uniform(0.08, 0.18) * std::min(clean.h, clean.w);
        x = punch_hole(x, paper, cy, cx, radius, recipe.feather_radius,
                       seed_for(recipe.seed, lbl("hole", j)), mask);
    }
    x = add_grain(x, recipe.grain_sigma, seed_for(recipe.seed, tag + "/grain"));

    DegradedPair pair;
    pair.clean = clean;
    pair.degraded = std::move(x);
    pair.mask = std::move(mask);
    pair.recipe = recipe;
    return pair;
}

Image make_domain_r(const Image& clean, Recipe recipe_r) {
    recipe_r.stream_tag = "r";
    return synthesize_pair(clean, recipe_r).degraded;
}

Recipe default_toy_recipe(std::uint64_t seed) {
    Recipe r;
    r.seed = seed;
    r.scratch_count = 2;
    r.blend_mode = BlendMode::screen;
    r.opacity_lo = 0.5;
    r.opacity_hi = 0.9;
    r.hole_count = 1;
    r.feather_radius = 1.5;
    r.grain_sigma = 0.07;
    r.blur_sigma = 0.7;
    r.fade_strength = 0.55;
    r.elastic_amplitude = 2.0;
    r.elastic_sigma = 2.0;
    r.stream_tag = "x";
    return r;
}

Recipe default_real_recipe(std::uint64_t seed) {
    Recipe r;
    r.seed = seed;
    r.scratch_count = 3;
    r.blend_mode = BlendMode::lighten_only;
    r.opacity_lo = 0.6;
    r.opacity_hi = 1.0;
    r.hole_count = 1;
    r.feather_radius = 2.5;
    r.grain_sigma = 0.10;
    r.blur_sigma = 1.1;
    r.fade_strength = 0.7;
    r.elastic_amplitude = 3.0;
    r.elastic_sigma = 2.0;
    r.stream_tag = "r";
    return r;
}

std::vector<Image> toy_corpus(int count, int h, int w, std::uint64_t seed) {
    if (count < 0) throw ValueError("toy_corpus: count must be >= 0");
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(count));
    const double tau = 2.0 * std::numbers::pi;
    for (int idx = 0; idx < count; ++idx) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(idx)));
        Image im = Image::zeros(3, h, w);
        // gradient background between two random colors
        double c0[3], c1[3];
        for (int ch = 0; ch < 3; ++ch) {
            c0[ch] = rng.uniform(0.1, 0.9);
            c1[ch] = rng.uniform(0.1, 0.9);
        }
        const double phi = rng.uniform(0.0, tau);
        const double dy = std::sin(phi), dx = std::cos(phi);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double proj = (y * dy + x * dx) / (std::fabs(dy) * (h - 1) +
                                                         std::fabs(dx) * (w - 1) + 1e-12);
                const double t = clamp01(0.5 + proj * 0.5);
                for (int ch = 0; ch < 3; ++ch) im.at(ch, y, x) = lerp(c0[ch], c1[ch], t);
            }
        // a few flat shapes
        const int nshapes = 2 + rng.uniform_int(0, 2);
        for (int s = 0; s < nshapes; ++s) {
            double col[3];
            for (int ch = 0; ch < 3; ++ch) col[ch] = rng.uniform(0.05, 0.95);
            const int kind = rng.uniform_int(0, 2);
            if (kind == 0) {  // rectangle
                int y0 = rng.uniform_int(0, h - 2), x0 = rng.uniform_int(0, w - 2);
                int y1 = rng.uniform_int(y0 + 1, h - 1), x1 = rng.uniform_int(x0 + 1, w - 1);
                for (int y = y0; y <= y1; ++y)
                    for (int x = x0; x <= x1; ++x)
                        for (int ch = 0; ch < 3; ++ch) im.at(ch, y, x) = col[ch];
            } else if (kind == 1) {  // disc
                const double cy = rng.uniform(0.0, h - 1.0), cx = rng.uniform(0.0, w - 1.0);
                const double r = rng.uniform(0.12, 0.3) * std::min(h, w);
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        if (std::hypot(y - cy, x - cx) <= r)
                            for (int ch = 0; ch < 3; ++ch) im.at(ch, y, x) = col[ch];
            } else {  // glyph-like stroke
                Plane stroke = Plane::zeros(h, w);
                rasterize_polyline(stroke, rng, rng.uniform(0.2, 0.8) * (h - 1),
                                   rng.uniform(0.2, 0.8) * (w - 1), rng.uniform(0.0, tau),
                                   2 + rng.uniform_int(0, 1), 0.2 * std::min(h, w),
                                   rng.uniform(1.0, 2.0));
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const double a = stroke.at(y, x);
                        if (a > 0.0)
                            for (int ch = 0; ch < 3; ++ch)
                                im.at(ch, y, x) = lerp(im.at(ch, y, x), col[ch], a);
                    }
            }
        }
        for (auto& v : im.data) v = clamp01(v);
        out.push_back(std::move(im));
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& e : entries)
        out << e.clean << ' ' << e.degraded << ' ' << e.mask << ' ' << e.seed << '\n';
    if (!out) throw IoError("failed writing " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        if (!(ls >> e.clean >> e.degraded >> e.mask >> e.seed))
            throw IoError("malformed manifest line in " + path + ": " + line);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace retrolens

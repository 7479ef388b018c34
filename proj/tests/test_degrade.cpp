#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "retrolens/degrade.hpp"
#include "retrolens/metrics.hpp"
#include "retrolens/rng.hpp"

using namespace retrolens;

namespace {

Image random_image(int c, int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Image im = Image::zeros(c, h, w);
    for (auto& v : im.data) v = rng.uniform();
    return im;
}

Plane random_plane(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Plane p = Plane::zeros(h, w);
    for (auto& v : p.data) v = rng.uniform();
    return p;
}

double plane_mean(const std::vector<double>& d) {
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

}  // namespace

// ------------------------------------------------------------ blend_scratch

TEST_CASE("screen blend with zero texture leaves the image unchanged") {
    Image im = random_image(3, 6, 6, 1);
    Plane tex = Plane::zeros(6, 6);
    Image out = blend_scratch(im, tex, BlendMode::screen, 0.8);
    for (size_t i = 0; i < im.data.size(); ++i) CHECK(out.data[i] == im.data[i]);
}

TEST_CASE("screen blend of c=0.5 with t=0.5 gives 0.75") {
    Image im = Image::constant(1, 1, 1, 0.5);
    Plane tex = Plane::constant(1, 1, 1.0);
    Image out = blend_scratch(im, tex, BlendMode::screen, 0.5);  // t = 0.5*1.0
    CHECK(out.data[0] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("addition blend saturates at 1") {
    Image im = Image::constant(1, 1, 1, 0.9);
    Plane tex = Plane::constant(1, 1, 1.0);
    Image out = blend_scratch(im, tex, BlendMode::addition, 0.3);  // t = 0.3
    CHECK(out.data[0] == 1.0);
}

TEST_CASE("addition blend adds below saturation") {
    Image im = Image::constant(1, 1, 1, 0.2);
    Plane tex = Plane::constant(1, 1, 0.5);
    Image out = blend_scratch(im, tex, BlendMode::addition, 0.6);  // t = 0.3
    CHECK(out.data[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("lighten_only blends the texture over the image but never darkens") {
    Image im = Image::constant(1, 1, 1, 0.4);
    Plane tex = Plane::constant(1, 1, 0.9);
    // blend of texture over base at opacity 0.5: 0.5*0.9 + 0.5*0.4 = 0.65
    Image out = blend_scratch(im, tex, BlendMode::lighten_only, 0.5);
    CHECK(out.data[0] == doctest::Approx(0.65).epsilon(1e-12));
    // dark texture cannot darken the image
    Plane dark = Plane::constant(1, 1, 0.0);
    Image out2 = blend_scratch(im, dark, BlendMode::lighten_only, 1.0);
    CHECK(out2.data[0] == 0.4);
}

TEST_CASE("blend_scratch rejects opacity outside [0,1]") {
    Image im = Image::constant(1, 2, 2, 0.5);
    Plane tex = Plane::constant(2, 2, 0.5);
    CHECK_THROWS_AS(blend_scratch(im, tex, BlendMode::screen, -0.1), ValueError);
    CHECK_THROWS_AS(blend_scratch(im, tex, BlendMode::screen, 1.1), ValueError);
}

TEST_CASE("blend_scratch tiles a smaller texture") {
    Image im = Image::constant(1, 4, 4, 0.0);
    Plane tex = Plane::zeros(2, 2);
    tex.data = {1, 0, 0, 0};
    Image out = blend_scratch(im, tex, BlendMode::addition, 1.0);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(out.at(0, y, x) == ((y % 2 == 0 && x % 2 == 0) ? 1.0 : 0.0));
}

// ------------------------------------------------------------ elastic

TEST_CASE("elastic_distort with amplitude 0 is the identity") {
    Plane tex = random_plane(8, 8, 2);
    Plane out = elastic_distort(tex, 0.0, 2.0, 99);
    for (size_t i = 0; i < tex.data.size(); ++i) CHECK(out.data[i] == tex.data[i]);
}

TEST_CASE("elastic_distort of a constant texture stays constant") {
    Plane tex = Plane::constant(10, 12, 0.37);
    Plane out = elastic_distort(tex, 3.0, 2.0, 5);
    for (double v : out.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("elastic_distort preserves the mean within 2% over 100 seeds") {
    Plane tex = random_plane(64, 64, 77);
    // smooth it a little so the field is representative of scratch textures
    tex = gaussian_blur(tex, 1.0);
    const double mean_in = plane_mean(tex.data);
    for (std::uint64_t s = 0; s < 100; ++s) {
        Plane out = elastic_distort(tex, 4.0, 2.0, s);
        const double mean_out = plane_mean(out.data);
        CHECK(std::fabs(mean_out - mean_in) <= 0.02 * mean_in);
    }
}

TEST_CASE("elastic_distort is deterministic per seed") {
    Plane tex = random_plane(16, 16, 8);
    Plane a = elastic_distort(tex, 3.0, 2.0, 42);
    Plane b = elastic_distort(tex, 3.0, 2.0, 42);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}

// ------------------------------------------------------------ punch_hole

TEST_CASE("punch_hole with zero feather is binary and interior equals paper") {
    Image im = Image::constant(3, 24, 24, 0.2);
    Plane paper = random_plane(24, 24, 4);
    DefectMask mask = DefectMask::empty(24, 24);
    Image out = punch_hole(im, paper, 12, 12, 6, 0.0, 17, mask);
    bool saw_interior = false;
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x) {
            const double a = mask.alpha[static_cast<size_t>(y) * 24 + x];
            CHECK((a == 0.0 || a == 1.0));
            if (a == 1.0) {
                saw_interior = true;
                for (int ch = 0; ch < 3; ++ch) CHECK(out.at(ch, y, x) == paper.at(y, x));
            } else {
                for (int ch = 0; ch < 3; ++ch) CHECK(out.at(ch, y, x) == im.at(ch, y, x));
            }
        }
    CHECK(saw_interior);
}

TEST_CASE("punch_hole alpha is 1 at the center and 0 beyond radius+feather") {
    Image im = Image::constant(1, 40, 40, 0.5);
    Plane paper = Plane::constant(40, 40, 0.8);
    DefectMask mask = DefectMask::empty(40, 40);
    punch_hole(im, paper, 20, 20, 5, 3.0, 23, mask);
    CHECK(mask.alpha[20 * 40 + 20] == 1.0);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x)
            if (std::hypot(y - 20, x - 20) >= 5 + 3.0)
                CHECK(mask.alpha[static_cast<size_t>(y) * 40 + x] == 0.0);
}

TEST_CASE("punch_hole with paper equal to the image changes nothing but sets the mask") {
    Image im = random_image(1, 16, 16, 6);
    Plane paper = Plane::zeros(16, 16);
    paper.data = im.data;  // single channel image as its own paper
    DefectMask mask = DefectMask::empty(16, 16);
    Image out = punch_hole(im, paper, 8, 8, 4, 1.0, 3, mask);
    for (size_t i = 0; i < im.data.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(im.data[i]).epsilon(1e-15));
    CHECK(plane_mean(mask.alpha) > 0.0);
}

TEST_CASE("punch_hole fully outside the image is a no-op with empty mask") {
    Image im = random_image(1, 10, 10, 9);
    Plane paper = Plane::constant(10, 10, 0.9);
    DefectMask mask = DefectMask::empty(10, 10);
    Image out = punch_hole(im, paper, -30, -30, 3, 2.0, 5, mask);
    for (size_t i = 0; i < im.data.size(); ++i) CHECK(out.data[i] == im.data[i]);
    for (double a : mask.alpha) CHECK(a == 0.0);
}

// ------------------------------------------------------------ grain

TEST_CASE("add_grain with sigma 0 is the identity") {
    Image im = random_image(3, 5, 5, 12);
    Image out = add_grain(im, 0.0, 44);
    for (size_t i = 0; i < im.data.size(); ++i) CHECK(out.data[i] == im.data[i]);
}

TEST_CASE("add_grain noise has near-zero mean and sigma-matched spread on mid-gray") {
    Image im = Image::constant(1, 64, 64, 0.5);
    Image out = add_grain(im, 0.1, 7);
    double s = 0.0, s2 = 0.0;
    for (size_t i = 0; i < im.data.size(); ++i) {
        const double d = out.data[i] - im.data[i];
        s += d;
        s2 += d * d;
    }
    const double n = static_cast<double>(im.data.size());
    const double mean = s / n;
    const double stdev = std::sqrt(s2 / n - mean * mean);
    CHECK(std::fabs(mean) < 0.01);
    CHECK(std::fabs(stdev - 0.1) < 0.01);  // within 10% of sigma
}

TEST_CASE("add_grain is deterministic per seed") {
    Image im = Image::constant(1, 8, 8, 0.5);
    Image a = add_grain(im, 0.2, 5);
    Image b = add_grain(im, 0.2, 5);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}

// ------------------------------------------------------------ blur

TEST_CASE("gaussian_blur with sigma 0 is the identity") {
    Image im = random_image(3, 6, 7, 14);
    Image out = gaussian_blur(im, 0.0);
    for (size_t i = 0; i < im.data.size(); ++i) CHECK(out.data[i] == im.data[i]);
}

TEST_CASE("gaussian_blur leaves a constant image unchanged") {
    Image im = Image::constant(1, 9, 9, 0.42);
    Image out = gaussian_blur(im, 1.5);
    for (double v : out.data) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("gaussian_blur impulse response is the symmetric unit-sum kernel") {
    const double sigma = 1.0;  // radius 3, kernel 7x7 fits in 15x15
    Image im = Image::zeros(1, 15, 15);
    im.at(0, 7, 7) = 1.0;
    Image out = gaussian_blur(im, sigma);
    double total = 0.0;
    for (double v : out.data) total += v;
    CHECK(std::fabs(total - 1.0) <= 1e-12);
    for (int y = 0; y < 15; ++y)
        for (int x = 0; x < 15; ++x) {
            CHECK(out.at(0, y, x) == doctest::Approx(out.at(0, 14 - y, x)).epsilon(1e-12));
            CHECK(out.at(0, y, x) == doctest::Approx(out.at(0, y, 14 - x)).epsilon(1e-12));
            CHECK(out.at(0, y, x) == doctest::Approx(out.at(0, x, y)).epsilon(1e-12));
        }
}

// ------------------------------------------------------------ fade

TEST_CASE("fade with strength 0 is the identity") {
    Image im = random_image(3, 4, 4, 15);
    Image out = fade(im, 0.0);
    for (size_t i = 0; i < im.data.size(); ++i) CHECK(out.data[i] == im.data[i]);
}

TEST_CASE("fade at strength 1 turns mid-gray into the contracted sepia tint") {
    Image im = Image::constant(3, 2, 2, 0.5);
    Image out = fade(im, 1.0);
    // sepia(0.5,0.5,0.5) = (0.6755, 0.6015, 0.4685); 0.5 + 0.6*(v-0.5):
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.6053).epsilon(1e-12));
    CHECK(out.at(1, 0, 0) == doctest::Approx(0.5609).epsilon(1e-12));
    CHECK(out.at(2, 0, 0) == doctest::Approx(0.4811).epsilon(1e-12));
}

TEST_CASE("fade output stays within [0,1] even at extremes") {
    Image white = Image::constant(3, 3, 3, 1.0);
    Image black = Image::constant(3, 3, 3, 0.0);
    for (double s : {0.3, 0.7, 1.0}) {
        for (double v : fade(white, s).data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (double v : fade(black, s).data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("fade rejects out-of-range strength") {
    Image im = Image::constant(3, 2, 2, 0.5);
    CHECK_THROWS_AS(fade(im, -0.1), ValueError);
    CHECK_THROWS_AS(fade(im, 1.1), ValueError);
}

// ------------------------------------------------------------ pipelines

TEST_CASE("synthesize_pair with the all-zero recipe is the identity with empty mask") {
    Image clean = random_image(3, 16, 16, 20);
    Recipe r;  // all counts 0, sigmas 0, fade 0
    r.seed = 5;
    DegradedPair pair = synthesize_pair(clean, r);
    for (size_t i = 0; i < clean.data.size(); ++i) CHECK(pair.degraded.data[i] == clean.data[i]);
    for (double a : pair.mask.alpha) CHECK(a == 0.0);
}

TEST_CASE("synthesize_pair is bit-identical for the same seed") {
    Image clean = random_image(3, 32, 32, 21);
    Recipe r = default_toy_recipe(99);
    DegradedPair a = synthesize_pair(clean, r);
    DegradedPair b = synthesize_pair(clean, r);
    for (size_t i = 0; i < a.degraded.data.size(); ++i)
        CHECK(a.degraded.data[i] == b.degraded.data[i]);
    for (size_t i = 0; i < a.mask.alpha.size(); ++i) CHECK(a.mask.alpha[i] == b.mask.alpha[i]);
}

TEST_CASE("synthesize_pair outputs stay in range and the mask is well-formed") {
    auto corpus = toy_corpus(4, 32, 32, 7);
    for (size_t i = 0; i < corpus.size(); ++i) {
        DegradedPair pair = synthesize_pair(corpus[i], default_toy_recipe(100 + i));
        for (double v : pair.degraded.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        auto bin = pair.mask.binary();
        for (size_t p = 0; p < bin.size(); ++p) {
            CHECK((bin[p] == 0.0 || bin[p] == 1.0));
            CHECK(pair.mask.alpha[p] >= 0.0);
            CHECK(pair.mask.alpha[p] <= 1.0);
            CHECK(bin[p] == (pair.mask.alpha[p] > 0.5 ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("default toy recipe degrades the shapes corpus below 25 dB") {
    auto corpus = toy_corpus(8, 32, 32, 11);
    double mean_psnr = 0.0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        DegradedPair pair = synthesize_pair(corpus[i], default_toy_recipe(200 + i));
        mean_psnr += psnr(pair.clean, pair.degraded);
    }
    mean_psnr /= static_cast<double>(corpus.size());
    CHECK(mean_psnr < 25.0);
}

TEST_CASE("structured defects are covered by the binary mask (feather 0)") {
    auto corpus = toy_corpus(4, 32, 32, 13);
    for (size_t i = 0; i < corpus.size(); ++i) {
        Recipe r = default_toy_recipe(300 + i);
        r.feather_radius = 0.0;
        DegradedPair pair = synthesize_pair(corpus[i], r);
        // reference: the unstructured-only pipeline with the same sub-streams
        Image ref = fade(corpus[i], r.fade_strength);
        ref = gaussian_blur(ref, r.blur_sigma);
        ref = add_grain(ref, r.grain_sigma, seed_for(r.seed, "x/grain"));
        auto bin = pair.mask.binary();
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const size_t p = static_cast<size_t>(y) * 32 + x;
                    if (bin[p] == 0.0) {
                        const double diff = std::fabs(pair.degraded.at(ch, y, x) - ref.at(ch, y, x));
                        CHECK(diff <= 0.021);
                    }
                }
    }
}

TEST_CASE("make_domain_r is deterministic and distributionally distinct from domain X") {
    auto corpus = toy_corpus(48, 32, 32, 17);
    auto stats = [](const Image& im) {
        std::vector<double> v;
        const size_t plane = static_cast<size_t>(im.h) * im.w;
        for (int ch = 0; ch < im.c; ++ch) {
            double s = 0, s2 = 0;
            for (size_t i = 0; i < plane; ++i) {
                const double p = im.data[static_cast<size_t>(ch) * plane + i];
                s += p;
                s2 += p * p;
            }
            const double m = s / static_cast<double>(plane);
            v.push_back(m);
            v.push_back(std::sqrt(std::max(0.0, s2 / static_cast<double>(plane) - m * m)));
        }
        return v;
    };

    std::vector<std::vector<double>> xs, rs_distinct, rs_same_a, rs_same_b;
    for (size_t i = 0; i < corpus.size(); ++i) {
        Recipe rx = default_toy_recipe(400 + i);
        xs.push_back(stats(synthesize_pair(corpus[i], rx).degraded));
        rs_distinct.push_back(stats(make_domain_r(corpus[i], default_real_recipe(400 + i))));
        // control: identical ranges for r
        rs_same_a.push_back(stats(make_domain_r(corpus[i], default_toy_recipe(800 + i))));
        rs_same_b.push_back(stats(make_domain_r(corpus[i], default_toy_recipe(1200 + i))));
    }
    const double gap_control = sliced_wasserstein(rs_same_a, rs_same_b, 32, 5);
    const double gap_distinct = sliced_wasserstein(xs, rs_distinct, 32, 5);
    INFO("control gap ", gap_control, " distinct gap ", gap_distinct);
    CHECK(gap_control < 0.05);
    CHECK(gap_distinct > gap_control);
    CHECK(gap_distinct > 0.0);

    // determinism per seed
    Image a = make_domain_r(corpus[0], default_real_recipe(31));
    Image b = make_domain_r(corpus[0], default_real_recipe(31));
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}

// ------------------------------------------------------------ corpus & manifest

TEST_CASE("toy_corpus is deterministic, in range, and correctly sized") {
    auto a = toy_corpus(6, 32, 32, 3);
    auto b = toy_corpus(6, 32, 32, 3);
    REQUIRE(a.size() == 6);
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].c == 3);
        REQUIRE(a[i].h == 32);
        REQUIRE(a[i].w == 32);
        for (size_t p = 0; p < a[i].data.size(); ++p) {
            CHECK(a[i].data[p] == b[i].data[p]);
            CHECK(a[i].data[p] >= 0.0);
            CHECK(a[i].data[p] <= 1.0);
        }
    }
    // different indices give different images
    double diff = 0.0;
    for (size_t p = 0; p < a[0].data.size(); ++p) diff += std::fabs(a[0].data[p] - a[1].data[p]);
    CHECK(diff > 1.0);
}

TEST_CASE("manifest round-trips") {
    auto path = (std::filesystem::temp_directory_path() / "rl_manifest.txt").string();
    std::vector<ManifestEntry> entries = {
        {"c0.png", "d0.png", "m0.pgm", 7},
        {"c1.png", "d1.png", "m1.pgm", 8},
    };
    write_manifest(path, entries);
    auto back = read_manifest(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].clean == "c0.png");
    CHECK(back[1].degraded == "d1.png");
    CHECK(back[1].mask == "m1.pgm");
    CHECK(back[0].seed == 7);
    CHECK(back[1].seed == 8);
    std::remove(path.c_str());
}

TEST_CASE("blend mode names round-trip") {
    for (auto m : {BlendMode::addition, BlendMode::lighten_only, BlendMode::screen})
        CHECK(blend_mode_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(blend_mode_from_string("multiply"), ValueError);
}

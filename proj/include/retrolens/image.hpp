#pragma once

#include <string>
#include <vector>

#include "retrolens/errors.hpp"
#include "retrolens/tensor.hpp"

namespace retrolens {

// Planar (channel-major) image with values in [0,1]; c is 1 (gray) or 3 (rgb).
struct Image {
    int c = 0, h = 0, w = 0;
    std::vector<double> data;

    static Image zeros(int c, int h, int w) {
        Image im;
        im.c = c;
        im.h = h;
        im.w = w;
        im.data.assign(static_cast<std::size_t>(c) * h * w, 0.0);
        return im;
    }
    static Image constant(int c, int h, int w, double v) {
        Image im = zeros(c, h, w);
        std::fill(im.data.begin(), im.data.end(), v);
        return im;
    }

    double& at(int ch, int y, int x) {
        return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
    double at(int ch, int y, int x) const {
        return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
    std::size_t numel() const { return data.size(); }
};

// Single grayscale plane in [0,1].
struct Plane {
    int h = 0, w = 0;
    std::vector<double> data;

    static Plane zeros(int h, int w) {
        Plane p;
        p.h = h;
        p.w = w;
        p.data.assign(static_cast<std::size_t>(h) * w, 0.0);
        return p;
    }
    static Plane constant(int h, int w, double v) {
        Plane p = zeros(h, w);
        std::fill(p.data.begin(), p.data.end(), v);
        return p;
    }
    double& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

double clamp01(double v);

// 8-bit PNG I/O. Reads gray as c=1 and color as c=3 (alpha stripped,
// palette expanded, 16-bit narrowed); writes c=1 or c=3.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// Binary PGM (P5, maxval 255).
Plane read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Plane& plane);

// [0,1] image <-> [1,C,H,W] tensor.
Tensor to_tensor(const Image& img);
Image from_tensor(const Tensor& t);  // clamps to [0,1]

}  // namespace retrolens

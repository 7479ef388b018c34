#include "retrolens/image.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace retrolens {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

namespace {

unsigned char to_byte(double v) {
    return static_cast<unsigned char>(std::lround(clamp01(v) * 255.0));
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed for " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed for " + path);
    }
    std::vector<png_bytep> rows;
    std::vector<unsigned char> buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG channel count in " + path);
    }
    std::size_t stride = png_get_rowbytes(png, info);
    buf.resize(stride * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img = Image::zeros(channels, static_cast<int>(h), static_cast<int>(w));
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int ch = 0; ch < channels; ++ch)
                img.at(ch, static_cast<int>(y), static_cast<int>(x)) =
                    buf[stride * y + static_cast<std::size_t>(x) * channels + ch] / 255.0;
    return img;
}

void write_png(const std::string& path, const Image& img) {
    if (img.c != 1 && img.c != 3) throw IoError("write_png: image must have 1 or 3 channels");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed for " + path);
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch)
                row[static_cast<std::size_t>(x) * img.c + ch] = to_byte(img.at(ch, y, x));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Plane read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    auto next_token = [&in, &path]() {
        std::string tok;
        for (;;) {
            int ch = in.get();
            if (ch == EOF) throw IoError("truncated PGM header in " + path);
            if (ch == '#') {
                while (ch != EOF && ch != '\n') ch = in.get();
                continue;
            }
            if (std::isspace(ch)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(ch));
        }
    };
    if (next_token() != "P5") throw IoError("not a P5 PGM: " + path);
    int w = std::stoi(next_token());
    int h = std::stoi(next_token());
    int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0) throw IoError("bad PGM dimensions in " + path);
    if (maxval != 255) throw IoError("PGM maxval must be 255 in " + path);
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw IoError("truncated PGM payload in " + path);
    Plane p = Plane::zeros(h, w);
    for (std::size_t i = 0; i < buf.size(); ++i) p.data[i] = buf[i] / 255.0;
    return p;
}

void write_pgm(const std::string& path, const Plane& plane) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P5\n" << plane.w << " " << plane.h << "\n255\n";
    std::vector<unsigned char> buf(plane.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(plane.data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing " + path);
}

Tensor to_tensor(const Image& img) {
    return Tensor::from_data({1, img.c, img.h, img.w}, img.data);
}

Image from_tensor(const Tensor& t) {
    if (t.ndim() != 4 || t.dim(0) != 1) throw ShapeError("from_tensor: need [1,C,H,W]");
    Image img = Image::zeros(t.dim(1), t.dim(2), t.dim(3));
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = clamp01(t.data()[i]);
    return img;
}

}  // namespace retrolens

#include "cfx/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace cfx {

namespace {

void write_rows(const std::filesystem::path& path, std::size_t width, std::size_t height, int color_type,
                std::vector<std::uint8_t>& pixels, std::size_t channels) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw Error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y) png_write_row(png, pixels.data() + y * width * channels);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
    Shape s = image.rank() == 4 ? image.sample_shape() : image.shape;
    if (s.size() != 3 || (s[0] != 1 && s[0] != 3))
        throw ShapeError("write_png expects (1|3, H, W), got " + to_string(image.shape));
    const std::size_t c = s[0], h = s[1], w = s[2];
    std::vector<std::uint8_t> px(c * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) px[(y * w + x) * c + ch] = quantize(image.data[(ch * h + y) * w + x]);
    write_rows(path, w, h, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, px, c);
}

void write_mask_png(const std::filesystem::path& path, const std::vector<bool>& mask, std::size_t height,
                    std::size_t width) {
    if (mask.size() != height * width) throw ShapeError("mask size does not match dimensions");
    std::vector<std::uint8_t> px(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) px[i] = mask[i] ? 255 : 0;
    write_rows(path, width, height, PNG_COLOR_TYPE_GRAY, px, 1);
}

Tensor difference_heatmap(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "difference_heatmap");
    Shape s = a.rank() == 4 ? a.sample_shape() : a.shape;
    const std::size_t c = s[0], h = s[1], w = s[2];
    std::vector<double> d(h * w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * w; ++i) d[i] += std::abs(a.data[ch * h * w + i] - b.data[ch * h * w + i]) / c;
    const double mx = std::max(max_abs(d), 1e-12);
    Tensor out({3, h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        out.data[i] = d[i] / mx;
        out.data[h * w + i] = 0.0;
        out.data[2 * h * w + i] = 0.0;
    }
    return out;
}

Tensor tile_horizontal(const std::vector<Tensor>& panels, std::size_t gutter) {
    if (panels.empty()) throw ShapeError("tile_horizontal needs at least one panel");
    const Shape s0 = panels.front().rank() == 4 ? panels.front().sample_shape() : panels.front().shape;
    const std::size_t h = s0[1], w = s0[2], n = panels.size();
    const std::size_t total_w = n * w + (n - 1) * gutter;
    Tensor out({3, h, total_w}, 1.0);
    for (std::size_t p = 0; p < n; ++p) {
        const Shape s = panels[p].rank() == 4 ? panels[p].sample_shape() : panels[p].shape;
        if (s[1] != h || s[2] != w) throw ShapeError("tile_horizontal panels differ in size");
        const std::size_t x0 = p * (w + gutter);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::size_t src_ch = s[0] == 1 ? 0 : ch;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    out.data[(ch * h + y) * total_w + x0 + x] = panels[p].data[(src_ch * h + y) * w + x];
        }
    }
    return out;
}

}  // namespace cfx

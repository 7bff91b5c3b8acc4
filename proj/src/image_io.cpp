#include "capslab/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace capslab {

namespace {

int next_token(std::istream& in) {
    // Skips whitespace and '#' comments, returns the next integer.
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int v;
    if (!(in >> v)) throw std::runtime_error("pgm: malformed header");
    return v;
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("pgm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5') throw std::runtime_error("pgm: not a P5 file: " + path);
    GrayImage img;
    img.w = static_cast<std::size_t>(next_token(in));
    img.h = static_cast<std::size_t>(next_token(in));
    const int maxval = next_token(in);
    if (maxval <= 0 || maxval > 255) throw std::runtime_error("pgm: unsupported maxval");
    in.get();  // single whitespace after header
    img.pixels.resize(img.w * img.h);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (static_cast<std::size_t>(in.gcount()) != img.pixels.size())
        throw std::runtime_error("pgm: truncated pixel data in " + path);
    return img;
}

void write_pgm(const std::string& path, const GrayImage& img,
               const std::vector<std::string>& comments) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("pgm: cannot write " + path);
    out << "P5\n";
    for (const auto& c : comments) out << "# " << c << "\n";
    out << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

GrayImage read_png_gray(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png: init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png: decode failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1, -1);
    png_read_update_info(png, info);
    GrayImage img;
    img.w = png_get_image_width(png, info);
    img.h = png_get_image_height(png, info);
    img.pixels.resize(img.w * img.h);
    std::vector<png_bytep> rows(img.h);
    for (std::size_t y = 0; y < img.h; ++y) rows[y] = img.pixels.data() + y * img.w;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_png_gray(const std::string& path, const GrayImage& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("png: cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png: init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png: encode failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.h);
    for (std::size_t y = 0; y < img.h; ++y)
        rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.w);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

GrayImage resize_nearest(const GrayImage& img, std::size_t h, std::size_t w) {
    if (img.h == h && img.w == w) return img;
    GrayImage out;
    out.h = h;
    out.w = w;
    out.pixels.resize(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = y * img.h / h;
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = x * img.w / w;
            out.pixels[y * w + x] = img.pixels[sy * img.w + sx];
        }
    }
    return out;
}

namespace {
template <class T>
GrayImage to_gray_impl(const T* data, std::size_t h, std::size_t w) {
    GrayImage img;
    img.h = h;
    img.w = w;
    img.pixels.resize(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::min(1.0, std::max(0.0, static_cast<double>(data[i])));
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return img;
}
}  // namespace

GrayImage to_gray(const float* data, std::size_t h, std::size_t w) { return to_gray_impl(data, h, w); }
GrayImage to_gray(const double* data, std::size_t h, std::size_t w) { return to_gray_impl(data, h, w); }

GrayImage make_sheet(const std::vector<GrayImage>& tiles, std::size_t cols) {
    if (tiles.empty()) throw std::invalid_argument("sheet: no tiles");
    const std::size_t th = tiles[0].h, tw = tiles[0].w;
    for (const auto& t : tiles)
        if (t.h != th || t.w != tw) throw std::invalid_argument("sheet: tile sizes differ");
    const std::size_t rows = (tiles.size() + cols - 1) / cols;
    GrayImage out;
    out.h = rows * th + (rows - 1);
    out.w = cols * tw + (cols - 1);
    out.pixels.assign(out.h * out.w, 0);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const std::size_t r = i / cols, c = i % cols;
        const std::size_t oy = r * (th + 1), ox = c * (tw + 1);
        for (std::size_t y = 0; y < th; ++y)
            for (std::size_t x = 0; x < tw; ++x)
                out.pixels[(oy + y) * out.w + ox + x] = tiles[i].pixels[y * tw + x];
    }
    return out;
}

}  // namespace capslab

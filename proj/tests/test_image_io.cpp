#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "capslab/image_io.hpp"

using namespace capslab;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    TmpDir() : path(fs::temp_directory_path() / ("capslab_img_" + std::to_string(std::rand()))) {
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
};

GrayImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, 255);
    GrayImage img;
    img.h = h;
    img.w = w;
    img.pixels.resize(h * w);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(d(rng));
    return img;
}

}  // namespace

TEST_CASE("PGM survives a round trip, comments included") {
    TmpDir tmp;
    const std::string path = (tmp.path / "a.pgm").string();
    GrayImage img = random_image(7, 5, 1);
    write_pgm(path, img, {"tool: test", "seed: 1"});
    GrayImage back = read_pgm(path);
    CHECK(back.h == img.h);
    CHECK(back.w == img.w);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("PNG survives a round trip") {
    TmpDir tmp;
    const std::string path = (tmp.path / "a.png").string();
    GrayImage img = random_image(9, 4, 2);
    write_png_gray(path, img);
    GrayImage back = read_png_gray(path);
    CHECK(back.h == img.h);
    CHECK(back.w == img.w);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("nearest-neighbor resize keeps corner samples") {
    GrayImage img;
    img.h = img.w = 2;
    img.pixels = {10, 20, 30, 40};
    GrayImage big = resize_nearest(img, 4, 4);
    CHECK(big.pixels[0] == 10);
    CHECK(big.pixels[3] == 20);
    CHECK(big.pixels[12] == 30);
    CHECK(big.pixels[15] == 40);
    GrayImage same = resize_nearest(img, 2, 2);
    CHECK(same.pixels == img.pixels);
}

TEST_CASE("float-to-gray quantization clamps and scales") {
    const float data[4] = {0.0f, 1.0f, 0.5f, 2.0f};
    GrayImage img = to_gray(data, 2, 2);
    CHECK(img.pixels[0] == 0);
    CHECK(img.pixels[1] == 255);
    CHECK(img.pixels[2] == 128);
    CHECK(img.pixels[3] == 255);  // clamped
}

TEST_CASE("sheets lay tiles on a grid with separators") {
    std::vector<GrayImage> tiles;
    for (int i = 0; i < 5; ++i) {
        GrayImage t;
        t.h = 3;
        t.w = 4;
        t.pixels.assign(12, static_cast<std::uint8_t>(50 * (i + 1)));
        tiles.push_back(t);
    }
    GrayImage sheet = make_sheet(tiles, 2);  // 3 rows x 2 cols, last slot empty
    CHECK(sheet.w == 4 * 2 + 1);
    CHECK(sheet.h == 3 * 3 + 2);
    CHECK(sheet.pixels[0] == 50);                 // tile 0 top-left
    CHECK(sheet.pixels[5] == 100);                // tile 1 after the separator
    // empty slot stays black
    CHECK(sheet.pixels[(2 * 4) * sheet.w + 5] == 0);
}

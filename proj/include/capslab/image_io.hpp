#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capslab/tensor.hpp"

namespace capslab {

struct GrayImage {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> pixels;  // row-major, 8-bit
};

GrayImage read_pgm(const std::string& path);
// Comment lines are embedded verbatim after the magic (used for provenance).
void write_pgm(const std::string& path, const GrayImage& img,
               const std::vector<std::string>& comments = {});

GrayImage read_png_gray(const std::string& path);
void write_png_gray(const std::string& path, const GrayImage& img);

GrayImage resize_nearest(const GrayImage& img, std::size_t h, std::size_t w);

// [0,1] floats quantized to bytes.
GrayImage to_gray(const float* data, std::size_t h, std::size_t w);
GrayImage to_gray(const double* data, std::size_t h, std::size_t w);

// Montage of equally sized tiles laid out row-major on a grid with 1-pixel
// separators; missing tiles stay black.
GrayImage make_sheet(const std::vector<GrayImage>& tiles, std::size_t cols);

}  // namespace capslab

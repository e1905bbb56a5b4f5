#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fyseg/mask.hpp"
#include "fyseg/tensor.hpp"

namespace fyseg {

// 8-bit raster, rows top to bottom, channels interleaved (1 = gray, 3 = RGB).
struct ImageU8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;

    ImageU8() = default;
    ImageU8(std::size_t w, std::size_t h, std::size_t c)
        : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
        return pixels[(y * width + x) * channels + c];
    }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return pixels[(y * width + x) * channels + c];
    }
};

// Binary netpbm only: P5 (PGM) and P6 (PPM), maxval 255. Header comments
// are accepted; anything else raises DataError naming the file.
ImageU8 read_pnm(const std::string& path);
void write_pnm(const std::string& path, const ImageU8& image);

// Mask IO: foreground is any sample >= 128; written as 0/255.
PixelMask read_mask(const std::string& path);
void write_mask(const std::string& path, const PixelMask& mask);

// Probability map as 8-bit grayscale with linear 0..255 scaling.
void write_probability_map(const std::string& path, const ProbabilityMask& probs);

// [C,H,W] tensor in [0,1] from an interleaved raster and back.
Tensor image_to_tensor(const ImageU8& image);
ImageU8 tensor_to_image(const Tensor& t);

}  // namespace fyseg

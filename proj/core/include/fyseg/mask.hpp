#pragma once

#include <cstdint>
#include <vector>

namespace fyseg {

// Binary per-pixel labels, row-major: 0 background, 1 lesion.
struct PixelMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> labels;

    PixelMask() = default;
    PixelMask(std::size_t w, std::size_t h) : width(w), height(h), labels(w * h, 0) {}

    std::uint8_t& at(std::size_t x, std::size_t y) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }
    std::size_t pixel_count() const { return width * height; }
};

// Per-pixel probabilities in [0,1], row-major.
struct ProbabilityMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> probs;

    ProbabilityMask() = default;
    ProbabilityMask(std::size_t w, std::size_t h) : width(w), height(h), probs(w * h, 0.0) {}

    double& at(std::size_t x, std::size_t y) { return probs[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return probs[y * width + x]; }
};

// p >= threshold becomes lesion.
PixelMask threshold_mask(const ProbabilityMask& probs, double threshold = 0.5);

}  // namespace fyseg

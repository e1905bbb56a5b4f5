#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fyseg {

// Dense row-major n-dimensional array of doubles. The single numeric
// carrier for every layer, loss and optimizer in this project.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s)
        : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
    Tensor(std::vector<std::size_t> s, std::vector<double> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("Tensor: shape " + shape_string(shape) +
                                        " does not match " + std::to_string(data.size()) +
                                        " values");
    }

    static std::size_t shape_numel(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return n;
    }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t extent(std::size_t axis) const { return shape.at(axis); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(0.0); }

    // 4-d accessors used throughout the conv/pool code.
    std::size_t index4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return ((n * shape[1] + c) * shape[2] + y) * shape[3] + x;
    }
    double& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data[index4(n, c, y, x)];
    }
    double at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data[index4(n, c, y, x)];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const;
};

// Throws std::invalid_argument naming both shapes when they differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* where);

}  // namespace fyseg

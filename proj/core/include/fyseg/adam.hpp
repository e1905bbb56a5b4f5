#pragma once

#include <cstdint>

#include "fyseg/layers.hpp"

namespace fyseg {

// Per-layer Adam state: first/second moments matching the parameter shapes.
struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    Tensor m_weights, v_weights;
    Tensor m_bias, v_bias;

    AdamState() = default;
    AdamState(const LayerParams& params, double lr)
        : learning_rate(lr),
          m_weights(params.weights.shape), v_weights(params.weights.shape),
          m_bias(params.bias.shape), v_bias(params.bias.shape) {}
};

// Standard Adam update with bias correction, applied to weights and bias
// from their accumulated gradients. Does not clear the gradients.
void adam_step(LayerParams& params, AdamState& state);

}  // namespace fyseg

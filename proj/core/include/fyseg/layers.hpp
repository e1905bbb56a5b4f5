#pragma once

#include <cstdint>
#include <utility>

#include "fyseg/rng.hpp"
#include "fyseg/tensor.hpp"

namespace fyseg {

// Weights + bias with matching gradient accumulators.
struct LayerParams {
    Tensor weights;      // conv: [Cout, Cin, Kh, Kw]
    Tensor bias;         // [Cout]
    Tensor weight_grad;  // same shape as weights
    Tensor bias_grad;    // same shape as bias

    LayerParams() = default;
    LayerParams(Tensor w, Tensor b)
        : weights(std::move(w)), bias(std::move(b)),
          weight_grad(weights.shape), bias_grad(bias.shape) {}

    void zero_grads() {
        weight_grad.zero();
        bias_grad.zero();
    }
};

// Uniform init in +-sqrt(6/(fan_in+fan_out)), biases zero.
LayerParams make_conv_params(std::size_t out_channels, std::size_t in_channels,
                             std::size_t kernel, Rng& rng);

struct ConvLayer {
    LayerParams params;
    std::size_t stride = 1;
    std::size_t pad = 0;
};

// Strict cross-correlation. Output extents follow
// H' = (H + 2*pad - K) / stride + 1 (floored), rejects kernels that do not
// fit the padded input or channel mismatches.
Tensor conv2d_forward(const Tensor& input, const LayerParams& params,
                      std::size_t stride, std::size_t pad);

struct ConvGrads {
    Tensor input_grad;
    Tensor weight_grad;
    Tensor bias_grad;
};

ConvGrads conv2d_backward(const Tensor& input, const LayerParams& params,
                          const Tensor& upstream, std::size_t stride, std::size_t pad);

// Elementwise max(slope*x, x); subgradient at exactly 0 is 1.
Tensor leaky_relu(const Tensor& input, double slope = 0.1);
Tensor leaky_relu_backward(const Tensor& input, const Tensor& upstream, double slope = 0.1);

// Smallest margin to an activation kink, |x| over all elements. Used by the
// gradient checker to stay away from the non-differentiable point.
double leaky_kink_margin(const Tensor& preactivation);

Tensor sigmoid(const Tensor& input);
// Derivative expressed from the forward output y: y*(1-y).
Tensor sigmoid_backward_from_output(const Tensor& output, const Tensor& upstream);
double sigmoid_scalar(double x);

Tensor exp(const Tensor& input);
Tensor softmax(const Tensor& input, std::size_t axis);

// Per-window argmax offsets for 2x2/stride-2 pooling; offset in {0,1,2,3}
// encodes (dy*2 + dx) inside the window, ties break row-major first.
struct PoolIndices {
    std::vector<std::size_t> shape;  // shape of the pooled output
    std::vector<std::uint8_t> offsets;
};

struct PoolResult {
    Tensor output;
    PoolIndices indices;
};

// Requires even H and W.
PoolResult maxpool2x2_forward(const Tensor& input);

// Routes upstream values back to the recorded argmax positions.
Tensor maxpool2x2_backward(const Tensor& upstream, const PoolIndices& indices);

// Places input values at the recorded positions of a 2h x 2w canvas,
// zero elsewhere.
Tensor maxunpool2x2(const Tensor& input, const PoolIndices& indices);

// Gradient of maxunpool: gather upstream at the recorded positions.
Tensor maxunpool2x2_backward(const Tensor& upstream, const PoolIndices& indices);

// Smallest (max - runner_up) over all pooling windows; 0 means a tie.
double pool_kink_margin(const Tensor& input);

}  // namespace fyseg

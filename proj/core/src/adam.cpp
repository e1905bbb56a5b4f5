#include "fyseg/adam.hpp"

#include <cmath>

namespace fyseg {

namespace {

void update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
            const AdamState& s, double bc1, double bc2) {
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const double g = grad.data[i];
        m.data[i] = s.beta1 * m.data[i] + (1.0 - s.beta1) * g;
        v.data[i] = s.beta2 * v.data[i] + (1.0 - s.beta2) * g * g;
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        param.data[i] -= s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon);
    }
}

}  // namespace

void adam_step(LayerParams& params, AdamState& state) {
    require_same_shape(params.weights, params.weight_grad, "adam_step weights");
    require_same_shape(params.bias, params.bias_grad, "adam_step bias");
    if (state.m_weights.numel() == 0) {
        state.m_weights = Tensor(params.weights.shape);
        state.v_weights = Tensor(params.weights.shape);
        state.m_bias = Tensor(params.bias.shape);
        state.v_bias = Tensor(params.bias.shape);
    }
    require_same_shape(state.m_weights, params.weights, "adam_step moments");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    update(params.weights, params.weight_grad, state.m_weights, state.v_weights, state, bc1, bc2);
    update(params.bias, params.bias_grad, state.m_bias, state.v_bias, state, bc1, bc2);
}

}  // namespace fyseg

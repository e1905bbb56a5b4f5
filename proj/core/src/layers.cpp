#include "fyseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fyseg {

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                    Tensor::shape_string(a.shape) + " vs " +
                                    Tensor::shape_string(b.shape));
}

LayerParams make_conv_params(std::size_t out_channels, std::size_t in_channels,
                             std::size_t kernel, Rng& rng) {
    Tensor w({out_channels, in_channels, kernel, kernel});
    const double fan_in = static_cast<double>(in_channels * kernel * kernel);
    const double fan_out = static_cast<double>(out_channels * kernel * kernel);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    Tensor b({out_channels});
    return LayerParams(std::move(w), std::move(b));
}

namespace {

struct ConvDims {
    std::size_t n, cin, h, w;
    std::size_t cout, kh, kw;
    std::size_t oh, ow;
};

ConvDims conv_dims(const Tensor& input, const LayerParams& params,
                   std::size_t stride, std::size_t pad, const char* where) {
    if (input.rank() != 4 || params.weights.rank() != 4)
        throw std::invalid_argument(std::string(where) + ": expected 4-d input " +
                                    Tensor::shape_string(input.shape) + " and weights " +
                                    Tensor::shape_string(params.weights.shape));
    ConvDims d{};
    d.n = input.shape[0];
    d.cin = input.shape[1];
    d.h = input.shape[2];
    d.w = input.shape[3];
    d.cout = params.weights.shape[0];
    d.kh = params.weights.shape[2];
    d.kw = params.weights.shape[3];
    if (params.weights.shape[1] != d.cin)
        throw std::invalid_argument(std::string(where) + ": input " +
                                    Tensor::shape_string(input.shape) +
                                    " incompatible with weights " +
                                    Tensor::shape_string(params.weights.shape));
    if (params.bias.numel() != d.cout)
        throw std::invalid_argument(std::string(where) + ": bias " +
                                    Tensor::shape_string(params.bias.shape) +
                                    " incompatible with weights " +
                                    Tensor::shape_string(params.weights.shape));
    if (stride < 1)
        throw std::invalid_argument(std::string(where) + ": stride must be >= 1");
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
        throw std::invalid_argument(std::string(where) + ": kernel " +
                                    Tensor::shape_string(params.weights.shape) +
                                    " does not fit padded input " +
                                    Tensor::shape_string(input.shape));
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// Valid output range so that oy*stride + ky - pad stays inside [0, extent).
inline void valid_out_range(std::size_t k, std::size_t pad, std::size_t stride,
                            std::size_t in_extent, std::size_t out_extent,
                            std::size_t& lo, std::size_t& hi) {
    const std::int64_t off = static_cast<std::int64_t>(k) - static_cast<std::int64_t>(pad);
    std::int64_t lo64 = 0;
    if (off < 0) lo64 = (-off + static_cast<std::int64_t>(stride) - 1) / static_cast<std::int64_t>(stride);
    std::int64_t hi64 = (static_cast<std::int64_t>(in_extent) - 1 - off) / static_cast<std::int64_t>(stride);
    hi64 = std::min(hi64, static_cast<std::int64_t>(out_extent) - 1);
    if (hi64 < lo64) {
        lo = 1;
        hi = 0;
        return;
    }
    lo = static_cast<std::size_t>(lo64);
    hi = static_cast<std::size_t>(hi64);
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const LayerParams& params,
                      std::size_t stride, std::size_t pad) {
    const ConvDims d = conv_dims(input, params, stride, pad, "conv2d_forward");
    Tensor out({d.n, d.cout, d.oh, d.ow});

    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            double* outp = &out.data[out.index4(n, co, 0, 0)];
            const double b = params.bias.data[co];
            for (std::size_t i = 0; i < d.oh * d.ow; ++i) outp[i] = b;
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* inp = &input.data[input.index4(n, ci, 0, 0)];
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    std::size_t oy_lo, oy_hi;
                    valid_out_range(ky, pad, stride, d.h, d.oh, oy_lo, oy_hi);
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double wv =
                            params.weights.data[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if (wv == 0.0) continue;
                        std::size_t ox_lo, ox_hi;
                        valid_out_range(kx, pad, stride, d.w, d.ow, ox_lo, ox_hi);
                        if (oy_lo > oy_hi || ox_lo > ox_hi) continue;
                        const std::int64_t xoff =
                            static_cast<std::int64_t>(kx) - static_cast<std::int64_t>(pad);
                        for (std::size_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const std::size_t iy = oy * stride + ky - pad;
                            const double* inrow = inp + iy * d.w;
                            double* outrow = outp + oy * d.ow;
                            for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox)
                                outrow[ox] +=
                                    wv * inrow[static_cast<std::int64_t>(ox * stride) + xoff];
                        }
                    }
                }
            }
        }
    }
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const LayerParams& params,
                          const Tensor& upstream, std::size_t stride, std::size_t pad) {
    const ConvDims d = conv_dims(input, params, stride, pad, "conv2d_backward");
    if (upstream.rank() != 4 || upstream.shape[0] != d.n || upstream.shape[1] != d.cout ||
        upstream.shape[2] != d.oh || upstream.shape[3] != d.ow)
        throw std::invalid_argument("conv2d_backward: upstream " +
                                    Tensor::shape_string(upstream.shape) +
                                    " does not match forward output [" + std::to_string(d.n) +
                                    "x" + std::to_string(d.cout) + "x" + std::to_string(d.oh) +
                                    "x" + std::to_string(d.ow) + "]");

    ConvGrads g{Tensor(input.shape), Tensor(params.weights.shape), Tensor(params.bias.shape)};

    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            const double* up = &upstream.data[upstream.index4(n, co, 0, 0)];
            double bsum = 0.0;
            for (std::size_t i = 0; i < d.oh * d.ow; ++i) bsum += up[i];
            g.bias_grad.data[co] += bsum;

            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* inp = &input.data[input.index4(n, ci, 0, 0)];
                double* ginp = &g.input_grad.data[g.input_grad.index4(n, ci, 0, 0)];
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    std::size_t oy_lo, oy_hi;
                    valid_out_range(ky, pad, stride, d.h, d.oh, oy_lo, oy_hi);
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        std::size_t ox_lo, ox_hi;
                        valid_out_range(kx, pad, stride, d.w, d.ow, ox_lo, ox_hi);
                        if (oy_lo > oy_hi || ox_lo > ox_hi) continue;
                        const std::size_t widx = ((co * d.cin + ci) * d.kh + ky) * d.kw + kx;
                        const double wv = params.weights.data[widx];
                        const std::int64_t xoff =
                            static_cast<std::int64_t>(kx) - static_cast<std::int64_t>(pad);
                        double wg = 0.0;
                        for (std::size_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const std::size_t iy = oy * stride + ky - pad;
                            const double* inrow = inp + iy * d.w;
                            double* ginrow = ginp + iy * d.w;
                            const double* uprow = up + oy * d.ow;
                            for (std::size_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                const std::int64_t ix =
                                    static_cast<std::int64_t>(ox * stride) + xoff;
                                const double u = uprow[ox];
                                wg += u * inrow[ix];
                                ginrow[ix] += u * wv;
                            }
                        }
                        g.weight_grad.data[widx] += wg;
                    }
                }
            }
        }
    }
    return g;
}

Tensor leaky_relu(const Tensor& input, double slope) {
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i) {
        const double x = input.data[i];
        out.data[i] = x < 0.0 ? slope * x : x;
    }
    return out;
}

Tensor leaky_relu_backward(const Tensor& input, const Tensor& upstream, double slope) {
    require_same_shape(input, upstream, "leaky_relu_backward");
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i)
        out.data[i] = upstream.data[i] * (input.data[i] < 0.0 ? slope : 1.0);
    return out;
}

double leaky_kink_margin(const Tensor& preactivation) {
    double margin = std::numeric_limits<double>::infinity();
    for (double v : preactivation.data) margin = std::min(margin, std::abs(v));
    return margin;
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& input) {
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i) out.data[i] = sigmoid_scalar(input.data[i]);
    return out;
}

Tensor sigmoid_backward_from_output(const Tensor& output, const Tensor& upstream) {
    require_same_shape(output, upstream, "sigmoid_backward");
    Tensor out(output.shape);
    for (std::size_t i = 0; i < output.numel(); ++i) {
        const double y = output.data[i];
        out.data[i] = upstream.data[i] * y * (1.0 - y);
    }
    return out;
}

Tensor exp(const Tensor& input) {
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i) out.data[i] = std::exp(input.data[i]);
    return out;
}

Tensor softmax(const Tensor& input, std::size_t axis) {
    if (axis >= input.rank())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for " + Tensor::shape_string(input.shape));
    // Iterate over all lanes along `axis`.
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < input.rank(); ++i) inner *= input.shape[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= input.shape[i];
    const std::size_t extent = input.shape[axis];

    Tensor out(input.shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * extent * inner + in;
            double maxv = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < extent; ++k)
                maxv = std::max(maxv, input.data[base + k * inner]);
            double sum = 0.0;
            for (std::size_t k = 0; k < extent; ++k) {
                const double e = std::exp(input.data[base + k * inner] - maxv);
                out.data[base + k * inner] = e;
                sum += e;
            }
            for (std::size_t k = 0; k < extent; ++k) out.data[base + k * inner] /= sum;
        }
    }
    return out;
}

namespace {

void require_poolable(const Tensor& input, const char* where) {
    if (input.rank() != 4)
        throw std::invalid_argument(std::string(where) + ": expected 4-d input, got " +
                                    Tensor::shape_string(input.shape));
    if (input.shape[2] % 2 != 0 || input.shape[3] % 2 != 0)
        throw std::invalid_argument(std::string(where) + ": extents must be even, got " +
                                    Tensor::shape_string(input.shape));
}

}  // namespace

PoolResult maxpool2x2_forward(const Tensor& input) {
    require_poolable(input, "maxpool2x2_forward");
    const std::size_t n = input.shape[0], c = input.shape[1];
    const std::size_t oh = input.shape[2] / 2, ow = input.shape[3] / 2;
    PoolResult r{Tensor({n, c, oh, ow}), PoolIndices{{n, c, oh, ow}, {}}};
    r.indices.offsets.resize(n * c * oh * ow);

    std::size_t outpos = 0;
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox, ++outpos) {
                    double best = input.at4(in, ic, 2 * oy, 2 * ox);
                    std::uint8_t off = 0;
                    for (std::uint8_t k = 1; k < 4; ++k) {
                        const double v = input.at4(in, ic, 2 * oy + k / 2, 2 * ox + k % 2);
                        if (v > best) {
                            best = v;
                            off = k;
                        }
                    }
                    r.output.data[outpos] = best;
                    r.indices.offsets[outpos] = off;
                }
    return r;
}

namespace {

void require_index_match(const Tensor& input, const PoolIndices& indices, const char* where) {
    if (input.shape != indices.shape)
        throw std::invalid_argument(std::string(where) + ": input " +
                                    Tensor::shape_string(input.shape) +
                                    " does not match pool indices " +
                                    Tensor::shape_string(indices.shape));
    for (std::uint8_t off : indices.offsets)
        if (off > 3)
            throw std::invalid_argument(std::string(where) +
                                        ": pool offset out of window range");
}

}  // namespace

Tensor maxunpool2x2(const Tensor& input, const PoolIndices& indices) {
    require_index_match(input, indices, "maxunpool2x2");
    const std::size_t n = input.shape[0], c = input.shape[1];
    const std::size_t h = input.shape[2], w = input.shape[3];
    Tensor out({n, c, 2 * h, 2 * w});
    std::size_t pos = 0;
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x, ++pos) {
                    const std::uint8_t off = indices.offsets[pos];
                    out.at4(in, ic, 2 * y + off / 2, 2 * x + off % 2) = input.data[pos];
                }
    return out;
}

Tensor maxpool2x2_backward(const Tensor& upstream, const PoolIndices& indices) {
    return maxunpool2x2(upstream, indices);
}

Tensor maxunpool2x2_backward(const Tensor& upstream, const PoolIndices& indices) {
    if (upstream.rank() != 4 || indices.shape.size() != 4 ||
        upstream.shape[2] != indices.shape[2] * 2 || upstream.shape[3] != indices.shape[3] * 2 ||
        upstream.shape[0] != indices.shape[0] || upstream.shape[1] != indices.shape[1])
        throw std::invalid_argument("maxunpool2x2_backward: upstream " +
                                    Tensor::shape_string(upstream.shape) +
                                    " does not match pool indices " +
                                    Tensor::shape_string(indices.shape));
    Tensor out(indices.shape);
    std::size_t pos = 0;
    const std::size_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3];
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x, ++pos) {
                    const std::uint8_t off = indices.offsets[pos];
                    out.data[pos] = upstream.at4(in, ic, 2 * y + off / 2, 2 * x + off % 2);
                }
    return out;
}

double pool_kink_margin(const Tensor& input) {
    require_poolable(input, "pool_kink_margin");
    const std::size_t n = input.shape[0], c = input.shape[1];
    const std::size_t oh = input.shape[2] / 2, ow = input.shape[3] / 2;
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    double second = best;
                    for (std::uint8_t k = 0; k < 4; ++k) {
                        const double v = input.at4(in, ic, 2 * oy + k / 2, 2 * ox + k % 2);
                        if (v > best) {
                            second = best;
                            best = v;
                        } else if (v > second) {
                            second = v;
                        }
                    }
                    margin = std::min(margin, best - second);
                }
    return margin;
}

}  // namespace fyseg

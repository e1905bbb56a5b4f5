#include "fyseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fyseg/detector.hpp"
#include "fyseg/layers.hpp"
#include "fyseg/rng.hpp"
#include "fyseg/segmenter.hpp"

namespace fyseg {

GradCheckReport grad_check(const std::string& name,
                           const std::function<double(const std::vector<double>&)>& loss,
                           const std::vector<double>& base_coords,
                           const std::vector<double>& analytic_grad,
                           double tolerance, double step) {
    if (base_coords.size() != analytic_grad.size())
        throw std::invalid_argument("grad_check: " + std::to_string(analytic_grad.size()) +
                                    " gradients for " + std::to_string(base_coords.size()) +
                                    " coordinates");
    GradCheckReport report;
    report.name = name;
    report.tolerance = tolerance;
    report.coords_checked = base_coords.size();

    double grad_scale = 0.0;
    for (double g : analytic_grad) grad_scale = std::max(grad_scale, std::abs(g));

    std::vector<double> coords = base_coords;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double saved = coords[i];
        coords[i] = saved + step;
        const double hi = loss(coords);
        coords[i] = saved - step;
        const double lo = loss(coords);
        coords[i] = saved;

        const double fd = (hi - lo) / (2.0 * step);
        const double a = analytic_grad[i];
        // Coordinates with near-zero gradients are judged against the overall
        // gradient scale so finite-difference roundoff cannot dominate.
        const double denom =
            std::max({std::abs(a), std::abs(fd), 1e-2 * grad_scale, 1e-12});
        const double rel = std::abs(a - fd) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

namespace {

Tensor random_tensor(const std::vector<std::size_t>& shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double> pack(const std::vector<const Tensor*>& tensors) {
    std::vector<double> out;
    for (const Tensor* t : tensors) out.insert(out.end(), t->data.begin(), t->data.end());
    return out;
}

void unpack(const std::vector<double>& coords, const std::vector<Tensor*>& tensors) {
    std::size_t pos = 0;
    for (Tensor* t : tensors) {
        std::copy(coords.begin() + pos, coords.begin() + pos + t->numel(), t->data.begin());
        pos += t->numel();
    }
}

constexpr double kKinkMargin = 1e-3;
constexpr int kMaxResamples = 64;

// ---- fragment 1: a single conv layer with a linear readout --------------

GradCheckReport check_linear_conv(Rng& rng) {
    LayerParams params = make_conv_params(3, 2, 3, rng);
    for (double& v : params.bias.data) v = rng.uniform(-0.2, 0.2);
    Tensor input = random_tensor({1, 2, 5, 5}, rng);
    const Tensor readout = random_tensor({1, 3, 5, 5}, rng);

    auto eval = [&](const Tensor& in, const LayerParams& p, LayerParams* grads,
                    Tensor* in_grad) {
        const Tensor out = conv2d_forward(in, p, 1, 1);
        double loss = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) loss += readout.data[i] * out.data[i];
        if (grads) {
            ConvGrads g = conv2d_backward(in, p, readout, 1, 1);
            grads->weight_grad = g.weight_grad;
            grads->bias_grad = g.bias_grad;
            *in_grad = g.input_grad;
        }
        return loss / static_cast<double>(out.numel());
    };

    LayerParams grads = params;
    Tensor in_grad;
    eval(input, params, &grads, &in_grad);
    const double scale = 1.0 / static_cast<double>(readout.numel());
    std::vector<double> analytic = pack({&grads.weight_grad, &grads.bias_grad, &in_grad});
    for (double& g : analytic) g *= scale;

    const std::vector<double> base = pack({&params.weights, &params.bias, &input});
    auto loss_fn = [&](const std::vector<double>& coords) {
        LayerParams p = params;
        Tensor in = input;
        unpack(coords, {&p.weights, &p.bias, &in});
        return eval(in, p, nullptr, nullptr);
    };
    return grad_check("linear conv", loss_fn, base, analytic, 1e-8);
}

// ---- fragment 2: conv + leaky-ReLU stack ---------------------------------

GradCheckReport check_conv_leaky_stack(Rng& rng) {
    LayerParams p1 = make_conv_params(3, 2, 3, rng);
    LayerParams p2 = make_conv_params(2, 3, 3, rng);
    const Tensor readout = random_tensor({1, 2, 6, 6}, rng);

    Tensor input;
    for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
        input = random_tensor({1, 2, 6, 6}, rng);
        const Tensor a1 = conv2d_forward(input, p1, 1, 1);
        const Tensor a2 = conv2d_forward(leaky_relu(a1), p2, 1, 1);
        if (leaky_kink_margin(a1) > kKinkMargin && leaky_kink_margin(a2) > kKinkMargin) break;
    }

    auto forward = [&](const Tensor& in, const LayerParams& q1, const LayerParams& q2,
                       Tensor* a1, Tensor* h1, Tensor* a2) {
        Tensor pre1 = conv2d_forward(in, q1, 1, 1);
        Tensor act1 = leaky_relu(pre1);
        Tensor pre2 = conv2d_forward(act1, q2, 1, 1);
        Tensor act2 = leaky_relu(pre2);
        if (a1) *a1 = pre1;
        if (h1) *h1 = act1;
        if (a2) *a2 = pre2;
        double loss = 0.0;
        for (std::size_t i = 0; i < act2.numel(); ++i) loss += readout.data[i] * act2.data[i];
        return loss / static_cast<double>(act2.numel());
    };

    Tensor pre1, act1, pre2;
    forward(input, p1, p2, &pre1, &act1, &pre2);
    const double scale = 1.0 / static_cast<double>(readout.numel());
    Tensor up2 = leaky_relu_backward(pre2, readout);
    ConvGrads g2 = conv2d_backward(act1, p2, up2, 1, 1);
    Tensor up1 = leaky_relu_backward(pre1, g2.input_grad);
    ConvGrads g1 = conv2d_backward(input, p1, up1, 1, 1);
    std::vector<double> analytic = pack({&g1.weight_grad, &g1.bias_grad, &g2.weight_grad,
                                         &g2.bias_grad, &g1.input_grad});
    for (double& g : analytic) g *= scale;

    const std::vector<double> base = pack({&p1.weights, &p1.bias, &p2.weights, &p2.bias, &input});
    auto loss_fn = [&](const std::vector<double>& coords) {
        LayerParams q1 = p1, q2 = p2;
        Tensor in = input;
        unpack(coords, {&q1.weights, &q1.bias, &q2.weights, &q2.bias, &in});
        return forward(in, q1, q2, nullptr, nullptr, nullptr);
    };
    return grad_check("conv + leaky stack", loss_fn, base, analytic, 1e-4);
}

// ---- fragment 3: pool/unpool sandwich ------------------------------------

GradCheckReport check_pool_unpool(Rng& rng) {
    LayerParams params = make_conv_params(4, 2, 3, rng);

    Tensor input;
    for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
        input = random_tensor({1, 2, 8, 8}, rng);
        const Tensor pre = conv2d_forward(input, params, 1, 1);
        const Tensor act = leaky_relu(pre);
        if (leaky_kink_margin(pre) > kKinkMargin && pool_kink_margin(act) > kKinkMargin) break;
    }

    auto forward = [&](const Tensor& in, const LayerParams& p) {
        const Tensor pre = conv2d_forward(in, p, 1, 1);
        const Tensor act = leaky_relu(pre);
        const PoolResult pooled = maxpool2x2_forward(act);
        const Tensor restored = maxunpool2x2(pooled.output, pooled.indices);
        double loss = 0.0;
        for (double v : restored.data) loss += v * v;
        return 0.5 * loss / static_cast<double>(restored.numel());
    };

    const Tensor pre = conv2d_forward(input, params, 1, 1);
    const Tensor act = leaky_relu(pre);
    const PoolResult pooled = maxpool2x2_forward(act);
    const Tensor restored = maxunpool2x2(pooled.output, pooled.indices);
    Tensor up(restored.shape);
    for (std::size_t i = 0; i < up.numel(); ++i)
        up.data[i] = restored.data[i] / static_cast<double>(restored.numel());
    Tensor pooled_grad = maxunpool2x2_backward(up, pooled.indices);
    Tensor act_grad = maxpool2x2_backward(pooled_grad, pooled.indices);
    Tensor pre_grad = leaky_relu_backward(pre, act_grad);
    ConvGrads g = conv2d_backward(input, params, pre_grad, 1, 1);
    const std::vector<double> analytic = pack({&g.weight_grad, &g.bias_grad, &g.input_grad});

    const std::vector<double> base = pack({&params.weights, &params.bias, &input});
    auto loss_fn = [&](const std::vector<double>& coords) {
        LayerParams p = params;
        Tensor in = input;
        unpack(coords, {&p.weights, &p.bias, &in});
        return forward(in, p);
    };
    return grad_check("conv + pool/unpool", loss_fn, base, analytic, 1e-4);
}

// ---- fragment 4: detector head with its training loss --------------------

std::vector<Tensor*> detector_tensors(DetectorModel& m) {
    std::vector<Tensor*> out;
    for (ConvLayer& l : m.backbone) {
        out.push_back(&l.params.weights);
        out.push_back(&l.params.bias);
    }
    out.push_back(&m.head.params.weights);
    out.push_back(&m.head.params.bias);
    return out;
}

GradCheckReport check_detector_loss(Rng& rng) {
    DetectorConfig cfg;
    cfg.grid = 4;
    cfg.boxes_per_cell = 3;
    cfg.classes = 1;
    cfg.anchors = {{0.15, 0.15}, {0.3, 0.3}, {0.5, 0.5}};
    cfg.input_side = 16;
    DetectorModel model = build_detector(cfg, {{4, 2}, {6, 2}}, 3, rng);

    std::vector<BoundingBox> truths;
    truths.push_back(BoundingBox{rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45),
                                 rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3)});
    truths.push_back(BoundingBox{rng.uniform(0.55, 0.8), rng.uniform(0.55, 0.8),
                                 rng.uniform(0.1, 0.25), rng.uniform(0.1, 0.25)});

    Tensor input;
    DetectorTrace trace;
    for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
        input = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
        detector_forward(model, input, &trace);
        double margin = 1e9;
        for (const Tensor& pre : trace.preacts) margin = std::min(margin, leaky_kink_margin(pre));
        if (margin > kKinkMargin) break;
    }

    // Assignment (including the confidence targets) is frozen at the base
    // point; the loss is then a smooth function of the raw head output.
    const auto decoded = decode_boxes(trace.raw, 0, cfg);
    const std::vector<TargetAssignment> assignment{assign_targets(truths, decoded, cfg)};

    auto loss_of_model = [&](DetectorModel& m, const Tensor& in) {
        const Tensor raw = detector_forward(m, in);
        return yolo_loss(raw, assignment, cfg).total();
    };

    Tensor raw_grad;
    yolo_loss_backward(trace.raw, assignment, cfg, raw_grad);
    for (ConvLayer& l : model.backbone) l.params.zero_grads();
    model.head.params.zero_grads();
    detector_backward(model, trace, raw_grad);
    // Input gradient via the per-layer chain.
    ConvGrads hg = conv2d_backward(trace.head_input, model.head.params, raw_grad, 1, 0);
    Tensor up = hg.input_grad;
    Tensor input_grad;
    for (std::size_t li = model.backbone.size(); li-- > 0;) {
        Tensor pre_grad = leaky_relu_backward(trace.preacts[li], up);
        ConvGrads g = conv2d_backward(trace.stage_inputs[li], model.backbone[li].params,
                                      pre_grad, model.backbone[li].stride,
                                      model.backbone[li].pad);
        up = g.input_grad;
        if (li == 0) input_grad = g.input_grad;
    }

    std::vector<const Tensor*> analytic_parts;
    for (ConvLayer& l : model.backbone) {
        analytic_parts.push_back(&l.params.weight_grad);
        analytic_parts.push_back(&l.params.bias_grad);
    }
    analytic_parts.push_back(&model.head.params.weight_grad);
    analytic_parts.push_back(&model.head.params.bias_grad);
    analytic_parts.push_back(&input_grad);
    const std::vector<double> analytic = pack(analytic_parts);

    std::vector<const Tensor*> base_parts;
    for (Tensor* t : detector_tensors(model)) base_parts.push_back(t);
    base_parts.push_back(&input);
    const std::vector<double> base = pack(base_parts);

    auto loss_fn = [&](const std::vector<double>& coords) {
        DetectorModel m = model;
        Tensor in = input;
        std::vector<Tensor*> targets = detector_tensors(m);
        targets.push_back(&in);
        unpack(coords, targets);
        return loss_of_model(m, in);
    };
    return grad_check("detector loss", loss_fn, base, analytic, 1e-4);
}

// ---- fragment 5: segmenter with the weighted cross-entropy ---------------

std::vector<Tensor*> segmenter_tensors(SegmenterModel& m) {
    std::vector<Tensor*> out;
    for (ConvLayer& l : m.encoder) {
        out.push_back(&l.params.weights);
        out.push_back(&l.params.bias);
    }
    for (ConvLayer& l : m.decoder) {
        out.push_back(&l.params.weights);
        out.push_back(&l.params.bias);
    }
    out.push_back(&m.classifier.params.weights);
    out.push_back(&m.classifier.params.bias);
    return out;
}

GradCheckReport check_segmenter_loss(Rng& rng) {
    SegConfig cfg;
    cfg.input_height = 8;
    cfg.input_width = 8;
    cfg.encoder_channels = {4, 6};
    SegmenterModel model = build_segmenter(cfg, 3, rng);
    const MfbWeights weights{0.8, 1.5};

    Tensor targets({1, 1, 8, 8});
    for (double& v : targets.data) v = rng.chance(0.4) ? 1.0 : 0.0;

    Tensor input;
    SegmenterTrace trace;
    for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
        input = random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
        segmenter_forward(model, input, &trace);
        double margin = 1e9;
        for (const Tensor& pre : trace.enc_preacts)
            margin = std::min(margin, leaky_kink_margin(pre));
        for (const Tensor& pre : trace.dec_preacts)
            margin = std::min(margin, leaky_kink_margin(pre));
        for (std::size_t i = 0; i < model.encoder.size(); ++i)
            margin = std::min(margin, pool_kink_margin(leaky_relu(trace.enc_preacts[i])));
        bool probs_ok = true;
        for (double p : trace.probs.data)
            if (p < 0.01 || p > 0.99) probs_ok = false;
        if (margin > kKinkMargin && probs_ok) break;
    }

    auto loss_of_model = [&](SegmenterModel& m, const Tensor& in) {
        const Tensor probs = segmenter_forward(m, in);
        return seg_loss_batch(probs, targets, weights);
    };

    Tensor prob_grad;
    seg_loss_batch(trace.probs, targets, weights, &prob_grad);
    for (ConvLayer& l : model.encoder) l.params.zero_grads();
    for (ConvLayer& l : model.decoder) l.params.zero_grads();
    model.classifier.params.zero_grads();
    segmenter_backward(model, trace, prob_grad);

    std::vector<const Tensor*> analytic_parts;
    for (ConvLayer& l : model.encoder) {
        analytic_parts.push_back(&l.params.weight_grad);
        analytic_parts.push_back(&l.params.bias_grad);
    }
    for (ConvLayer& l : model.decoder) {
        analytic_parts.push_back(&l.params.weight_grad);
        analytic_parts.push_back(&l.params.bias_grad);
    }
    analytic_parts.push_back(&model.classifier.params.weight_grad);
    analytic_parts.push_back(&model.classifier.params.bias_grad);
    const std::vector<double> analytic = pack(analytic_parts);

    std::vector<const Tensor*> base_parts;
    for (Tensor* t : segmenter_tensors(model)) base_parts.push_back(t);
    const std::vector<double> base = pack(base_parts);

    auto loss_fn = [&](const std::vector<double>& coords) {
        SegmenterModel m = model;
        unpack(coords, segmenter_tensors(m));
        return loss_of_model(m, input);
    };
    return grad_check("segmenter loss", loss_fn, base, analytic, 1e-4);
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GradCheckReport> reports;
    reports.push_back(check_linear_conv(rng));
    reports.push_back(check_conv_leaky_stack(rng));
    reports.push_back(check_pool_unpool(rng));
    reports.push_back(check_detector_loss(rng));
    reports.push_back(check_segmenter_loss(rng));
    return reports;
}

}  // namespace fyseg

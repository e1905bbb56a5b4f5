#include "fyseg/detector.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "fyseg/errors.hpp"

namespace fyseg {

void DetectorConfig::validate() const {
    if (grid == 0 || boxes_per_cell == 0)
        throw std::invalid_argument("DetectorConfig: grid and boxes_per_cell must be positive");
    if (anchors.size() != boxes_per_cell)
        throw std::invalid_argument("DetectorConfig: " + std::to_string(anchors.size()) +
                                    " anchors for " + std::to_string(boxes_per_cell) +
                                    " boxes per cell");
    if (lambda_coord <= 0.0 || lambda_noobj < 0.0)
        throw std::invalid_argument("DetectorConfig: lambda_coord must be > 0, lambda_noobj >= 0");
    if (nms_iou_threshold <= 0.0 || nms_iou_threshold >= 1.0)
        throw std::invalid_argument("DetectorConfig: nms_iou_threshold must be in (0,1)");
    for (const auto& [pw, ph] : anchors)
        if (pw <= 0.0 || ph <= 0.0)
            throw std::invalid_argument("DetectorConfig: anchors must be positive");
}

double confidence_score(double objectness_prob, double iou_with_truth) {
    return objectness_prob * iou_with_truth;
}

namespace {

void require_head_shape(const Tensor& raw, const DetectorConfig& cfg, const char* where) {
    if (raw.rank() != 4 || raw.shape[1] != cfg.head_channels() || raw.shape[2] != cfg.grid ||
        raw.shape[3] != cfg.grid)
        throw std::invalid_argument(std::string(where) + ": raw " +
                                    Tensor::shape_string(raw.shape) + " does not match head [N x " +
                                    std::to_string(cfg.head_channels()) + " x " +
                                    std::to_string(cfg.grid) + " x " + std::to_string(cfg.grid) +
                                    "]");
}

inline std::size_t box_channel(const DetectorConfig& cfg, std::size_t j, std::size_t k) {
    return j * (5 + cfg.classes) + k;
}

}  // namespace

std::vector<BoundingBox> decode_boxes(const Tensor& raw, std::size_t image,
                                      const DetectorConfig& cfg) {
    require_head_shape(raw, cfg, "decode_boxes");
    const std::size_t S = cfg.grid, B = cfg.boxes_per_cell;
    std::vector<BoundingBox> out(S * S * B);
    for (std::size_t row = 0; row < S; ++row)
        for (std::size_t col = 0; col < S; ++col)
            for (std::size_t j = 0; j < B; ++j) {
                const double tx = raw.at4(image, box_channel(cfg, j, 0), row, col);
                const double ty = raw.at4(image, box_channel(cfg, j, 1), row, col);
                const double tw = raw.at4(image, box_channel(cfg, j, 2), row, col);
                const double th = raw.at4(image, box_channel(cfg, j, 3), row, col);
                BoundingBox b;
                b.cx = (static_cast<double>(col) + sigmoid_scalar(tx)) / static_cast<double>(S);
                b.cy = (static_cast<double>(row) + sigmoid_scalar(ty)) / static_cast<double>(S);
                b.w = cfg.anchors[j].first * std::exp(tw);
                b.h = cfg.anchors[j].second * std::exp(th);
                out[(row * S + col) * B + j] = b;
            }
    return out;
}

std::vector<std::vector<Detection>> decode_head(const Tensor& raw, const DetectorConfig& cfg) {
    require_head_shape(raw, cfg, "decode_head");
    const std::size_t S = cfg.grid, B = cfg.boxes_per_cell, C = cfg.classes;
    std::vector<std::vector<Detection>> all(raw.shape[0]);
    for (std::size_t n = 0; n < raw.shape[0]; ++n) {
        const auto boxes = decode_boxes(raw, n, cfg);
        auto& dets = all[n];
        dets.reserve(S * S * B);
        for (std::size_t row = 0; row < S; ++row)
            for (std::size_t col = 0; col < S; ++col)
                for (std::size_t j = 0; j < B; ++j) {
                    Detection d;
                    d.box = boxes[(row * S + col) * B + j].clamped_unit();
                    d.objectness =
                        sigmoid_scalar(raw.at4(n, box_channel(cfg, j, 4), row, col));
                    d.class_score = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double p =
                            sigmoid_scalar(raw.at4(n, box_channel(cfg, j, 5 + c), row, col));
                        if (p > d.class_score) {
                            d.class_score = p;
                            d.class_index = c;
                        }
                    }
                    d.confidence = d.objectness * d.class_score;
                    dets.push_back(d);
                }
    }
    return all;
}

TargetAssignment assign_targets(const std::vector<BoundingBox>& truth_boxes,
                                const std::vector<BoundingBox>& decoded_boxes,
                                const DetectorConfig& cfg) {
    const std::size_t S = cfg.grid, B = cfg.boxes_per_cell, C = cfg.classes;
    if (decoded_boxes.size() != S * S * B)
        throw std::invalid_argument("assign_targets: expected " + std::to_string(S * S * B) +
                                    " decoded boxes, got " + std::to_string(decoded_boxes.size()));
    TargetAssignment a;
    a.grid = S;
    a.boxes_per_cell = B;
    a.classes = C;
    a.cell_has_object.assign(S * S, 0);
    a.responsible_box.assign(S * S, -1);
    a.cell_truth.assign(S * S, BoundingBox{});
    a.cell_class.assign(S * S * C, 0.0);
    a.target_confidence.assign(S * S, 0.0);

    for (const BoundingBox& truth : truth_boxes) {
        const std::size_t col = std::min<std::size_t>(
            S - 1, static_cast<std::size_t>(std::max(0.0, std::floor(truth.cx * S))));
        const std::size_t row = std::min<std::size_t>(
            S - 1, static_cast<std::size_t>(std::max(0.0, std::floor(truth.cy * S))));
        const std::size_t cell = row * S + col;
        if (a.cell_has_object[cell]) {
            // Contested cell: the larger-area truth keeps it.
            if (truth.area() <= a.cell_truth[cell].area()) {
                ++a.dropped_truths;
                continue;
            }
            ++a.dropped_truths;
        }
        a.cell_has_object[cell] = 1;
        a.cell_truth[cell] = truth;
        a.cell_class[cell * C + 0] = 1.0;  // single-class: the lesion class

        int best_j = 0;
        double best_iou = -1.0;
        for (std::size_t j = 0; j < B; ++j) {
            const double v = iou(decoded_boxes[cell * B + j], truth);
            if (v > best_iou) {
                best_iou = v;
                best_j = static_cast<int>(j);
            }
        }
        a.responsible_box[cell] = best_j;
        a.target_confidence[cell] = std::max(0.0, best_iou);
    }
    return a;
}

namespace {

// Shared forward/backward walk over every (cell, box) term of the loss.
YoloLossParts yolo_loss_impl(const Tensor& raw, const std::vector<TargetAssignment>& assignments,
                             const DetectorConfig& cfg, Tensor* raw_grad) {
    require_head_shape(raw, cfg, "yolo_loss");
    const std::size_t N = raw.shape[0], S = cfg.grid, B = cfg.boxes_per_cell, C = cfg.classes;
    if (assignments.size() != N)
        throw std::invalid_argument("yolo_loss: " + std::to_string(assignments.size()) +
                                    " assignments for " + std::to_string(N) + " images");
    if (raw_grad) {
        *raw_grad = Tensor(raw.shape);
    }
    const double inv_n = 1.0 / static_cast<double>(N);

    YoloLossParts parts;
    for (std::size_t n = 0; n < N; ++n) {
        const TargetAssignment& a = assignments[n];
        if (a.grid != S || a.boxes_per_cell != B || a.classes != C)
            throw std::invalid_argument("yolo_loss: assignment geometry does not match config");
        for (std::size_t row = 0; row < S; ++row)
            for (std::size_t col = 0; col < S; ++col) {
                const std::size_t cell = row * S + col;
                const bool has_obj = a.cell_has_object[cell] != 0;
                const int resp = a.responsible_box[cell];
                for (std::size_t j = 0; j < B; ++j) {
                    const double to = raw.at4(n, box_channel(cfg, j, 4), row, col);
                    const double conf = sigmoid_scalar(to);
                    const bool responsible = has_obj && resp == static_cast<int>(j);
                    if (!responsible) {
                        parts.confidence_noobj += inv_n * cfg.lambda_noobj * conf * conf;
                        if (raw_grad)
                            raw_grad->at4(n, box_channel(cfg, j, 4), row, col) +=
                                inv_n * cfg.lambda_noobj * 2.0 * conf * conf * (1.0 - conf);
                        continue;
                    }

                    const BoundingBox& truth = a.cell_truth[cell];
                    const double tx = raw.at4(n, box_channel(cfg, j, 0), row, col);
                    const double ty = raw.at4(n, box_channel(cfg, j, 1), row, col);
                    const double tw = raw.at4(n, box_channel(cfg, j, 2), row, col);
                    const double th = raw.at4(n, box_channel(cfg, j, 3), row, col);
                    const double sx = sigmoid_scalar(tx);
                    const double sy = sigmoid_scalar(ty);
                    const double cx = (static_cast<double>(col) + sx) / static_cast<double>(S);
                    const double cy = (static_cast<double>(row) + sy) / static_cast<double>(S);
                    const double w = cfg.anchors[j].first * std::exp(tw);
                    const double h = cfg.anchors[j].second * std::exp(th);
                    const double sw = std::sqrt(w), sh = std::sqrt(h);
                    const double stw = std::sqrt(std::max(0.0, truth.w));
                    const double sth = std::sqrt(std::max(0.0, truth.h));

                    parts.localization +=
                        inv_n * cfg.lambda_coord *
                        ((cx - truth.cx) * (cx - truth.cx) + (cy - truth.cy) * (cy - truth.cy) +
                         (sw - stw) * (sw - stw) + (sh - sth) * (sh - sth));
                    const double tconf = a.target_confidence[cell];
                    parts.confidence_obj += inv_n * (conf - tconf) * (conf - tconf);

                    if (raw_grad) {
                        const double lc = cfg.lambda_coord * inv_n;
                        raw_grad->at4(n, box_channel(cfg, j, 0), row, col) +=
                            lc * 2.0 * (cx - truth.cx) * sx * (1.0 - sx) / static_cast<double>(S);
                        raw_grad->at4(n, box_channel(cfg, j, 1), row, col) +=
                            lc * 2.0 * (cy - truth.cy) * sy * (1.0 - sy) / static_cast<double>(S);
                        // d sqrt(w)/d tw = sqrt(w)/2 for w = pw*exp(tw)
                        raw_grad->at4(n, box_channel(cfg, j, 2), row, col) +=
                            lc * 2.0 * (sw - stw) * 0.5 * sw;
                        raw_grad->at4(n, box_channel(cfg, j, 3), row, col) +=
                            lc * 2.0 * (sh - sth) * 0.5 * sh;
                        raw_grad->at4(n, box_channel(cfg, j, 4), row, col) +=
                            inv_n * 2.0 * (conf - tconf) * conf * (1.0 - conf);
                    }

                    for (std::size_t c = 0; c < C; ++c) {
                        const double logit = raw.at4(n, box_channel(cfg, j, 5 + c), row, col);
                        const double p = sigmoid_scalar(logit);
                        const double t = a.cell_class[cell * C + c];
                        parts.classification += inv_n * (p - t) * (p - t);
                        if (raw_grad)
                            raw_grad->at4(n, box_channel(cfg, j, 5 + c), row, col) +=
                                inv_n * 2.0 * (p - t) * p * (1.0 - p);
                    }
                }
            }
    }
    return parts;
}

}  // namespace

YoloLossParts yolo_loss(const Tensor& raw, const std::vector<TargetAssignment>& assignments,
                        const DetectorConfig& cfg) {
    return yolo_loss_impl(raw, assignments, cfg, nullptr);
}

YoloLossParts yolo_loss_backward(const Tensor& raw,
                                 const std::vector<TargetAssignment>& assignments,
                                 const DetectorConfig& cfg, Tensor& raw_grad) {
    return yolo_loss_impl(raw, assignments, cfg, &raw_grad);
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) {
                         return a.confidence > b.confidence;
                     });
    std::vector<Detection> kept;
    for (const Detection& d : detections) {
        bool suppressed = false;
        for (const Detection& k : kept)
            if (iou(d.box, k.box) >= iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

DetectorModel build_detector(const DetectorConfig& cfg, const std::vector<BackboneStage>& stages,
                             std::size_t in_channels, Rng& rng) {
    cfg.validate();
    if (stages.empty()) throw std::invalid_argument("build_detector: empty backbone spec");

    std::size_t side = cfg.input_side;
    for (const BackboneStage& s : stages) {
        if (s.channels == 0 || s.stride == 0)
            throw std::invalid_argument("build_detector: stage channels and stride must be > 0");
        side = (side + 2 - 3) / s.stride + 1;  // 3x3 kernel, pad 1
    }
    if (side != cfg.grid)
        throw std::invalid_argument("build_detector: backbone output side " +
                                    std::to_string(side) + " does not match grid " +
                                    std::to_string(cfg.grid));

    DetectorModel m;
    m.cfg = cfg;
    m.stages = stages;
    m.in_channels = in_channels;
    std::size_t prev = in_channels;
    for (const BackboneStage& s : stages) {
        ConvLayer layer;
        layer.params = make_conv_params(s.channels, prev, 3, rng);
        layer.stride = s.stride;
        layer.pad = 1;
        m.backbone.push_back(std::move(layer));
        prev = s.channels;
    }
    m.head.params = make_conv_params(cfg.head_channels(), prev, 1, rng);
    m.head.stride = 1;
    m.head.pad = 0;
    return m;
}

Tensor detector_forward(const DetectorModel& model, const Tensor& images, DetectorTrace* trace) {
    Tensor x = images;
    if (trace) {
        trace->stage_inputs.clear();
        trace->preacts.clear();
    }
    for (const ConvLayer& layer : model.backbone) {
        if (trace) trace->stage_inputs.push_back(x);
        Tensor pre = conv2d_forward(x, layer.params, layer.stride, layer.pad);
        if (trace) trace->preacts.push_back(pre);
        x = leaky_relu(pre);
    }
    if (trace) trace->head_input = x;
    Tensor raw = conv2d_forward(x, model.head.params, model.head.stride, model.head.pad);
    if (trace) trace->raw = raw;
    return raw;
}

void detector_backward(DetectorModel& model, const DetectorTrace& trace, const Tensor& raw_grad,
                       bool head_only) {
    ConvGrads hg = conv2d_backward(trace.head_input, model.head.params, raw_grad,
                                   model.head.stride, model.head.pad);
    for (std::size_t i = 0; i < hg.weight_grad.numel(); ++i)
        model.head.params.weight_grad.data[i] += hg.weight_grad.data[i];
    for (std::size_t i = 0; i < hg.bias_grad.numel(); ++i)
        model.head.params.bias_grad.data[i] += hg.bias_grad.data[i];
    if (head_only) return;

    Tensor up = std::move(hg.input_grad);
    for (std::size_t li = model.backbone.size(); li-- > 0;) {
        ConvLayer& layer = model.backbone[li];
        Tensor pre_grad = leaky_relu_backward(trace.preacts[li], up);
        ConvGrads g = conv2d_backward(trace.stage_inputs[li], layer.params, pre_grad,
                                      layer.stride, layer.pad);
        for (std::size_t i = 0; i < g.weight_grad.numel(); ++i)
            layer.params.weight_grad.data[i] += g.weight_grad.data[i];
        for (std::size_t i = 0; i < g.bias_grad.numel(); ++i)
            layer.params.bias_grad.data[i] += g.bias_grad.data[i];
        up = std::move(g.input_grad);
    }
}

std::vector<Detection> detect(const DetectorModel& model, const Tensor& image) {
    if (image.rank() != 3)
        throw std::invalid_argument("detect: expected [C,H,W] image, got " +
                                    Tensor::shape_string(image.shape));
    Tensor batch({1, image.shape[0], image.shape[1], image.shape[2]}, image.data);
    const Tensor raw = detector_forward(model, batch);
    auto dets = decode_head(raw, model.cfg)[0];
    dets = nms(std::move(dets), model.cfg.nms_iou_threshold);
    std::vector<Detection> out;
    for (const Detection& d : dets)
        if (d.confidence >= model.cfg.confidence_floor) out.push_back(d);
    return out;
}

Checkpoint detector_checkpoint(const DetectorModel& model) {
    Checkpoint ckpt;
    for (std::size_t i = 0; i < model.backbone.size(); ++i) {
        ckpt.add("backbone." + std::to_string(i) + ".weight", model.backbone[i].params.weights);
        ckpt.add("backbone." + std::to_string(i) + ".bias", model.backbone[i].params.bias);
    }
    ckpt.add("head.weight", model.head.params.weights);
    ckpt.add("head.bias", model.head.params.bias);
    return ckpt;
}

namespace {

void load_named(Tensor& dst, const Checkpoint& ckpt, const std::string& name) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw DataError("checkpoint: missing tensor " + name);
    if (src->shape != dst.shape)
        throw DataError("checkpoint: tensor " + name + " has shape " +
                        Tensor::shape_string(src->shape) + ", model expects " +
                        Tensor::shape_string(dst.shape));
    dst.data = src->data;
}

}  // namespace

void load_detector_weights(DetectorModel& model, const Checkpoint& ckpt) {
    for (std::size_t i = 0; i < model.backbone.size(); ++i) {
        load_named(model.backbone[i].params.weights, ckpt,
                   "backbone." + std::to_string(i) + ".weight");
        load_named(model.backbone[i].params.bias, ckpt,
                   "backbone." + std::to_string(i) + ".bias");
    }
    load_named(model.head.params.weights, ckpt, "head.weight");
    load_named(model.head.params.bias, ckpt, "head.bias");
}

void finetune_head(DetectorModel& model, const Checkpoint& ckpt, Rng& rng) {
    for (std::size_t i = 0; i < model.backbone.size(); ++i) {
        load_named(model.backbone[i].params.weights, ckpt,
                   "backbone." + std::to_string(i) + ".weight");
        load_named(model.backbone[i].params.bias, ckpt,
                   "backbone." + std::to_string(i) + ".bias");
    }
    const std::size_t prev = model.stages.back().channels;
    model.head.params = make_conv_params(model.cfg.head_channels(), prev, 1, rng);
}

namespace {

struct SampleGrads {
    std::vector<ConvGrads> backbone;  // empty when backbone frozen
    ConvGrads head;
    double loss = 0.0;
};

SampleGrads detector_sample_grads(const DetectorModel& model, const DetectorSample& sample,
                                  bool head_only) {
    Tensor batch({1, sample.image.shape[0], sample.image.shape[1], sample.image.shape[2]},
                 sample.image.data);
    DetectorTrace trace;
    detector_forward(model, batch, &trace);

    const auto boxes = decode_boxes(trace.raw, 0, model.cfg);
    std::vector<TargetAssignment> assignment{assign_targets(sample.truths, boxes, model.cfg)};
    Tensor raw_grad;
    const YoloLossParts parts = yolo_loss_backward(trace.raw, assignment, model.cfg, raw_grad);

    SampleGrads out;
    out.loss = parts.total();
    out.head = conv2d_backward(trace.head_input, model.head.params, raw_grad, model.head.stride,
                               model.head.pad);
    if (!head_only) {
        Tensor up = out.head.input_grad;
        out.backbone.resize(model.backbone.size());
        for (std::size_t li = model.backbone.size(); li-- > 0;) {
            const ConvLayer& layer = model.backbone[li];
            Tensor pre_grad = leaky_relu_backward(trace.preacts[li], up);
            out.backbone[li] = conv2d_backward(trace.stage_inputs[li], layer.params, pre_grad,
                                               layer.stride, layer.pad);
            up = std::move(out.backbone[li].input_grad);
        }
    }
    return out;
}

void accumulate(Tensor& dst, const Tensor& src, double scale) {
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += scale * src.data[i];
}

}  // namespace

TrainLog train_detector(DetectorModel& model, const std::vector<DetectorSample>& samples,
                        const DetectorTrainConfig& cfg) {
    if (samples.empty()) throw std::invalid_argument("train_detector: no samples");
    if (cfg.batch_size == 0) throw std::invalid_argument("train_detector: batch_size must be > 0");
    const std::size_t workers = std::max<std::size_t>(1, cfg.workers);

    std::vector<AdamState> backbone_state;
    for (const ConvLayer& l : model.backbone)
        backbone_state.emplace_back(l.params, cfg.learning_rate);
    AdamState head_state(model.head.params, cfg.learning_rate);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainLog log;
    std::size_t last_snapshot = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - start);
            std::vector<SampleGrads> grads(count);

            // Per-sample gradients may run concurrently; the reduction below
            // is in sample order so results do not depend on worker count.
            if (workers == 1 || count == 1) {
                for (std::size_t k = 0; k < count; ++k)
                    grads[k] = detector_sample_grads(model, samples[order[start + k]],
                                                     cfg.freeze_backbone);
            } else {
                std::vector<std::thread> pool;
                for (std::size_t w = 0; w < std::min(workers, count); ++w)
                    pool.emplace_back([&, w] {
                        for (std::size_t k = w; k < count; k += workers)
                            grads[k] = detector_sample_grads(model, samples[order[start + k]],
                                                             cfg.freeze_backbone);
                    });
                for (auto& t : pool) t.join();
            }

            for (ConvLayer& l : model.backbone) l.params.zero_grads();
            model.head.params.zero_grads();
            const double scale = 1.0 / static_cast<double>(count);
            for (std::size_t k = 0; k < count; ++k) {
                epoch_loss += grads[k].loss;
                accumulate(model.head.params.weight_grad, grads[k].head.weight_grad, scale);
                accumulate(model.head.params.bias_grad, grads[k].head.bias_grad, scale);
                if (!cfg.freeze_backbone)
                    for (std::size_t li = 0; li < model.backbone.size(); ++li) {
                        accumulate(model.backbone[li].params.weight_grad,
                                   grads[k].backbone[li].weight_grad, scale);
                        accumulate(model.backbone[li].params.bias_grad,
                                   grads[k].backbone[li].bias_grad, scale);
                    }
            }

            if (!cfg.freeze_backbone)
                for (std::size_t li = 0; li < model.backbone.size(); ++li)
                    adam_step(model.backbone[li].params, backbone_state[li]);
            adam_step(model.head.params, head_state);
        }

        epoch_loss /= static_cast<double>(samples.size());
        if (!std::isfinite(epoch_loss))
            throw NumericError("train_detector: non-finite loss at epoch " +
                               std::to_string(epoch));
        log.epoch_loss.push_back(epoch_loss);

        if (cfg.on_checkpoint && cfg.checkpoint_every > 0 &&
            (epoch + 1) % cfg.checkpoint_every == 0) {
            cfg.on_checkpoint(epoch + 1, model);
            last_snapshot = epoch + 1;
        }
    }
    if (cfg.on_checkpoint && last_snapshot != cfg.epochs) cfg.on_checkpoint(cfg.epochs, model);
    return log;
}

}  // namespace fyseg

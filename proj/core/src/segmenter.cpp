#include "fyseg/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "fyseg/errors.hpp"

namespace fyseg {

namespace {
constexpr double kProbClamp = 1e-7;
}

PixelMask threshold_mask(const ProbabilityMask& probs, double threshold) {
    PixelMask mask(probs.width, probs.height);
    for (std::size_t i = 0; i < probs.probs.size(); ++i)
        mask.labels[i] = probs.probs[i] >= threshold ? 1 : 0;
    return mask;
}

void SegConfig::validate() const {
    if (encoder_channels.empty())
        throw std::invalid_argument("SegConfig: encoder_channels must not be empty");
    const std::size_t factor = std::size_t{1} << encoder_channels.size();
    if (input_height % factor != 0 || input_width % factor != 0)
        throw std::invalid_argument("SegConfig: input " + std::to_string(input_width) + "x" +
                                    std::to_string(input_height) + " not divisible by 2^" +
                                    std::to_string(encoder_channels.size()));
    for (std::size_t c : encoder_channels)
        if (c == 0) throw std::invalid_argument("SegConfig: zero-channel encoder stage");
}

MfbWeights compute_mfb(const std::vector<PixelMask>& training_masks) {
    std::uint64_t lesion = 0, total = 0;
    for (const PixelMask& m : training_masks) {
        total += m.labels.size();
        for (std::uint8_t v : m.labels) lesion += v ? 1 : 0;
    }
    if (total == 0) throw std::invalid_argument("compute_mfb: no labeled pixels");
    const std::uint64_t background = total - lesion;
    if (lesion == 0)
        throw std::invalid_argument("compute_mfb: lesion class absent from the collection");
    if (background == 0)
        throw std::invalid_argument("compute_mfb: background class absent from the collection");

    const double f_bg = static_cast<double>(background) / static_cast<double>(total);
    const double f_les = static_cast<double>(lesion) / static_cast<double>(total);
    // Median of two frequencies is their midpoint.
    const double median = (f_bg + f_les) / 2.0;
    return MfbWeights{median / f_bg, median / f_les};
}

namespace {

double weighted_xent(double p, double y, const MfbWeights& w) {
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    const double phi = y > 0.5 ? w.lesion : w.background;
    return -phi * (y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

}  // namespace

double seg_loss(const ProbabilityMask& pred, const PixelMask& truth, const MfbWeights& weights) {
    if (pred.width != truth.width || pred.height != truth.height)
        throw std::invalid_argument("seg_loss: prediction " + std::to_string(pred.width) + "x" +
                                    std::to_string(pred.height) + " vs truth " +
                                    std::to_string(truth.width) + "x" +
                                    std::to_string(truth.height));
    if (truth.pixel_count() == 0) throw std::invalid_argument("seg_loss: empty masks");
    double sum = 0.0;
    for (std::size_t i = 0; i < truth.labels.size(); ++i)
        sum += weighted_xent(pred.probs[i], truth.labels[i] ? 1.0 : 0.0, weights);
    return sum / static_cast<double>(truth.labels.size());
}

double seg_loss_batch(const Tensor& probs, const Tensor& targets, const MfbWeights& weights,
                      Tensor* prob_grad) {
    require_same_shape(probs, targets, "seg_loss_batch");
    if (probs.numel() == 0) throw std::invalid_argument("seg_loss_batch: empty tensors");
    if (prob_grad) *prob_grad = Tensor(probs.shape);
    const double inv_m = 1.0 / static_cast<double>(probs.numel());
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.numel(); ++i) {
        const double y = targets.data[i];
        const double p = probs.data[i];
        sum += weighted_xent(p, y, weights);
        if (prob_grad) {
            if (p < kProbClamp || p > 1.0 - kProbClamp) continue;  // clamped: flat
            const double phi = y > 0.5 ? weights.lesion : weights.background;
            prob_grad->data[i] = -phi * (y / p - (1.0 - y) / (1.0 - p)) * inv_m;
        }
    }
    return sum * inv_m;
}

SegmenterModel build_segmenter(const SegConfig& cfg, std::size_t in_channels, Rng& rng) {
    cfg.validate();
    SegmenterModel m;
    m.cfg = cfg;
    m.in_channels = in_channels;

    std::size_t prev = in_channels;
    for (std::size_t c : cfg.encoder_channels) {
        ConvLayer layer;
        layer.params = make_conv_params(c, prev, 3, rng);
        layer.stride = 1;
        layer.pad = 1;
        m.encoder.push_back(std::move(layer));
        prev = c;
    }
    // Mirrored decoder: stage i consumes the unpooled activation of encoder
    // stage (depth-1-i) and maps back toward the first stage's width.
    const auto& enc = cfg.encoder_channels;
    for (std::size_t i = enc.size(); i-- > 0;) {
        const std::size_t out = i > 0 ? enc[i - 1] : enc[0];
        ConvLayer layer;
        layer.params = make_conv_params(out, prev, 3, rng);
        layer.stride = 1;
        layer.pad = 1;
        m.decoder.push_back(std::move(layer));
        prev = out;
    }
    m.classifier.params = make_conv_params(1, prev, 1, rng);
    m.classifier.stride = 1;
    m.classifier.pad = 0;
    return m;
}

Tensor segmenter_forward(const SegmenterModel& model, const Tensor& images,
                         SegmenterTrace* trace) {
    if (images.rank() != 4)
        throw std::invalid_argument("segmenter_forward: expected [N,C,H,W], got " +
                                    Tensor::shape_string(images.shape));
    if (images.shape[2] != model.cfg.input_height || images.shape[3] != model.cfg.input_width)
        throw std::invalid_argument("segmenter_forward: input " +
                                    Tensor::shape_string(images.shape) + " does not match " +
                                    std::to_string(model.cfg.input_width) + "x" +
                                    std::to_string(model.cfg.input_height));
    if (trace) *trace = SegmenterTrace{};

    Tensor x = images;
    std::vector<PoolIndices> indices;
    for (const ConvLayer& layer : model.encoder) {
        if (trace) trace->enc_inputs.push_back(x);
        Tensor pre = conv2d_forward(x, layer.params, layer.stride, layer.pad);
        if (trace) trace->enc_preacts.push_back(pre);
        PoolResult pooled = maxpool2x2_forward(leaky_relu(pre));
        indices.push_back(std::move(pooled.indices));
        x = std::move(pooled.output);
    }
    if (trace) trace->pool_indices = indices;

    for (std::size_t i = 0; i < model.decoder.size(); ++i) {
        const PoolIndices& idx = indices[model.decoder.size() - 1 - i];
        Tensor up = maxunpool2x2(x, idx);
        if (trace) trace->dec_inputs.push_back(up);
        Tensor pre = conv2d_forward(up, model.decoder[i].params, 1, 1);
        if (trace) trace->dec_preacts.push_back(pre);
        x = leaky_relu(pre);
    }

    if (trace) trace->classifier_input = x;
    Tensor logits = conv2d_forward(x, model.classifier.params, 1, 0);
    Tensor probs = sigmoid(logits);
    if (trace) trace->probs = probs;
    return probs;
}

void segmenter_backward(SegmenterModel& model, const SegmenterTrace& trace,
                        const Tensor& prob_grad) {
    // probs = sigmoid(logits)
    Tensor logit_grad = sigmoid_backward_from_output(trace.probs, prob_grad);
    ConvGrads cg = conv2d_backward(trace.classifier_input, model.classifier.params, logit_grad,
                                   1, 0);
    for (std::size_t i = 0; i < cg.weight_grad.numel(); ++i)
        model.classifier.params.weight_grad.data[i] += cg.weight_grad.data[i];
    for (std::size_t i = 0; i < cg.bias_grad.numel(); ++i)
        model.classifier.params.bias_grad.data[i] += cg.bias_grad.data[i];

    Tensor up = std::move(cg.input_grad);
    for (std::size_t i = model.decoder.size(); i-- > 0;) {
        Tensor pre_grad = leaky_relu_backward(trace.dec_preacts[i], up);
        ConvGrads g = conv2d_backward(trace.dec_inputs[i], model.decoder[i].params, pre_grad,
                                      1, 1);
        for (std::size_t k = 0; k < g.weight_grad.numel(); ++k)
            model.decoder[i].params.weight_grad.data[k] += g.weight_grad.data[k];
        for (std::size_t k = 0; k < g.bias_grad.numel(); ++k)
            model.decoder[i].params.bias_grad.data[k] += g.bias_grad.data[k];
        const PoolIndices& idx = trace.pool_indices[model.decoder.size() - 1 - i];
        up = maxunpool2x2_backward(g.input_grad, idx);
    }

    for (std::size_t i = model.encoder.size(); i-- > 0;) {
        // up is the gradient at the pooled output of encoder stage i.
        Tensor post_grad = maxpool2x2_backward(up, trace.pool_indices[i]);
        Tensor pre_grad = leaky_relu_backward(trace.enc_preacts[i], post_grad);
        ConvGrads g = conv2d_backward(trace.enc_inputs[i], model.encoder[i].params, pre_grad,
                                      1, 1);
        for (std::size_t k = 0; k < g.weight_grad.numel(); ++k)
            model.encoder[i].params.weight_grad.data[k] += g.weight_grad.data[k];
        for (std::size_t k = 0; k < g.bias_grad.numel(); ++k)
            model.encoder[i].params.bias_grad.data[k] += g.bias_grad.data[k];
        up = std::move(g.input_grad);
    }
}

std::pair<ProbabilityMask, PixelMask> predict_mask(const SegmenterModel& model,
                                                   const Tensor& patch) {
    if (patch.rank() != 3)
        throw std::invalid_argument("predict_mask: expected [C,H,W] patch, got " +
                                    Tensor::shape_string(patch.shape));
    if (patch.shape[1] != model.cfg.input_height || patch.shape[2] != model.cfg.input_width)
        throw std::invalid_argument("predict_mask: patch " + Tensor::shape_string(patch.shape) +
                                    " does not match configured " +
                                    std::to_string(model.cfg.input_width) + "x" +
                                    std::to_string(model.cfg.input_height));
    Tensor batch({1, patch.shape[0], patch.shape[1], patch.shape[2]}, patch.data);
    const Tensor probs = segmenter_forward(model, batch);
    ProbabilityMask pm(model.cfg.input_width, model.cfg.input_height);
    pm.probs = probs.data;
    return {pm, threshold_mask(pm, 0.5)};
}

Checkpoint segmenter_checkpoint(const SegmenterModel& model) {
    Checkpoint ckpt;
    for (std::size_t i = 0; i < model.encoder.size(); ++i) {
        ckpt.add("encoder." + std::to_string(i) + ".weight", model.encoder[i].params.weights);
        ckpt.add("encoder." + std::to_string(i) + ".bias", model.encoder[i].params.bias);
    }
    for (std::size_t i = 0; i < model.decoder.size(); ++i) {
        ckpt.add("decoder." + std::to_string(i) + ".weight", model.decoder[i].params.weights);
        ckpt.add("decoder." + std::to_string(i) + ".bias", model.decoder[i].params.bias);
    }
    ckpt.add("classifier.weight", model.classifier.params.weights);
    ckpt.add("classifier.bias", model.classifier.params.bias);
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

void load_segmenter_weights(SegmenterModel& model, const Checkpoint& ckpt) {
    for (std::size_t i = 0; i < model.encoder.size(); ++i) {
        load_named(model.encoder[i].params.weights, ckpt,
                   "encoder." + std::to_string(i) + ".weight");
        load_named(model.encoder[i].params.bias, ckpt, "encoder." + std::to_string(i) + ".bias");
    }
    for (std::size_t i = 0; i < model.decoder.size(); ++i) {
        load_named(model.decoder[i].params.weights, ckpt,
                   "decoder." + std::to_string(i) + ".weight");
        load_named(model.decoder[i].params.bias, ckpt, "decoder." + std::to_string(i) + ".bias");
    }
    load_named(model.classifier.params.weights, ckpt, "classifier.weight");
    load_named(model.classifier.params.bias, ckpt, "classifier.bias");
}

namespace {

struct SegSampleGrads {
    std::vector<ConvGrads> encoder;
    std::vector<ConvGrads> decoder;
    ConvGrads classifier;
    double loss = 0.0;
};

Tensor mask_to_target(const PixelMask& mask) {
    Tensor t({1, 1, mask.height, mask.width});
    for (std::size_t i = 0; i < mask.labels.size(); ++i)
        t.data[i] = mask.labels[i] ? 1.0 : 0.0;
    return t;
}

SegSampleGrads segmenter_sample_grads(const SegmenterModel& model, const SegSample& sample,
                                      const MfbWeights& weights) {
    Tensor batch({1, sample.image.shape[0], sample.image.shape[1], sample.image.shape[2]},
                 sample.image.data);
    SegmenterTrace trace;
    segmenter_forward(model, batch, &trace);
    const Tensor targets = mask_to_target(sample.mask);
    Tensor prob_grad;
    SegSampleGrads out;
    out.loss = seg_loss_batch(trace.probs, targets, weights, &prob_grad);

    // Same walk as segmenter_backward, but into per-sample buffers so batch
    // members can run concurrently and reduce in a fixed order.
    Tensor logit_grad = sigmoid_backward_from_output(trace.probs, prob_grad);
    out.classifier = conv2d_backward(trace.classifier_input, model.classifier.params,
                                     logit_grad, 1, 0);
    out.decoder.resize(model.decoder.size());
    Tensor up = out.classifier.input_grad;
    for (std::size_t i = model.decoder.size(); i-- > 0;) {
        Tensor pre_grad = leaky_relu_backward(trace.dec_preacts[i], up);
        out.decoder[i] = conv2d_backward(trace.dec_inputs[i], model.decoder[i].params, pre_grad,
                                         1, 1);
        const PoolIndices& idx = trace.pool_indices[model.decoder.size() - 1 - i];
        up = maxunpool2x2_backward(out.decoder[i].input_grad, idx);
    }
    out.encoder.resize(model.encoder.size());
    for (std::size_t i = model.encoder.size(); i-- > 0;) {
        Tensor post_grad = maxpool2x2_backward(up, trace.pool_indices[i]);
        Tensor pre_grad = leaky_relu_backward(trace.enc_preacts[i], post_grad);
        out.encoder[i] = conv2d_backward(trace.enc_inputs[i], model.encoder[i].params, pre_grad,
                                         1, 1);
        up = std::move(out.encoder[i].input_grad);
    }
    return out;
}

void accumulate(Tensor& dst, const Tensor& src, double scale) {
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += scale * src.data[i];
}

}  // namespace

SegTrainLog train_segmenter(SegmenterModel& model, const std::vector<SegSample>& samples,
                            const MfbWeights& weights, const SegTrainConfig& cfg) {
    if (samples.empty()) throw std::invalid_argument("train_segmenter: no samples");
    if (cfg.batch_size == 0)
        throw std::invalid_argument("train_segmenter: batch_size must be > 0");
    const std::size_t workers = std::max<std::size_t>(1, cfg.workers);

    std::vector<AdamState> enc_state, dec_state;
    for (const ConvLayer& l : model.encoder) enc_state.emplace_back(l.params, cfg.learning_rate);
    for (const ConvLayer& l : model.decoder) dec_state.emplace_back(l.params, cfg.learning_rate);
    AdamState cls_state(model.classifier.params, cfg.learning_rate);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    SegTrainLog log;
    std::size_t last_snapshot = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - start);
            std::vector<SegSampleGrads> grads(count);
            if (workers == 1 || count == 1) {
                for (std::size_t k = 0; k < count; ++k)
                    grads[k] = segmenter_sample_grads(model, samples[order[start + k]], weights);
            } else {
                std::vector<std::thread> pool;
                for (std::size_t w = 0; w < std::min(workers, count); ++w)
                    pool.emplace_back([&, w] {
                        for (std::size_t k = w; k < count; k += workers)
                            grads[k] = segmenter_sample_grads(model, samples[order[start + k]],
                                                              weights);
                    });
                for (auto& t : pool) t.join();
            }

            for (std::size_t k = 0; k < count; ++k) epoch_loss += grads[k].loss;
            if (cfg.freeze_all) continue;

            for (ConvLayer& l : model.encoder) l.params.zero_grads();
            for (ConvLayer& l : model.decoder) l.params.zero_grads();
            model.classifier.params.zero_grads();
            const double scale = 1.0 / static_cast<double>(count);
            for (std::size_t k = 0; k < count; ++k) {
                for (std::size_t li = 0; li < model.encoder.size(); ++li) {
                    accumulate(model.encoder[li].params.weight_grad,
                               grads[k].encoder[li].weight_grad, scale);
                    accumulate(model.encoder[li].params.bias_grad,
                               grads[k].encoder[li].bias_grad, scale);
                }
                for (std::size_t li = 0; li < model.decoder.size(); ++li) {
                    accumulate(model.decoder[li].params.weight_grad,
                               grads[k].decoder[li].weight_grad, scale);
                    accumulate(model.decoder[li].params.bias_grad,
                               grads[k].decoder[li].bias_grad, scale);
                }
                accumulate(model.classifier.params.weight_grad, grads[k].classifier.weight_grad,
                           scale);
                accumulate(model.classifier.params.bias_grad, grads[k].classifier.bias_grad,
                           scale);
            }

            for (std::size_t li = 0; li < model.encoder.size(); ++li)
                adam_step(model.encoder[li].params, enc_state[li]);
            for (std::size_t li = 0; li < model.decoder.size(); ++li)
                adam_step(model.decoder[li].params, dec_state[li]);
            adam_step(model.classifier.params, cls_state);
        }

        epoch_loss /= static_cast<double>(samples.size());
        if (!std::isfinite(epoch_loss))
            throw NumericError("train_segmenter: non-finite loss at epoch " +
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

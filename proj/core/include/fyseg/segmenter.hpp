#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "fyseg/adam.hpp"
#include "fyseg/checkpoint.hpp"
#include "fyseg/layers.hpp"
#include "fyseg/mask.hpp"
#include "fyseg/rng.hpp"
#include "fyseg/tensor.hpp"

namespace fyseg {

struct SegConfig {
    std::size_t input_height = 96;
    std::size_t input_width = 128;
    std::vector<std::size_t> encoder_channels = {8, 16};
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;

    void validate() const;
};

// Class weights of the median-frequency-balanced loss.
struct MfbWeights {
    double background = 1.0;
    double lesion = 1.0;
};

// Class frequencies over the whole training collection; weight(c) =
// median(frequencies) / frequency(c). Rejects collections where a class
// never occurs.
MfbWeights compute_mfb(const std::vector<PixelMask>& training_masks);

// Mean over pixels of -phi_y * [y log p + (1-y) log(1-p)], probabilities
// clamped to [1e-7, 1 - 1e-7].
double seg_loss(const ProbabilityMask& pred, const PixelMask& truth, const MfbWeights& weights);

// Batch form on [N,1,H,W] tensors (targets hold 0/1); optionally fills
// d(loss)/d(probs). Zero gradient where the clamp is active.
double seg_loss_batch(const Tensor& probs, const Tensor& targets, const MfbWeights& weights,
                      Tensor* prob_grad = nullptr);

// Symmetric encoder-decoder: each encoder stage is conv(3x3) + leaky ReLU +
// 2x2 max-pool with recorded indices; each decoder stage unpools with the
// mirrored encoder's indices then conv + leaky ReLU; a final 1x1 conv +
// sigmoid emits one probability channel.
struct SegmenterModel {
    SegConfig cfg;
    std::size_t in_channels = 3;
    std::vector<ConvLayer> encoder;
    std::vector<ConvLayer> decoder;
    ConvLayer classifier;
};

SegmenterModel build_segmenter(const SegConfig& cfg, std::size_t in_channels, Rng& rng);

struct SegmenterTrace {
    std::vector<Tensor> enc_inputs;
    std::vector<Tensor> enc_preacts;
    std::vector<PoolIndices> pool_indices;
    std::vector<Tensor> dec_inputs;  // unpooled activations entering each decoder conv
    std::vector<Tensor> dec_preacts;
    Tensor classifier_input;
    Tensor probs;
};

Tensor segmenter_forward(const SegmenterModel& model, const Tensor& images,
                         SegmenterTrace* trace = nullptr);

void segmenter_backward(SegmenterModel& model, const SegmenterTrace& trace,
                        const Tensor& prob_grad);

// Probability map plus its 0.5-threshold binarization for one [C,H,W] patch.
std::pair<ProbabilityMask, PixelMask> predict_mask(const SegmenterModel& model,
                                                   const Tensor& patch);

Checkpoint segmenter_checkpoint(const SegmenterModel& model);
void load_segmenter_weights(SegmenterModel& model, const Checkpoint& ckpt);

struct SegSample {
    Tensor image;  // [C,H,W] in [0,1]
    PixelMask mask;
};

struct SegTrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
    bool freeze_all = false;
    std::size_t workers = 1;
    std::function<void(std::size_t epoch, const SegmenterModel&)> on_checkpoint;
    std::size_t checkpoint_every = 0;
};

struct SegTrainLog {
    std::vector<double> epoch_loss;
};

// MFB weights must come from the training split only.
SegTrainLog train_segmenter(SegmenterModel& model, const std::vector<SegSample>& samples,
                            const MfbWeights& weights, const SegTrainConfig& cfg);

}  // namespace fyseg

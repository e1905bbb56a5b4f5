#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fyseg/adam.hpp"
#include "fyseg/checkpoint.hpp"
#include "fyseg/geometry.hpp"
#include "fyseg/layers.hpp"
#include "fyseg/rng.hpp"
#include "fyseg/tensor.hpp"

namespace fyseg {

struct DetectorConfig {
    std::size_t grid = 4;            // S: cells per side
    std::size_t boxes_per_cell = 3;  // B
    std::size_t classes = 1;         // C
    std::vector<std::pair<double, double>> anchors = {{0.1, 0.1}, {0.3, 0.3}, {0.6, 0.6}};
    double lambda_coord = 5.0;
    double lambda_noobj = 0.5;
    std::size_t input_side = 416;
    double nms_iou_threshold = 0.2;
    double confidence_floor = 0.25;

    std::size_t head_channels() const { return boxes_per_cell * (5 + classes); }
    std::size_t cell_count() const { return grid * grid; }
    void validate() const;
};

struct Detection {
    BoundingBox box;
    double objectness = 0.0;   // Pr(object)
    double class_score = 0.0;  // Pr(Class | object), best class
    double confidence = 0.0;   // objectness * class_score at test time
    std::size_t class_index = 0;
};

// Ground truth routed onto the grid: the cell holding a truth center owns it,
// and within that cell one predictor is responsible (highest IOU, ties to
// the lowest box index).
struct TargetAssignment {
    std::size_t grid = 0;
    std::size_t boxes_per_cell = 0;
    std::size_t classes = 1;
    std::vector<std::uint8_t> cell_has_object;  // S*S
    std::vector<int> responsible_box;           // S*S, -1 when no object
    std::vector<BoundingBox> cell_truth;        // S*S
    std::vector<double> cell_class;             // S*S*C one-hot targets
    std::vector<double> target_confidence;      // S*S: IOU of responsible box vs truth
    std::size_t dropped_truths = 0;             // extra centers landing in an occupied cell
};

double confidence_score(double objectness_prob, double iou_with_truth);

// Per-(cell,box) decode of one image of the raw head tensor, without
// clamping: cx=(col+sig(tx))/S, cy=(row+sig(ty))/S, w=pw*exp(tw),
// h=ph*exp(th). Index layout: (row*S + col)*B + j.
std::vector<BoundingBox> decode_boxes(const Tensor& raw, std::size_t image,
                                      const DetectorConfig& cfg);

// Full test-time decode: boxes clamped to the unit square, confidence =
// sigmoid(t_o) * best class probability. One detection list per image.
std::vector<std::vector<Detection>> decode_head(const Tensor& raw, const DetectorConfig& cfg);

TargetAssignment assign_targets(const std::vector<BoundingBox>& truth_boxes,
                                const std::vector<BoundingBox>& decoded_boxes,
                                const DetectorConfig& cfg);

struct YoloLossParts {
    double localization = 0.0;
    double confidence_obj = 0.0;
    double confidence_noobj = 0.0;
    double classification = 0.0;
    double total() const {
        return localization + confidence_obj + confidence_noobj + classification;
    }
};

// Sum-squared detector loss evaluated on the decoded predictions; mean over
// the batch when raw holds several images. Targets (including the confidence
// target) are read from the assignments, so the loss is a smooth function of
// the raw tensor for a fixed assignment.
YoloLossParts yolo_loss(const Tensor& raw, const std::vector<TargetAssignment>& assignments,
                        const DetectorConfig& cfg);

// Same value as yolo_loss; additionally fills d(total)/d(raw).
YoloLossParts yolo_loss_backward(const Tensor& raw,
                                 const std::vector<TargetAssignment>& assignments,
                                 const DetectorConfig& cfg, Tensor& raw_grad);

// Greedy suppression: highest confidence first, keep a detection iff its IOU
// with every kept one is below the threshold. Stable among kept.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

struct BackboneStage {
    std::size_t channels = 0;
    std::size_t stride = 1;
};

// Tiny convolutional detector: 3x3/pad-1 backbone stages with leaky ReLU,
// then a linear 1x1 head with B*(5+C) channels.
struct DetectorModel {
    DetectorConfig cfg;
    std::vector<BackboneStage> stages;
    std::size_t in_channels = 3;
    std::vector<ConvLayer> backbone;
    ConvLayer head;
};

DetectorModel build_detector(const DetectorConfig& cfg, const std::vector<BackboneStage>& stages,
                             std::size_t in_channels, Rng& rng);

struct DetectorTrace {
    std::vector<Tensor> stage_inputs;  // input of each backbone conv
    std::vector<Tensor> preacts;       // conv output before leaky ReLU
    Tensor head_input;
    Tensor raw;
};

Tensor detector_forward(const DetectorModel& model, const Tensor& images,
                        DetectorTrace* trace = nullptr);

// Accumulates parameter gradients; when head_only is set the backbone
// gradients are skipped entirely.
void detector_backward(DetectorModel& model, const DetectorTrace& trace, const Tensor& raw_grad,
                       bool head_only = false);

// Decode + floor + NMS for a single [C,H,W] image already at input_side.
std::vector<Detection> detect(const DetectorModel& model, const Tensor& image);

Checkpoint detector_checkpoint(const DetectorModel& model);
void load_detector_weights(DetectorModel& model, const Checkpoint& ckpt);

// Transfer protocol: every non-head tensor is loaded (shape mismatch is an
// error), the head is rebuilt for the model's class count with fresh
// initialization. Freezing is applied at training time.
void finetune_head(DetectorModel& model, const Checkpoint& ckpt, Rng& rng);

struct DetectorSample {
    Tensor image;  // [C, side, side], values in [0,1]
    std::vector<BoundingBox> truths;
};

struct DetectorTrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
    bool freeze_backbone = false;
    std::size_t workers = 1;
    std::size_t checkpoint_every = 0;  // epochs between snapshots, 0 = none
    std::function<void(std::size_t epoch, const DetectorModel&)> on_checkpoint;
};

struct TrainLog {
    std::vector<double> epoch_loss;
};

TrainLog train_detector(DetectorModel& model, const std::vector<DetectorSample>& samples,
                        const DetectorTrainConfig& cfg);

}  // namespace fyseg

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fyseg/detector.hpp"
#include "fyseg/rng.hpp"
#include "oracles.hpp"

using namespace fyseg;

namespace {

DetectorConfig single_box_config() {
    DetectorConfig cfg;
    cfg.grid = 1;
    cfg.boxes_per_cell = 1;
    cfg.classes = 1;
    cfg.anchors = {{0.3, 0.3}};
    cfg.input_side = 16;
    return cfg;
}

// Raw head tensor with every channel at a constant.
Tensor zero_raw(const DetectorConfig& cfg, std::size_t n = 1) {
    return Tensor({n, cfg.head_channels(), cfg.grid, cfg.grid});
}

void set_box_channel(Tensor& raw, const DetectorConfig& cfg, std::size_t j, std::size_t k,
                     std::size_t row, std::size_t col, double v) {
    raw.at4(0, j * (5 + cfg.classes) + k, row, col) = v;
}

BoundingBox random_box(Rng& rng) {
    BoundingBox b;
    b.w = rng.uniform(0.08, 0.7);
    b.h = rng.uniform(0.08, 0.7);
    b.cx = rng.uniform(0.2, 0.8);
    b.cy = rng.uniform(0.2, 0.8);
    return b;
}

}  // namespace

TEST_CASE("iou: identity, disjoint, and the 1/7 overlap case") {
    const BoundingBox a = BoundingBox::from_corners(0, 0, 2, 2);
    CHECK(iou(a, a) == 1.0);
    const BoundingBox far = BoundingBox::from_corners(5, 5, 6, 6);
    CHECK(iou(a, far) == 0.0);
    const BoundingBox b = BoundingBox::from_corners(1, 1, 3, 3);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("iou: zero-area boxes score zero against everything") {
    const BoundingBox degenerate{0.5, 0.5, 0.0, 0.0};
    const BoundingBox normal{0.5, 0.5, 0.4, 0.4};
    CHECK(iou(degenerate, normal) == 0.0);
    CHECK(iou(degenerate, degenerate) == 0.0);
}

TEST_CASE("iou: symmetric, bounded, 1 only for identical boxes, raster agreement") {
    Rng rng(51);
    for (int i = 0; i < 60; ++i) {
        const BoundingBox a = random_box(rng);
        const BoundingBox b = random_box(rng);
        const double ab = iou(a, b);
        CHECK(ab == iou(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
        if (ab == 1.0) {
            CHECK(a.cx == b.cx);
            CHECK(a.w == b.w);
        }
        CHECK(std::abs(ab - oracle::raster_iou(a, b, 500)) < 4e-3);
    }
}

TEST_CASE("confidence_score is the product of Pr(object) and IOU") {
    CHECK(confidence_score(0.0, 0.9) == 0.0);
    CHECK(confidence_score(1.0, 0.37) == 0.37);
    CHECK(confidence_score(0.8, 0.5) == doctest::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("decode: zero offsets land at cell centers") {
    DetectorConfig cfg;
    cfg.grid = 4;
    cfg.boxes_per_cell = 1;
    cfg.classes = 1;
    cfg.anchors = {{0.2, 0.2}};
    const Tensor raw = zero_raw(cfg);
    const auto boxes = decode_boxes(raw, 0, cfg);
    const BoundingBox b = boxes[(2 * 4 + 1) * 1];  // row 2, col 1
    CHECK(b.cx == doctest::Approx(0.375).epsilon(1e-15));
    CHECK(b.cy == doctest::Approx(0.625).epsilon(1e-15));
    CHECK(b.w == doctest::Approx(0.2).epsilon(1e-15));   // exp(0) anchor identity
    CHECK(b.h == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("decode_head: zero objectness logit gives probability one half") {
    DetectorConfig cfg = single_box_config();
    const Tensor raw = zero_raw(cfg);
    const auto dets = decode_head(raw, cfg);
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].size() == 1);
    CHECK(dets[0][0].objectness == 0.5);
    CHECK(dets[0][0].class_score == 0.5);
    CHECK(dets[0][0].confidence == 0.25);
}

TEST_CASE("decode rejects mismatched channel counts") {
    DetectorConfig cfg = single_box_config();
    CHECK_THROWS_AS(decode_head(Tensor({1, 7, 1, 1}), cfg), std::invalid_argument);
}

TEST_CASE("assign_targets: truth at (0.5, 0.5) with S=2 lands in cell (1,1)") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 1;
    cfg.anchors = {{0.3, 0.3}};
    const Tensor raw = zero_raw(cfg);
    const auto boxes = decode_boxes(raw, 0, cfg);
    const auto a = assign_targets({BoundingBox{0.5, 0.5, 0.2, 0.2}}, boxes, cfg);
    CHECK(a.cell_has_object[1 * 2 + 1] == 1);
    CHECK(a.cell_has_object[0] == 0);
    CHECK(a.responsible_box[1 * 2 + 1] == 0);
}

TEST_CASE("assign_targets: no truths means no flags set") {
    DetectorConfig cfg = single_box_config();
    const auto boxes = decode_boxes(zero_raw(cfg), 0, cfg);
    const auto a = assign_targets({}, boxes, cfg);
    for (auto v : a.cell_has_object) CHECK(v == 0);
    for (auto v : a.responsible_box) CHECK(v == -1);
}

TEST_CASE("assign_targets: the anchor matching the truth shape is responsible") {
    DetectorConfig cfg;
    cfg.grid = 1;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.3, 0.3}, {0.6, 0.6}};
    const auto boxes = decode_boxes(zero_raw(cfg), 0, cfg);
    const auto a = assign_targets({BoundingBox{0.5, 0.5, 0.3, 0.3}}, boxes, cfg);
    CHECK(a.responsible_box[0] == 0);
    CHECK(a.target_confidence[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("assign_targets: larger-area truth keeps a contested cell") {
    DetectorConfig cfg = single_box_config();
    const auto boxes = decode_boxes(zero_raw(cfg), 0, cfg);
    const BoundingBox small{0.45, 0.45, 0.1, 0.1};
    const BoundingBox large{0.55, 0.55, 0.4, 0.4};
    auto a = assign_targets({small, large}, boxes, cfg);
    CHECK(a.dropped_truths == 1);
    CHECK(a.cell_truth[0].w == doctest::Approx(0.4));
    a = assign_targets({large, small}, boxes, cfg);
    CHECK(a.dropped_truths == 1);
    CHECK(a.cell_truth[0].w == doctest::Approx(0.4));
}

TEST_CASE("assign_targets: responsibility lands in cell floor(c*S) clamped") {
    DetectorConfig cfg;
    cfg.grid = 4;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.2, 0.2}, {0.4, 0.4}};
    const auto boxes = decode_boxes(zero_raw(cfg), 0, cfg);
    Rng rng(53);
    for (int i = 0; i < 50; ++i) {
        BoundingBox truth = random_box(rng);
        if (i == 0) truth.cx = truth.cy = 1.0;  // exactly on the outer boundary
        const auto a = assign_targets({truth}, boxes, cfg);
        const std::size_t col =
            std::min<std::size_t>(3, static_cast<std::size_t>(std::floor(truth.cx * 4)));
        const std::size_t row =
            std::min<std::size_t>(3, static_cast<std::size_t>(std::floor(truth.cy * 4)));
        CHECK(a.cell_has_object[row * 4 + col] == 1);
        CHECK(a.responsible_box[row * 4 + col] >= 0);
    }
}

TEST_CASE("yolo_loss: perfect prediction with unit IOU scores zero") {
    DetectorConfig cfg = single_box_config();
    Tensor raw = zero_raw(cfg);
    set_box_channel(raw, cfg, 0, 4, 0, 0, 40.0);  // objectness -> 1.0
    set_box_channel(raw, cfg, 0, 5, 0, 0, 40.0);  // class -> 1.0
    const auto boxes = decode_boxes(raw, 0, cfg);
    const auto a = assign_targets({BoundingBox{0.5, 0.5, 0.3, 0.3}}, boxes, cfg);
    const auto parts = yolo_loss(raw, {a}, cfg);
    CHECK(std::abs(parts.total()) < 1e-12);
}

TEST_CASE("yolo_loss: pure center error of 0.1 gives localization 0.05") {
    DetectorConfig cfg = single_box_config();
    Tensor raw = zero_raw(cfg);
    set_box_channel(raw, cfg, 0, 5, 0, 0, 40.0);  // class -> 1.0
    const auto boxes = decode_boxes(raw, 0, cfg);
    // Truth shares extents and cy; predicted cx is 0.5 vs truth 0.4.
    auto a = assign_targets({BoundingBox{0.4, 0.5, 0.3, 0.3}}, boxes, cfg);
    REQUIRE(a.target_confidence[0] == doctest::Approx(0.5).epsilon(1e-12));
    // Objectness 0.5 equals the IOU target, so only localization remains.
    const auto parts = yolo_loss(raw, {a}, cfg);
    CHECK(std::abs(parts.total() - 0.05) < 1e-12);
    CHECK(std::abs(parts.localization - 0.05) < 1e-12);
    CHECK(std::abs(parts.confidence_obj) < 1e-12);
    CHECK(std::abs(parts.confidence_noobj) < 1e-12);
    CHECK(std::abs(parts.classification) < 1e-12);
}

TEST_CASE("yolo_loss: empty image with confidence 0.2 gives 0.02") {
    DetectorConfig cfg = single_box_config();
    Tensor raw = zero_raw(cfg);
    set_box_channel(raw, cfg, 0, 4, 0, 0, std::log(0.2 / 0.8));
    const auto boxes = decode_boxes(raw, 0, cfg);
    const auto a = assign_targets({}, boxes, cfg);
    const auto parts = yolo_loss(raw, {a}, cfg);
    CHECK(std::abs(parts.total() - 0.02) < 1e-12);
    CHECK(std::abs(parts.confidence_noobj - 0.02) < 1e-12);
}

TEST_CASE("yolo_loss: total is the exact sum of its four parts, non-negative") {
    DetectorConfig cfg;
    cfg.grid = 3;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.2, 0.2}, {0.5, 0.5}};
    Rng rng(57);
    for (int i = 0; i < 20; ++i) {
        Tensor raw({1, cfg.head_channels(), 3, 3});
        for (double& v : raw.data) v = rng.uniform(-2.0, 2.0);
        const auto boxes = decode_boxes(raw, 0, cfg);
        const auto a = assign_targets({random_box(rng), random_box(rng)}, boxes, cfg);
        const auto parts = yolo_loss(raw, {a}, cfg);
        CHECK(parts.total() ==
              parts.localization + parts.confidence_obj + parts.confidence_noobj +
                  parts.classification);
        CHECK(parts.total() >= 0.0);
        CHECK(parts.localization >= 0.0);
        CHECK(parts.confidence_noobj >= 0.0);
    }
}

TEST_CASE("yolo_loss backward matches finite differences on the raw tensor") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.25, 0.25}, {0.5, 0.5}};
    Rng rng(59);
    Tensor raw({1, cfg.head_channels(), 2, 2});
    for (double& v : raw.data) v = rng.uniform(-1.5, 1.5);
    const auto boxes = decode_boxes(raw, 0, cfg);
    const std::vector<TargetAssignment> a{
        assign_targets({BoundingBox{0.3, 0.3, 0.25, 0.2}, BoundingBox{0.7, 0.8, 0.3, 0.35}},
                       boxes, cfg)};
    Tensor grad;
    yolo_loss_backward(raw, a, cfg, grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < raw.numel(); ++i) {
        const double saved = raw.data[i];
        raw.data[i] = saved + h;
        const double hi = yolo_loss(raw, a, cfg).total();
        raw.data[i] = saved - h;
        const double lo = yolo_loss(raw, a, cfg).total();
        raw.data[i] = saved;
        const double fd = (hi - lo) / (2 * h);
        CHECK(std::abs(fd - grad.data[i]) /
                  std::max({std::abs(fd), std::abs(grad.data[i]), 1e-3}) <
              1e-4);
    }
}

TEST_CASE("nms: singleton survives") {
    Detection d;
    d.box = {0.5, 0.5, 0.2, 0.2};
    d.confidence = 0.7;
    const auto kept = nms({d}, 0.2);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].confidence == 0.7);
}

TEST_CASE("nms: identical boxes keep only the higher confidence") {
    Detection a, b;
    a.box = b.box = {0.5, 0.5, 0.2, 0.2};
    a.confidence = 0.9;
    b.confidence = 0.8;
    const auto kept = nms({b, a}, 0.2);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].confidence == 0.9);
}

TEST_CASE("nms matches the brute-force reference on random sets") {
    Rng rng(61);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Detection> dets(1 + rng.uniform_index(10));
        for (auto& d : dets) {
            d.box = random_box(rng);
            d.confidence = rng.uniform(0.01, 1.0);
        }
        const double thr = rng.uniform(0.1, 0.6);
        const auto kept = nms(dets, thr);
        const auto want = oracle::brute_force_nms(dets, thr);
        REQUIRE(kept.size() == want.size());
        for (std::size_t i = 0; i < kept.size(); ++i)
            CHECK(kept[i].confidence == want[i].confidence);
    }
}

TEST_CASE("nms is invariant to input permutation and confidence scaling") {
    Rng rng(67);
    std::vector<Detection> dets(8);
    for (auto& d : dets) {
        d.box = random_box(rng);
        d.confidence = rng.uniform(0.01, 1.0);
    }
    const auto base = nms(dets, 0.3);

    std::vector<Detection> shuffled = dets;
    rng.shuffle(shuffled);
    const auto permuted = nms(shuffled, 0.3);
    REQUIRE(permuted.size() == base.size());
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(permuted[i].confidence == base[i].confidence);

    std::vector<Detection> scaled = dets;
    for (auto& d : scaled) d.confidence *= 0.37;
    const auto rescaled = nms(scaled, 0.3);
    REQUIRE(rescaled.size() == base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(rescaled[i].box.cx == base[i].box.cx);
        CHECK(rescaled[i].box.cy == base[i].box.cy);
    }
}

TEST_CASE("build_detector: head channels follow B*(5+C)") {
    DetectorConfig cfg;
    cfg.grid = 4;
    cfg.boxes_per_cell = 3;
    cfg.classes = 1;
    cfg.input_side = 64;
    Rng rng(71);
    const DetectorModel m = build_detector(cfg, {{8, 2}, {16, 2}, {16, 2}, {16, 2}}, 3, rng);
    CHECK(cfg.head_channels() == 18);
    CHECK(m.head.params.weights.shape == std::vector<std::size_t>{18, 16, 1, 1});

    const Tensor out = detector_forward(m, Tensor({2, 3, 64, 64}));
    CHECK(out.shape == std::vector<std::size_t>{2, 18, 4, 4});
}

TEST_CASE("build_detector: S=7 grid yields a 7x7x18 output tensor") {
    DetectorConfig cfg;
    cfg.grid = 7;
    cfg.boxes_per_cell = 3;
    cfg.classes = 1;
    cfg.input_side = 56;
    Rng rng(73);
    const DetectorModel m = build_detector(cfg, {{4, 2}, {8, 2}, {8, 2}}, 3, rng);
    const Tensor out = detector_forward(m, Tensor({1, 3, 56, 56}));
    CHECK(out.shape == std::vector<std::size_t>{1, 18, 7, 7});
}

TEST_CASE("build_detector rejects a backbone that misses the grid side") {
    DetectorConfig cfg;
    cfg.grid = 4;
    cfg.input_side = 64;
    Rng rng(79);
    CHECK_THROWS_WITH_AS(build_detector(cfg, {{8, 2}, {8, 2}}, 3, rng),
                         doctest::Contains("does not match grid"), std::invalid_argument);
}

TEST_CASE("finetune_head: backbone weights load, head is rebuilt") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 3;
    cfg.classes = 2;
    cfg.anchors = {{0.1, 0.1}, {0.3, 0.3}, {0.6, 0.6}};
    cfg.input_side = 8;
    Rng rng(83);
    const std::vector<BackboneStage> stages{{4, 2}, {4, 2}};
    DetectorModel source = build_detector(cfg, stages, 3, rng);
    const Checkpoint ckpt = detector_checkpoint(source);

    DetectorConfig target_cfg = cfg;
    target_cfg.classes = 1;
    Rng rng2(97);
    DetectorModel target = build_detector(target_cfg, stages, 3, rng2);
    finetune_head(target, ckpt, rng2);

    CHECK(target.head.params.weights.shape == std::vector<std::size_t>{18, 4, 1, 1});
    for (std::size_t li = 0; li < stages.size(); ++li)
        for (std::size_t i = 0; i < source.backbone[li].params.weights.numel(); ++i)
            CHECK(target.backbone[li].params.weights.data[i] ==
                  doctest::Approx(source.backbone[li].params.weights.data[i]).epsilon(1e-7));
}

TEST_CASE("finetune_head: same-config round trip keeps backbone features identical") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.2, 0.2}, {0.5, 0.5}};
    cfg.input_side = 8;
    Rng rng(101);
    const std::vector<BackboneStage> stages{{4, 2}, {6, 2}};
    DetectorModel source = build_detector(cfg, stages, 3, rng);
    DetectorModel target = build_detector(cfg, stages, 3, rng);
    finetune_head(target, detector_checkpoint(source), rng);

    Rng img_rng(5);
    Tensor image({1, 3, 8, 8});
    for (double& v : image.data) v = img_rng.uniform(0.0, 1.0);
    DetectorTrace ts, tt;
    detector_forward(source, image, &ts);
    detector_forward(target, image, &tt);
    for (std::size_t i = 0; i < ts.head_input.numel(); ++i)
        CHECK(ts.head_input.data[i] == tt.head_input.data[i]);
}

TEST_CASE("finetune_head rejects a shape mismatch on a non-head layer") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.2, 0.2}, {0.5, 0.5}};
    cfg.input_side = 8;
    Rng rng(103);
    DetectorModel narrow = build_detector(cfg, {{4, 2}, {6, 2}}, 3, rng);
    DetectorModel wide = build_detector(cfg, {{8, 2}, {6, 2}}, 3, rng);
    CHECK_THROWS(finetune_head(wide, detector_checkpoint(narrow), rng));
}

TEST_CASE("frozen backbone stays bit-identical through training") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.3, 0.3}, {0.6, 0.6}};
    cfg.input_side = 8;
    Rng rng(107);
    DetectorModel m = build_detector(cfg, {{4, 2}, {4, 2}}, 3, rng);
    const Checkpoint before = detector_checkpoint(m);

    std::vector<DetectorSample> samples(3);
    Rng data_rng(11);
    for (auto& s : samples) {
        s.image = Tensor({3, 8, 8});
        for (double& v : s.image.data) v = data_rng.uniform(0.0, 1.0);
        s.truths = {random_box(data_rng)};
    }
    DetectorTrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    tc.freeze_backbone = true;
    train_detector(m, samples, tc);

    const Checkpoint after = detector_checkpoint(m);
    for (std::size_t e = 0; e + 2 < before.entries.size(); ++e)  // all backbone tensors
        CHECK(before.entries[e].second.data == after.entries[e].second.data);
    CHECK(before.entries.back().second.data != after.entries.back().second.data);
}

TEST_CASE("training is bit-deterministic and worker-count independent") {
    DetectorConfig cfg;
    cfg.grid = 2;
    cfg.boxes_per_cell = 2;
    cfg.anchors = {{0.3, 0.3}, {0.6, 0.6}};
    cfg.input_side = 8;

    auto run = [&](std::size_t workers) {
        Rng rng(109);
        DetectorModel m = build_detector(cfg, {{4, 2}, {4, 2}}, 3, rng);
        std::vector<DetectorSample> samples(5);
        Rng data_rng(13);
        for (auto& s : samples) {
            s.image = Tensor({3, 8, 8});
            for (double& v : s.image.data) v = data_rng.uniform(0.0, 1.0);
            s.truths = {random_box(data_rng)};
        }
        DetectorTrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 2;
        tc.seed = 21;
        tc.workers = workers;
        train_detector(m, samples, tc);
        return serialize_checkpoint(detector_checkpoint(m));
    };
    const auto run1 = run(1);
    const auto run2 = run(1);
    const auto run4 = run(4);
    CHECK(run1 == run2);
    CHECK(run1 == run4);
}

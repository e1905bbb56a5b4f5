#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fyseg/image_io.hpp"
#include "fyseg/labels.hpp"
#include "fyseg/metrics.hpp"
#include "fyseg/rng.hpp"
#include "oracles.hpp"

using namespace fyseg;
namespace fs = std::filesystem;

namespace {

PixelMask full_mask(std::size_t side, std::uint8_t value) {
    PixelMask m(side, side);
    std::fill(m.labels.begin(), m.labels.end(), value);
    return m;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("fyseg_test_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("count_confusion: perfect positive and total miss") {
    const PixelMask lesion = full_mask(10, 1);
    const PixelMask bg = full_mask(10, 0);

    const ConfusionCounts perfect = count_confusion(lesion, lesion);
    CHECK(perfect.tp == 100);
    CHECK(perfect.fp + perfect.tn + perfect.fn == 0);

    const ConfusionCounts miss = count_confusion(bg, lesion);
    CHECK(miss.fn == 100);
    CHECK(miss.tp + miss.fp + miss.tn == 0);
}

TEST_CASE("count_confusion matches a direct contingency enumeration") {
    Rng rng(3);
    PixelMask pred(8, 8), truth(8, 8);
    for (auto& v : pred.labels) v = rng.chance(0.5) ? 1 : 0;
    for (auto& v : truth.labels) v = rng.chance(0.5) ? 1 : 0;
    const ConfusionCounts c = count_confusion(pred, truth);
    std::uint64_t want[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < 64; ++i) ++want[pred.labels[i]][truth.labels[i]];
    CHECK(c.tp == want[1][1]);
    CHECK(c.fp == want[1][0]);
    CHECK(c.fn == want[0][1]);
    CHECK(c.tn == want[0][0]);
    CHECK(c.total() == 64);
}

TEST_CASE("count_confusion rejects extent mismatches") {
    CHECK_THROWS_AS(count_confusion(PixelMask(4, 4), PixelMask(4, 5)), std::invalid_argument);
}

TEST_CASE("compute_metrics: the worked 4/1/1/94 example") {
    const MetricsReport r = compute_metrics({4, 1, 94, 1});
    CHECK(*r.dice == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(*r.jaccard == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(*r.accuracy == doctest::Approx(0.98).epsilon(1e-12));
    CHECK(*r.sensitivity == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(*r.specificity == doctest::Approx(94.0 / 95.0).epsilon(1e-12));
}

TEST_CASE("compute_metrics: all-zero counts give undefined markers, never a crash") {
    const MetricsReport r = compute_metrics({0, 0, 0, 0});
    CHECK(!r.accuracy);
    CHECK(!r.dice);
    CHECK(!r.jaccard);
    CHECK(!r.sensitivity);
    CHECK(!r.specificity);
}

TEST_CASE("compute_metrics: perfect mask scores ones") {
    const MetricsReport r = compute_metrics({50, 0, 14, 0});
    CHECK(*r.accuracy == 1.0);
    CHECK(*r.dice == 1.0);
    CHECK(*r.jaccard == 1.0);
    CHECK(*r.sensitivity == 1.0);
    CHECK(*r.specificity == 1.0);
}

TEST_CASE("dice equals 2J/(1+J) exactly in rational arithmetic") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        const std::uint64_t tp = rng.uniform_index(1000);
        const std::uint64_t fp = rng.uniform_index(1000);
        const std::uint64_t fn = rng.uniform_index(1000);
        // dice = 2tp / (2tp + fp + fn); 2J/(1+J) = 2tp / (jd + tp), jd = tp+fn+fp
        const unsigned __int128 lhs_num = 2 * tp;
        const unsigned __int128 lhs_den = 2 * tp + fp + fn;
        const unsigned __int128 rhs_num = 2 * tp;
        const unsigned __int128 rhs_den = (tp + fn + fp) + tp;
        if (lhs_den == 0) {
            CHECK(rhs_den == 0);
            continue;
        }
        CHECK(lhs_num * rhs_den == rhs_num * lhs_den);
    }
}

TEST_CASE("accuracy invariant under TP<->TN with FP<->FN; sensitivity/specificity swap") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        ConfusionCounts c{rng.uniform_index(50) + 1, rng.uniform_index(50) + 1,
                          rng.uniform_index(50) + 1, rng.uniform_index(50) + 1};
        const ConfusionCounts swapped{c.tn, c.fn, c.tp, c.fp};
        const MetricsReport a = compute_metrics(c);
        const MetricsReport b = compute_metrics(swapped);
        CHECK(*a.accuracy == doctest::Approx(*b.accuracy).epsilon(1e-15));
        CHECK(*a.sensitivity == doctest::Approx(*b.specificity).epsilon(1e-15));
        CHECK(*a.specificity == doctest::Approx(*b.sensitivity).epsilon(1e-15));
    }
}

TEST_CASE("localization_correct: identity, disjoint, and the 0.9 overlap case") {
    const BoundingBox a = BoundingBox::from_corners(0, 0, 10, 10);
    CHECK(localization_correct(a, a));
    CHECK(!localization_correct(a, BoundingBox::from_corners(20, 20, 30, 30)));
    const BoundingBox b = BoundingBox::from_corners(0, 0, 10, 9);
    CHECK(iou(a, b) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(localization_correct(a, b));
}

TEST_CASE("average_precision: perfect detector scores 1") {
    const PrCurve c = average_precision({true, true, true}, 3);
    CHECK(*c.average_precision == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("average_precision: the TP,FP,TP ranking with two truths") {
    const PrCurve c = average_precision({true, false, true}, 2);
    CHECK(*c.average_precision == doctest::Approx(0.5 + 0.5 * (2.0 / 3.0)).epsilon(1e-9));
}

TEST_CASE("average_precision: no detections scores 0, zero truths undefined") {
    CHECK(*average_precision({}, 3).average_precision == 0.0);
    CHECK(!average_precision({true}, 0).average_precision);
}

TEST_CASE("average_precision: recall is non-decreasing along the ranking") {
    Rng rng(13);
    std::vector<bool> flags;
    for (int i = 0; i < 30; ++i) flags.push_back(rng.chance(0.5));
    const PrCurve c = average_precision(flags, 12);
    for (std::size_t i = 1; i < c.points.size(); ++i)
        CHECK(c.points[i].recall >= c.points[i - 1].recall);
}

TEST_CASE("average_precision matches staircase numeric integration") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(20);
        std::vector<bool> flags;
        std::size_t tp = 0;
        for (std::size_t i = 0; i < n; ++i) {
            flags.push_back(rng.chance(0.5));
            tp += flags.back();
        }
        const std::size_t truths = tp + rng.uniform_index(5);
        if (truths == 0) continue;
        const PrCurve c = average_precision(flags, truths);
        CHECK(std::abs(*c.average_precision - oracle::staircase_ap(flags, truths)) < 1e-9);
    }
}

TEST_CASE("match_detections ranking is invariant to monotone confidence rescaling") {
    Rng rng(19);
    std::vector<Detection> dets(12);
    std::vector<BoundingBox> truths;
    for (int i = 0; i < 4; ++i)
        truths.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2});
    for (auto& d : dets) {
        d.box = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2};
        d.confidence = rng.uniform(0.01, 1.0);
    }
    const auto base = match_detections(dets, truths, 0.5);
    const auto ap_base = average_precision(base.matches, truths.size());

    std::vector<Detection> rescaled = dets;
    for (auto& d : rescaled) d.confidence = std::exp(3.0 * d.confidence) / 50.0;
    const auto scaled = match_detections(rescaled, truths, 0.5);
    const auto ap_scaled = average_precision(scaled.matches, truths.size());
    CHECK(base.matches == scaled.matches);
    CHECK(*ap_base.average_precision == *ap_scaled.average_precision);
}

TEST_CASE("evaluate_run: a directory compared to itself scores all ones") {
    TempDir dir("selfeval");
    Rng rng(23);
    for (int i = 0; i < 3; ++i) {
        PixelMask m(12, 12);
        for (auto& v : m.labels) v = rng.chance(0.5) ? 1 : 0;
        write_mask((dir.path / ("img" + std::to_string(i) + ".pgm")).string(), m);
    }
    const RunEvaluation ev = evaluate_run(dir.path.string(), dir.path.string(), {});
    REQUIRE(ev.per_image.size() == 3);
    CHECK(ev.unmatched_stems.empty());
    CHECK(*ev.mean_report.accuracy.value == 1.0);
    CHECK(*ev.mean_report.dice.value == 1.0);
    CHECK(*ev.pooled_report.jaccard == 1.0);
}

TEST_CASE("evaluate_run: single image makes both aggregations agree exactly") {
    TempDir pred("pred1"), truth("truth1");
    PixelMask p(10, 10), t(10, 10);
    Rng rng(29);
    for (std::size_t i = 0; i < 100; ++i) {
        p.labels[i] = rng.chance(0.5) ? 1 : 0;
        t.labels[i] = rng.chance(0.5) ? 1 : 0;
    }
    write_mask((pred.path / "a.pgm").string(), p);
    write_mask((truth.path / "a.pgm").string(), t);
    const RunEvaluation ev = evaluate_run(pred.path.string(), truth.path.string(), {});
    REQUIRE(ev.per_image.size() == 1);
    CHECK(*ev.mean_report.accuracy.value == *ev.pooled_report.accuracy);
    CHECK(*ev.mean_report.dice.value == *ev.pooled_report.dice);
    CHECK(*ev.mean_report.sensitivity.value == *ev.pooled_report.sensitivity);
}

TEST_CASE("evaluate_run: pooled counts equal hand pooling of two images") {
    TempDir pred("pred2"), truth("truth2");
    PixelMask p1 = full_mask(6, 1), t1 = full_mask(6, 1);     // all TP
    PixelMask p2 = full_mask(6, 0), t2 = full_mask(6, 1);     // all FN
    write_mask((pred.path / "x.pgm").string(), p1);
    write_mask((truth.path / "x.pgm").string(), t1);
    write_mask((pred.path / "y.pgm").string(), p2);
    write_mask((truth.path / "y.pgm").string(), t2);
    const RunEvaluation ev = evaluate_run(pred.path.string(), truth.path.string(), {});
    CHECK(ev.pooled.tp == 36);
    CHECK(ev.pooled.fn == 36);
    CHECK(*ev.pooled_report.sensitivity == doctest::Approx(0.5).epsilon(1e-12));
    // Mean of per-image sensitivity: (1 + 0)/2
    CHECK(*ev.mean_report.sensitivity.value == doctest::Approx(0.5).epsilon(1e-12));
    // Per-image dice for y is undefined-free (tp=0 but denominator fn>0) => 0
    CHECK(*ev.mean_report.dice.value == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("evaluate_run: unmatched stems are listed and skipped") {
    TempDir pred("pred3"), truth("truth3");
    write_mask((pred.path / "only_pred.pgm").string(), full_mask(4, 1));
    write_mask((pred.path / "both.pgm").string(), full_mask(4, 1));
    write_mask((truth.path / "both.pgm").string(), full_mask(4, 1));
    write_mask((truth.path / "only_truth.pgm").string(), full_mask(4, 0));
    const RunEvaluation ev = evaluate_run(pred.path.string(), truth.path.string(), {});
    REQUIRE(ev.per_image.size() == 1);
    CHECK(ev.per_image[0].stem == "both");
    REQUIRE(ev.unmatched_stems.size() == 2);
    CHECK(ev.unmatched_stems[0] == "only_pred");
    CHECK(ev.unmatched_stems[1] == "only_truth");
}

TEST_CASE("evaluate_run: detector AP and localization fraction from label files") {
    TempDir pred("pred4"), truth("truth4");
    fs::create_directories(pred.path / "detections");
    fs::create_directories(truth.path / "labels");

    // Image a: one truth, one exact detection. Image b: one truth, one bad box.
    write_label_file((truth.path / "labels" / "a.txt").string(),
                     {{0, {0.5, 0.5, 0.2, 0.2}}});
    write_label_file((truth.path / "labels" / "b.txt").string(),
                     {{0, {0.4, 0.4, 0.3, 0.3}}});
    Detection hit;
    hit.box = {0.5, 0.5, 0.2, 0.2};
    hit.confidence = 0.9;
    write_detection_file((pred.path / "detections" / "a.txt").string(), {hit});
    Detection miss;
    miss.box = {0.9, 0.9, 0.1, 0.1};
    miss.confidence = 0.8;
    write_detection_file((pred.path / "detections" / "b.txt").string(), {miss});

    const RunEvaluation ev = evaluate_run(pred.path.string(), truth.path.string(), {});
    REQUIRE(ev.ap.has_value());
    CHECK(ev.truth_box_count == 2);
    CHECK(*ev.ap == doctest::Approx(0.5).epsilon(1e-9));  // recall caps at 1/2, precision 1
    CHECK(*ev.localization_correct_fraction == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("run evaluation rendering includes the documented CSV columns") {
    TempDir dir("csv");
    write_mask((dir.path / "m.pgm").string(), full_mask(4, 1));
    const RunEvaluation ev = evaluate_run(dir.path.string(), dir.path.string(), {});
    const std::string csv = run_evaluation_csv(ev);
    CHECK(csv.find("stem,tp,fp,tn,fn,accuracy,dice,jaccard,sensitivity,specificity") == 0);
    CHECK(csv.find("\nm,16,0,0,0,") != std::string::npos);
    CHECK(csv.find("pooled,16,0,0,0,") != std::string::npos);
    const std::string text = run_evaluation_text(ev);
    CHECK(text.find("pooled-count metrics") != std::string::npos);
}

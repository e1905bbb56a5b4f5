#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fyseg/detector.hpp"
#include "fyseg/geometry.hpp"
#include "fyseg/mask.hpp"

namespace fyseg {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

// Ratios with explicit undefined markers on zero denominators.
struct MetricsReport {
    std::optional<double> accuracy;
    std::optional<double> dice;
    std::optional<double> jaccard;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
};

ConfusionCounts count_confusion(const PixelMask& pred, const PixelMask& truth);
MetricsReport compute_metrics(const ConfusionCounts& c);

// IOU strictly greater than 0.8.
bool localization_correct(const BoundingBox& pred, const BoundingBox& truth);

struct PrPoint {
    double recall = 0.0;
    double precision = 0.0;
};

struct PrCurve {
    std::vector<PrPoint> points;  // one per ranked detection
    std::optional<double> average_precision;
};

// All-point average precision (area under the precision envelope) from
// match flags in confidence-rank order. Undefined when truth_count is 0.
PrCurve average_precision(const std::vector<bool>& ranked_matches, std::size_t truth_count);

// Greedy matcher: detections processed by descending confidence, each takes
// the unmatched truth with the highest IOU when that IOU clears the
// threshold. Returns one flag per detection in the SORTED order together
// with that order's confidences.
struct MatchedDetections {
    std::vector<bool> matches;        // rank order
    std::vector<double> confidences;  // rank order
    std::size_t matched_truths = 0;
};

// strict_greater selects the IOU > threshold rule (localization
// correctness); the default >= is the usual AP matching convention.
MatchedDetections match_detections(const std::vector<Detection>& detections,
                                   const std::vector<BoundingBox>& truths,
                                   double iou_threshold, bool strict_greater = false);

struct EvalThresholds {
    double ap_iou = 0.5;   // matching threshold for the reported AP
    double loc_iou = 0.8;  // localization-correctness rule
};

struct AggregatedMetric {
    std::optional<double> value;
    std::size_t excluded = 0;  // per-image undefined values left out of the mean
};

struct MeanReport {
    AggregatedMetric accuracy, dice, jaccard, sensitivity, specificity;
};

struct ImageEval {
    std::string stem;
    ConfusionCounts counts;
    MetricsReport report;
};

struct RunEvaluation {
    std::vector<ImageEval> per_image;
    MeanReport mean_report;          // mean of per-image metrics
    ConfusionCounts pooled;          // metrics of pooled counts
    MetricsReport pooled_report;
    std::optional<double> ap;        // at thresholds.ap_iou
    std::optional<double> ap_loc;    // at thresholds.loc_iou
    std::optional<double> localization_correct_fraction;  // truths matched at loc_iou
    std::size_t truth_box_count = 0;
    std::size_t detection_count = 0;
    std::vector<std::string> unmatched_stems;  // present on one side only
};

// Compares *.pgm masks and *.txt detection/label files by stem between two
// directories (a masks/ or labels/ subdirectory is used when present).
// Unmatched stems are reported and skipped.
RunEvaluation evaluate_run(const std::string& pred_dir, const std::string& truth_dir,
                           const EvalThresholds& thresholds);

// Rendering used by the CLI: fixed column order
// stem,tp,fp,tn,fn,accuracy,dice,jaccard,sensitivity,specificity.
std::string run_evaluation_text(const RunEvaluation& ev);
std::string run_evaluation_csv(const RunEvaluation& ev);

}  // namespace fyseg

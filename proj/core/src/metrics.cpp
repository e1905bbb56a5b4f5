#include "fyseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "fyseg/errors.hpp"
#include "fyseg/image_io.hpp"
#include "fyseg/labels.hpp"

namespace fs = std::filesystem;

namespace fyseg {

ConfusionCounts count_confusion(const PixelMask& pred, const PixelMask& truth) {
    if (pred.width != truth.width || pred.height != truth.height)
        throw std::invalid_argument("count_confusion: prediction " + std::to_string(pred.width) +
                                    "x" + std::to_string(pred.height) + " vs truth " +
                                    std::to_string(truth.width) + "x" +
                                    std::to_string(truth.height));
    ConfusionCounts c;
    for (std::size_t i = 0; i < truth.labels.size(); ++i) {
        const bool p = pred.labels[i] != 0;
        const bool t = truth.labels[i] != 0;
        if (p && t)
            ++c.tp;
        else if (p && !t)
            ++c.fp;
        else if (!p && t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

namespace {

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport compute_metrics(const ConfusionCounts& c) {
    MetricsReport r;
    r.accuracy = ratio(c.tp + c.tn, c.total());
    r.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    r.jaccard = ratio(c.tp, c.tp + c.fn + c.fp);
    r.sensitivity = ratio(c.tp, c.tp + c.fn);
    r.specificity = ratio(c.tn, c.tn + c.fp);
    return r;
}

bool localization_correct(const BoundingBox& pred, const BoundingBox& truth) {
    return iou(pred, truth) > 0.8;
}

PrCurve average_precision(const std::vector<bool>& ranked_matches, std::size_t truth_count) {
    PrCurve curve;
    if (truth_count == 0) return curve;  // undefined

    std::size_t tp = 0;
    curve.points.reserve(ranked_matches.size());
    for (std::size_t k = 0; k < ranked_matches.size(); ++k) {
        if (ranked_matches[k]) ++tp;
        PrPoint pt;
        pt.precision = static_cast<double>(tp) / static_cast<double>(k + 1);
        pt.recall = static_cast<double>(tp) / static_cast<double>(truth_count);
        curve.points.push_back(pt);
    }

    // Area under the precision envelope: walk back accumulating the running
    // max precision, add rectangle area at each recall step.
    double ap = 0.0;
    double env = 0.0;
    for (std::size_t k = curve.points.size(); k-- > 0;) {
        env = std::max(env, curve.points[k].precision);
        const double prev_recall = k == 0 ? 0.0 : curve.points[k - 1].recall;
        if (curve.points[k].recall > prev_recall)
            ap += (curve.points[k].recall - prev_recall) * env;
    }
    curve.average_precision = ap;
    return curve;
}

MatchedDetections match_detections(const std::vector<Detection>& detections,
                                   const std::vector<BoundingBox>& truths,
                                   double iou_threshold, bool strict_greater) {
    std::vector<Detection> ranked = detections;
    std::stable_sort(ranked.begin(), ranked.end(), [](const Detection& a, const Detection& b) {
        return a.confidence > b.confidence;
    });

    MatchedDetections out;
    out.matches.reserve(ranked.size());
    out.confidences.reserve(ranked.size());
    std::vector<bool> used(truths.size(), false);
    for (const Detection& d : ranked) {
        double best = -1.0;
        std::size_t best_t = 0;
        for (std::size_t t = 0; t < truths.size(); ++t) {
            if (used[t]) continue;
            const double v = iou(d.box, truths[t]);
            if (v > best) {
                best = v;
                best_t = t;
            }
        }
        const bool eligible = strict_greater ? best > iou_threshold : best >= iou_threshold;
        if (!truths.empty() && eligible) {
            used[best_t] = true;
            out.matches.push_back(true);
            ++out.matched_truths;
        } else {
            out.matches.push_back(false);
        }
        out.confidences.push_back(d.confidence);
    }
    return out;
}

namespace {

fs::path resolve_subdir(const fs::path& root, std::initializer_list<const char*> names) {
    for (const char* n : names) {
        const fs::path p = root / n;
        if (fs::is_directory(p)) return p;
    }
    return root;
}

std::map<std::string, fs::path> stems_with_extension(const fs::path& dir, const char* ext) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        if (entry.path().extension() == ext) out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

void fold_metric(AggregatedMetric& agg, double& sum, std::size_t& count,
                 const std::optional<double>& v) {
    if (v) {
        sum += *v;
        ++count;
    } else {
        ++agg.excluded;
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string fmt_opt(const std::optional<double>& v, const char* undefined) {
    return v ? fmt(*v) : std::string(undefined);
}

}  // namespace

RunEvaluation evaluate_run(const std::string& pred_dir, const std::string& truth_dir,
                           const EvalThresholds& thresholds) {
    if (!fs::is_directory(pred_dir)) throw DataError(pred_dir + ": not a directory");
    if (!fs::is_directory(truth_dir)) throw DataError(truth_dir + ": not a directory");

    const fs::path pred_masks = resolve_subdir(pred_dir, {"masks"});
    const fs::path truth_masks = resolve_subdir(truth_dir, {"masks"});
    const fs::path pred_labels = resolve_subdir(pred_dir, {"detections", "labels"});
    const fs::path truth_labels = resolve_subdir(truth_dir, {"labels"});

    RunEvaluation ev;

    const auto pm = stems_with_extension(pred_masks, ".pgm");
    const auto tm = stems_with_extension(truth_masks, ".pgm");
    std::set<std::string> mask_stems;
    for (const auto& [s, p] : pm) mask_stems.insert(s);
    for (const auto& [s, p] : tm) mask_stems.insert(s);

    double sums[5] = {0, 0, 0, 0, 0};
    std::size_t counts[5] = {0, 0, 0, 0, 0};
    for (const std::string& stem : mask_stems) {
        const auto pi = pm.find(stem);
        const auto ti = tm.find(stem);
        if (pi == pm.end() || ti == tm.end()) {
            ev.unmatched_stems.push_back(stem);
            continue;
        }
        const PixelMask pred = read_mask(pi->second.string());
        const PixelMask truth = read_mask(ti->second.string());
        if (pred.width != truth.width || pred.height != truth.height)
            throw DataError(stem + ": mask extents differ between directories");

        ImageEval ie;
        ie.stem = stem;
        ie.counts = count_confusion(pred, truth);
        ie.report = compute_metrics(ie.counts);
        ev.pooled += ie.counts;
        fold_metric(ev.mean_report.accuracy, sums[0], counts[0], ie.report.accuracy);
        fold_metric(ev.mean_report.dice, sums[1], counts[1], ie.report.dice);
        fold_metric(ev.mean_report.jaccard, sums[2], counts[2], ie.report.jaccard);
        fold_metric(ev.mean_report.sensitivity, sums[3], counts[3], ie.report.sensitivity);
        fold_metric(ev.mean_report.specificity, sums[4], counts[4], ie.report.specificity);
        ev.per_image.push_back(std::move(ie));
    }
    AggregatedMetric* aggs[5] = {&ev.mean_report.accuracy, &ev.mean_report.dice,
                                 &ev.mean_report.jaccard, &ev.mean_report.sensitivity,
                                 &ev.mean_report.specificity};
    for (int i = 0; i < 5; ++i)
        if (counts[i] > 0) aggs[i]->value = sums[i] / static_cast<double>(counts[i]);
    ev.pooled_report = compute_metrics(ev.pooled);

    // Detector side: detection dumps vs truth labels, ranked globally.
    const auto pl = stems_with_extension(pred_labels, ".txt");
    const auto tl = stems_with_extension(truth_labels, ".txt");
    if (!tl.empty() && !pl.empty()) {
        struct Ranked {
            double confidence;
            bool match_ap = false;
            bool match_loc = false;
        };
        std::vector<Ranked> ranked;
        std::size_t truth_total = 0;
        std::size_t loc_matched = 0;
        for (const auto& [stem, tpath] : tl) {
            const auto truth_boxes_l = read_label_file(tpath.string());
            std::vector<BoundingBox> truths;
            for (const auto& lb : truth_boxes_l) truths.push_back(lb.box);
            truth_total += truths.size();

            const auto di = pl.find(stem);
            if (di == pl.end()) {
                if (pm.find(stem) == pm.end() && tm.find(stem) == tm.end())
                    ev.unmatched_stems.push_back(stem);
                continue;
            }
            const auto dets = read_detection_file(di->second.string());
            ev.detection_count += dets.size();
            const auto ap_match = match_detections(dets, truths, thresholds.ap_iou);
            const auto loc_match = match_detections(dets, truths, thresholds.loc_iou, true);
            loc_matched += loc_match.matched_truths;
            for (std::size_t k = 0; k < ap_match.matches.size(); ++k)
                ranked.push_back({ap_match.confidences[k], ap_match.matches[k],
                                  loc_match.matches[k]});
        }
        ev.truth_box_count = truth_total;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const Ranked& a, const Ranked& b) {
                             return a.confidence > b.confidence;
                         });
        std::vector<bool> ap_flags, loc_flags;
        for (const Ranked& r : ranked) {
            ap_flags.push_back(r.match_ap);
            loc_flags.push_back(r.match_loc);
        }
        ev.ap = average_precision(ap_flags, truth_total).average_precision;
        ev.ap_loc = average_precision(loc_flags, truth_total).average_precision;
        if (truth_total > 0)
            ev.localization_correct_fraction =
                static_cast<double>(loc_matched) / static_cast<double>(truth_total);
    }

    std::sort(ev.unmatched_stems.begin(), ev.unmatched_stems.end());
    ev.unmatched_stems.erase(std::unique(ev.unmatched_stems.begin(), ev.unmatched_stems.end()),
                             ev.unmatched_stems.end());
    return ev;
}

std::string run_evaluation_text(const RunEvaluation& ev) {
    std::ostringstream out;
    out << "stem                A         D         J         SE        SP\n";
    for (const ImageEval& ie : ev.per_image) {
        char line[160];
        std::snprintf(line, sizeof line, "%-18s  %-8s  %-8s  %-8s  %-8s  %-8s\n",
                      ie.stem.c_str(), fmt_opt(ie.report.accuracy, "n/a").c_str(),
                      fmt_opt(ie.report.dice, "n/a").c_str(),
                      fmt_opt(ie.report.jaccard, "n/a").c_str(),
                      fmt_opt(ie.report.sensitivity, "n/a").c_str(),
                      fmt_opt(ie.report.specificity, "n/a").c_str());
        out << line;
    }
    out << "mean of per-image metrics: A=" << fmt_opt(ev.mean_report.accuracy.value, "n/a")
        << " D=" << fmt_opt(ev.mean_report.dice.value, "n/a")
        << " J=" << fmt_opt(ev.mean_report.jaccard.value, "n/a")
        << " SE=" << fmt_opt(ev.mean_report.sensitivity.value, "n/a")
        << " SP=" << fmt_opt(ev.mean_report.specificity.value, "n/a") << " (excluded "
        << ev.mean_report.accuracy.excluded << "/" << ev.mean_report.dice.excluded << "/"
        << ev.mean_report.jaccard.excluded << "/" << ev.mean_report.sensitivity.excluded << "/"
        << ev.mean_report.specificity.excluded << ")\n";
    out << "pooled-count metrics:      A=" << fmt_opt(ev.pooled_report.accuracy, "n/a")
        << " D=" << fmt_opt(ev.pooled_report.dice, "n/a")
        << " J=" << fmt_opt(ev.pooled_report.jaccard, "n/a")
        << " SE=" << fmt_opt(ev.pooled_report.sensitivity, "n/a")
        << " SP=" << fmt_opt(ev.pooled_report.specificity, "n/a") << "\n";
    if (ev.ap || ev.ap_loc || ev.localization_correct_fraction) {
        out << "detector: AP=" << fmt_opt(ev.ap, "n/a") << " AP@loc=" << fmt_opt(ev.ap_loc, "n/a")
            << " localization-correct=" << fmt_opt(ev.localization_correct_fraction, "n/a")
            << " (" << ev.detection_count << " detections, " << ev.truth_box_count
            << " truth boxes)\n";
    }
    if (!ev.unmatched_stems.empty()) {
        out << "unmatched stems:";
        for (const std::string& s : ev.unmatched_stems) out << " " << s;
        out << "\n";
    }
    return out.str();
}

std::string run_evaluation_csv(const RunEvaluation& ev) {
    std::ostringstream out;
    out << "stem,tp,fp,tn,fn,accuracy,dice,jaccard,sensitivity,specificity\n";
    for (const ImageEval& ie : ev.per_image) {
        out << ie.stem << "," << ie.counts.tp << "," << ie.counts.fp << "," << ie.counts.tn << ","
            << ie.counts.fn << "," << fmt_opt(ie.report.accuracy, "") << ","
            << fmt_opt(ie.report.dice, "") << "," << fmt_opt(ie.report.jaccard, "") << ","
            << fmt_opt(ie.report.sensitivity, "") << "," << fmt_opt(ie.report.specificity, "")
            << "\n";
    }
    out << "mean,,,,," << fmt_opt(ev.mean_report.accuracy.value, "") << ","
        << fmt_opt(ev.mean_report.dice.value, "") << ","
        << fmt_opt(ev.mean_report.jaccard.value, "") << ","
        << fmt_opt(ev.mean_report.sensitivity.value, "") << ","
        << fmt_opt(ev.mean_report.specificity.value, "") << "\n";
    out << "pooled," << ev.pooled.tp << "," << ev.pooled.fp << "," << ev.pooled.tn << ","
        << ev.pooled.fn << "," << fmt_opt(ev.pooled_report.accuracy, "") << ","
        << fmt_opt(ev.pooled_report.dice, "") << "," << fmt_opt(ev.pooled_report.jaccard, "")
        << "," << fmt_opt(ev.pooled_report.sensitivity, "") << ","
        << fmt_opt(ev.pooled_report.specificity, "") << "\n";
    return out.str();
}

}  // namespace fyseg

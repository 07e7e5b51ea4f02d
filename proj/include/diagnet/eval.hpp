#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/head.hpp"
#include "diagnet/synth.hpp"

namespace diagnet {

// The ten matching thresholds 0.50, 0.55, ..., 0.95.
inline constexpr std::size_t kIouThresholdCount = 10;

inline constexpr double iou_threshold(std::size_t i) { return 0.5 + 0.05 * static_cast<double>(i); }

struct ClassDet {
    std::size_t image = 0;
    double score = 0.0;
    BBox box;
};

struct ClassGt {
    std::size_t image = 0;
    BBox box;
};

// All-point interpolated average precision for one class. Detections are
// ranked by descending score (insertion order breaks ties); each one matches
// the still-unmatched ground truth of its image with the highest IoU, and
// counts as a true positive when that IoU reaches the threshold. Precision
// is replaced by its running maximum from the right before the area under
// the precision-recall curve is accumulated.
inline double average_precision(std::vector<ClassDet> dets, const std::vector<ClassGt>& gts,
                                double iou_thr) {
    if (gts.empty()) return 0.0;
    std::stable_sort(dets.begin(), dets.end(),
                     [](const ClassDet& a, const ClassDet& b) { return a.score > b.score; });

    std::vector<bool> matched(gts.size(), false);
    std::vector<bool> tp(dets.size(), false);
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best = 0.0;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (matched[g] || gts[g].image != dets[d].image) continue;
            const double v = iou(dets[d].box, gts[g].box);
            if (v > best) {
                best = v;
                best_g = g;
            }
        }
        if (best_g < gts.size() && best >= iou_thr) {
            matched[best_g] = true;
            tp[d] = true;
        }
    }

    std::vector<double> precision(dets.size()), recall(dets.size());
    std::size_t tp_cum = 0;
    for (std::size_t d = 0; d < dets.size(); ++d) {
        if (tp[d]) ++tp_cum;
        precision[d] = static_cast<double>(tp_cum) / static_cast<double>(d + 1);
        recall[d] = static_cast<double>(tp_cum) / static_cast<double>(gts.size());
    }
    for (std::size_t d = dets.size(); d-- > 1;) {
        precision[d - 1] = std::max(precision[d - 1], precision[d]);
    }
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t d = 0; d < dets.size(); ++d) {
        if (!tp[d]) continue;
        ap += (recall[d] - prev_recall) * precision[d];
        prev_recall = recall[d];
    }
    return ap;
}

// Per-image inputs to the metric: what the model said and what is true.
struct EvalImage {
    std::vector<Detection> detections;
    std::vector<SceneObject> truths;
};

struct EvalResult {
    std::map<int, std::array<double, kIouThresholdCount>> per_class_ap;
    double map50 = 0.0;
    double map75 = 0.0;
    double map_coco = 0.0; // mean over classes and all ten thresholds
};

// Classes with no ground truth anywhere are left out of the averages (their
// AP is undefined); evaluating a truth-free dataset is an error.
inline EvalResult map_metrics(const std::vector<EvalImage>& images, std::size_t classes) {
    if (classes == 0) throw std::invalid_argument("map_metrics: classes must be >= 1");
    EvalResult result;
    double sum50 = 0.0, sum75 = 0.0, sum_all = 0.0;
    std::size_t included = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<ClassDet> dets;
        std::vector<ClassGt> gts;
        for (std::size_t img = 0; img < images.size(); ++img) {
            for (const Detection& d : images[img].detections)
                if (d.class_id == static_cast<int>(c)) dets.push_back({img, d.score, d.box});
            for (const SceneObject& o : images[img].truths)
                if (o.class_id == static_cast<int>(c)) gts.push_back({img, o.box});
        }
        if (gts.empty()) continue;
        std::array<double, kIouThresholdCount> aps{};
        for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
            aps[t] = average_precision(dets, gts, iou_threshold(t));
            sum_all += aps[t];
        }
        sum50 += aps[0];
        sum75 += aps[5];
        result.per_class_ap[static_cast<int>(c)] = aps;
        ++included;
    }
    if (included == 0) {
        throw std::invalid_argument("map_metrics: no ground-truth objects in any image");
    }
    const double n = static_cast<double>(included);
    result.map50 = sum50 / n;
    result.map75 = sum75 / n;
    result.map_coco = sum_all / (n * static_cast<double>(kIouThresholdCount));
    return result;
}

} // namespace diagnet

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "diagnet/eval.hpp"

using namespace diagnet;

namespace {

Detection det(const BBox& b, int cls, double score) { return Detection{b, cls, score, 0}; }

} // namespace

TEST_CASE("matching thresholds") {
    CHECK(iou_threshold(0) == 0.5);
    CHECK(std::fabs(iou_threshold(5) - 0.75) < 1e-12);
    CHECK(std::fabs(iou_threshold(9) - 0.95) < 1e-12);
}

TEST_CASE("average precision on hand cases") {
    const BBox A{0, 0, 10, 10}, B{20, 20, 30, 30};

    SECTION("perfect detections") {
        std::vector<ClassDet> dets{{0, 0.9, A}, {0, 0.8, B}};
        std::vector<ClassGt> gts{{0, A}, {0, B}};
        CHECK(average_precision(dets, gts, 0.5) == 1.0);
        CHECK(average_precision(dets, gts, 0.95) == 1.0);
    }

    SECTION("no detections") {
        CHECK(average_precision({}, {{0, A}}, 0.5) == 0.0);
    }

    SECTION("no ground truth") {
        CHECK(average_precision({{0, 0.9, A}}, {}, 0.5) == 0.0);
    }

    SECTION("tp, fp, tp interleaved gives 5/6") {
        std::vector<ClassDet> dets{
            {0, 0.9, A}, {0, 0.8, BBox{40, 40, 50, 50}}, {0, 0.7, B}};
        std::vector<ClassGt> gts{{0, A}, {0, B}};
        // Precisions 1, 1/2, 2/3 -> envelope 1, 2/3, 2/3; recalls 1/2, 1/2, 1.
        CHECK(std::fabs(average_precision(dets, gts, 0.5) - 5.0 / 6.0) < 1e-12);
    }

    SECTION("duplicate hit on one truth is a false positive but costs no area") {
        std::vector<ClassDet> dets{{0, 0.9, A}, {0, 0.8, A}};
        std::vector<ClassGt> gts{{0, A}};
        CHECK(average_precision(dets, gts, 0.5) == 1.0);
    }

    SECTION("detections never match truths of another image") {
        std::vector<ClassDet> dets{{1, 0.9, A}};
        std::vector<ClassGt> gts{{0, A}};
        CHECK(average_precision(dets, gts, 0.5) == 0.0);
    }

    SECTION("the higher-IoU truth wins a contested detection") {
        // Det overlaps both truths; it must consume the closer one, leaving
        // the second truth for the later exact detection.
        const BBox near{0, 0, 10, 9}, far{0, 0, 10, 5};
        std::vector<ClassDet> dets{{0, 0.9, A}, {0, 0.8, near}};
        std::vector<ClassGt> gts{{0, near}, {0, far}};
        // First det IoU(near)=0.9, IoU(far)=0.5 -> takes `near`. Second det is
        // exactly `near` but it is taken; IoU with `far` is 5/9 >= 0.5 -> TP.
        CHECK(average_precision(dets, gts, 0.5) == 1.0);
    }
}

TEST_CASE("threshold sweep flips a mid-quality detection") {
    const BBox gt{0, 0, 10, 10};
    const BBox pred{0, 0, 10, 6.2}; // IoU 0.62
    std::vector<ClassDet> dets{{0, 0.9, pred}};
    std::vector<ClassGt> gts{{0, gt}};
    CHECK(average_precision(dets, gts, 0.50) == 1.0);
    CHECK(average_precision(dets, gts, 0.60) == 1.0);
    CHECK(average_precision(dets, gts, 0.65) == 0.0);
}

TEST_CASE("map over classes and thresholds") {
    const BBox A{0, 0, 10, 10}, B{20, 20, 30, 30};

    SECTION("perfect two-class result") {
        EvalImage img;
        img.truths = {{0, A}, {1, B}};
        img.detections = {det(A, 0, 0.9), det(B, 1, 0.9)};
        const EvalResult r = map_metrics({img}, 2);
        CHECK(r.map50 == 1.0);
        CHECK(r.map75 == 1.0);
        CHECK(r.map_coco == 1.0);
        REQUIRE(r.per_class_ap.size() == 2);
        for (const auto& [cls, aps] : r.per_class_ap)
            for (double ap : aps) CHECK(ap == 1.0);
    }

    SECTION("no detections at all") {
        EvalImage img;
        img.truths = {{0, A}};
        const EvalResult r = map_metrics({img}, 2);
        CHECK(r.map50 == 0.0);
        CHECK(r.map_coco == 0.0);
        REQUIRE(r.per_class_ap.size() == 1); // class 1 has no truth, excluded
    }

    SECTION("one class solved, one missed: exactly one half") {
        EvalImage img;
        img.truths = {{0, A}, {1, B}};
        img.detections = {det(A, 0, 0.9), det(BBox{40, 40, 50, 50}, 1, 0.9)};
        const EvalResult r = map_metrics({img}, 2);
        CHECK(r.map50 == 0.5);
        CHECK(r.map_coco == 0.5);
    }

    SECTION("mid-IoU detection scores only the low thresholds") {
        EvalImage img;
        img.truths = {{0, A}};
        img.detections = {det(BBox{0, 0, 10, 6.2}, 0, 0.9)}; // IoU 0.62
        const EvalResult r = map_metrics({img}, 1);
        CHECK(r.map50 == 1.0);
        CHECK(r.map75 == 0.0);
        CHECK(std::fabs(r.map_coco - 0.3) < 1e-12); // thresholds .50 .55 .60
    }

    SECTION("classes without truth are excluded from the averages") {
        EvalImage img;
        img.truths = {{0, A}};
        img.detections = {det(A, 0, 0.9), det(B, 2, 0.9)}; // stray class-2 det
        const EvalResult r = map_metrics({img}, 3);
        CHECK(r.map50 == 1.0);
        CHECK(r.per_class_ap.count(2) == 0);
    }

    SECTION("truth-free evaluation is an error") {
        EvalImage img;
        img.detections = {det(A, 0, 0.9)};
        CHECK_THROWS_AS(map_metrics({img}, 2), std::invalid_argument);
        CHECK_THROWS_AS(map_metrics({img}, 0), std::invalid_argument);
    }

    SECTION("multiple images pool per class") {
        EvalImage i1, i2;
        i1.truths = {{0, A}};
        i1.detections = {det(A, 0, 0.9)};
        i2.truths = {{0, B}};
        i2.detections = {det(B, 0, 0.8)};
        const EvalResult r = map_metrics({i1, i2}, 1);
        CHECK(r.map50 == 1.0);
    }
}

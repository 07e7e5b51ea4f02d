#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/eval.hpp"
#include "diagnet/graph.hpp"
#include "diagnet/head.hpp"
#include "diagnet/model.hpp"
#include "diagnet/parallel.hpp"
#include "diagnet/synth.hpp"

namespace diagnet {

// A featurized scene with the per-scene constants the model reuses on every
// pass: the propagated features a_norm * x and the transposed features.
struct SceneSample {
    Graph graph;
    Matrix xt; // channels x nodes
    Matrix ax; // nodes x channels
    std::vector<SceneObject> objects;
};

inline SceneSample prepare_scene(const Scene& scene, std::size_t h, std::size_t channels,
                                 std::uint64_t feat_seed) {
    SceneSample s;
    s.graph = to_graph(featurize(scene, h, channels, feat_seed));
    s.xt = transpose(s.graph.x);
    s.ax = matmul(s.graph.a_norm, s.graph.x);
    s.objects = scene.objects;
    return s;
}

inline std::vector<SceneSample> prepare_dataset(const Dataset& ds, std::size_t h,
                                                std::size_t channels,
                                                std::uint64_t feat_seed) {
    std::vector<SceneSample> out(ds.scenes.size());
    parallel_for(out.size(), [&](std::size_t i) {
        out[i] = prepare_scene(ds.scenes[i], h, channels, feat_seed);
    });
    return out;
}

// Full inference for one scene: calibrated map, pooling, head, decode, NMS.
inline std::vector<Detection> detect(const SceneSample& sample, const DiagNetParams& dp,
                                     const HeadParams& hp, const HeadConfig& cfg,
                                     double h_in, double score_threshold, double nms_iou) {
    const ForwardTrace tr = forward_from_ax(sample.ax, sample.xt, dp);
    const PooledMap pm = pool_diag_map(tr.y_hat, sample.graph.grid.h, cfg.s, cfg.pooling);
    const HeadTrace ht = head_forward(pm.values, hp, cfg);
    return nms(decode(ht.preds, cfg, h_in, score_threshold), nms_iou);
}

inline EvalResult evaluate(const std::vector<SceneSample>& samples, const DiagNetParams& dp,
                           const HeadParams& hp, const HeadConfig& cfg, double h_in,
                           std::size_t classes, double score_threshold, double nms_iou) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no scenes");
    std::vector<EvalImage> images(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        images[i].detections =
            detect(samples[i], dp, hp, cfg, h_in, score_threshold, nms_iou);
        images[i].truths = samples[i].objects;
    });
    return map_metrics(images, classes);
}

} // namespace diagnet

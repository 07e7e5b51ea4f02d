#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/matrix.hpp"
#include "diagnet/synth.hpp"

namespace diagnet {

enum class PoolKind { avg, max };

inline const char* to_string(PoolKind k) { return k == PoolKind::avg ? "avg" : "max"; }

inline PoolKind pool_kind_from_string(const std::string& s) {
    if (s == "avg") return PoolKind::avg;
    if (s == "max") return PoolKind::max;
    throw std::invalid_argument("pooling: expected avg|max, got '" + s + "'");
}

// Prediction grid geometry: s x s cells, one box per cell, `classes` class
// scores. Values per cell: x/y offsets within the cell, width/height as
// image fractions, objectness, then the class distribution.
struct HeadConfig {
    std::size_t s = 4;
    std::size_t classes = 3;
    std::size_t hidden = 256;
    double coord_weight = 5.0;
    double noobj_weight = 0.5;
    PoolKind pooling = PoolKind::avg;

    std::size_t cell_values() const { return 5 + classes; }
    std::size_t output_size() const { return s * s * cell_values(); }

    void validate() const {
        if (s == 0) throw std::invalid_argument("HeadConfig: s must be >= 1");
        if (classes == 0) throw std::invalid_argument("HeadConfig: classes must be >= 1");
        if (hidden == 0) throw std::invalid_argument("HeadConfig: hidden must be >= 1");
        if (coord_weight < 0.0 || noobj_weight < 0.0) {
            throw std::invalid_argument("HeadConfig: loss weights must be >= 0");
        }
    }
};

struct HeadParams {
    Matrix fc1_w, fc1_b; // hidden x d_in, hidden x 1
    Matrix fc2_w, fc2_b; // d_out x hidden, d_out x 1
};

inline HeadParams init_head_params(std::size_t d_in, const HeadConfig& cfg,
                                   std::uint64_t seed) {
    cfg.validate();
    if (d_in == 0) throw std::invalid_argument("init_head_params: d_in must be >= 1");
    HeadParams p;
    p.fc1_w = rand_matrix(cfg.hidden, d_in, splitmix64(seed ^ 0xabcd01ULL),
                          1.0 / std::sqrt(static_cast<double>(d_in)));
    p.fc1_b = Matrix(cfg.hidden, 1, 0.0);
    p.fc2_w = rand_matrix(cfg.output_size(), cfg.hidden, splitmix64(seed ^ 0xabcd02ULL),
                          1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
    p.fc2_b = Matrix(cfg.output_size(), 1, 0.0);
    return p;
}

// ---------------------------------------------------------------------------
// Pooling: the calibrated map y_hat (channels x nodes) is reduced to the
// head's s x s grid by pooling each k x k block of patches, k = h / s.
// Pooled layout: slot(cell, ch) = cell * channels + ch with cell = gy*s + gx.
// ---------------------------------------------------------------------------

struct PoolTrace {
    std::size_t h = 0, s = 0, channels = 0;
    PoolKind kind = PoolKind::avg;
    std::vector<std::size_t> argmax; // winning node per slot (max pooling only)
};

struct PooledMap {
    Matrix values; // (s*s*channels) x 1
    PoolTrace trace;
};

inline PooledMap pool_diag_map(const Matrix& y_hat, std::size_t h, std::size_t s,
                               PoolKind kind) {
    if (s == 0 || h == 0 || h % s != 0) {
        throw std::invalid_argument("pool_diag_map: grid " + std::to_string(h) +
                                    " not divisible into " + std::to_string(s) + " cells");
    }
    if (y_hat.cols() != h * h) {
        throw std::invalid_argument("pool_diag_map: y_hat has " + std::to_string(y_hat.cols()) +
                                    " nodes, grid expects " + std::to_string(h * h));
    }
    const std::size_t k = h / s, channels = y_hat.rows();
    PooledMap out;
    out.values = Matrix(s * s * channels, 1);
    out.trace = {h, s, channels, kind, {}};
    if (kind == PoolKind::max) out.trace.argmax.assign(s * s * channels, 0);
    for (std::size_t gy = 0; gy < s; ++gy) {
        for (std::size_t gx = 0; gx < s; ++gx) {
            const std::size_t cell = gy * s + gx;
            for (std::size_t ch = 0; ch < channels; ++ch) {
                double acc = 0.0;
                double best = 0.0;
                std::size_t best_node = 0;
                bool first = true;
                for (std::size_t dy = 0; dy < k; ++dy) {
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t node = (gy * k + dy) * h + (gx * k + dx);
                        const double v = y_hat(ch, node);
                        acc += v;
                        if (first || v > best) {
                            best = v;
                            best_node = node;
                            first = false;
                        }
                    }
                }
                const std::size_t slot = cell * channels + ch;
                if (kind == PoolKind::avg) {
                    out.values(slot, 0) = acc / static_cast<double>(k * k);
                } else {
                    out.values(slot, 0) = best;
                    out.trace.argmax[slot] = best_node;
                }
            }
        }
    }
    return out;
}

// Scatter d(loss)/d(pooled) back to d(loss)/d(y_hat).
inline Matrix unpool_diag_map(const Matrix& d_pooled, const PoolTrace& trace) {
    const std::size_t h = trace.h, s = trace.s, channels = trace.channels;
    const std::size_t k = h / s;
    Matrix d_y(channels, h * h, 0.0);
    for (std::size_t cell = 0; cell < s * s; ++cell) {
        const std::size_t gy = cell / s, gx = cell % s;
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const std::size_t slot = cell * channels + ch;
            const double g = d_pooled(slot, 0);
            if (trace.kind == PoolKind::max) {
                d_y(ch, trace.argmax[slot]) += g;
            } else {
                const double share = g / static_cast<double>(k * k);
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx)
                        d_y(ch, (gy * k + dy) * h + (gx * k + dx)) += share;
            }
        }
    }
    return d_y;
}

// ---------------------------------------------------------------------------
// Head forward: two fully connected layers (tanh hidden), then per cell a
// sigmoid over geometry/objectness and a softmax over classes.
// ---------------------------------------------------------------------------

struct HeadTrace {
    Matrix input;           // d_in x 1
    Matrix a1;              // hidden x 1 (tanh applied)
    Matrix preds;           // cells x (5 + classes), transformed values
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline HeadTrace head_forward(const Matrix& pooled, const HeadParams& p,
                              const HeadConfig& cfg) {
    cfg.validate();
    if (pooled.cols() != 1 || pooled.rows() != p.fc1_w.cols()) {
        throw std::invalid_argument("head_forward: pooled input is " +
                                    detail::shape_str(pooled) + ", expected " +
                                    std::to_string(p.fc1_w.cols()) + "x1");
    }
    if (p.fc2_w.rows() != cfg.output_size()) {
        throw std::invalid_argument("head_forward: fc2 outputs " +
                                    std::to_string(p.fc2_w.rows()) + ", grid needs " +
                                    std::to_string(cfg.output_size()));
    }
    HeadTrace tr;
    tr.input = pooled;
    tr.a1 = tanh_map(add(matmul(p.fc1_w, pooled), p.fc1_b));
    const Matrix z2 = add(matmul(p.fc2_w, tr.a1), p.fc2_b);

    const std::size_t cells = cfg.s * cfg.s, cv = cfg.cell_values();
    tr.preds = Matrix(cells, cv);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        const std::size_t base = cell * cv;
        for (std::size_t k = 0; k < 5; ++k) tr.preds(cell, k) = sigmoid(z2(base + k, 0));
        // Stable softmax over the class block.
        double zmax = z2(base + 5, 0);
        for (std::size_t c = 1; c < cfg.classes; ++c)
            zmax = std::max(zmax, z2(base + 5 + c, 0));
        double denom = 0.0;
        for (std::size_t c = 0; c < cfg.classes; ++c) {
            const double e = std::exp(z2(base + 5 + c, 0) - zmax);
            tr.preds(cell, 5 + c) = e;
            denom += e;
        }
        for (std::size_t c = 0; c < cfg.classes; ++c) tr.preds(cell, 5 + c) /= denom;
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Box encoding and decoding against the prediction grid.
// ---------------------------------------------------------------------------

struct Detection {
    BBox box;
    int class_id = 0;
    double score = 0.0;
    std::size_t cell = 0;
};

inline BBox decode_cell_box(const Matrix& preds, std::size_t cell, const HeadConfig& cfg,
                            double h_in) {
    const double cell_px = h_in / static_cast<double>(cfg.s);
    const double gx = static_cast<double>(cell % cfg.s);
    const double gy = static_cast<double>(cell / cfg.s);
    const double cx = (gx + preds(cell, 0)) * cell_px;
    const double cy = (gy + preds(cell, 1)) * cell_px;
    const double w = preds(cell, 2) * h_in;
    const double h = preds(cell, 3) * h_in;
    BBox b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    b.x1 = std::clamp(b.x1, 0.0, h_in);
    b.y1 = std::clamp(b.y1, 0.0, h_in);
    b.x2 = std::clamp(b.x2, 0.0, h_in);
    b.y2 = std::clamp(b.y2, 0.0, h_in);
    return b;
}

// All cells whose score (objectness times best class probability) reaches
// the threshold, decoded to image-space boxes.
inline std::vector<Detection> decode(const Matrix& preds, const HeadConfig& cfg, double h_in,
                                     double score_threshold) {
    if (preds.rows() != cfg.s * cfg.s || preds.cols() != cfg.cell_values()) {
        throw std::invalid_argument("decode: preds is " + detail::shape_str(preds) +
                                    ", grid expects " + std::to_string(cfg.s * cfg.s) + "x" +
                                    std::to_string(cfg.cell_values()));
    }
    std::vector<Detection> out;
    for (std::size_t cell = 0; cell < preds.rows(); ++cell) {
        std::size_t best_c = 0;
        for (std::size_t c = 1; c < cfg.classes; ++c)
            if (preds(cell, 5 + c) > preds(cell, 5 + best_c)) best_c = c;
        const double score = preds(cell, 4) * preds(cell, 5 + best_c);
        if (score >= score_threshold) {
            Detection det;
            det.box = decode_cell_box(preds, cell, cfg, h_in);
            if (!(det.box.x2 > det.box.x1) || !(det.box.y2 > det.box.y1)) continue;
            det.class_id = static_cast<int>(best_c);
            det.score = score;
            det.cell = cell;
            out.push_back(det);
        }
    }
    return out;
}

// Greedy class-wise suppression: keep by descending score (cell index breaks
// ties), drop anything of the same class overlapping a kept box beyond the
// threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.cell < b.cell;
    });
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// ---------------------------------------------------------------------------
// Grid detection loss. Each object is owned by the cell containing its
// center (first object wins a contested cell). Owned cells pay coordinate,
// objectness and class terms; empty cells pay a down-weighted objectness
// term. Width/height enter through square roots so small boxes are not
// drowned out. The objectness target is the IoU between the currently
// decoded box and the ground truth, treated as a constant (no gradient flows
// through it); pass `conf_targets` to pin those constants externally, e.g.
// for finite-difference checks.
// ---------------------------------------------------------------------------

struct DetectionLoss {
    double value = 0.0;
    Matrix d_preds; // cells x (5 + classes)
};

// Cell ownership: the cell holding an object's center is responsible for it;
// an earlier object keeps a contested cell. -1 marks empty cells.
inline std::vector<int> assign_cell_owners(const std::vector<SceneObject>& objects,
                                           const HeadConfig& cfg, double h_in) {
    const double cell_px = h_in / static_cast<double>(cfg.s);
    std::vector<int> owner(cfg.s * cfg.s, -1);
    for (std::size_t k = 0; k < objects.size(); ++k) {
        const BBox& b = objects[k].box;
        const std::size_t gx = std::min(cfg.s - 1, static_cast<std::size_t>(b.cx() / cell_px));
        const std::size_t gy = std::min(cfg.s - 1, static_cast<std::size_t>(b.cy() / cell_px));
        const std::size_t cell = gy * cfg.s + gx;
        if (owner[cell] < 0) owner[cell] = static_cast<int>(k);
    }
    return owner;
}

// The objectness constants the loss would use right now: IoU between each
// owned cell's decoded box and its object, 0 elsewhere.
inline std::vector<double> current_conf_targets(const Matrix& preds,
                                                const std::vector<SceneObject>& objects,
                                                const HeadConfig& cfg, double h_in) {
    const std::vector<int> owner = assign_cell_owners(objects, cfg, h_in);
    std::vector<double> targets(cfg.s * cfg.s, 0.0);
    for (std::size_t cell = 0; cell < targets.size(); ++cell) {
        if (owner[cell] >= 0) {
            targets[cell] = iou(decode_cell_box(preds, cell, cfg, h_in),
                                objects[static_cast<std::size_t>(owner[cell])].box);
        }
    }
    return targets;
}

inline DetectionLoss detection_loss(const Matrix& preds,
                                    const std::vector<SceneObject>& objects,
                                    const HeadConfig& cfg, double h_in,
                                    const std::vector<double>* conf_targets = nullptr) {
    if (preds.rows() != cfg.s * cfg.s || preds.cols() != cfg.cell_values()) {
        throw std::invalid_argument("detection_loss: preds is " + detail::shape_str(preds) +
                                    ", grid expects " + std::to_string(cfg.s * cfg.s) + "x" +
                                    std::to_string(cfg.cell_values()));
    }
    const double cell_px = h_in / static_cast<double>(cfg.s);
    const std::size_t cells = cfg.s * cfg.s;
    const std::vector<int> owner = assign_cell_owners(objects, cfg, h_in);

    DetectionLoss out;
    out.d_preds = Matrix(preds.rows(), preds.cols(), 0.0);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        const double conf = preds(cell, 4);
        if (owner[cell] < 0) {
            out.value += cfg.noobj_weight * conf * conf;
            out.d_preds(cell, 4) += cfg.noobj_weight * 2.0 * conf;
            continue;
        }
        const SceneObject& obj = objects[static_cast<std::size_t>(owner[cell])];
        const double gx = static_cast<double>(cell % cfg.s);
        const double gy = static_cast<double>(cell / cfg.s);
        const double tox = obj.box.cx() / cell_px - gx;
        const double toy = obj.box.cy() / cell_px - gy;
        const double tw = obj.box.width() / h_in;
        const double th = obj.box.height() / h_in;

        const double ox = preds(cell, 0), oy = preds(cell, 1);
        const double w = preds(cell, 2), h = preds(cell, 3);
        out.value += cfg.coord_weight * ((ox - tox) * (ox - tox) + (oy - toy) * (oy - toy));
        out.d_preds(cell, 0) += cfg.coord_weight * 2.0 * (ox - tox);
        out.d_preds(cell, 1) += cfg.coord_weight * 2.0 * (oy - toy);
        const double sw = std::sqrt(w) - std::sqrt(tw);
        const double sh = std::sqrt(h) - std::sqrt(th);
        out.value += cfg.coord_weight * (sw * sw + sh * sh);
        out.d_preds(cell, 2) += cfg.coord_weight * sw / std::sqrt(w);
        out.d_preds(cell, 3) += cfg.coord_weight * sh / std::sqrt(h);

        const double conf_target =
            conf_targets ? (*conf_targets)[cell]
                         : iou(decode_cell_box(preds, cell, cfg, h_in), obj.box);
        out.value += (conf - conf_target) * (conf - conf_target);
        out.d_preds(cell, 4) += 2.0 * (conf - conf_target);

        for (std::size_t c = 0; c < cfg.classes; ++c) {
            const double t = static_cast<int>(c) == obj.class_id ? 1.0 : 0.0;
            const double p = preds(cell, 5 + c);
            out.value += (p - t) * (p - t);
            out.d_preds(cell, 5 + c) += 2.0 * (p - t);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Head backward: from d(loss)/d(preds) to parameter gradients and the
// gradient on the pooled input.
// ---------------------------------------------------------------------------

struct HeadGrads {
    Matrix d_fc1_w, d_fc1_b, d_fc2_w, d_fc2_b;
    Matrix d_input; // d_in x 1
};

inline HeadGrads head_backward(const HeadTrace& tr, const Matrix& d_preds,
                               const HeadParams& p, const HeadConfig& cfg) {
    const std::size_t cells = cfg.s * cfg.s, cv = cfg.cell_values();
    Matrix dz2(cfg.output_size(), 1, 0.0);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        const std::size_t base = cell * cv;
        for (std::size_t k = 0; k < 5; ++k) {
            const double v = tr.preds(cell, k);
            dz2(base + k, 0) = d_preds(cell, k) * v * (1.0 - v);
        }
        double dot = 0.0;
        for (std::size_t c = 0; c < cfg.classes; ++c)
            dot += d_preds(cell, 5 + c) * tr.preds(cell, 5 + c);
        for (std::size_t c = 0; c < cfg.classes; ++c) {
            const double pc = tr.preds(cell, 5 + c);
            dz2(base + 5 + c, 0) = pc * (d_preds(cell, 5 + c) - dot);
        }
    }
    HeadGrads g;
    g.d_fc2_w = matmul(dz2, transpose(tr.a1));
    g.d_fc2_b = dz2;
    Matrix dz1 = matmul(transpose(p.fc2_w), dz2);
    for (std::size_t i = 0; i < dz1.size(); ++i) {
        const double a = tr.a1.data()[i];
        dz1.data()[i] *= 1.0 - a * a;
    }
    g.d_fc1_w = matmul(dz1, transpose(tr.input));
    g.d_fc1_b = dz1;
    g.d_input = matmul(transpose(p.fc1_w), dz1);
    return g;
}

} // namespace diagnet

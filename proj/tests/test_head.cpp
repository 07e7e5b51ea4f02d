#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "diagnet/head.hpp"
#include "diagnet/model.hpp"

using namespace diagnet;

namespace {

Matrix random_matrix_range(std::size_t r, std::size_t c, std::uint64_t seed, double lo,
                           double hi) {
    Rng rng(splitmix64(seed));
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.uniform(lo, hi);
    return m;
}

double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

} // namespace

TEST_CASE("average pooling reduces patch blocks") {
    // 4x4 grid of nodes, single channel, pooled to 2x2.
    Matrix y(1, 16);
    for (std::size_t i = 0; i < 16; ++i) y(0, i) = static_cast<double>(i);
    const PooledMap pm = pool_diag_map(y, 4, 2, PoolKind::avg);
    REQUIRE(pm.values.rows() == 4);
    // Top-left block: nodes 0,1,4,5.
    CHECK(pm.values(0, 0) == (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    // Bottom-right block: nodes 10,11,14,15.
    CHECK(pm.values(3, 0) == (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
}

TEST_CASE("max pooling tracks its winners") {
    Matrix y(2, 16, 0.0);
    y(0, 5) = 3.0;  // channel 0, node 5 (top-left block)
    y(1, 15) = 2.0; // channel 1, node 15 (bottom-right block)
    y(1, 0) = -1.0;
    const PooledMap pm = pool_diag_map(y, 4, 2, PoolKind::max);
    CHECK(pm.values(0 * 2 + 0, 0) == 3.0);
    CHECK(pm.trace.argmax[0] == 5);
    CHECK(pm.values(3 * 2 + 1, 0) == 2.0);
    CHECK(pm.trace.argmax[3 * 2 + 1] == 15);
    // Channel 1, top-left block: all zero except node 0 = -1; max is 0 at the
    // first scanned zero node.
    CHECK(pm.values(0 * 2 + 1, 0) == 0.0);
    CHECK(pm.trace.argmax[0 * 2 + 1] == 1);

    // Gradient routes only to the winner.
    Matrix g(pm.values.rows(), 1, 0.0);
    g(0, 0) = 10.0;
    const Matrix dy = unpool_diag_map(g, pm.trace);
    CHECK(dy(0, 5) == 10.0);
    CHECK(dy(0, 0) == 0.0);
}

TEST_CASE("unpooling is the exact adjoint of pooling") {
    for (PoolKind kind : {PoolKind::avg, PoolKind::max}) {
        const Matrix y = random_matrix_range(3, 64, 99, -1.0, 1.0); // h=8
        const PooledMap pm = pool_diag_map(y, 8, 4, kind);
        const Matrix g = random_matrix_range(pm.values.rows(), 1, 100, -1.0, 1.0);
        const Matrix dy = unpool_diag_map(g, pm.trace);
        // <pool(y), g> == <y, unpool(g)> for the linearization at y.
        double lhs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) lhs += pm.values.data()[i] * g.data()[i];
        double rhs = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) rhs += y.data()[i] * dy.data()[i];
        CHECK(std::fabs(lhs - rhs) < 1e-12);
    }
    CHECK_THROWS_AS(pool_diag_map(Matrix(2, 16), 4, 3, PoolKind::avg), std::invalid_argument);
    CHECK_THROWS_AS(pool_diag_map(Matrix(2, 15), 4, 2, PoolKind::avg), std::invalid_argument);
}

TEST_CASE("head forward produces calibrated predictions") {
    HeadConfig cfg;
    cfg.s = 2;
    cfg.classes = 3;
    cfg.hidden = 16;
    const std::size_t d_in = 2 * 2 * 4;
    const HeadParams p = init_head_params(d_in, cfg, 4242);
    CHECK(p.fc1_w.rows() == 16);
    CHECK(p.fc1_w.cols() == d_in);
    CHECK(p.fc2_w.rows() == cfg.output_size());

    const Matrix pooled = random_matrix_range(d_in, 1, 7, -0.5, 0.5);
    const HeadTrace tr = head_forward(pooled, p, cfg);
    REQUIRE(tr.preds.rows() == 4);
    REQUIRE(tr.preds.cols() == 8);
    for (std::size_t cell = 0; cell < 4; ++cell) {
        for (std::size_t k = 0; k < 5; ++k) {
            CHECK(tr.preds(cell, k) > 0.0);
            CHECK(tr.preds(cell, k) < 1.0);
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(tr.preds(cell, 5 + c) > 0.0);
            sum += tr.preds(cell, 5 + c);
        }
        CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
    CHECK(head_forward(pooled, p, cfg).preds == tr.preds);
    CHECK_THROWS_AS(head_forward(Matrix(d_in + 1, 1), p, cfg), std::invalid_argument);
}

TEST_CASE("box decoding from grid cells") {
    HeadConfig cfg;
    cfg.s = 2;
    cfg.classes = 2;
    Matrix preds(4, 7, 0.0);
    // Cell 3 = (gx 1, gy 1) on a 64px image, cell size 32.
    preds(3, 0) = 0.5;
    preds(3, 1) = 0.5;
    preds(3, 2) = 0.25;
    preds(3, 3) = 0.25;
    const BBox b = decode_cell_box(preds, 3, cfg, 64.0);
    CHECK(b.x1 == 40.0);
    CHECK(b.y1 == 40.0);
    CHECK(b.x2 == 56.0);
    CHECK(b.y2 == 56.0);

    // Boxes clamp to the image.
    preds(0, 0) = 0.0;
    preds(0, 1) = 0.0;
    preds(0, 2) = 0.5;
    preds(0, 3) = 0.5;
    const BBox c = decode_cell_box(preds, 0, cfg, 64.0);
    CHECK(c.x1 == 0.0);
    CHECK(c.y1 == 0.0);
    CHECK(c.x2 == 16.0);
}

TEST_CASE("decode keeps scored cells and honors the threshold") {
    HeadConfig cfg;
    cfg.s = 2;
    cfg.classes = 2;
    Matrix preds(4, 7, 0.0);
    for (std::size_t cell = 0; cell < 4; ++cell) {
        preds(cell, 0) = preds(cell, 1) = 0.5;
        preds(cell, 2) = preds(cell, 3) = 0.3;
    }
    preds(1, 4) = 0.9; // conf
    preds(1, 5) = 0.2;
    preds(1, 6) = 0.8; // class 1 wins, score 0.72
    preds(2, 4) = 0.4;
    preds(2, 5) = 0.6;
    preds(2, 6) = 0.4; // class 0, score 0.24

    const std::vector<Detection> all = decode(preds, cfg, 64.0, 0.0);
    CHECK(all.size() == 4);
    const std::vector<Detection> some = decode(preds, cfg, 64.0, 0.5);
    REQUIRE(some.size() == 1);
    CHECK(some[0].cell == 1);
    CHECK(some[0].class_id == 1);
    CHECK(std::fabs(some[0].score - 0.72) < 1e-12);
    CHECK(decode(preds, cfg, 64.0, 1.0 + 1e-9).empty());
    CHECK_THROWS_AS(decode(Matrix(4, 6), cfg, 64.0, 0.5), std::invalid_argument);
}

TEST_CASE("greedy suppression keeps the best of overlapping same-class boxes") {
    Detection a{{0, 0, 10, 10}, 0, 0.9, 0};
    Detection b{{1, 1, 11, 11}, 0, 0.8, 1};   // overlaps a heavily
    Detection c{{0, 0, 10, 10}, 1, 0.7, 2};   // same box, other class
    Detection d{{30, 30, 40, 40}, 0, 0.6, 3}; // far away
    const std::vector<Detection> kept = nms({b, a, c, d}, 0.5);
    REQUIRE(kept.size() == 3);
    CHECK(kept[0].score == 0.9);
    CHECK(kept[1].class_id == 1);
    CHECK(kept[2].score == 0.6);

    // Equal scores: the lower cell index wins deterministically.
    Detection e{{0, 0, 10, 10}, 0, 0.5, 5};
    Detection f{{0, 0, 10, 10}, 0, 0.5, 4};
    const std::vector<Detection> tie = nms({e, f}, 0.5);
    REQUIRE(tie.size() == 1);
    CHECK(tie[0].cell == 4);
}

TEST_CASE("detection loss vanishes on a perfect prediction") {
    HeadConfig cfg;
    cfg.s = 2;
    cfg.classes = 2;
    const double h_in = 64.0;
    // Object centered at (48, 16): cell (gx 1, gy 0) = cell 1, 16x32 box.
    SceneObject obj;
    obj.class_id = 1;
    obj.box = BBox{40, 0, 56, 32};
    Matrix preds(4, 7, 0.0);
    preds(1, 0) = 0.5;       // (48 - 32) / 32
    preds(1, 1) = 0.5;       // 16 / 32
    preds(1, 2) = 16.0 / 64; // width fraction
    preds(1, 3) = 32.0 / 64;
    preds(1, 4) = 1.0; // conf matches IoU 1
    preds(1, 6) = 1.0; // class 1
    const DetectionLoss dl = detection_loss(preds, {obj}, cfg, h_in);
    CHECK(dl.value == 0.0);
    CHECK(max_abs(dl.d_preds) == 0.0);

    // Perturb the x offset: loss and gradient move exactly as the square says.
    preds(1, 0) = 0.6;
    const DetectionLoss dl2 = detection_loss(preds, {obj}, cfg, h_in);
    // Coordinate term 5 * 0.01; conf target dropped below 1, adding a conf term.
    CHECK(dl2.value >= 0.05 - 1e-12);
    CHECK(std::fabs(dl2.d_preds(1, 0) - 5.0 * 2.0 * 0.1) < 1e-9);

    // Empty cells pay the down-weighted objectness price.
    Matrix noisy = preds;
    noisy(0, 4) = 0.5;
    const DetectionLoss dl3 = detection_loss(noisy, {obj}, cfg, h_in);
    CHECK(std::fabs((dl3.value - dl2.value) - 0.5 * 0.25) < 1e-12);
    CHECK(std::fabs(dl3.d_preds(0, 4) - 0.5 * 2.0 * 0.5) < 1e-12);
}

TEST_CASE("detection loss gradient matches finite differences") {
    HeadConfig cfg;
    cfg.s = 2;
    cfg.classes = 3;
    const double h_in = 64.0;
    SceneObject o1{1, BBox{6, 10, 30, 40}};
    SceneObject o2{2, BBox{34, 34, 62, 60}};
    const std::vector<SceneObject> objects{o1, o2};
    Matrix preds = random_matrix_range(4, 8, 31415, 0.05, 0.95);

    // Freeze the objectness constants so the finite difference probes the
    // same function the analytic gradient differentiates.
    const std::vector<double> conf = current_conf_targets(preds, objects, cfg, h_in);
    const DetectionLoss dl = detection_loss(preds, objects, cfg, h_in, &conf);
    const double step = 1e-6;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        Matrix up = preds, down = preds;
        up.data()[i] += step;
        down.data()[i] -= step;
        const double numeric = (detection_loss(up, objects, cfg, h_in, &conf).value -
                                detection_loss(down, objects, cfg, h_in, &conf).value) /
                               (2.0 * step);
        CHECK(rel_err(dl.d_preds.data()[i], numeric) < 1e-5);
    }
}

TEST_CASE("full phase-two gradient path survives finite differences") {
    // Small end-to-end instance: graph model -> pooling -> head -> loss.
    const std::size_t h = 4, channels = 8, embed = 4;
    PatchGrid grid(64, h);
    Rng rng(777);
    Matrix x(grid.nodes(), channels);
    // Feature scale matching what the featurizer emits (rms ~0.06). The init
    // gains are calibrated for that scale; unit-scale features saturate tanh
    // and push gradient entries down to the finite-difference noise floor.
    for (double& v : x.data()) v = rng.uniform(-0.1, 0.1);
    const Graph g = to_graph(FeatureMap(grid, x));
    const Matrix ax = matmul(g.a_norm, g.x);
    const Matrix xt = transpose(g.x);

    HeadConfig cfg;
    cfg.s = 2;
    cfg.classes = 2;
    cfg.hidden = 12;
    const std::vector<SceneObject> objects{{0, BBox{8, 8, 36, 30}}, {1, BBox{40, 36, 60, 62}}};

    DiagNetParams dp = init_diagnet_params(channels, embed, grid.nodes(), 11);
    HeadParams hp = init_head_params(cfg.s * cfg.s * channels, cfg, 12);

    for (PoolKind kind : {PoolKind::avg, PoolKind::max}) {
        cfg.pooling = kind;
        // Forward once to freeze the objectness constants and (for max
        // pooling) the winner routing used by the analytic gradient.
        const ForwardTrace tr0 = forward_from_ax(ax, xt, dp);
        const PooledMap pm0 = pool_diag_map(tr0.y_hat, h, cfg.s, kind);
        const HeadTrace ht0 = head_forward(pm0.values, hp, cfg);
        const std::vector<double> conf = current_conf_targets(ht0.preds, objects, cfg, 64.0);

        const auto loss_at = [&](const DiagNetParams& dpp, const HeadParams& hpp) {
            const ForwardTrace tr = forward_from_ax(ax, xt, dpp);
            const PooledMap pm = pool_diag_map(tr.y_hat, h, cfg.s, kind);
            const HeadTrace ht = head_forward(pm.values, hpp, cfg);
            return detection_loss(ht.preds, objects, cfg, 64.0, &conf).value;
        };

        // Analytic: head backward, unpool, then the graph-model backward.
        const DetectionLoss dl = detection_loss(ht0.preds, objects, cfg, 64.0, &conf);
        const HeadGrads hg = head_backward(ht0, dl.d_preds, hp, cfg);
        const Matrix d_y = unpool_diag_map(hg.d_input, pm0.trace);
        const DiagNetGrads dg = backward_from_dy(tr0, g.x, d_y, dp);

        const double step = 1e-6;
        const auto check_matrix = [&](Matrix& param, const Matrix& analytic, auto&& eval) {
            double worst = 0.0;
            for (std::size_t i = 0; i < param.size(); ++i) {
                const double saved = param.data()[i];
                param.data()[i] = saved + step;
                const double up = eval();
                param.data()[i] = saved - step;
                const double down = eval();
                param.data()[i] = saved;
                const double numeric = (up - down) / (2.0 * step);
                const double aa = std::fabs(analytic.data()[i]);
                const double nn = std::fabs(numeric);
                const double diff = std::fabs(analytic.data()[i] - numeric);
                worst = std::max(worst, (aa < 1e-8 && nn < 1e-8)
                                            ? diff
                                            : diff / std::max(aa, nn));
            }
            return worst;
        };
        const auto eval_now = [&]() { return loss_at(dp, hp); };
        CHECK(check_matrix(hp.fc1_w, hg.d_fc1_w, eval_now) < 1e-4);
        CHECK(check_matrix(hp.fc1_b, hg.d_fc1_b, eval_now) < 1e-4);
        CHECK(check_matrix(hp.fc2_w, hg.d_fc2_w, eval_now) < 1e-4);
        CHECK(check_matrix(hp.fc2_b, hg.d_fc2_b, eval_now) < 1e-4);
        CHECK(check_matrix(dp.w_emb, dg.d_w_emb, eval_now) < 1e-4);
        CHECK(check_matrix(dp.w_pred, dg.d_w_pred, eval_now) < 1e-4);
    }
}

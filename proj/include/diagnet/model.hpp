#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/graph.hpp"
#include "diagnet/matrix.hpp"

namespace diagnet {

enum class LossKind { min, comp };
enum class TargetMode { hard, soft };

inline const char* to_string(LossKind k) { return k == LossKind::min ? "min" : "comp"; }
inline const char* to_string(TargetMode m) { return m == TargetMode::hard ? "hard" : "soft"; }

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "min") return LossKind::min;
    if (s == "comp") return LossKind::comp;
    throw std::invalid_argument("loss_kind: expected min|comp, got '" + s + "'");
}

inline TargetMode target_mode_from_string(const std::string& s) {
    if (s == "hard") return TargetMode::hard;
    if (s == "soft") return TargetMode::soft;
    throw std::invalid_argument("mode: expected hard|soft, got '" + s + "'");
}

// Learned weights. w_emb lifts node features into the embedding that forms
// the predicted adjacency; w_pred maps the adjacency-projected features to
// the calibrated output. w_pred is tied to the node count, so a trained
// model is specific to one grid size.
struct DiagNetParams {
    Matrix w_emb;  // channels x embed
    Matrix w_pred; // nodes x nodes
};

// Init gains, sized against the feature scale the synthetic featurizer
// produces (entries around 0.06 rms). The embedding gain lifts those small
// inputs into tanh's active range so the embedding starts expressive rather
// than near-linear-zero; the prediction gain then keeps the calibrated
// output hot but unsaturated. Cold starts (plain 1/sqrt(fan-in)) leave the
// output orders of magnitude below the targets and gradient descent crawls.
constexpr double kEmbedInitGain = 20.0;
constexpr double kPredInitGain = 4.0;

inline DiagNetParams init_diagnet_params(std::size_t channels, std::size_t embed,
                                         std::size_t nodes, std::uint64_t seed) {
    if (channels == 0 || embed == 0 || nodes == 0) {
        throw std::invalid_argument("init_diagnet_params: all dimensions must be >= 1");
    }
    DiagNetParams p;
    p.w_emb = rand_matrix(channels, embed, splitmix64(seed),
                          kEmbedInitGain / std::sqrt(static_cast<double>(channels)));
    p.w_pred = rand_matrix(nodes, nodes, splitmix64(seed + 1),
                           kPredInitGain / std::sqrt(static_cast<double>(nodes)));
    return p;
}

// Intermediates kept from the forward pass; everything backward needs except
// the raw node features.
struct ForwardTrace {
    Matrix ax;     // a_norm * x      (nodes x channels), input to the embedding
    Matrix h_emb;  // tanh(ax w_emb)  (nodes x embed)
    Matrix a_hat;  // h h^T           (nodes x nodes), predicted adjacency
    Matrix m_pred; // x^T a_hat       (channels x nodes)
    Matrix y_hat;  // tanh(m w_pred)  (channels x nodes), calibrated output
};

inline ForwardTrace forward_from_ax(const Matrix& ax, const Matrix& xt,
                                    const DiagNetParams& p) {
    if (ax.cols() != p.w_emb.rows()) {
        throw std::invalid_argument("forward: feature channels " + std::to_string(ax.cols()) +
                                    " do not match w_emb rows " + std::to_string(p.w_emb.rows()));
    }
    if (p.w_pred.rows() != ax.rows() || p.w_pred.cols() != ax.rows()) {
        throw std::invalid_argument("forward: w_pred is " + detail::shape_str(p.w_pred) +
                                    ", expected " + std::to_string(ax.rows()) + "x" +
                                    std::to_string(ax.rows()));
    }
    ForwardTrace tr;
    tr.ax = ax;
    tr.h_emb = tanh_map(matmul(ax, p.w_emb));
    tr.a_hat = matmul(tr.h_emb, transpose(tr.h_emb));
    tr.m_pred = matmul(xt, tr.a_hat);
    tr.y_hat = tanh_map(matmul(tr.m_pred, p.w_pred));
    return tr;
}

inline ForwardTrace forward(const Graph& g, const DiagNetParams& p) {
    return forward_from_ax(matmul(g.a_norm, g.x), transpose(g.x), p);
}

// Node-wise response strength: column norms of y_hat. This is the map the
// detection head pools, and what the diagmap rendering visualizes.
inline std::vector<double> response_map(const Matrix& y_hat) {
    std::vector<double> r(y_hat.cols(), 0.0);
    for (std::size_t c = 0; c < y_hat.cols(); ++c) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < y_hat.rows(); ++ch) s += y_hat(ch, c) * y_hat(ch, c);
        r[c] = std::sqrt(s);
    }
    return r;
}

// Adjacency targets projected through the features: t = x^T a. Constant per
// scene, so callers cache it.
struct ProjectedTargets {
    Matrix t_diag; // channels x nodes
    Matrix t_perp; // channels x nodes
};

inline ProjectedTargets project_targets(const Matrix& xt, const DiagTargets& t) {
    return {matmul(xt, t.a_diag), matmul(xt, t.a_perp)};
}

// Norms are smoothed as sqrt(|.|_F^2 + eps^2) so the gradient stays finite
// at a zero residual; eps is far below any residual the model produces.
constexpr double kNormSmoothing = 1e-12;

// Guard on the raw ratio denominator. Below this the ratio loss is
// meaningless, so it returns the caller's fallback value with zero gradient
// (and warns on stderr).
constexpr double kCompDenomGuard = 1e-12;

inline double smoothed_norm(const Matrix& m) {
    return std::sqrt(sum_squares(m) + kNormSmoothing * kNormSmoothing);
}

// Calibration distance: |y_hat - t_diag|_F (smoothed).
inline double loss_min(const Matrix& y_hat, const Matrix& t_diag) {
    detail::require_same_shape(y_hat, t_diag, "loss_min");
    return smoothed_norm(sub(y_hat, t_diag));
}

// Contrastive ratio: |y_hat - t_diag|_F / |y_hat - t_perp|_F (both
// smoothed). Falls back to `fallback` when the raw denominator is below the
// guard, which only happens if the output coincides with t_perp.
inline double loss_comp(const Matrix& y_hat, const Matrix& t_diag, const Matrix& t_perp,
                        double fallback) {
    detail::require_same_shape(y_hat, t_diag, "loss_comp");
    detail::require_same_shape(y_hat, t_perp, "loss_comp");
    const Matrix rp = sub(y_hat, t_perp);
    if (frobenius_norm(rp) < kCompDenomGuard) {
        std::cerr << "diagnet: loss_comp denominator below " << kCompDenomGuard
                  << ", returning fallback " << fallback << "\n";
        return fallback;
    }
    return smoothed_norm(sub(y_hat, t_diag)) / smoothed_norm(rp);
}

struct LossValueGrad {
    double value = 0.0;
    Matrix d_y;              // dL/dy_hat, channels x nodes
    bool degenerate = false; // ratio denominator hit the guard
};

inline LossValueGrad loss_grad(const Matrix& y_hat, const ProjectedTargets& t, LossKind kind,
                               double fallback) {
    LossValueGrad out;
    const Matrix rd = sub(y_hat, t.t_diag);
    const double ns = std::sqrt(sum_squares(rd) + kNormSmoothing * kNormSmoothing);
    if (kind == LossKind::min) {
        out.value = ns;
        out.d_y = scaled(rd, 1.0 / ns);
        return out;
    }
    const Matrix rp = sub(y_hat, t.t_perp);
    const double raw_dp = frobenius_norm(rp);
    if (raw_dp < kCompDenomGuard) {
        std::cerr << "diagnet: loss_comp denominator below " << kCompDenomGuard
                  << ", returning fallback " << fallback << "\n";
        out.value = fallback;
        out.d_y = Matrix(y_hat.rows(), y_hat.cols(), 0.0);
        out.degenerate = true;
        return out;
    }
    const double ds = std::sqrt(sum_squares(rp) + kNormSmoothing * kNormSmoothing);
    out.value = ns / ds;
    // d(ns/ds)/dy = rd / (ns ds) - (ns / ds^3) rp
    out.d_y = scaled(rd, 1.0 / (ns * ds));
    add_scaled_inplace(out.d_y, rp, -ns / (ds * ds * ds));
    return out;
}

struct DiagNetGrads {
    Matrix d_w_emb;  // channels x embed
    Matrix d_w_pred; // nodes x nodes
};

// Backward pass from an arbitrary dL/dy_hat. Derivation, with z2 = m w_pred,
// m = x^T a_hat, a_hat = h h^T, h = tanh(ax w_emb):
//   g2      = d_y (1 - y_hat^2)         elementwise tanh derivative
//   dw_pred = m^T g2
//   dm      = g2 w_pred^T
//   da_hat  = x dm                       since m = x^T a_hat
//   dh      = (da_hat + da_hat^T) h      both factors of h h^T
//   g1      = dh (1 - h^2)
//   dw_emb  = (ax)^T g1
inline DiagNetGrads backward_from_dy(const ForwardTrace& tr, const Matrix& x,
                                     const Matrix& d_y, const DiagNetParams& p) {
    Matrix g2 = d_y;
    for (std::size_t i = 0; i < g2.size(); ++i) {
        const double y = tr.y_hat.data()[i];
        g2.data()[i] *= 1.0 - y * y;
    }
    DiagNetGrads g;
    g.d_w_pred = matmul(transpose(tr.m_pred), g2);
    const Matrix dm = matmul(g2, transpose(p.w_pred));
    const Matrix da_hat = matmul(x, dm);
    Matrix dh = matmul(add(da_hat, transpose(da_hat)), tr.h_emb);
    for (std::size_t i = 0; i < dh.size(); ++i) {
        const double h = tr.h_emb.data()[i];
        dh.data()[i] *= 1.0 - h * h;
    }
    g.d_w_emb = matmul(transpose(tr.ax), dh);
    return g;
}

// Loss value plus parameter gradients for one scene.
struct BackwardResult {
    double loss = 0.0;
    DiagNetGrads grads;
    bool degenerate = false;
};

inline BackwardResult backward(const ForwardTrace& tr, const Matrix& x,
                               const ProjectedTargets& t, LossKind kind,
                               const DiagNetParams& p, double fallback) {
    const LossValueGrad lg = loss_grad(tr.y_hat, t, kind, fallback);
    BackwardResult out;
    out.loss = lg.value;
    out.degenerate = lg.degenerate;
    if (lg.degenerate) {
        out.grads.d_w_emb = Matrix(p.w_emb.rows(), p.w_emb.cols(), 0.0);
        out.grads.d_w_pred = Matrix(p.w_pred.rows(), p.w_pred.cols(), 0.0);
        return out;
    }
    out.grads = backward_from_dy(tr, x, lg.d_y, p);
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification of the analytic gradients.
// ---------------------------------------------------------------------------

struct GradCheckConfig {
    std::size_t h = 4;        // grid side; nodes = h^2
    std::size_t h_in = 64;    // pixels
    std::size_t channels = 8; // feature channels
    std::size_t embed = 4;    // embedding width
    int trials = 5;           // independent random instances
    std::uint64_t seed = 94201;
    double fd_step = 1e-6;
    double tolerance = 1e-4;
    double tiny = 1e-8; // below this (both sides) compare absolutely
    double alpha = 1.0;
    Diagonal diagonal = Diagonal::main;
    // Deliberately corrupt one analytic entry; the check must then fail.
    bool corrupt = false;
};

struct GradCheckCombo {
    LossKind kind;
    TargetMode mode;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::vector<GradCheckCombo> combos;
};

namespace detail {

inline double fd_loss(const Matrix& ax, const Matrix& xt, const DiagNetParams& p,
                      const ProjectedTargets& t, LossKind kind) {
    const ForwardTrace tr = forward_from_ax(ax, xt, p);
    return kind == LossKind::min ? loss_min(tr.y_hat, t.t_diag)
                                 : loss_comp(tr.y_hat, t.t_diag, t.t_perp, 0.0);
}

inline double grad_entry_error(double analytic, double numeric, double tiny) {
    const double aa = std::fabs(analytic), an = std::fabs(numeric);
    const double diff = std::fabs(analytic - numeric);
    if (aa < tiny && an < tiny) return diff;
    return diff / std::max(aa, an);
}

// Max error over every entry of one parameter matrix.
inline double fd_check_matrix(Matrix& param, const Matrix& analytic, const Matrix& ax,
                              const Matrix& xt, const DiagNetParams& p,
                              const ProjectedTargets& t, LossKind kind, double step,
                              double tiny) {
    double worst = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double saved = param.data()[i];
        param.data()[i] = saved + step;
        const double up = fd_loss(ax, xt, p, t, kind);
        param.data()[i] = saved - step;
        const double down = fd_loss(ax, xt, p, t, kind);
        param.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        worst = std::max(worst, grad_entry_error(analytic.data()[i], numeric, tiny));
    }
    return worst;
}

} // namespace detail

// Compares the analytic gradient of every parameter entry against central
// finite differences, for both losses and both target modes, on random
// feature maps and boxes. Passes when the worst relative error stays within
// the tolerance.
inline GradCheckReport grad_check(const GradCheckConfig& cfg) {
    const PatchGrid grid(cfg.h_in, cfg.h);
    GradCheckReport report;
    const LossKind kinds[] = {LossKind::min, LossKind::comp};
    const TargetMode modes[] = {TargetMode::hard, TargetMode::soft};
    for (LossKind kind : kinds)
        for (TargetMode mode : modes) report.combos.push_back({kind, mode, 0.0});

    for (int trial = 0; trial < cfg.trials; ++trial) {
        Rng rng(splitmix64(cfg.seed + static_cast<std::uint64_t>(trial)));
        Matrix x(grid.nodes(), cfg.channels);
        for (double& v : x.data()) v = rng.uniform(-1.0, 1.0);
        const Graph g = to_graph(FeatureMap(grid, x));

        // One or two random boxes at least a patch wide.
        std::vector<BBox> boxes;
        const double patch = grid.patch(), side = static_cast<double>(grid.h_in);
        const int n_boxes = 1 + trial % 2;
        for (int b = 0; b < n_boxes; ++b) {
            BBox box;
            box.x1 = rng.uniform(0.0, side - patch);
            box.y1 = rng.uniform(0.0, side - patch);
            box.x2 = box.x1 + rng.uniform(patch, side - box.x1);
            box.y2 = box.y1 + rng.uniform(patch, side - box.y1);
            boxes.push_back(box);
        }

        const Matrix xt = transpose(g.x);
        const Matrix ax = matmul(g.a_norm, g.x);
        const ProjectedTargets hard =
            project_targets(xt, build_hard_targets(grid, boxes, cfg.diagonal));
        const ProjectedTargets soft =
            project_targets(xt, build_soft_targets(grid, boxes, cfg.diagonal, cfg.alpha));

        // Parameters drawn at classic 1/sqrt(fan-in) scale rather than with
        // the hot training gains: the comparison needs a smooth, unsaturated
        // operating point, where no tanh sits at exactly +-1 and no gradient
        // entry hides near the finite-difference noise floor.
        DiagNetParams p;
        Rng prng(splitmix64(cfg.seed ^ 0x5eedULL) + trial);
        p.w_emb = Matrix(cfg.channels, cfg.embed);
        const double emb_scale = 1.0 / std::sqrt(static_cast<double>(cfg.channels));
        for (double& v : p.w_emb.data()) v = prng.uniform(-emb_scale, emb_scale);
        p.w_pred = Matrix(grid.nodes(), grid.nodes());
        const double pred_scale = 1.0 / std::sqrt(static_cast<double>(grid.nodes()));
        for (double& v : p.w_pred.data()) v = prng.uniform(-pred_scale, pred_scale);

        for (GradCheckCombo& combo : report.combos) {
            const ProjectedTargets& t = combo.mode == TargetMode::hard ? hard : soft;
            const ForwardTrace tr = forward_from_ax(ax, xt, p);
            BackwardResult bw = backward(tr, g.x, t, combo.kind, p, 0.0);
            if (cfg.corrupt) {
                // Shift one embedding-gradient entry by a full unit; the
                // check must catch this no matter the entry's value.
                bw.grads.d_w_emb.data()[0] += 1.0;
            }
            const double e1 =
                detail::fd_check_matrix(p.w_emb, bw.grads.d_w_emb, ax, xt, p, t, combo.kind,
                                        cfg.fd_step, cfg.tiny);
            const double e2 =
                detail::fd_check_matrix(p.w_pred, bw.grads.d_w_pred, ax, xt, p, t, combo.kind,
                                        cfg.fd_step, cfg.tiny);
            combo.max_rel_err = std::max({combo.max_rel_err, e1, e2});
        }
    }
    for (const GradCheckCombo& c : report.combos)
        report.max_rel_err = std::max(report.max_rel_err, c.max_rel_err);
    report.pass = report.max_rel_err <= cfg.tolerance;
    return report;
}

} // namespace diagnet

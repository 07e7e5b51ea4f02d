#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/matrix.hpp"

namespace diagnet {

// Square input of h_in x h_in pixels cut into an h x h grid of square
// patches. Patch (row r, col c) is graph node r*h + c; its center in pixel
// coordinates is ((c + 0.5) * patch, (r + 0.5) * patch).
struct PatchGrid {
    std::size_t h_in = 0; // input side, pixels
    std::size_t h = 0;    // patches per side

    PatchGrid() = default;
    PatchGrid(std::size_t h_in_, std::size_t h_)
        : h_in(h_in_), h(h_) {
        if (h == 0 || h_in == 0 || h_in % h != 0) {
            throw std::invalid_argument("PatchGrid: h_in=" + std::to_string(h_in) +
                                        " must be a positive multiple of h=" + std::to_string(h));
        }
    }

    std::size_t nodes() const { return h * h; }
    double patch() const { return static_cast<double>(h_in) / static_cast<double>(h); }
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline Point node_center(const PatchGrid& grid, std::size_t node) {
    if (node >= grid.nodes()) {
        throw std::invalid_argument("node_center: node " + std::to_string(node) +
                                    " out of range for " + std::to_string(grid.nodes()) + " nodes");
    }
    const double p = grid.patch();
    const std::size_t r = node / grid.h;
    const std::size_t c = node % grid.h;
    return {(static_cast<double>(c) + 0.5) * p, (static_cast<double>(r) + 0.5) * p};
}

// Axis-aligned box in pixel coordinates, corners (x1,y1) top-left and
// (x2,y2) bottom-right, x2 > x1 and y2 > y1.
struct BBox {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }

    void validate() const {
        if (!(x2 > x1) || !(y2 > y1)) {
            throw std::invalid_argument("BBox: degenerate box [" + std::to_string(x1) + "," +
                                        std::to_string(y1) + "," + std::to_string(x2) + "," +
                                        std::to_string(y2) + "]");
        }
    }
};

inline double iou(const BBox& a, const BBox& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Which box diagonal a node's distance is measured against. `both` takes the
// nearer of the two, i.e. the union of the two diagonal bands.
enum class Diagonal { main, anti, both };

inline const char* to_string(Diagonal d) {
    switch (d) {
        case Diagonal::main: return "main";
        case Diagonal::anti: return "anti";
        case Diagonal::both: return "both";
    }
    return "?";
}

inline Diagonal diagonal_from_string(const std::string& s) {
    if (s == "main") return Diagonal::main;
    if (s == "anti") return Diagonal::anti;
    if (s == "both") return Diagonal::both;
    throw std::invalid_argument("diagonal: expected main|anti|both, got '" + s + "'");
}

inline double point_segment_distance(const Point& p, const Point& a, const Point& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) {
        t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
        t = std::clamp(t, 0.0, 1.0);
    }
    const double ex = p.x - (a.x + t * dx);
    const double ey = p.y - (a.y + t * dy);
    return std::sqrt(ex * ex + ey * ey);
}

// Distance from a node's patch center to a box diagonal, treated as a
// segment: points past the corners measure to the nearest corner.
inline double diag_distance(const PatchGrid& grid, const BBox& box, std::size_t node,
                            Diagonal diagonal) {
    box.validate();
    const Point p = node_center(grid, node);
    const Point tl{box.x1, box.y1}, br{box.x2, box.y2};
    const Point tr{box.x2, box.y1}, bl{box.x1, box.y2};
    switch (diagonal) {
        case Diagonal::main: return point_segment_distance(p, tl, br);
        case Diagonal::anti: return point_segment_distance(p, tr, bl);
        case Diagonal::both:
            return std::min(point_segment_distance(p, tl, br),
                            point_segment_distance(p, tr, bl));
    }
    throw std::invalid_argument("diag_distance: bad diagonal");
}

// Membership cutoff: half the diagonal length of one patch. A node whose
// center lies within delta of the box diagonal counts as a member.
inline double threshold_delta(const PatchGrid& grid) {
    return 0.5 * grid.patch() * std::sqrt(2.0);
}

// Soft membership of one node: exp(-d / (2 sigma^2)) with sigma = alpha *
// delta / sqrt(2), i.e. exp(-d / (alpha^2 delta^2)). The distance enters
// unsquared, so the falloff is exponential rather than Gaussian, and alpha
// directly scales the width of the diagonal band.
inline double soft_membership(double distance, double delta, double alpha) {
    if (!(alpha > 0.0)) {
        throw std::invalid_argument("soft_membership: alpha must be > 0, got " +
                                    std::to_string(alpha));
    }
    const double sigma = alpha * delta / std::sqrt(2.0);
    return std::exp(-distance / (2.0 * sigma * sigma));
}

// Supervision targets for one scene: a_diag marks node pairs that both lie
// on (or near) a box diagonal, a_perp marks pairs where both lie away from
// every diagonal. Calibration pressure toward a_diag and away from a_perp is
// what turns the predicted adjacency into a diagonal detector.
struct DiagTargets {
    Matrix a_diag; // n x n
    Matrix a_perp; // n x n
};

namespace detail {

inline void require_boxes(const std::vector<BBox>& boxes, const char* who) {
    if (boxes.empty()) {
        throw std::invalid_argument(std::string(who) + ": at least one box required");
    }
    for (const BBox& b : boxes) b.validate();
}

} // namespace detail

// Per-node memberships for one box: hard 0/1 by distance <= delta, or the
// exponential soft score.
inline std::vector<double> node_memberships(const PatchGrid& grid, const BBox& box,
                                            Diagonal diagonal, bool soft, double alpha) {
    const std::size_t n = grid.nodes();
    const double delta = threshold_delta(grid);
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = diag_distance(grid, box, i, diagonal);
        m[i] = soft ? soft_membership(d, delta, alpha) : (d <= delta ? 1.0 : 0.0);
    }
    return m;
}

// Hard targets. Per box, a_diag(i,j) = m_i * m_j and a_perp(i,j) =
// (1-m_i)(1-m_j) with binary m; multiple boxes combine with max for a_diag
// (member of any diagonal) and min for a_perp (off every diagonal).
inline DiagTargets build_hard_targets(const PatchGrid& grid, const std::vector<BBox>& boxes,
                                      Diagonal diagonal) {
    detail::require_boxes(boxes, "build_hard_targets");
    const std::size_t n = grid.nodes();
    DiagTargets t{Matrix(n, n, 0.0), Matrix(n, n, 1.0)};
    for (const BBox& box : boxes) {
        const std::vector<double> m = node_memberships(grid, box, diagonal, false, 1.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                t.a_diag(i, j) = std::max(t.a_diag(i, j), m[i] * m[j]);
                t.a_perp(i, j) = std::min(t.a_perp(i, j), (1.0 - m[i]) * (1.0 - m[j]));
            }
        }
    }
    return t;
}

// Soft targets: same combination rule with exponential memberships.
inline DiagTargets build_soft_targets(const PatchGrid& grid, const std::vector<BBox>& boxes,
                                      Diagonal diagonal, double alpha) {
    detail::require_boxes(boxes, "build_soft_targets");
    const std::size_t n = grid.nodes();
    DiagTargets t{Matrix(n, n, 0.0), Matrix(n, n, 1.0)};
    for (const BBox& box : boxes) {
        const std::vector<double> m = node_memberships(grid, box, diagonal, true, alpha);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                t.a_diag(i, j) = std::max(t.a_diag(i, j), m[i] * m[j]);
                t.a_perp(i, j) = std::min(t.a_perp(i, j), (1.0 - m[i]) * (1.0 - m[j]));
            }
        }
    }
    return t;
}

// Row-normalize a non-negative square matrix so each nonzero row sums to 1.
// Zero rows are kept zero rather than dividing by zero.
inline Matrix degree_normalize(const Matrix& a) {
    if (a.rows() != a.cols()) {
        throw std::invalid_argument("degree_normalize: matrix must be square, got " +
                                    detail::shape_str(a));
    }
    Matrix out = a;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) row_sum += a(i, j);
        if (row_sum > 0.0) {
            for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= row_sum;
        }
    }
    return out;
}

} // namespace diagnet

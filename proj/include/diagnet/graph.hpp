#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/matrix.hpp"

namespace diagnet {

// Per-patch feature vectors on an h x h grid, row-major node order. x(i, c)
// is channel c of node i.
struct FeatureMap {
    PatchGrid grid;
    Matrix x; // nodes x channels

    FeatureMap() = default;
    FeatureMap(const PatchGrid& grid_, Matrix x_) : grid(grid_), x(std::move(x_)) {
        if (x.rows() != grid.nodes()) {
            throw std::invalid_argument("FeatureMap: x has " + std::to_string(x.rows()) +
                                        " rows, grid has " + std::to_string(grid.nodes()) +
                                        " nodes");
        }
        if (x.cols() == 0) {
            throw std::invalid_argument("FeatureMap: channel count must be >= 1");
        }
    }

    std::size_t nodes() const { return x.rows(); }
    std::size_t channels() const { return x.cols(); }
};

// A scene graph: raw cosine-similarity adjacency plus its symmetric
// normalization, alongside the node features that produced it.
struct Graph {
    PatchGrid grid;
    Matrix x;      // nodes x channels
    Matrix a;      // nodes x nodes, raw adjacency
    Matrix a_norm; // nodes x nodes, D^-1/2 (A with unit self-loops) D^-1/2
};

// Clamped cosine similarity between feature rows: a(i,j) =
// max(x_i . x_j / (|x_i| |x_j|), 0). Pairs involving an all-zero feature row
// get similarity 0; the diagonal is 1 for nonzero rows.
inline Matrix cosine_adjacency(const Matrix& x) {
    const std::size_t n = x.rows(), c = x.cols();
    std::vector<double> norm(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += x(i, k) * x(i, k);
        norm[i] = std::sqrt(s);
    }
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        a(i, i) = norm[i] > 0.0 ? 1.0 : 0.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = 0.0;
            if (norm[i] > 0.0 && norm[j] > 0.0) {
                double dot = 0.0;
                for (std::size_t k = 0; k < c; ++k) dot += x(i, k) * x(j, k);
                v = std::max(dot / (norm[i] * norm[j]), 0.0);
            }
            a(i, j) = v;
            a(j, i) = v;
        }
    }
    return a;
}

// Symmetric normalization with unit self-loops: the diagonal is raised to 1
// (cosine adjacency already has 1 there for any node with features, and a
// featureless node still needs a self-loop for a positive degree), then
// a_norm(i,j) = a(i,j) / sqrt(d_i d_j) with d the row sums. Keeps the
// spectral radius at most 1.
inline Matrix normalize_adjacency(const Matrix& a) {
    if (a.rows() != a.cols()) {
        throw std::invalid_argument("normalize_adjacency: matrix must be square, got " +
                                    detail::shape_str(a));
    }
    const std::size_t n = a.rows();
    Matrix out = a;
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    std::vector<double> inv_sqrt_d(n);
    for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = out(i, j);
            if (v < 0.0) {
                throw std::invalid_argument("normalize_adjacency: negative entry at (" +
                                            std::to_string(i) + "," + std::to_string(j) + ")");
            }
            d += v;
        }
        inv_sqrt_d[i] = 1.0 / std::sqrt(d); // d >= 1 thanks to the self-loop
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) *= inv_sqrt_d[i] * inv_sqrt_d[j];
    return out;
}

inline Graph to_graph(const FeatureMap& fm) {
    Graph g;
    g.grid = fm.grid;
    g.x = fm.x;
    g.a = cosine_adjacency(fm.x);
    g.a_norm = normalize_adjacency(g.a);
    return g;
}

} // namespace diagnet

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/matrix.hpp"

namespace diagnet {

// Node brightness for a target adjacency: row sums of the degree-normalized
// matrix. Nodes that belong to some diagonal band keep a normalized row
// (sum 1) and light up; nodes with empty rows stay dark.
inline std::vector<double> target_render_values(const Matrix& a_diag) {
    const Matrix norm = degree_normalize(a_diag);
    std::vector<double> out(norm.rows(), 0.0);
    for (std::size_t i = 0; i < norm.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < norm.cols(); ++j) s += norm(i, j);
        out[i] = s;
    }
    return out;
}

// Node brightness for a predicted edge map: the Euclidean norm of each node's
// column of the channels x nodes output matrix.
inline std::vector<double> diagmap_render_values(const Matrix& y_hat) {
    std::vector<double> out(y_hat.cols(), 0.0);
    for (std::size_t j = 0; j < y_hat.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < y_hat.rows(); ++i) s += y_hat(i, j) * y_hat(i, j);
        out[j] = std::sqrt(s);
    }
    return out;
}

// Binary PGM (P5) bytes for a row-major value plane, linearly rescaled so the
// smallest value maps to 0 and the largest to 255. A constant plane (max ==
// min) renders as all black rather than dividing by zero.
inline std::string pgm_bytes(const std::vector<double>& values, std::size_t width,
                             std::size_t height) {
    if (width == 0 || height == 0 || values.size() != width * height) {
        throw std::invalid_argument("pgm_bytes: value count does not match dimensions");
    }
    double lo = values[0], hi = values[0];
    for (double v : values) {
        if (!std::isfinite(v)) throw std::invalid_argument("pgm_bytes: non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.reserve(out.size() + values.size());
    for (double v : values) {
        const double scaled = span > 0.0 ? (v - lo) / span * 255.0 : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::llround(scaled))));
    }
    return out;
}

} // namespace diagnet

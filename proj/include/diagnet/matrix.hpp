#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace diagnet {

// Dense row-major matrix of 64-bit floats. Desk scale keeps N = h^2 <= 4096,
// so dense storage is used throughout; no sparse formats, no BLAS.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
        : rows_(rows), cols_(cols), data_(values) {
        if (data_.size() != rows * cols) {
            throw std::invalid_argument("Matrix: initializer has " +
                                        std::to_string(data_.size()) + " values, expected " +
                                        std::to_string(rows * cols));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const double& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
    }
}

} // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: dimension mismatch " + detail::shape_str(a) +
                                    " * " + detail::shape_str(b));
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix out(n, m);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    // i-k-j order so the inner loop runs over contiguous rows of b and out.
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = ad + i * k;
        double* orow = od + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = arow[p];
            const double* brow = bd + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "add");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "sub");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "hadamard");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

inline Matrix scaled(const Matrix& a, double s) {
    Matrix out = a;
    for (double& v : out.data()) v *= s;
    return out;
}

inline void scale_inplace(Matrix& a, double s) {
    for (double& v : a.data()) v *= s;
}

// a += s * b, used by the optimizer and gradient accumulation.
inline void add_scaled_inplace(Matrix& a, const Matrix& b, double s) {
    detail::require_same_shape(a, b, "add_scaled_inplace");
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

inline double sum_squares(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

inline double frobenius_norm(const Matrix& a) { return std::sqrt(sum_squares(a)); }

inline Matrix tanh_map(const Matrix& a) {
    Matrix out = a;
    for (double& v : out.data()) v = std::tanh(v);
    return out;
}

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::fabs(v));
    return m;
}

inline bool all_finite(const Matrix& a) {
    for (double v : a.data())
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Seeded randomness. mt19937_64 is fully specified by the standard, so the
// raw stream reproduces across platforms; the uniform/normal mappings below
// are written out explicitly instead of using std::*_distribution, whose
// output is implementation-defined.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

    // Uniform index in [0, n). Multiply-shift keeps it branch-free and portable.
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    // Box-Muller; no cached spare so the consumed stream length is predictable.
    double normal(double sigma) {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

    std::string save_state() const {
        std::ostringstream oss;
        oss << engine_;
        return oss.str();
    }

    void load_state(const std::string& state) {
        std::istringstream iss(state);
        iss >> engine_;
        if (iss.fail()) throw std::runtime_error("Rng: malformed serialized state");
        // The state must be the whole string; trailing junk means corruption.
        std::string rest;
        iss >> rest;
        if (!rest.empty()) throw std::runtime_error("Rng: trailing bytes after serialized state");
    }

private:
    std::mt19937_64 engine_;
};

// Deterministic matrix with entries uniform in [-scale, +scale].
inline Matrix rand_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale) {
    if (rows == 0 || cols == 0) {
        throw std::invalid_argument("rand_matrix: rows and cols must be >= 1");
    }
    Rng rng(seed);
    Matrix out(rows, cols);
    for (double& v : out.data()) v = rng.uniform(-scale, scale);
    return out;
}

} // namespace diagnet

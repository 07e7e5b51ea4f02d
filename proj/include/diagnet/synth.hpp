#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/graph.hpp"
#include "diagnet/io.hpp"
#include "diagnet/matrix.hpp"
#include "diagnet/parallel.hpp"

namespace diagnet {

struct SceneObject {
    int class_id = 0;
    BBox box;
};

// One grayscale image (values in [0,1], row-major h_in x h_in) with its
// ground-truth boxes.
struct Scene {
    std::size_t h_in = 0;
    Matrix image;
    std::vector<SceneObject> objects;
};

struct Dataset {
    std::size_t h_in = 0;
    std::size_t classes = 0;
    std::vector<Scene> scenes;
};

// Generation knobs. Object sides are whole pixels in [min_side, max_side];
// with allow_overlap, at most one pair may overlap and never past IoU 1/2,
// otherwise boxes are pairwise disjoint.
struct DatasetSpec {
    std::size_t count = 200;
    std::size_t h_in = 64;
    std::size_t classes = 3;
    std::size_t max_objects = 2;
    bool allow_overlap = true;
    std::uint64_t seed = 1;
    std::size_t min_side = 16;
    std::size_t max_side = 48;
    double noise_sigma = 0.02;

    void validate() const {
        if (count == 0) throw std::invalid_argument("DatasetSpec: count must be >= 1");
        if (h_in < 8) throw std::invalid_argument("DatasetSpec: h_in must be >= 8");
        if (classes == 0) throw std::invalid_argument("DatasetSpec: classes must be >= 1");
        if (max_objects == 0) throw std::invalid_argument("DatasetSpec: max_objects must be >= 1");
        if (min_side < 4 || min_side > max_side || max_side > h_in) {
            throw std::invalid_argument("DatasetSpec: need 4 <= min_side <= max_side <= h_in");
        }
        if (noise_sigma < 0.0) throw std::invalid_argument("DatasetSpec: noise_sigma < 0");
    }
};

constexpr double kBackgroundLevel = 0.1;

namespace detail {

// The three shape/texture archetypes; class ids beyond 2 reuse them cyclically.
//   0: solid rectangle
//   1: ellipse with 4px horizontal stripes
//   2: triangle with a 4px checkerboard
inline void draw_object(Matrix& img, const SceneObject& obj, double fg) {
    const double x1 = obj.box.x1, y1 = obj.box.y1, x2 = obj.box.x2, y2 = obj.box.y2;
    const int pattern = obj.class_id % 3;
    const double cx = obj.box.cx(), cy = obj.box.cy();
    const double rx = obj.box.width() / 2.0, ry = obj.box.height() / 2.0;
    const std::size_t px1 = static_cast<std::size_t>(std::max(0.0, std::floor(x1)));
    const std::size_t py1 = static_cast<std::size_t>(std::max(0.0, std::floor(y1)));
    const std::size_t px2 = std::min(img.cols(), static_cast<std::size_t>(std::ceil(x2)));
    const std::size_t py2 = std::min(img.rows(), static_cast<std::size_t>(std::ceil(y2)));
    for (std::size_t py = py1; py < py2; ++py) {
        for (std::size_t px = px1; px < px2; ++px) {
            const double x = px + 0.5, y = py + 0.5; // pixel center
            if (x < x1 || x >= x2 || y < y1 || y >= y2) continue;
            bool inside = true;
            double value = fg;
            if (pattern == 1) {
                const double nx = (x - cx) / rx, ny = (y - cy) / ry;
                inside = nx * nx + ny * ny <= 1.0;
                const std::size_t band = static_cast<std::size_t>((y - y1) / 4.0);
                if (inside && band % 2 == 1) value = kBackgroundLevel;
            } else if (pattern == 2) {
                // Upward triangle: apex mid-top, base along the bottom edge.
                const double t = (y - y1) / (y2 - y1); // 0 at apex row
                const double half = t * rx;
                inside = std::fabs(x - cx) <= half;
                const std::size_t ix = static_cast<std::size_t>((x - x1) / 4.0);
                const std::size_t iy = static_cast<std::size_t>((y - y1) / 4.0);
                if (inside && (ix + iy) % 2 == 1) value = 0.5 * fg;
            }
            if (inside) img(py, px) = value;
        }
    }
}

inline bool placement_ok(const std::vector<SceneObject>& placed, const BBox& candidate,
                         bool allow_overlap) {
    // Scene-wide overlapping-pair budget of one, counting pairs already on
    // the canvas, not just the candidate's own.
    int overlapping_pairs = 0;
    for (std::size_t i = 0; i < placed.size(); ++i)
        for (std::size_t j = i + 1; j < placed.size(); ++j)
            if (iou(placed[i].box, placed[j].box) > 0.0) ++overlapping_pairs;
    for (const SceneObject& o : placed) {
        const double v = iou(o.box, candidate);
        if (!allow_overlap && v > 0.0) return false;
        if (v > 0.5) return false;
        if (v > 0.0) ++overlapping_pairs;
    }
    return overlapping_pairs <= 1;
}

} // namespace detail

// One scene from its own engine; scenes in a dataset are independent streams
// so regenerating any prefix is stable.
inline Scene gen_scene(const DatasetSpec& spec, std::uint64_t scene_seed) {
    spec.validate();
    Rng rng(scene_seed);
    Scene scene;
    scene.h_in = spec.h_in;
    scene.image = Matrix(spec.h_in, spec.h_in, kBackgroundLevel);

    const std::size_t n_objects = 1 + rng.index(spec.max_objects);
    for (std::size_t k = 0; k < n_objects; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const std::size_t w = spec.min_side + rng.index(spec.max_side - spec.min_side + 1);
            const std::size_t h = spec.min_side + rng.index(spec.max_side - spec.min_side + 1);
            const std::size_t x1 = rng.index(spec.h_in - w + 1);
            const std::size_t y1 = rng.index(spec.h_in - h + 1);
            BBox box{static_cast<double>(x1), static_cast<double>(y1),
                     static_cast<double>(x1 + w), static_cast<double>(y1 + h)};
            if (!detail::placement_ok(scene.objects, box, spec.allow_overlap)) continue;
            SceneObject obj;
            obj.class_id = static_cast<int>(rng.index(spec.classes));
            obj.box = box;
            const double fg = rng.uniform(0.55, 0.95);
            detail::draw_object(scene.image, obj, fg);
            scene.objects.push_back(obj);
            placed = true;
        }
        // Crowded scenes simply keep fewer objects; the first box always fits.
    }

    if (spec.noise_sigma > 0.0) {
        for (double& v : scene.image.data()) {
            v = std::clamp(v + rng.normal(spec.noise_sigma), 0.0, 1.0);
        }
    }
    return scene;
}

inline Dataset gen_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.h_in = spec.h_in;
    ds.classes = spec.classes;
    ds.scenes.resize(spec.count);
    const std::uint64_t base = splitmix64(spec.seed);
    // Every scene derives its own stream from the dataset seed, so generation
    // order cannot leak between scenes and the loop is safe to parallelize.
    parallel_for(spec.count, [&](std::size_t i) {
        ds.scenes[i] = gen_scene(spec, splitmix64(base + i));
    });
    return ds;
}

// ---------------------------------------------------------------------------
// Featurizer: per-patch pixel statistics lifted through a fixed random
// projection. No learning happens here; the projection is frozen by its seed
// so train and eval see the same features.
// ---------------------------------------------------------------------------

constexpr std::size_t kStatCount = 8;

// Gain of the random feature projection. Small enough that the features'
// diagonal-band sums (the regression targets downstream) stay inside the
// open (-1, 1) range the calibrated map can actually produce.
constexpr double kFeatureGain = 0.12;

// Eight statistics of one patch: mean, standard deviation, min, max,
// horizontal and vertical mean absolute gradient, diagonal quadrant
// contrast (TL+BR vs TR+BL), and TL-minus-BR contrast. The gradient means
// take absolute differences: periodic textures (stripes, checker) cancel to
// zero under signed sums but keep their directional edge energy under
// absolute ones, which is exactly what separates the texture classes.
inline void patch_stats(const Matrix& img, std::size_t py0, std::size_t px0, std::size_t p,
                        double* out) {
    double sum = 0.0, sum2 = 0.0;
    double mn = img(py0, px0), mx = mn;
    double gx = 0.0, gy = 0.0;
    double tl = 0.0, tr = 0.0, bl = 0.0, br = 0.0;
    const std::size_t half = p / 2;
    for (std::size_t dy = 0; dy < p; ++dy) {
        for (std::size_t dx = 0; dx < p; ++dx) {
            const double v = img(py0 + dy, px0 + dx);
            sum += v;
            sum2 += v * v;
            mn = std::min(mn, v);
            mx = std::max(mx, v);
            if (dx + 1 < p) gx += std::fabs(img(py0 + dy, px0 + dx + 1) - v);
            if (dy + 1 < p) gy += std::fabs(img(py0 + dy + 1, px0 + dx) - v);
            const bool in_left = dx < half, in_right = dx >= p - half;
            const bool in_top = dy < half, in_bottom = dy >= p - half;
            if (in_top && in_left) tl += v;
            if (in_top && in_right) tr += v;
            if (in_bottom && in_left) bl += v;
            if (in_bottom && in_right) br += v;
        }
    }
    const double count = static_cast<double>(p * p);
    const double grad_count = static_cast<double>(p * (p - 1));
    const double quad_count = static_cast<double>(half * half);
    const double mean = sum / count;
    const double var = std::max(0.0, sum2 / count - mean * mean);
    out[0] = mean;
    out[1] = std::sqrt(var);
    out[2] = mn;
    out[3] = mx;
    out[4] = gx / grad_count;
    out[5] = gy / grad_count;
    out[6] = (tl + br - tr - bl) / (2.0 * quad_count);
    out[7] = (tl - br) / quad_count;
}

inline FeatureMap featurize(const Scene& scene, std::size_t h, std::size_t channels,
                            std::uint64_t feat_seed) {
    const PatchGrid grid(scene.h_in, h);
    if (channels < kStatCount) {
        throw std::invalid_argument("featurize: channels must be >= " +
                                    std::to_string(kStatCount) + ", got " +
                                    std::to_string(channels));
    }
    const std::size_t p = static_cast<std::size_t>(grid.patch());
    if (p < 2) throw std::invalid_argument("featurize: patches must be at least 2px");

    Matrix stats(grid.nodes(), kStatCount);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < h; ++c)
            patch_stats(scene.image, r * p, c * p, p, &stats(r * h + c, 0));

    // Standardize each statistic across the grid. Centering makes background
    // patches collapse toward zero while object patches keep strong signed
    // directions, which is what makes the cosine adjacency discriminative;
    // the variance normalization keeps the downstream least-squares problem
    // well conditioned so plain gradient descent converges at a usable rate.
    for (std::size_t k = 0; k < kStatCount; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < grid.nodes(); ++i) mean += stats(i, k);
        mean /= static_cast<double>(grid.nodes());
        double var = 0.0;
        for (std::size_t i = 0; i < grid.nodes(); ++i) {
            const double d = stats(i, k) - mean;
            var += d * d;
        }
        var /= static_cast<double>(grid.nodes());
        // Noise keeps real scenes off the guard; it exists for blank inputs.
        const double scale = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
        for (std::size_t i = 0; i < grid.nodes(); ++i)
            stats(i, k) = (stats(i, k) - mean) * scale;
    }

    const Matrix w = rand_matrix(channels, kStatCount, splitmix64(feat_seed),
                                 kFeatureGain / std::sqrt(static_cast<double>(kStatCount)));
    const Matrix b = rand_matrix(channels, 1, splitmix64(feat_seed + 1), 0.02);
    Matrix x = matmul(stats, transpose(w)); // nodes x channels
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t c = 0; c < x.cols(); ++c) x(i, c) = std::tanh(x(i, c) + b(c, 0));
    return FeatureMap(grid, std::move(x));
}

// ---------------------------------------------------------------------------
// Text serialization. Layout:
//   DIAGNET-SYNTH v1 h_in=<n> classes=<n>
//   scene <index> objects <m>
//   <class_id> <x1> <y1> <x2> <y2>          (m lines)
//   <h_in lines of h_in pixel values>
// Numbers print with 17 significant digits, so a load/save cycle is
// byte-identical.
// ---------------------------------------------------------------------------

inline std::string dataset_to_text(const Dataset& ds) {
    std::string out = "DIAGNET-SYNTH v1 h_in=" + std::to_string(ds.h_in) +
                      " classes=" + std::to_string(ds.classes) + "\n";
    for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
        const Scene& scene = ds.scenes[s];
        out += "scene " + std::to_string(s) + " objects " +
               std::to_string(scene.objects.size()) + "\n";
        for (const SceneObject& o : scene.objects) {
            out += std::to_string(o.class_id) + " " + format_g17(o.box.x1) + " " +
                   format_g17(o.box.y1) + " " + format_g17(o.box.x2) + " " +
                   format_g17(o.box.y2) + "\n";
        }
        for (std::size_t y = 0; y < scene.h_in; ++y) {
            for (std::size_t x = 0; x < scene.h_in; ++x) {
                if (x) out += ' ';
                out += format_g17(scene.image(y, x));
            }
            out += '\n';
        }
    }
    return out;
}

inline Dataset dataset_from_text(const std::string& text) {
    std::istringstream iss(text);
    std::string magic, version, h_in_kv, classes_kv;
    if (!(iss >> magic >> version >> h_in_kv >> classes_kv) || magic != "DIAGNET-SYNTH" ||
        version != "v1" || h_in_kv.rfind("h_in=", 0) != 0 ||
        classes_kv.rfind("classes=", 0) != 0) {
        throw std::runtime_error("dataset: missing or malformed DIAGNET-SYNTH v1 header");
    }
    Dataset ds;
    ds.h_in = static_cast<std::size_t>(parse_int(h_in_kv.substr(5)));
    ds.classes = static_cast<std::size_t>(parse_int(classes_kv.substr(8)));
    if (ds.h_in == 0 || ds.classes == 0) {
        throw std::runtime_error("dataset: header h_in and classes must be positive");
    }

    std::string tok;
    while (iss >> tok) {
        if (tok != "scene") throw std::runtime_error("dataset: expected 'scene', got '" + tok + "'");
        std::size_t index = 0, n_objects = 0;
        std::string objects_kw;
        if (!(iss >> index >> objects_kw >> n_objects) || objects_kw != "objects") {
            throw std::runtime_error("dataset: malformed scene header");
        }
        if (index != ds.scenes.size()) {
            throw std::runtime_error("dataset: scene index " + std::to_string(index) +
                                     " out of order (expected " +
                                     std::to_string(ds.scenes.size()) + ")");
        }
        Scene scene;
        scene.h_in = ds.h_in;
        for (std::size_t k = 0; k < n_objects; ++k) {
            SceneObject o;
            if (!(iss >> o.class_id >> o.box.x1 >> o.box.y1 >> o.box.x2 >> o.box.y2)) {
                throw std::runtime_error("dataset: truncated object list in scene " +
                                         std::to_string(index));
            }
            if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= ds.classes) {
                throw std::runtime_error("dataset: class id " + std::to_string(o.class_id) +
                                         " outside header range in scene " +
                                         std::to_string(index));
            }
            o.box.validate();
            scene.objects.push_back(o);
        }
        scene.image = Matrix(ds.h_in, ds.h_in);
        for (double& v : scene.image.data()) {
            if (!(iss >> v)) {
                throw std::runtime_error("dataset: truncated pixel block in scene " +
                                         std::to_string(index));
            }
        }
        ds.scenes.push_back(std::move(scene));
    }
    if (ds.scenes.empty()) throw std::runtime_error("dataset: no scenes");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    write_text_file(path, dataset_to_text(ds));
}

inline Dataset load_dataset(const std::string& path) {
    try {
        return dataset_from_text(read_text_file(path));
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

} // namespace diagnet

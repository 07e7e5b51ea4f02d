#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diagnet/geometry.hpp"
#include "diagnet/head.hpp"
#include "diagnet/io.hpp"
#include "diagnet/matrix.hpp"
#include "diagnet/model.hpp"
#include "diagnet/pipeline.hpp"
#include "diagnet/synth.hpp"

namespace diagnet {

// ---------------------------------------------------------------------------
// Training configuration. Every field round-trips through a key/value block
// so runs can be reproduced from their manifests and checkpoints alone.
// ---------------------------------------------------------------------------

struct TrainConfig {
    // Geometry and model shape.
    std::size_t h_in = 64;
    std::size_t h = 8;
    std::size_t channels = 32;
    std::size_t embed = 8;
    std::size_t head_s = 4;
    std::size_t head_hidden = 256;
    std::size_t classes = 3;

    // Target construction and calibration loss. Hard targets with the plain
    // distance loss are the default: binary diagonal bands zero out entire
    // target columns, which keeps the calibration fit fast and monotone.
    // Soft targets with the ratio loss are the benchmark configuration.
    TargetMode mode = TargetMode::hard;
    LossKind loss_kind = LossKind::min;
    double alpha = 1.0;
    Diagonal diagonal = Diagonal::main;
    PoolKind pooling = PoolKind::avg;

    // Optimization.
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    double lr_diag = 0.03;
    double lr_head = 0.005;
    double coord_weight = 5.0;
    double noobj_weight = 0.5;
    // L2 shrinkage on the head's weight matrices (biases exempt), applied
    // with the head step. The head is the part that memorizes at small
    // sample counts; the calibration weights are left free so shrinkage
    // cannot interfere with the overfit diagnostics.
    double head_decay = 0.0;
    bool finetune_diagnet = true;
    std::uint64_t seed = 1;
    std::uint64_t feat_seed = 424242;
    // Loss value reported when the ratio loss hits its degenerate-denominator
    // guard; gradients are zeroed for that scene, so the spike is visible in
    // the log without destabilizing the run.
    double sentinel_loss = 1e6;

    bool operator==(const TrainConfig&) const = default;

    HeadConfig head_config() const {
        HeadConfig hc;
        hc.s = head_s;
        hc.classes = classes;
        hc.hidden = head_hidden;
        hc.coord_weight = coord_weight;
        hc.noobj_weight = noobj_weight;
        hc.pooling = pooling;
        return hc;
    }

    void validate() const {
        PatchGrid grid(h_in, h); // throws unless h_in is a positive multiple of h
        (void)grid;
        if (head_s == 0 || h % head_s != 0)
            throw std::invalid_argument("config: h must be a positive multiple of head_s");
        if (channels < kStatCount)
            throw std::invalid_argument("config: channels must be at least 8");
        if (embed == 0) throw std::invalid_argument("config: embed must be positive");
        if (head_hidden == 0) throw std::invalid_argument("config: head_hidden must be positive");
        if (classes == 0) throw std::invalid_argument("config: classes must be positive");
        if (epochs == 0) throw std::invalid_argument("config: epochs must be positive");
        if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
        // Zero rates are legal (they freeze the corresponding parameters).
        if (!(lr_diag >= 0.0) || !std::isfinite(lr_diag) || !(lr_head >= 0.0) ||
            !std::isfinite(lr_head))
            throw std::invalid_argument("config: learning rates must be finite and non-negative");
        if (mode == TargetMode::soft && !(alpha > 0.0))
            throw std::invalid_argument("config: alpha must be positive in soft mode");
        if (!std::isfinite(alpha)) throw std::invalid_argument("config: alpha must be finite");
        if (!(coord_weight >= 0.0) || !(noobj_weight >= 0.0))
            throw std::invalid_argument("config: loss weights must be non-negative");
        if (!(head_decay >= 0.0) || !std::isfinite(head_decay))
            throw std::invalid_argument("config: head_decay must be finite and non-negative");
        if (!(sentinel_loss > 0.0) || !std::isfinite(sentinel_loss))
            throw std::invalid_argument("config: sentinel_loss must be positive and finite");
    }
};

inline KvMap config_to_kv(const TrainConfig& c) {
    KvMap kv;
    kv.set("h_in", static_cast<std::uint64_t>(c.h_in));
    kv.set("h", static_cast<std::uint64_t>(c.h));
    kv.set("channels", static_cast<std::uint64_t>(c.channels));
    kv.set("embed", static_cast<std::uint64_t>(c.embed));
    kv.set("head_s", static_cast<std::uint64_t>(c.head_s));
    kv.set("head_hidden", static_cast<std::uint64_t>(c.head_hidden));
    kv.set("classes", static_cast<std::uint64_t>(c.classes));
    kv.set("mode", to_string(c.mode));
    kv.set("loss", to_string(c.loss_kind));
    kv.set("alpha", c.alpha);
    kv.set("diagonal", to_string(c.diagonal));
    kv.set("pooling", to_string(c.pooling));
    kv.set("epochs", static_cast<std::uint64_t>(c.epochs));
    kv.set("batch_size", static_cast<std::uint64_t>(c.batch_size));
    kv.set("lr_diag", c.lr_diag);
    kv.set("lr_head", c.lr_head);
    kv.set("coord_weight", c.coord_weight);
    kv.set("noobj_weight", c.noobj_weight);
    kv.set("head_decay", c.head_decay);
    kv.set("finetune_diagnet", c.finetune_diagnet);
    kv.set("seed", c.seed);
    kv.set("feat_seed", c.feat_seed);
    kv.set("sentinel_loss", c.sentinel_loss);
    return kv;
}

inline TrainConfig config_from_kv(const KvMap& kv) {
    static const std::set<std::string> known = {
        "h_in",       "h",          "channels",   "embed",        "head_s",
        "head_hidden", "classes",   "mode",       "loss",         "alpha",
        "diagonal",   "pooling",    "epochs",     "batch_size",   "lr_diag",
        "lr_head",    "coord_weight", "noobj_weight", "head_decay",
        "finetune_diagnet", "seed", "feat_seed",  "sentinel_loss"};
    for (const auto& [key, value] : kv.items()) {
        (void)value;
        if (known.find(key) == known.end())
            throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    TrainConfig c;
    c.h_in = static_cast<std::size_t>(parse_u64(kv.get("h_in")));
    c.h = static_cast<std::size_t>(parse_u64(kv.get("h")));
    c.channels = static_cast<std::size_t>(parse_u64(kv.get("channels")));
    c.embed = static_cast<std::size_t>(parse_u64(kv.get("embed")));
    c.head_s = static_cast<std::size_t>(parse_u64(kv.get("head_s")));
    c.head_hidden = static_cast<std::size_t>(parse_u64(kv.get("head_hidden")));
    c.classes = static_cast<std::size_t>(parse_u64(kv.get("classes")));
    c.mode = target_mode_from_string(kv.get("mode"));
    c.loss_kind = loss_kind_from_string(kv.get("loss"));
    c.alpha = parse_double(kv.get("alpha"));
    c.diagonal = diagonal_from_string(kv.get("diagonal"));
    c.pooling = pool_kind_from_string(kv.get("pooling"));
    c.epochs = static_cast<std::size_t>(parse_u64(kv.get("epochs")));
    c.batch_size = static_cast<std::size_t>(parse_u64(kv.get("batch_size")));
    c.lr_diag = parse_double(kv.get("lr_diag"));
    c.lr_head = parse_double(kv.get("lr_head"));
    c.coord_weight = parse_double(kv.get("coord_weight"));
    c.noobj_weight = parse_double(kv.get("noobj_weight"));
    c.head_decay = parse_double(kv.get("head_decay"));
    c.finetune_diagnet = parse_bool(kv.get("finetune_diagnet"));
    c.seed = parse_u64(kv.get("seed"));
    c.feat_seed = parse_u64(kv.get("feat_seed"));
    c.sentinel_loss = parse_double(kv.get("sentinel_loss"));
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: model weights + full config + RNG stream state, in one binary
// file, so a run can be continued bit-for-bit where it stopped.
// ---------------------------------------------------------------------------

struct Checkpoint {
    TrainConfig config;
    std::uint64_t epoch = 0; // completed epochs
    DiagNetParams diag;
    HeadParams head;
    std::string rng_state;
};

namespace detail {

constexpr char kCheckpointMagic[4] = {'D', 'G', 'N', 'T'};
constexpr std::uint16_t kCheckpointVersion = 1;

inline void put_matrix(std::string& out, const std::string& name, const Matrix& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (std::size_t i = 0; i < m.size(); ++i) put_f64(out, m.data()[i]);
}

} // namespace detail

// Layout: magic "DGNT", format version (u16), the six named weight matrices
// (u32 name length, name, u32 rows, u32 cols, row-major f64, all
// little-endian), the config as length-prefixed key=value text (which also
// carries the completed-epoch count), and the RNG state as the rest of the
// file.
inline std::string checkpoint_to_bytes(const Checkpoint& c) {
    c.config.validate();
    if (c.rng_state.empty()) throw std::invalid_argument("checkpoint: empty rng state");
    std::string out;
    out.append(detail::kCheckpointMagic, 4);
    put_u16(out, detail::kCheckpointVersion);
    detail::put_matrix(out, "w_emb", c.diag.w_emb);
    detail::put_matrix(out, "w_pred", c.diag.w_pred);
    detail::put_matrix(out, "fc1_w", c.head.fc1_w);
    detail::put_matrix(out, "fc1_b", c.head.fc1_b);
    detail::put_matrix(out, "fc2_w", c.head.fc2_w);
    detail::put_matrix(out, "fc2_b", c.head.fc2_b);
    KvMap kv = config_to_kv(c.config);
    kv.set("epoch", c.epoch);
    const std::string cfg = kv_to_text(kv);
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    out += c.rng_state;
    return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    BinReader r(bytes, "checkpoint");
    const std::string magic = r.bytes(4);
    if (magic != std::string(detail::kCheckpointMagic, 4))
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint16_t version = r.u16();
    if (version != detail::kCheckpointVersion) {
        std::ostringstream os;
        os << "checkpoint: unsupported version " << version;
        throw std::runtime_error(os.str());
    }

    // The matrix block precedes the config, so shapes are validated only
    // after the config has been read; these caps just keep a corrupted file
    // from provoking absurd allocations.
    std::map<std::string, Matrix> mats;
    for (int i = 0; i < 6; ++i) {
        const std::uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > 64)
            throw std::runtime_error("checkpoint: implausible matrix name length");
        const std::string name = r.bytes(name_len);
        const std::size_t rows = r.u32();
        const std::size_t cols = r.u32();
        if (rows == 0 || cols == 0 || rows > (1u << 20) || cols > (1u << 20) ||
            rows * cols > (1u << 26))
            throw std::runtime_error("checkpoint: implausible shape for matrix '" + name + "'");
        Matrix m(rows, cols);
        for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] = r.f64();
        if (!mats.emplace(name, std::move(m)).second)
            throw std::runtime_error("checkpoint: duplicate matrix '" + name + "'");
    }

    Checkpoint c;
    KvMap kv = parse_kv_text(r.bytes(r.u32()));
    if (!kv.has("epoch")) throw std::runtime_error("checkpoint: missing epoch");
    c.epoch = parse_u64(kv.get("epoch"));
    KvMap cfg_kv;
    for (const auto& [key, value] : kv.items()) {
        if (key != "epoch") cfg_kv.set(key, value);
    }
    c.config = config_from_kv(cfg_kv);
    c.rng_state = r.bytes(bytes.size() - r.position());
    {
        // Reject a corrupted or truncated tail early rather than at resume.
        Rng probe(0);
        probe.load_state(c.rng_state);
    }

    const auto take = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        auto it = mats.find(name);
        if (it == mats.end())
            throw std::runtime_error("checkpoint: missing matrix '" + name + "'");
        if (it->second.rows() != rows || it->second.cols() != cols) {
            std::ostringstream os;
            os << "checkpoint: matrix '" << name << "' is " << it->second.rows() << "x"
               << it->second.cols() << ", expected " << rows << "x" << cols;
            throw std::runtime_error(os.str());
        }
        Matrix m = std::move(it->second);
        mats.erase(it);
        return m;
    };
    const TrainConfig& cfg = c.config;
    const HeadConfig hc = cfg.head_config();
    const std::size_t nodes = cfg.h * cfg.h;
    const std::size_t d_in = hc.s * hc.s * cfg.channels;
    c.diag.w_emb = take("w_emb", cfg.channels, cfg.embed);
    c.diag.w_pred = take("w_pred", nodes, nodes);
    c.head.fc1_w = take("fc1_w", cfg.head_hidden, d_in);
    c.head.fc1_b = take("fc1_b", cfg.head_hidden, 1);
    c.head.fc2_w = take("fc2_w", hc.output_size(), cfg.head_hidden);
    c.head.fc2_b = take("fc2_b", hc.output_size(), 1);
    if (!mats.empty())
        throw std::runtime_error("checkpoint: unexpected matrix '" + mats.begin()->first + "'");
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    write_text_file(path, checkpoint_to_bytes(c));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    try {
        return checkpoint_from_bytes(read_text_file(path));
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// The alternating trainer. Each epoch first fits the calibrated map to the
// diagonal targets (updating the graph-network weights), then fits the
// detection head to the boxes on the same shuffled order of scenes. When
// finetune_diagnet is set, phase two also pushes its gradient through the
// pooling back into the graph-network weights.
// ---------------------------------------------------------------------------

struct LossRow {
    std::uint64_t epoch = 0;
    double diag_loss = 0.0;
    double det_loss = 0.0;
};

inline std::string loss_log_csv(const std::vector<LossRow>& rows, bool header = true) {
    std::string out;
    if (header) out += "epoch,diag_loss,det_loss\n";
    for (const LossRow& r : rows) {
        std::ostringstream os;
        os << r.epoch << "," << format_g17(r.diag_loss) << "," << format_g17(r.det_loss) << "\n";
        out += os.str();
    }
    return out;
}

inline void sgd_step(Matrix& w, const Matrix& g, double lr) {
    add_scaled_inplace(w, g, -lr);
}

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossRow> log; // one row per epoch run in this call
};

// No parameter entry may leave this band during training; stepping outside it
// is reported as an explosion rather than silently producing garbage.
constexpr double kParamLimit = 1e6;

namespace detail {

inline void check_loss_alive(double v, std::uint64_t epoch, std::size_t batch,
                             const char* phase) {
    if (std::isfinite(v)) return;
    std::ostringstream os;
    os << "training diverged at epoch " << epoch << ", batch " << batch << " (" << phase
       << " phase): loss " << v;
    throw std::runtime_error(os.str());
}

inline void check_grads_alive(const Matrix& g, std::uint64_t epoch, std::size_t batch,
                              const char* phase) {
    if (all_finite(g)) return;
    std::ostringstream os;
    os << "training diverged at epoch " << epoch << ", batch " << batch << " (" << phase
       << " phase): gradient not finite";
    throw std::runtime_error(os.str());
}

inline void check_params_bounded(const Matrix& w, const char* name, std::uint64_t epoch) {
    const double m = max_abs(w);
    if (m < kParamLimit) return;
    std::ostringstream os;
    os << "parameter explosion at epoch " << epoch << ": max |" << name << "| = " << m;
    throw std::runtime_error(os.str());
}

} // namespace detail

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                         const Checkpoint* resume = nullptr) {
    cfg.validate();
    if (ds.scenes.empty()) throw std::invalid_argument("train: dataset has no scenes");
    if (ds.h_in != cfg.h_in) {
        std::ostringstream os;
        os << "train: dataset h_in " << ds.h_in << " does not match config h_in " << cfg.h_in;
        throw std::invalid_argument(os.str());
    }
    if (ds.classes != cfg.classes) {
        std::ostringstream os;
        os << "train: dataset classes " << ds.classes << " does not match config classes "
           << cfg.classes;
        throw std::invalid_argument(os.str());
    }

    // Per-scene constants: features, propagated features, projected targets.
    std::vector<SceneSample> samples = prepare_dataset(ds, cfg.h, cfg.channels, cfg.feat_seed);
    std::vector<ProjectedTargets> targets;
    targets.reserve(samples.size());
    for (const SceneSample& s : samples) {
        std::vector<BBox> boxes;
        boxes.reserve(s.objects.size());
        for (const SceneObject& o : s.objects) boxes.push_back(o.box);
        const DiagTargets t = cfg.mode == TargetMode::hard
                                  ? build_hard_targets(s.graph.grid, boxes, cfg.diagonal)
                                  : build_soft_targets(s.graph.grid, boxes, cfg.diagonal, cfg.alpha);
        targets.push_back(project_targets(s.xt, t));
    }

    const HeadConfig head_cfg = cfg.head_config();
    const std::size_t nodes = cfg.h * cfg.h;
    const std::size_t d_in = head_cfg.s * head_cfg.s * cfg.channels;

    DiagNetParams dp;
    HeadParams hp;
    Rng rng(splitmix64(cfg.seed ^ 0x74726e5f6f726465ull));
    std::uint64_t start_epoch = 0;

    if (resume) {
        TrainConfig a = resume->config;
        TrainConfig b = cfg;
        a.epochs = b.epochs;
        if (!(a == b)) {
            // Name the first differing field to make the mismatch actionable.
            const KvMap ka = config_to_kv(resume->config);
            const KvMap kb = config_to_kv(cfg);
            for (std::size_t i = 0; i < ka.items().size(); ++i) {
                const auto& [key, va] = ka.items()[i];
                const std::string& vb = kb.items()[i].second;
                if (key == "epochs" || va == vb) continue;
                throw std::invalid_argument("resume: config mismatch for key '" + key +
                                            "' (checkpoint " + va + ", requested " + vb + ")");
            }
            throw std::invalid_argument("resume: config mismatch");
        }
        if (resume->epoch >= cfg.epochs) {
            std::ostringstream os;
            os << "resume: checkpoint already has " << resume->epoch << " epochs, target is "
               << cfg.epochs;
            throw std::invalid_argument(os.str());
        }
        dp = resume->diag;
        hp = resume->head;
        rng.load_state(resume->rng_state);
        start_epoch = resume->epoch;
    } else {
        dp = init_diagnet_params(cfg.channels, cfg.embed, nodes, cfg.seed);
        hp = init_head_params(d_in, head_cfg, cfg.seed);
    }

    const std::size_t n = samples.size();
    std::vector<std::size_t> order(n);
    TrainResult result;

    for (std::uint64_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
        // One shuffle per epoch; both phases walk the same order.
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = rng.index(i);
            std::swap(order[i - 1], order[j]);
        }

        // Phase one: fit the calibrated map to the diagonal targets.
        double diag_sum = 0.0;
        std::size_t batch_no = 0;
        for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size, ++batch_no) {
            const std::size_t b1 = std::min(n, b0 + cfg.batch_size);
            DiagNetGrads acc;
            acc.d_w_emb = Matrix(cfg.channels, cfg.embed);
            acc.d_w_pred = Matrix(nodes, nodes);
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t idx = order[k];
                const SceneSample& s = samples[idx];
                const ForwardTrace tr = forward_from_ax(s.ax, s.xt, dp);
                const BackwardResult bw =
                    backward(tr, s.graph.x, targets[idx], cfg.loss_kind, dp, cfg.sentinel_loss);
                detail::check_loss_alive(bw.loss, epoch, batch_no, "diagonal");
                diag_sum += bw.loss;
                const double w = 1.0 / static_cast<double>(b1 - b0);
                add_scaled_inplace(acc.d_w_emb, bw.grads.d_w_emb, w);
                add_scaled_inplace(acc.d_w_pred, bw.grads.d_w_pred, w);
            }
            detail::check_grads_alive(acc.d_w_emb, epoch, batch_no, "diagonal");
            detail::check_grads_alive(acc.d_w_pred, epoch, batch_no, "diagonal");
            sgd_step(dp.w_emb, acc.d_w_emb, cfg.lr_diag);
            sgd_step(dp.w_pred, acc.d_w_pred, cfg.lr_diag);
        }
        detail::check_params_bounded(dp.w_emb, "w_emb", epoch);
        detail::check_params_bounded(dp.w_pred, "w_pred", epoch);

        // Phase two: fit the detection head on the same order, optionally
        // pushing gradient back through the pooling into the graph network.
        double det_sum = 0.0;
        batch_no = 0;
        for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size, ++batch_no) {
            const std::size_t b1 = std::min(n, b0 + cfg.batch_size);
            HeadGrads hacc;
            hacc.d_fc1_w = Matrix(hp.fc1_w.rows(), hp.fc1_w.cols());
            hacc.d_fc1_b = Matrix(hp.fc1_b.rows(), hp.fc1_b.cols());
            hacc.d_fc2_w = Matrix(hp.fc2_w.rows(), hp.fc2_w.cols());
            hacc.d_fc2_b = Matrix(hp.fc2_b.rows(), hp.fc2_b.cols());
            DiagNetGrads dacc;
            if (cfg.finetune_diagnet) {
                dacc.d_w_emb = Matrix(cfg.channels, cfg.embed);
                dacc.d_w_pred = Matrix(nodes, nodes);
            }
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t idx = order[k];
                const SceneSample& s = samples[idx];
                const ForwardTrace tr = forward_from_ax(s.ax, s.xt, dp);
                const PooledMap pm = pool_diag_map(tr.y_hat, cfg.h, head_cfg.s, head_cfg.pooling);
                const HeadTrace ht = head_forward(pm.values, hp, head_cfg);
                const DetectionLoss dl =
                    detection_loss(ht.preds, s.objects, head_cfg, static_cast<double>(cfg.h_in));
                detail::check_loss_alive(dl.value, epoch, batch_no, "detection");
                det_sum += dl.value;
                const HeadGrads hg = head_backward(ht, dl.d_preds, hp, head_cfg);
                const double w = 1.0 / static_cast<double>(b1 - b0);
                add_scaled_inplace(hacc.d_fc1_w, hg.d_fc1_w, w);
                add_scaled_inplace(hacc.d_fc1_b, hg.d_fc1_b, w);
                add_scaled_inplace(hacc.d_fc2_w, hg.d_fc2_w, w);
                add_scaled_inplace(hacc.d_fc2_b, hg.d_fc2_b, w);
                if (cfg.finetune_diagnet) {
                    const Matrix dy = unpool_diag_map(hg.d_input, pm.trace);
                    const DiagNetGrads dg = backward_from_dy(tr, s.graph.x, dy, dp);
                    add_scaled_inplace(dacc.d_w_emb, dg.d_w_emb, w);
                    add_scaled_inplace(dacc.d_w_pred, dg.d_w_pred, w);
                }
            }
            detail::check_grads_alive(hacc.d_fc1_w, epoch, batch_no, "detection");
            detail::check_grads_alive(hacc.d_fc2_w, epoch, batch_no, "detection");
            if (cfg.head_decay > 0.0) {
                scale_inplace(hp.fc1_w, 1.0 - cfg.lr_head * cfg.head_decay);
                scale_inplace(hp.fc2_w, 1.0 - cfg.lr_head * cfg.head_decay);
            }
            sgd_step(hp.fc1_w, hacc.d_fc1_w, cfg.lr_head);
            sgd_step(hp.fc1_b, hacc.d_fc1_b, cfg.lr_head);
            sgd_step(hp.fc2_w, hacc.d_fc2_w, cfg.lr_head);
            sgd_step(hp.fc2_b, hacc.d_fc2_b, cfg.lr_head);
            if (cfg.finetune_diagnet) {
                detail::check_grads_alive(dacc.d_w_emb, epoch, batch_no, "detection");
                detail::check_grads_alive(dacc.d_w_pred, epoch, batch_no, "detection");
                sgd_step(dp.w_emb, dacc.d_w_emb, cfg.lr_head);
                sgd_step(dp.w_pred, dacc.d_w_pred, cfg.lr_head);
            }
        }
        detail::check_params_bounded(dp.w_emb, "w_emb", epoch);
        detail::check_params_bounded(dp.w_pred, "w_pred", epoch);
        detail::check_params_bounded(hp.fc1_w, "fc1_w", epoch);
        detail::check_params_bounded(hp.fc1_b, "fc1_b", epoch);
        detail::check_params_bounded(hp.fc2_w, "fc2_w", epoch);
        detail::check_params_bounded(hp.fc2_b, "fc2_b", epoch);

        LossRow row;
        row.epoch = epoch;
        row.diag_loss = diag_sum / static_cast<double>(n);
        row.det_loss = det_sum / static_cast<double>(n);
        result.log.push_back(row);
    }

    result.checkpoint.config = cfg;
    result.checkpoint.epoch = cfg.epochs;
    result.checkpoint.diag = std::move(dp);
    result.checkpoint.head = std::move(hp);
    result.checkpoint.rng_state = rng.save_state();
    return result;
}

// Convenience wrapper used by evaluation paths: run the full pipeline over a
// dataset with a trained checkpoint.
inline EvalResult evaluate_checkpoint(const Dataset& ds, const Checkpoint& ckpt,
                                      double score_threshold, double nms_iou) {
    const TrainConfig& cfg = ckpt.config;
    if (ds.h_in != cfg.h_in) {
        std::ostringstream os;
        os << "eval: dataset h_in " << ds.h_in << " does not match checkpoint h_in " << cfg.h_in;
        throw std::invalid_argument(os.str());
    }
    if (ds.classes != cfg.classes) {
        std::ostringstream os;
        os << "eval: dataset classes " << ds.classes << " does not match checkpoint classes "
           << cfg.classes;
        throw std::invalid_argument(os.str());
    }
    const std::vector<SceneSample> samples =
        prepare_dataset(ds, cfg.h, cfg.channels, cfg.feat_seed);
    return evaluate(samples, ckpt.diag, ckpt.head, cfg.head_config(), static_cast<double>(cfg.h_in),
                    cfg.classes, score_threshold, nms_iou);
}

} // namespace diagnet

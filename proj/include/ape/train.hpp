#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ape/common.hpp"
#include "ape/loss.hpp"
#include "ape/model.hpp"
#include "ape/optim.hpp"
#include "ape/phantom.hpp"
#include "ape/sampler.hpp"
#include "ape/threading.hpp"

namespace ape {

enum class Variant { naive, augm, equiv };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::naive: return "naive";
        case Variant::augm: return "augm";
        case Variant::equiv: return "equiv";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "naive") return Variant::naive;
    if (s == "augm") return Variant::augm;
    if (s == "equiv") return Variant::equiv;
    throw config_error("variant must be one of naive|augm|equiv, got '" + s + "'");
}

struct TrainConfig {
    Variant variant = Variant::augm;
    double lambda = -1.0; // <0: derived from the variant (naive/augm 0, equiv 1)
    int steps = 2000;
    int pairs_per_step = 4;    // n patch pairs (or patches for naive)
    int voxels_per_patch = 250; // k draws per patch; N = n*k
    double lr = 3e-4;
    double weight_decay = 1e-6;
    double clip = 1.0;
    int checkpoint_every = 500;
    std::uint64_t seed = 0;
    int workers = 0; // 0 = default_workers()
    bool log_wallclock = false; // off by default so reruns are byte-identical

    int phantom_count = 50;
    PhantomSpec phantom = default_phantom_spec();
    SamplerConfig sampler;
    ModelConfig model;

    double effective_lambda() const {
        if (lambda >= 0.0) return lambda;
        return variant == Variant::equiv ? 1.0 : 0.0;
    }

    void validate() const {
        if (steps < 1) throw config_error("train: steps must be >= 1");
        if (pairs_per_step < 1) throw config_error("train: pairs_per_step must be >= 1");
        if (voxels_per_patch < 1) throw config_error("train: voxels_per_patch must be >= 1");
        if (std::int64_t(pairs_per_step) * voxels_per_patch < 2)
            throw config_error("train: batch needs n*k >= 2 points");
        if (variant == Variant::naive && pairs_per_step < 2)
            throw config_error("train: naive variant feeds single patches; needs n >= 2 "
                               "for batch normalization");
        if (lr < 0) throw config_error("train: learning rate must be >= 0");
        if (weight_decay < 0) throw config_error("train: weight decay must be >= 0");
        if (checkpoint_every < 1) throw config_error("train: checkpoint_every must be >= 1");
        if (phantom_count < 1) throw config_error("train: phantom_count must be >= 1");
        if (variant == Variant::naive && lambda > 0.0)
            throw config_error("train: naive variant has no equivariance term; lambda must be 0");
        validate_phantom_spec(phantom);
        sampler.validate();
        model.validate();
    }
};

struct StepDiagnostics {
    double loss = 0;
    double loss_dist = 0;
    double loss_equiv = 0;      // unweighted equivariance term
    double mean_dpred_ii = 0;   // meaningless in naive mode
    double grad_norm = 0;       // post-clip global norm
    bool has_equiv = false;     // false for the naive variant
};

namespace detail {

/// Salt streams so per-step draws, pool generation and calibration never
/// collide even though they share the master seed.
inline constexpr std::uint64_t kSaltStep = 0x73746570ull;      // "step"
inline constexpr std::uint64_t kSaltPool = 0x706f6f6cull;      // "pool"
inline constexpr std::uint64_t kSaltCalib = 0x63616c69ull;     // "cali"

struct GatherPlan {
    std::vector<int> patch;  // which forward output
    std::vector<ivec3> index;
};

inline vec3<double> read_embedding(const TensorF& t, const ivec3& i) {
    return {double(t.at(0, i[0], i[1], i[2])), double(t.at(1, i[0], i[1], i[2])),
            double(t.at(2, i[0], i[1], i[2]))};
}

inline void scatter_embedding_grad(TensorF& g, const ivec3& i, const vec3<double>& v) {
    g.at(0, i[0], i[1], i[2]) += float(v[0]);
    g.at(1, i[0], i[1], i[2]) += float(v[1]);
    g.at(2, i[0], i[1], i[2]) += float(v[2]);
}

} // namespace detail

/// One optimizer update on one phantom volume. Draws patches and voxel
/// batches from `rng`, which the caller seeds per step. Aborts on a
/// non-finite loss, naming the seed that produced the batch.
inline StepDiagnostics train_step(Model& m, AdamW<float>& opt, const Volume& vol,
                                  const TrainConfig& cfg, Rng& rng,
                                  std::uint64_t batch_seed) {
    const int n = cfg.pairs_per_step;
    const int k = cfg.voxels_per_patch;
    const int workers = cfg.workers > 0 ? cfg.workers : default_workers();
    const bool naive = cfg.variant == Variant::naive;
    const double lambda = cfg.effective_lambda();

    std::vector<TensorF> inputs;
    detail::GatherPlan plan_a, plan_b;
    std::vector<dvec3> points;
    points.reserve(std::size_t(n) * k);

    if (naive) {
        const auto patches = sample_independent_patches(vol, n, rng, cfg.sampler);
        inputs.reserve(patches.size());
        for (int p = 0; p < n; ++p) {
            const auto batch = sample_voxels(patches[std::size_t(p)], k, rng);
            for (int i = 0; i < k; ++i) {
                plan_a.patch.push_back(p);
                plan_a.index.push_back(batch.indices[std::size_t(i)]);
                points.push_back(batch.point_mm[std::size_t(i)]);
            }
            inputs.push_back(patches[std::size_t(p)].data);
        }
    } else {
        for (int p = 0; p < n; ++p) {
            const PatchPair pp = sample_patch_pair(vol, rng, cfg.sampler);
            const auto batch = sample_positive_pairs(pp, k, rng);
            const int ia = int(inputs.size());
            inputs.push_back(pp.patch_a.data);
            inputs.push_back(pp.patch_b.data);
            for (int i = 0; i < k; ++i) {
                plan_a.patch.push_back(ia);
                plan_a.index.push_back(batch.index_a[std::size_t(i)]);
                plan_b.patch.push_back(ia + 1);
                plan_b.index.push_back(batch.index_b[std::size_t(i)]);
                points.push_back(batch.point_mm[std::size_t(i)]);
            }
        }
    }

    const auto norm = normalize_coords(points);
    const MatD d_true = distance_targets(norm.points);

    auto fw = forward_train(m, inputs, workers);

    const std::size_t N = points.size();
    std::vector<vec3<double>> A(N), B;
    for (std::size_t i = 0; i < N; ++i)
        A[i] = detail::read_embedding(fw.out[std::size_t(plan_a.patch[i])], plan_a.index[i]);
    if (!naive) {
        B.resize(N);
        for (std::size_t i = 0; i < N; ++i)
            B[i] = detail::read_embedding(fw.out[std::size_t(plan_b.patch[i])], plan_b.index[i]);
    }

    const auto res = loss_with_grad<double>(A, naive ? A : B, d_true, lambda,
                                            naive ? PairingMode::naive : PairingMode::positive);
    if (!std::isfinite(res.total))
        throw runtime_abort("train: non-finite loss at batch seed " +
                            std::to_string(batch_seed));

    std::vector<TensorF> grad_out;
    grad_out.reserve(inputs.size());
    for (const auto& out : fw.out) {
        TensorF g(out.c, out.h, out.w, out.d);
        grad_out.push_back(std::move(g));
    }
    for (std::size_t i = 0; i < N; ++i)
        detail::scatter_embedding_grad(grad_out[std::size_t(plan_a.patch[i])], plan_a.index[i],
                                       res.grad_a[i]);
    if (!naive)
        for (std::size_t i = 0; i < N; ++i)
            detail::scatter_embedding_grad(grad_out[std::size_t(plan_b.patch[i])],
                                           plan_b.index[i], res.grad_b[i]);

    auto grads = backward_train(m, fw, grad_out, workers);

    // a NaN upstream can reach here with a finite loss (distance clamps hide
    // it), so guard the gradient too before the update poisons the model
    const double raw_norm = double(AdamW<float>::global_norm(grads.views()));
    if (!std::isfinite(raw_norm))
        throw runtime_abort("train: non-finite gradient at batch seed " +
                            std::to_string(batch_seed));

    opt.cfg.lr = float(cfg.lr);
    opt.cfg.weight_decay = float(cfg.weight_decay);
    opt.cfg.clip = float(cfg.clip);
    const double gnorm = double(opt.step(m.parameters(), grads.views()));
    m.steps_seen += 1;

    StepDiagnostics d;
    d.loss = res.total;
    d.loss_dist = res.dist;
    d.loss_equiv = res.equiv;
    d.mean_dpred_ii = res.mean_dpred_ii;
    d.grad_norm = gnorm;
    d.has_equiv = !naive;
    return d;
}

namespace detail {

inline std::string format_metric(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", x);
    return buf;
}

inline std::string metrics_row(int step, const StepDiagnostics& d, double wallclock_s) {
    std::string row = std::to_string(step);
    row += "," + format_metric(d.loss);
    row += "," + format_metric(d.loss_dist);
    if (d.has_equiv) {
        row += "," + format_metric(d.loss_equiv);
        row += "," + format_metric(d.mean_dpred_ii);
    } else {
        row += ",,"; // naive logs no equivariance diagnostics
    }
    row += "," + format_metric(d.grad_norm);
    char wc[32];
    std::snprintf(wc, sizeof(wc), "%.3f", wallclock_s);
    row += ",";
    row += wc;
    return row;
}

inline constexpr const char* kMetricsHeader =
    "step,loss,loss_dist,loss_equiv,mean_dpred_ii,grad_norm,wallclock_s";

} // namespace detail

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    std::vector<StepDiagnostics> history;
};

/// Deterministic phantom pool for training. Masks and landmarks are dropped:
/// the loop only reads intensities.
inline std::vector<Volume> build_phantom_pool(const PhantomSpec& spec, int count,
                                              std::uint64_t seed) {
    std::vector<Volume> pool;
    pool.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) {
        auto sample =
            generate_phantom(spec, Rng::mix(seed, detail::kSaltPool + std::uint64_t(i)));
        pool.push_back(std::move(sample.volume));
    }
    return pool;
}

/// Fixed calibration batch used to pin running statistics after training.
inline std::vector<TensorF> calibration_patches(const std::vector<Volume>& pool,
                                                const TrainConfig& cfg, int count) {
    Rng rng(Rng::mix(cfg.seed, detail::kSaltCalib));
    std::vector<TensorF> out;
    out.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) {
        const Volume& v = pool[std::size_t(i) % pool.size()];
        auto patches = sample_independent_patches(v, 1, rng, cfg.sampler);
        out.push_back(std::move(patches[0].data));
    }
    return out;
}

/// Full training run. Writes `model.ckpt` and `metrics.csv` under `out_dir`,
/// checkpointing every cfg.checkpoint_every steps. If `resume` is set and a
/// checkpoint exists, continues from its step counter; the metrics log is
/// trimmed back to that step so the rerun is seamless.
inline TrainResult train(const TrainConfig& cfg, const std::string& out_dir,
                         bool resume = false) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const std::string ckpt_path = out_dir + "/model.ckpt";
    const std::string metrics_path = out_dir + "/metrics.csv";

    const std::vector<Volume> pool = build_phantom_pool(cfg.phantom, cfg.phantom_count, cfg.seed);

    Model m;
    AdamW<float> opt;
    int start_step = 0;
    if (resume && std::filesystem::exists(ckpt_path)) {
        load_checkpoint(ckpt_path, m, &opt);
        if (m.cfg.hash() != cfg.model.hash())
            throw config_error("train: checkpoint model config differs from the requested one");
        start_step = int(m.steps_seen);
        if (start_step >= cfg.steps)
            throw config_error("train: checkpoint already has " + std::to_string(start_step) +
                               " steps; nothing to resume for steps=" +
                               std::to_string(cfg.steps));
    } else {
        m.build(cfg.model, Rng::mix(cfg.seed, 0x6d6f64656cull));
        opt.init(m.parameters());
    }

    // metrics log: keep rows up to the resume point, else start fresh
    std::vector<std::string> kept_rows;
    if (start_step > 0 && std::filesystem::exists(metrics_path)) {
        std::ifstream in(metrics_path);
        std::string line;
        bool first = true;
        while (std::getline(in, line)) {
            if (first) {
                first = false;
                continue;
            }
            const auto comma = line.find(',');
            if (comma == std::string::npos) continue;
            const int row_step = std::atoi(line.substr(0, comma).c_str());
            if (row_step <= start_step) kept_rows.push_back(line);
        }
    }
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics)
        throw io_error(io_error::kind::unwritable, "train: cannot write " + metrics_path);
    metrics << detail::kMetricsHeader << "\n";
    for (const auto& row : kept_rows) metrics << row << "\n";

    TrainResult result;
    result.checkpoint_path = ckpt_path;
    result.metrics_path = metrics_path;

    const auto t0 = std::chrono::steady_clock::now();
    for (int step = start_step; step < cfg.steps; ++step) {
        const Volume& vol = pool[std::size_t(step) % pool.size()];
        const std::uint64_t batch_seed =
            Rng::mix(cfg.seed, detail::kSaltStep + std::uint64_t(step));
        Rng rng(batch_seed);
        const StepDiagnostics d = train_step(m, opt, vol, cfg, rng, batch_seed);

        double wallclock = 0.0;
        if (cfg.log_wallclock) {
            const auto now = std::chrono::steady_clock::now();
            wallclock = std::chrono::duration<double>(now - t0).count();
        }
        metrics << detail::metrics_row(step + 1, d, wallclock) << "\n";
        result.history.push_back(d);

        if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
            metrics.flush();
            save_checkpoint(ckpt_path, m, &opt);
        }
    }
    metrics.flush();

    const int calib_count = std::max(4, cfg.pairs_per_step * 2);
    calibrate_running_stats(m, calibration_patches(pool, cfg, calib_count),
                            cfg.workers > 0 ? cfg.workers : default_workers());
    save_checkpoint(ckpt_path, m, &opt);
    return result;
}

} // namespace ape

// Acceptance gate: ten criteria, one pass/fail line each. Criteria 1-5 are
// pure-math oracle checks; 6-10 share three full training runs (the CLI
// pipeline trains the equivariant model, the suite adds augmented and naive)
// so the whole gate fits a desk-scale CPU budget.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ape/config.hpp"
#include "ape/dataset.hpp"
#include "ape/eval.hpp"
#include "ape/train.hpp"

using namespace ape;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::string g_root;
std::string g_cli;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.4g", x);
    return buf;
}

int run_cli(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " >> " + g_root + "/cli.log 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    if (WIFEXITED(rc)) return WEXITSTATUS(rc);
    return rc;
}

std::string slurp(const std::string& path) { return ape::detail::read_file(path); }

bool same_file(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

// --------------------------------------------------------------- criterion 1

/// Plain double-loop restatement of the objective, independent of loss.hpp's
/// fused matrix path.
double oracle_total(const std::vector<dvec3>& A, const std::vector<dvec3>& B, const MatD& d_true,
                    double lambda, bool naive) {
    const std::vector<dvec3>& Bv = naive ? A : B;
    const int n = int(A.size());
    double dist = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const dvec3 diff = A[std::size_t(i)] - Bv[std::size_t(j)];
            const double d = std::sqrt(std::max(0.0, dot(diff, diff)));
            const double e = d - d_true.at(i, j);
            dist += e * e;
        }
    dist /= double(n) * double(n);
    if (naive) return dist;
    double eq = 0;
    for (int i = 0; i < n; ++i) {
        const dvec3 diff = A[std::size_t(i)] - Bv[std::size_t(i)];
        eq += dot(diff, diff);
    }
    return dist + lambda * eq / double(n);
}

Outcome c1_loss_oracle() {
    Outcome o{"loss oracle equivalence", false, ""};
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + int(rng.uniform_int(63));
        std::vector<dvec3> A(std::size_t(n)), B(std::size_t(n));
        MatD d_true(n, n);
        for (auto& p : A) p = rng.uniform_vec3({-2, -2, -2}, {2, 2, 2});
        for (auto& p : B) p = rng.uniform_vec3({-2, -2, -2}, {2, 2, 2});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) d_true.at(i, j) = rng.uniform(0.0, 2.0);
        const double lambda = rng.uniform(0.0, 2.0);

        // Eq. (1): distance term alone (lambda = 0 collapses the objective)
        const auto d_pred = pairwise_distances(A, B);
        worst = std::max(worst, std::abs(loss_dist(d_pred, d_true) -
                                         oracle_total(A, B, d_true, 0.0, false)));
        // Eq. (2): full objective, matrix path and fused-gradient path
        worst = std::max(worst, std::abs(loss_total(d_pred, d_true, lambda) -
                                         oracle_total(A, B, d_true, lambda, false)));
        worst = std::max(worst,
                         std::abs(loss_with_grad(A, B, d_true, lambda, PairingMode::positive).total -
                                  oracle_total(A, B, d_true, lambda, false)));
        worst = std::max(worst,
                         std::abs(loss_with_grad(A, B, d_true, 0.0, PairingMode::naive).total -
                                  oracle_total(A, B, d_true, 0.0, true)));
    }
    const double secs = seconds_since(t0);
    o.pass = worst < 1e-9 && secs < 1.0;
    o.detail = "max |diff| " + fmt(worst) + " over 100 instances in " + fmt(secs) + " s";
    return o;
}

// --------------------------------------------------------------- criterion 2

Outcome c2_gradcheck() {
    Outcome o{"gradient check", false, ""};
    Rng rng(202);
    const double h = 1e-3;
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 6;
        std::vector<dvec3> A(std::size_t(n)), B(std::size_t(n));
        MatD d_true(n, n);
        for (auto& p : A) p = rng.uniform_vec3({-2, -2, -2}, {2, 2, 2});
        for (auto& p : B) p = rng.uniform_vec3({-2, -2, -2}, {2, 2, 2});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) d_true.at(i, j) = rng.uniform(0.0, 2.0);
        const PairingMode mode = trial % 3 == 2 ? PairingMode::naive : PairingMode::positive;
        const double lambda = mode == PairingMode::naive ? 0.0 : (trial % 2 ? 1.0 : 0.3);

        const auto res = loss_with_grad(A, B, d_true, lambda, mode);
        auto value = [&]() { return loss_with_grad(A, B, d_true, lambda, mode).total; };
        auto probe = [&](std::vector<dvec3>& v, const std::vector<dvec3>& grad) {
            for (int i = 0; i < n; ++i)
                for (int a = 0; a < 3; ++a) {
                    const double keep = v[std::size_t(i)][std::size_t(a)];
                    v[std::size_t(i)][std::size_t(a)] = keep + h;
                    const double up = value();
                    v[std::size_t(i)][std::size_t(a)] = keep - h;
                    const double dn = value();
                    v[std::size_t(i)][std::size_t(a)] = keep;
                    const double numeric = (up - dn) / (2 * h);
                    const double rel = std::abs(grad[std::size_t(i)][std::size_t(a)] - numeric) /
                                       std::max(1.0, std::abs(numeric));
                    worst = std::max(worst, rel);
                }
        };
        probe(A, res.grad_a);
        if (mode == PairingMode::positive) probe(B, res.grad_b);
    }
    o.pass = worst < 1e-5;
    o.detail = "max rel err " + fmt(worst) + " (h = 1e-3, 20 instances, N = 6)";
    return o;
}

// --------------------------------------------------------------- criterion 3

Outcome c3_batchnorm() {
    Outcome o{"normalization contract", false, ""};
    Model m;
    ModelConfig mc; // default architecture
    m.build(mc, 303);
    Rng rng(304);
    double worst_mean = 0, worst_std = 0;
    const ivec3 shapes[3] = {{16, 16, 16}, {24, 20, 16}, {32, 32, 24}};
    const int batches[3] = {2, 3, 5};
    for (int k = 0; k < 3; ++k) {
        std::vector<TensorF> patches;
        for (int b = 0; b < batches[k]; ++b) {
            TensorF t(1, shapes[k][0], shapes[k][1], shapes[k][2]);
            for (auto& x : t.v) x = float(rng.normal(0.0, 100.0));
            patches.push_back(std::move(t));
        }
        auto fw = forward_train(m, patches, 1);
        for (int c = 0; c < 3; ++c) {
            double sum = 0, sum2 = 0;
            std::int64_t count = 0;
            for (const auto& z : fw.pre_up) {
                const ivec3 sp = z.spatial();
                for (int x = 0; x < sp[0]; ++x)
                    for (int y = 0; y < sp[1]; ++y) {
                        const float* row = z.row(c, x, y);
                        for (int d = 0; d < sp[2]; ++d) {
                            sum += row[d];
                            sum2 += double(row[d]) * row[d];
                            ++count;
                        }
                    }
            }
            const double mean = sum / double(count);
            const double var = sum2 / double(count) - mean * mean;
            worst_mean = std::max(worst_mean, std::abs(mean));
            worst_std = std::max(worst_std, std::abs(std::sqrt(std::max(0.0, var)) - 1.0));
        }
    }
    o.pass = worst_mean < 1e-3 && worst_std < 1e-3;
    o.detail = "per-channel |mean| <= " + fmt(worst_mean) + ", |std-1| <= " + fmt(worst_std);
    return o;
}

// --------------------------------------------------------------- criterion 4

Outcome c4_retrieval_exact() {
    Outcome o{"retrieval exactness", false, ""};
    Rng rng(404);
    int mismatches = 0, ties_seen = 0;
    for (int trial = 0; trial < 50; ++trial) {
        EmbeddingMap m({8, 8, 8}, {1.f, 1.f, 1.f}, {0.f, 0.f, 0.f});
        for (auto& x : m.data) x = float(rng.uniform(-1.0, 1.0));
        fvec3 q{float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-1.0, 1.0)),
                float(rng.uniform(-1.0, 1.0))};
        if (trial % 3 == 0) {
            const ivec3 v{int(rng.uniform_int(8)), int(rng.uniform_int(8)),
                          int(rng.uniform_int(8))};
            q = m.embedding(v); // exact hit
        } else if (trial % 3 == 1) {
            // force a tie: two voxels share the query embedding exactly
            const ivec3 v1{int(rng.uniform_int(4)), int(rng.uniform_int(8)),
                           int(rng.uniform_int(8))};
            const ivec3 v2{4 + int(rng.uniform_int(4)), int(rng.uniform_int(8)),
                           int(rng.uniform_int(8))};
            for (int c = 0; c < 3; ++c) {
                m.at(c, v1[0], v1[1], v1[2]) = q[std::size_t(c)];
                m.at(c, v2[0], v2[1], v2[2]) = q[std::size_t(c)];
            }
            ++ties_seen;
        }

        // scan-order brute force, strict improvement keeps the first minimum
        ivec3 best{0, 0, 0};
        double best_d = std::numeric_limits<double>::max();
        for (int x = 0; x < 8; ++x)
            for (int y = 0; y < 8; ++y)
                for (int z = 0; z < 8; ++z) {
                    double d2 = 0;
                    for (int c = 0; c < 3; ++c) {
                        const double diff = double(m.at(c, x, y, z)) - double(q[std::size_t(c)]);
                        d2 += diff * diff;
                    }
                    if (d2 < best_d) {
                        best_d = d2;
                        best = {x, y, z};
                    }
                }
        const auto got = nearest_voxel(m, q);
        if (!(got.voxel == best)) ++mismatches;
    }
    o.pass = mismatches == 0;
    o.detail = "50 random 8x8x8 maps, " + std::to_string(ties_seen) +
               " forced tie cases, mismatches " + std::to_string(mismatches);
    return o;
}

// --------------------------------------------------------------- criterion 5

Outcome c5_metric_oracles() {
    Outcome o{"metric oracles", false, ""};
    std::vector<std::string> fails;

    // 1/3-IoU cube: unit cube vs the same cube shifted 0.5 along x
    const Box cube{{0, 0, 0}, {1, 1, 1}};
    const Box shifted{{0.5, 0, 0}, {1.5, 1, 1}};
    if (iou(cube, shifted) != 0.5 / 1.5) fails.push_back("cube IoU");
    if (iou(cube, cube) != 1.0) fails.push_back("identity IoU");
    if (iou(cube, Box{{5, 5, 5}, {6, 6, 6}}) != 0.0) fails.push_back("disjoint IoU");

    // enlarge: identity at alpha 1; doubling about the center; clipping at the edge
    const Box unit{{-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    const Box wide{{-10, -10, -10}, {10, 10, 10}};
    const Box e1 = enlarge_box(unit, 1.0, wide);
    const Box e2 = enlarge_box(unit, 2.0, wide);
    if (!(e1.lo == unit.lo && e1.hi == unit.hi)) fails.push_back("enlarge identity");
    if (!(e2.lo == dvec3{-1, -1, -1} && e2.hi == dvec3{1, 1, 1})) fails.push_back("enlarge x2");
    const Box near_edge{{8, 8, 8}, {10, 10, 10}};
    const Box bounds{{0, 0, 0}, {10.5, 10.5, 10.5}};
    const Box e3 = enlarge_box(near_edge, 3.0, bounds);
    // center 9, half 1 -> alpha 3 gives [6, 12], clipped to [6, 10.5]
    if (!(e3.lo == dvec3{6, 6, 6} && e3.hi == dvec3{10.5, 10.5, 10.5}))
        fails.push_back("enlarge clip");

    // half-recall: 2-voxel mask, box covering exactly one center
    Mask two({4, 1, 1}, {1, 1, 1}, {0, 0, 0});
    two.at(1, 0, 0) = 1;
    two.at(2, 0, 0) = 1;
    if (recall(Box{{0.6, -0.5, -0.5}, {1.4, 0.5, 0.5}}, two) != 0.5)
        fails.push_back("half recall");
    if (recall(Box{{-0.5, -0.5, -0.5}, {3.5, 0.5, 0.5}}, two) != 1.0)
        fails.push_back("full recall");
    if (recall(Box{{10, 10, 10}, {11, 11, 11}}, two) != 0.0) fails.push_back("zero recall");

    // grid-alpha: three hand-placed test images vs an exhaustive grid oracle
    const ivec3 shape{10, 10, 10};
    const dvec3 sp{1, 1, 1}, org{0, 0, 0};
    auto cube_mask = [&](int lo, int hi) {
        Mask m(shape, sp, org);
        for (int x = lo; x <= hi; ++x)
            for (int y = lo; y <= hi; ++y)
                for (int z = lo; z <= hi; ++z) m.at(x, y, z) = 1;
        return m;
    };
    const Mask m1 = cube_mask(2, 6), m2 = cube_mask(2, 6), m3 = cube_mask(2, 4);
    const Box b1{{3, 3, 3}, {5, 5, 5}};   // needs alpha 2 to reach [2, 6]
    const Box b2{{2, 2, 2}, {6, 6, 6}};   // covers at alpha 1
    const Box b3{{1, 1, 1}, {3, 3, 3}};   // needs alpha 2 to reach 4
    const Box vb = physical_bounds(shape, sp, org);
    std::vector<VrCase> cases{{b1, &m1, vb, vb.volume()},
                              {b2, &m2, vb, vb.volume()},
                              {b3, &m3, vb, vb.volume()}};
    const VrResult got = vr_at_99(cases);

    // independent oracle: same grid values, recall/VR arithmetic from scratch
    auto oracle_recall = [&](const Box& b, const Mask& m) {
        std::int64_t in = 0, total = 0;
        for (int x = 0; x < shape[0]; ++x)
            for (int y = 0; y < shape[1]; ++y)
                for (int z = 0; z < shape[2]; ++z) {
                    if (!m.at(x, y, z)) continue;
                    ++total;
                    const dvec3 c = m.voxel_mm({x, y, z});
                    bool inside = true;
                    for (int a = 0; a < 3; ++a)
                        inside = inside && c[std::size_t(a)] >= b.lo[std::size_t(a)] &&
                                 c[std::size_t(a)] <= b.hi[std::size_t(a)];
                    in += inside;
                }
        return double(in) / double(total);
    };
    auto oracle_enlarge = [&](const Box& b, double alpha) {
        Box out;
        for (int a = 0; a < 3; ++a) {
            const double c = (b.lo[std::size_t(a)] + b.hi[std::size_t(a)]) / 2;
            const double half = (b.hi[std::size_t(a)] - b.lo[std::size_t(a)]) / 2;
            out.lo[std::size_t(a)] = std::max(vb.lo[std::size_t(a)], c - alpha * half);
            out.hi[std::size_t(a)] = std::min(vb.hi[std::size_t(a)], c + alpha * half);
            if (out.hi[std::size_t(a)] < out.lo[std::size_t(a)])
                out.hi[std::size_t(a)] = out.lo[std::size_t(a)];
        }
        return out;
    };
    double oracle_alpha = -1;
    double oracle_mean_vr = 0, oracle_std_vr = 0;
    for (const double alpha : vr_alpha_grid()) {
        double mean_recall = 0;
        for (const auto& c : cases) mean_recall += oracle_recall(oracle_enlarge(c.prediction, alpha), *c.mask);
        mean_recall /= double(cases.size());
        if (mean_recall >= 0.99) {
            oracle_alpha = alpha;
            std::vector<double> vrs;
            for (const auto& c : cases)
                vrs.push_back(c.raw_volume / oracle_enlarge(c.prediction, alpha).volume());
            for (double v : vrs) oracle_mean_vr += v;
            oracle_mean_vr /= double(vrs.size());
            for (double v : vrs)
                oracle_std_vr += (v - oracle_mean_vr) * (v - oracle_mean_vr);
            oracle_std_vr = std::sqrt(oracle_std_vr / double(vrs.size()));
            break;
        }
    }
    if (!got.alpha.has_value() || oracle_alpha < 0 || *got.alpha != oracle_alpha)
        fails.push_back("grid alpha*");
    else {
        if (got.mean_vr != oracle_mean_vr) fails.push_back("grid VR mean");
        if (got.std_vr != oracle_std_vr) fails.push_back("grid VR std");
        // hand expectation: both offset boxes cover their masks at the alpha = 2 grid point
        if (std::abs(*got.alpha - 2.0) > 1e-9) fails.push_back("alpha* != 2.0");
    }
    // failure path: box disjoint from mask and too small for enlargement to fix
    Mask far_mask(shape, sp, org);
    far_mask.at(9, 9, 9) = 1;
    std::vector<VrCase> hopeless{{Box{{0, 0, 0}, {0.5, 0.5, 0.5}}, &far_mask, vb, vb.volume()}};
    if (vr_at_99(hopeless).alpha.has_value()) fails.push_back("hopeless alpha");

    o.pass = fails.empty();
    if (o.pass)
        o.detail = "cube IoU, enlarge clip, half recall, grid alpha* = " + fmt(*got.alpha) +
                   ", VR mean " + fmt(got.mean_vr) + " all exact";
    else {
        o.detail = "failed:";
        for (const auto& f : fails) o.detail += " " + f + ";";
    }
    return o;
}

// ----------------------------------------------------- shared trained assets

struct EvalSet {
    std::vector<std::string> ids;
    std::vector<EmbeddingMap> maps;
    std::vector<std::vector<OrganLandmarks>> landmarks;
    std::vector<std::vector<std::unique_ptr<Mask>>> masks; // [volume][organ]
    std::vector<std::string> organs;
};

EvalSet load_eval_set(const std::string& data_dir, const std::string& maps_dir) {
    EvalSet s;
    s.ids = dataset::read_index(data_dir);
    for (const auto& id : s.ids) {
        s.maps.push_back(load_embedding_map(maps_dir + "/" + id + ".apem"));
        s.landmarks.push_back(dataset::load_sample_landmarks(data_dir, id));
    }
    for (const auto& lm : s.landmarks[0]) s.organs.push_back(lm.label);
    s.masks.resize(s.ids.size());
    for (std::size_t v = 0; v < s.ids.size(); ++v)
        for (const auto& organ : s.organs)
            s.masks[v].push_back(std::make_unique<Mask>(
                dataset::load_sample_mask(data_dir, s.ids[v], organ)));
    return s;
}

double retrieval_mre(const EvalSet& s) {
    eval::RetrievalInputs in;
    in.ids = s.ids;
    for (const auto& m : s.maps) in.maps.push_back(&m);
    in.landmarks = s.landmarks;
    return eval::run_retrieval(in).overall.mean;
}

double localization_mean_iou(const EvalSet& s, int shots, std::uint64_t seed) {
    eval::LocalizationInputs in;
    in.ids = s.ids;
    for (const auto& m : s.maps) in.maps.push_back(&m);
    in.landmarks = s.landmarks;
    in.organ_order = s.organs;
    in.shots = shots;
    in.seed = seed;
    in.masks.resize(s.ids.size());
    for (std::size_t v = 0; v < s.ids.size(); ++v)
        for (std::size_t g = 0; g < s.organs.size(); ++g)
            in.masks[v].push_back(s.masks[v][g].get());
    return eval::run_localization(in).mean_iou;
}

void embed_dataset(const Model& m, const std::string& data_dir, const std::string& maps_dir,
                   const EmbedConfig& ec) {
    fs::create_directories(maps_dir);
    for (const auto& id : dataset::read_index(data_dir)) {
        const Volume v = dataset::load_sample_volume(data_dir, id);
        save_embedding_map(sliding_window_embed(m, v, ec), maps_dir + "/" + id + ".apem");
    }
}

/// Held-out positive pairs, sampled once and reused across model variants.
struct PairProbe {
    std::vector<PatchPair> pairs;
    std::vector<VoxelPairBatch> batches;
};

PairProbe sample_pair_probe(const std::string& data_dir, const SamplerConfig& sc, int per_volume,
                            int voxels) {
    PairProbe p;
    const auto ids = dataset::read_index(data_dir);
    for (std::size_t v = 0; v < ids.size(); ++v) {
        const Volume vol = dataset::load_sample_volume(data_dir, ids[v]);
        Rng rng(Rng::mix(606, v));
        for (int i = 0; i < per_volume; ++i) {
            auto pp = sample_patch_pair(vol, rng, sc);
            p.batches.push_back(sample_positive_pairs(pp, voxels, rng));
            p.pairs.push_back(std::move(pp));
        }
    }
    return p;
}

double mean_positive_distance(const Model& m, const PairProbe& probe) {
    double sum = 0;
    std::int64_t count = 0;
    for (std::size_t i = 0; i < probe.pairs.size(); ++i) {
        const auto ea = forward_eval(m, probe.pairs[i].patch_a.data);
        const auto eb = forward_eval(m, probe.pairs[i].patch_b.data);
        const auto& vb = probe.batches[i];
        for (std::size_t j = 0; j < vb.size(); ++j) {
            const ivec3 a = vb.index_a[j], b = vb.index_b[j];
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double diff = double(ea.at(c, a[0], a[1], a[2])) -
                                    double(eb.at(c, b[0], b[1], b[2]));
                d2 += diff * diff;
            }
            sum += std::sqrt(d2);
            ++count;
        }
    }
    return sum / double(count);
}

// --------------------------------------------------------------- criterion 7

/// Window ownership under nearest-center assignment, replicated from the
/// tiling contract (first window wins ties, placement order x-outer z-inner).
std::vector<int> window_assignment(const ivec3& shape, const EmbedConfig& ec) {
    ivec3 stride;
    std::vector<int> starts[3];
    for (int a = 0; a < 3; ++a) {
        stride[std::size_t(a)] = std::max(1, int(std::llround(ec.window[std::size_t(a)] * (1.0 - ec.overlap))));
        starts[a] = tile_starts(shape[std::size_t(a)], ec.window[std::size_t(a)], stride[std::size_t(a)]);
    }
    std::vector<ivec3> places;
    for (int sx : starts[0])
        for (int sy : starts[1])
            for (int sz : starts[2]) places.push_back({sx, sy, sz});

    std::vector<int> owner(std::size_t(volume_of(shape)), -1);
    std::vector<float> best(owner.size(), std::numeric_limits<float>::max());
    auto flat = [&shape](int x, int y, int z) {
        return (std::size_t(x) * shape[1] + y) * shape[2] + z;
    };
    for (int w = 0; w < int(places.size()); ++w) {
        const ivec3 s = places[std::size_t(w)];
        for (int x = 0; x < ec.window[0]; ++x)
            for (int y = 0; y < ec.window[1]; ++y)
                for (int z = 0; z < ec.window[2]; ++z) {
                    const float dx = float(x) - float(ec.window[0] - 1) * 0.5f;
                    const float dy = float(y) - float(ec.window[1] - 1) * 0.5f;
                    const float dz = float(z) - float(ec.window[2] - 1) * 0.5f;
                    const float d2 = dx * dx + dy * dy + dz * dz;
                    const std::size_t f = flat(s[0] + x, s[1] + y, s[2] + z);
                    if (d2 < best[f]) {
                        best[f] = d2;
                        owner[f] = w;
                    }
                }
    }
    return owner;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Outcome c7_continuity(const Model& model, const std::string& data_dir) {
    Outcome o{"seam continuity", false, ""};
    const Volume vol = dataset::load_sample_volume(data_dir, "phantom_000");
    EmbedConfig hard;
    hard.blend = BlendMode::nearest;
    hard.workers = 1;
    EmbedConfig soft;
    soft.blend = BlendMode::triangular;
    soft.workers = 1;

    const EmbeddingMap map_hard = sliding_window_embed(model, vol, hard);
    const EmbeddingMap map_soft = sliding_window_embed(model, vol, soft);
    const EmbeddingMap map_soft2 = sliding_window_embed(model, vol, soft);
    const bool deterministic = map_soft.data == map_soft2.data && map_soft.shape == map_soft2.shape;

    const auto owner = window_assignment(vol.shape, hard);
    auto flat = [&vol](int x, int y, int z) {
        return (std::size_t(x) * vol.shape[1] + y) * vol.shape[2] + z;
    };

    // per-channel seam jumps: adjacent voxels owned by different windows
    std::vector<double> jumps_hard[3], jumps_soft[3];
    auto visit = [&](int x, int y, int z, int nx, int ny, int nz) {
        if (owner[flat(x, y, z)] == owner[flat(nx, ny, nz)]) return;
        for (int c = 0; c < 3; ++c) {
            jumps_hard[c].push_back(std::abs(double(map_hard.at(c, x, y, z)) -
                                             double(map_hard.at(c, nx, ny, nz))));
            jumps_soft[c].push_back(std::abs(double(map_soft.at(c, x, y, z)) -
                                             double(map_soft.at(c, nx, ny, nz))));
        }
    };
    for (int x = 0; x < vol.shape[0]; ++x)
        for (int y = 0; y < vol.shape[1]; ++y)
            for (int z = 0; z < vol.shape[2]; ++z) {
                if (x + 1 < vol.shape[0]) visit(x, y, z, x + 1, y, z);
                if (y + 1 < vol.shape[1]) visit(x, y, z, x, y + 1, z);
                if (z + 1 < vol.shape[2]) visit(x, y, z, x, y, z + 1);
            }

    bool medians_ok = true, blend_smaller = true;
    std::string meds;
    for (int c = 0; c < 3; ++c) {
        // per-channel population std over the unblended map
        const std::size_t n = map_hard.data.size() / 3;
        double sum = 0, sum2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = map_hard.data[std::size_t(c) * n + i];
            sum += v;
            sum2 += v * v;
        }
        const double mean = sum / double(n);
        const double sd = std::sqrt(std::max(0.0, sum2 / double(n) - mean * mean));
        const double mh = median(jumps_hard[c]);
        const double ms = median(jumps_soft[c]);
        medians_ok = medians_ok && mh < 0.1 * sd;
        blend_smaller = blend_smaller && ms < mh;
        meds += (c ? ", " : "") + fmt(mh) + "/" + fmt(0.1 * sd);
    }
    o.pass = medians_ok && blend_smaller && deterministic && !jumps_hard[0].empty();
    o.detail = "seam median vs 0.1*std per channel: " + meds +
               (blend_smaller ? "; blended strictly smaller" : "; BLEND NOT SMALLER") +
               (deterministic ? "; deterministic" : "; NON-DETERMINISTIC");
    return o;
}

// --------------------------------------------------------------- criterion 8

Outcome c8_clusters(const EvalSet& s) {
    Outcome o{"cluster structure", false, ""};
    // organ-center embeddings, one point per (volume, organ)
    std::vector<std::vector<fvec3>> groups(s.organs.size());
    for (std::size_t v = 0; v < s.ids.size(); ++v)
        for (std::size_t g = 0; g < s.organs.size(); ++g)
            for (const auto& lm : s.landmarks[v])
                if (lm.label == s.organs[g])
                    groups[g].push_back(query_embedding(s.maps[v], lm.center_mm));

    auto dist3 = [](const dvec3& a, const dvec3& b) {
        const dvec3 d = a - b;
        return std::sqrt(dot(d, d));
    };
    std::vector<dvec3> centroids;
    double intra = 0;
    for (const auto& g : groups) {
        dvec3 c{0, 0, 0};
        for (const auto& e : g) c = c + dvec3{double(e[0]), double(e[1]), double(e[2])};
        c = c * (1.0 / double(g.size()));
        centroids.push_back(c);
        double spread = 0;
        for (const auto& e : g) spread += dist3(c, {double(e[0]), double(e[1]), double(e[2])});
        intra += spread / double(g.size());
    }
    intra /= double(groups.size());
    double inter = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < centroids.size(); ++i)
        for (std::size_t j = i + 1; j < centroids.size(); ++j) {
            inter += dist3(centroids[i], centroids[j]);
            ++pairs;
        }
    inter /= double(pairs);
    o.pass = inter > 2.0 * intra;
    o.detail = "inter-organ centroid distance " + fmt(inter) + " vs 2 x intra-organ spread " +
               fmt(2.0 * intra) + " (" + std::to_string(s.ids.size()) + " held-out phantoms)";
    return o;
}

} // namespace

// ------------------------------------------------------------------- driver

int main() {
    g_root = (fs::temp_directory_path() / "ape_acceptance").string();
    fs::remove_all(g_root);
    fs::create_directories(g_root);
    const char* cli_env = std::getenv("APE_CLI");
    g_cli = cli_env ? cli_env : "./ape";
    if (!fs::exists(g_cli)) {
        std::cerr << "acceptance: CLI binary not found at " << g_cli
                  << " (set APE_CLI)\n";
        return 1;
    }

    std::vector<Outcome> out(10);
    const auto t_all = std::chrono::steady_clock::now();

    std::cerr << "[acceptance] criteria 1-5 (oracles)\n";
    out[0] = c1_loss_oracle();
    out[1] = c2_gradcheck();
    out[2] = c3_batchnorm();
    out[3] = c4_retrieval_exact();
    out[4] = c5_metric_oracles();

    // shared configuration for everything trained below
    const std::string cfg_path = g_root + "/desk.cfg";
    ape::detail::write_file(cfg_path,
                            "seed = 1\n"
                            "generate.count = 20\n"
                            "eval.shots = 5\n"
                            "train.variant = equiv\n"
                            "train.steps = 2000\n"
                            "train.phantom_count = 50\n");
    const std::string data = g_root + "/data";
    const std::string run_equiv = g_root + "/run_equiv";
    const std::string maps_equiv = g_root + "/maps_equiv";
    const std::string reports = g_root + "/reports";

    // ---------------- criterion 10: the CLI pipeline, timed
    std::cerr << "[acceptance] criterion 10: CLI pipeline (generate/train/embed/eval)\n";
    {
        Outcome o{"end-to-end CLI pipeline", false, ""};
        const auto t0 = std::chrono::steady_clock::now();
        bool ok = true;
        ok = ok && run_cli("generate --config " + cfg_path + " --out " + data) == 0;
        std::cerr << "[acceptance]   generate done (" << fmt(seconds_since(t0)) << " s)\n";
        ok = ok && run_cli("train --config " + cfg_path + " --out " + run_equiv) == 0;
        std::cerr << "[acceptance]   train done (" << fmt(seconds_since(t0)) << " s)\n";
        ok = ok && run_cli("embed --config " + cfg_path + " --checkpoint " + run_equiv +
                           "/model.ckpt --data " + data + " --out " + maps_equiv) == 0;
        ok = ok && run_cli("eval-retrieval --config " + cfg_path + " --data " + data +
                           " --maps " + maps_equiv + " --out " + reports) == 0;
        ok = ok && run_cli("eval-localization --config " + cfg_path + " --data " + data +
                           " --maps " + maps_equiv + " --out " + reports) == 0;
        const double secs = seconds_since(t0);
        const char* files[] = {"/run_equiv/model.ckpt",
                               "/run_equiv/metrics.csv",
                               "/run_equiv/loss_curve.svg",
                               "/maps_equiv/phantom_000.apem",
                               "/maps_equiv/phantom_019.apem",
                               "/reports/retrieval_summary.csv",
                               "/reports/retrieval_details.csv",
                               "/reports/mre_hist.svg",
                               "/reports/localization_summary.csv",
                               "/reports/localization_details.csv"};
        std::string missing;
        for (const char* f : files)
            if (!fs::exists(g_root + f)) missing += std::string(" ") + f;
        o.pass = ok && missing.empty() && secs < 45.0 * 60.0;
        o.detail = "wallclock " + fmt(secs) + " s (budget 2700 s on 4 cores)" +
                   (missing.empty() ? ", all report files emitted" : ", MISSING:" + missing) +
                   (ok ? "" : ", a command exited nonzero");
        out[9] = o;
    }

    // ---------------- criterion 6: variant ordering (two more trainings)
    std::cerr << "[acceptance] criterion 6: augmented + naive trainings\n";
    {
        Outcome o{"variant ordering", false, ""};
        const auto t0 = std::chrono::steady_clock::now();
        // mirror the CLI's config propagation so the three runs differ only
        // in the variant
        ExperimentConfig cfg = config::load(cfg_path);
        cfg.train.seed = cfg.seed;
        cfg.train.workers = cfg.workers;
        cfg.embed.workers = cfg.workers;

        TrainConfig tc_augm = cfg.train;
        tc_augm.variant = Variant::augm;
        TrainConfig tc_naive = cfg.train;
        tc_naive.variant = Variant::naive;
        train(tc_augm, g_root + "/run_augm");
        std::cerr << "[acceptance]   augm trained (" << fmt(seconds_since(t0)) << " s)\n";
        train(tc_naive, g_root + "/run_naive");
        std::cerr << "[acceptance]   naive trained (" << fmt(seconds_since(t0)) << " s)\n";

        Model m_equiv, m_augm, m_naive;
        load_checkpoint(run_equiv + "/model.ckpt", m_equiv, nullptr);
        load_checkpoint(g_root + "/run_augm/model.ckpt", m_augm, nullptr);
        load_checkpoint(g_root + "/run_naive/model.ckpt", m_naive, nullptr);

        embed_dataset(m_augm, data, g_root + "/maps_augm", cfg.embed);
        embed_dataset(m_naive, data, g_root + "/maps_naive", cfg.embed);

        // (a) held-out positive-pair embedding distance
        const PairProbe probe = sample_pair_probe(data, cfg.train.sampler, 1, 50);
        const double pd_equiv = mean_positive_distance(m_equiv, probe);
        const double pd_naive = mean_positive_distance(m_naive, probe);

        // (b) retrieval MRE and (c) few-shot IoU on the held-out dataset
        const EvalSet set_equiv = load_eval_set(data, maps_equiv);
        const EvalSet set_augm = load_eval_set(data, g_root + "/maps_augm");
        const EvalSet set_naive = load_eval_set(data, g_root + "/maps_naive");
        const double mre_e = retrieval_mre(set_equiv);
        const double mre_a = retrieval_mre(set_augm);
        const double mre_n = retrieval_mre(set_naive);
        const double iou_e = localization_mean_iou(set_equiv, cfg.eval_shots, cfg.seed);
        const double iou_n = localization_mean_iou(set_naive, cfg.eval_shots, cfg.seed);

        const bool pass_a = pd_equiv < pd_naive;
        const bool pass_b = mre_e <= mre_a * 1.10 && mre_a <= mre_n * 1.10 && mre_e <= mre_n;
        const bool pass_c = iou_e > iou_n;
        o.pass = pass_a && pass_b && pass_c;
        o.detail = std::string("(a) pos-pair dist equiv ") + fmt(pd_equiv) + " vs naive " +
                   fmt(pd_naive) + (pass_a ? " OK" : " FAIL") + "; (b) MRE " + fmt(mre_e) + " <= " +
                   fmt(mre_a) + " <= " + fmt(mre_n) + " mm" + (pass_b ? " OK" : " FAIL") +
                   "; (c) IoU equiv " + fmt(iou_e) + " vs naive " + fmt(iou_n) +
                   (pass_c ? " OK" : " FAIL");
        out[5] = o;

        // ---------------- criterion 7: seam continuity on the trained model
        std::cerr << "[acceptance] criterion 7: seam continuity\n";
        out[6] = c7_continuity(m_equiv, data);

        // ---------------- criterion 8: cluster structure
        std::cerr << "[acceptance] criterion 8: cluster structure\n";
        out[7] = c8_clusters(set_equiv);
    }

    // ---------------- criterion 9: byte-identical reruns of every command
    std::cerr << "[acceptance] criterion 9: reproducibility reruns\n";
    {
        Outcome o{"reproducibility", false, ""};
        std::string diffs;

        const std::string data2 = g_root + "/data_rerun";
        run_cli("generate --config " + cfg_path + " --out " + data2);
        for (const auto& entry : fs::directory_iterator(data)) {
            const auto name = entry.path().filename().string();
            if (!same_file(data + "/" + name, data2 + "/" + name)) diffs += " generate:" + name;
        }

        run_cli("embed --config " + cfg_path + " --checkpoint " + run_equiv +
                "/model.ckpt --data " + data + " --out " + g_root + "/maps_rerun");
        if (!same_file(maps_equiv + "/phantom_000.apem", g_root + "/maps_rerun/phantom_000.apem"))
            diffs += " embed:phantom_000.apem";

        const std::string reports2 = g_root + "/reports_rerun";
        run_cli("eval-retrieval --config " + cfg_path + " --data " + data + " --maps " +
                maps_equiv + " --out " + reports2);
        run_cli("eval-localization --config " + cfg_path + " --data " + data + " --maps " +
                maps_equiv + " --out " + reports2);
        run_cli("export-centers --config " + cfg_path + " --data " + data + " --maps " +
                maps_equiv + " --out " + reports);
        run_cli("export-centers --config " + cfg_path + " --data " + data + " --maps " +
                maps_equiv + " --out " + reports2);
        for (const char* f : {"retrieval_summary.csv", "retrieval_details.csv",
                              "localization_summary.csv", "localization_details.csv",
                              "center_embeddings.csv"})
            if (!same_file(reports + "/" + f, reports2 + "/" + f)) diffs += std::string(" ") + f;

        // train determinism at a budget this gate can afford twice
        const std::string tiny_cfg = g_root + "/tiny.cfg";
        ape::detail::write_file(tiny_cfg,
                                "seed = 3\n"
                                "train.steps = 3\n"
                                "train.phantom_count = 2\n"
                                "train.checkpoint_every = 10\n"
                                "model.stem_channels = 4\n"
                                "model.encoder_channels = 4, 8\n"
                                "model.decoder_channels = 8\n");
        run_cli("train --config " + tiny_cfg + " --out " + g_root + "/tiny_a");
        run_cli("train --config " + tiny_cfg + " --out " + g_root + "/tiny_b");
        if (!same_file(g_root + "/tiny_a/metrics.csv", g_root + "/tiny_b/metrics.csv"))
            diffs += " train:metrics.csv";
        if (!same_file(g_root + "/tiny_a/model.ckpt", g_root + "/tiny_b/model.ckpt"))
            diffs += " train:model.ckpt";

        o.pass = diffs.empty();
        o.detail = diffs.empty()
                       ? "generate, train, embed, eval-retrieval, eval-localization, "
                         "export-centers all byte-identical on rerun"
                       : "differences:" + diffs;
        out[8] = o;
    }

    // ------------------------------------------------------------- summary
    std::cout << "\n";
    int failures = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool pass = out[i].pass;
        failures += !pass;
        std::cout << "criterion " << (i + 1) << " (" << out[i].name
                  << "): " << (pass ? "PASS" : "FAIL") << " - " << out[i].detail << "\n";
    }
    std::cout << "acceptance total wallclock: " << fmt(seconds_since(t_all)) << " s\n";
    return failures == 0 ? 0 : 1;
}

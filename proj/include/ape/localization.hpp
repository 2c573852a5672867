#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ape/geometry.hpp"
#include "ape/retrieval.hpp"
#include "ape/volume.hpp"

namespace ape {

/// Six edge-point queries for one (volume, organ), in the fixed order
/// x-, x+, y-, y+, z-, z+.
using EdgeQueries = std::array<Query, 6>;

/// Box spanned by the six voxels retrieved for the edge-point queries.
inline Box predict_box(const EdgeQueries& shot, const EmbeddingMap& map) {
    std::array<dvec3, 6> pts;
    for (std::size_t i = 0; i < 6; ++i) pts[i] = nearest_voxel(map, shot[i]).mm;
    return bounding_box(pts.data(), 6);
}

/// Corner-wise arithmetic mean of the per-shot box predictions.
inline Box few_shot_box(const std::vector<EdgeQueries>& shots, const EmbeddingMap& map) {
    if (shots.empty()) throw std::invalid_argument("few_shot_box: empty shot set");
    dvec3 lo{0, 0, 0}, hi{0, 0, 0};
    for (const auto& shot : shots) {
        const Box b = predict_box(shot, map);
        lo = lo + b.lo;
        hi = hi + b.hi;
    }
    const double s = 1.0 / double(shots.size());
    return Box{lo * s, hi * s};
}

inline double iou(const Box& a, const Box& b) {
    const double va = a.volume();
    const double vb = b.volume();
    if (va == 0.0 && vb == 0.0) return (a.lo == b.lo && a.hi == b.hi) ? 1.0 : 0.0;
    const double vi = intersection_volume(a, b);
    if (vi == 0.0) return 0.0;
    return vi / (va + vb - vi);
}

/// Scales each side by alpha about the center, then clips to bounds.
inline Box enlarge_box(const Box& b, double alpha, const Box& bounds) {
    if (alpha < 1.0) throw std::invalid_argument("enlarge_box: alpha must be >= 1");
    Box out;
    for (int a = 0; a < 3; ++a) {
        const double center = 0.5 * (b.lo[a] + b.hi[a]);
        const double half = 0.5 * alpha * (b.hi[a] - b.lo[a]);
        out.lo[a] = std::max(center - half, bounds.lo[a]);
        out.hi[a] = std::min(center + half, bounds.hi[a]);
        if (out.hi[a] < out.lo[a]) out.hi[a] = out.lo[a];
    }
    return out;
}

/// Fraction of mask voxel centers inside the box, bounds inclusive.
inline double recall(const Box& b, const Mask& mask) {
    std::int64_t total = 0, inside = 0;
    for (int x = 0; x < mask.shape[0]; ++x)
        for (int y = 0; y < mask.shape[1]; ++y)
            for (int z = 0; z < mask.shape[2]; ++z) {
                if (!mask.at(x, y, z)) continue;
                ++total;
                if (b.contains(mask.voxel_mm({x, y, z}))) ++inside;
            }
    if (total == 0) throw std::invalid_argument("recall: empty mask");
    return double(inside) / double(total);
}

struct VrResult {
    std::optional<double> alpha; // empty when no grid alpha reaches the target
    double best_recall = 0;      // best mean recall seen on the grid
    double mean_vr = 0;
    double std_vr = 0;           // population convention
};

inline constexpr double kVrRecallTarget = 0.99;

/// Grid of enlargement factors {1.00, 1.05, ..., 3.00}.
inline std::vector<double> vr_alpha_grid() {
    std::vector<double> g;
    g.reserve(41);
    for (int i = 0; i <= 40; ++i) g.push_back(1.0 + 0.05 * i);
    return g;
}

/// One entry per test image of a single organ.
struct VrCase {
    Box prediction;
    const Mask* mask = nullptr;
    Box bounds;            // physical extent of the test image
    double raw_volume = 0; // its physical volume, mm^3
};

/// alpha* = smallest grid alpha whose mean recall across test images reaches
/// 0.99; VR per image = raw volume / enlarged-clipped box volume.
inline VrResult vr_at_99(const std::vector<VrCase>& cases) {
    if (cases.empty()) throw std::invalid_argument("vr_at_99: no test images");
    VrResult r;
    std::optional<double> alpha_star;
    for (const double alpha : vr_alpha_grid()) {
        double sum = 0;
        for (const auto& c : cases)
            sum += recall(enlarge_box(c.prediction, alpha, c.bounds), *c.mask);
        const double mean_recall = sum / double(cases.size());
        r.best_recall = std::max(r.best_recall, mean_recall);
        if (mean_recall >= kVrRecallTarget) {
            alpha_star = alpha;
            break;
        }
    }
    r.alpha = alpha_star;
    if (!alpha_star) return r;

    std::vector<double> vrs;
    vrs.reserve(cases.size());
    for (const auto& c : cases) {
        const Box e = enlarge_box(c.prediction, *alpha_star, c.bounds);
        const double bv = e.volume();
        vrs.push_back(bv > 0 ? c.raw_volume / bv : 0.0);
    }
    double mean = 0;
    for (double v : vrs) mean += v;
    mean /= double(vrs.size());
    double var = 0;
    for (double v : vrs) var += (v - mean) * (v - mean);
    r.mean_vr = mean;
    r.std_vr = std::sqrt(var / double(vrs.size()));
    return r;
}

/// Ground-truth box of a mask: the bounding box of its voxel centers, the
/// same convention recall uses.
inline Box mask_box(const Mask& mask) {
    Box b;
    bool any = false;
    for (int x = 0; x < mask.shape[0]; ++x)
        for (int y = 0; y < mask.shape[1]; ++y)
            for (int z = 0; z < mask.shape[2]; ++z) {
                if (!mask.at(x, y, z)) continue;
                const dvec3 c = mask.voxel_mm({x, y, z});
                if (!any) {
                    b = Box{c, c};
                    any = true;
                } else {
                    for (int a = 0; a < 3; ++a) {
                        b.lo[a] = std::min(b.lo[a], c[a]);
                        b.hi[a] = std::max(b.hi[a], c[a]);
                    }
                }
            }
    if (!any) throw std::invalid_argument("mask_box: empty mask");
    return b;
}

/// Physical extent of a volume's voxel cells, mm.
inline Box physical_bounds(const ivec3& shape, const dvec3& spacing, const dvec3& origin) {
    Box b;
    for (int a = 0; a < 3; ++a) {
        b.lo[a] = origin[a] - 0.5 * spacing[a];
        b.hi[a] = origin[a] + (double(shape[a]) - 0.5) * spacing[a];
    }
    return b;
}

} // namespace ape

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ape/common.hpp"
#include "ape/rng.hpp"
#include "ape/volume.hpp"

namespace ape {

struct OrganTemplate {
    std::string label;
    dvec3 center_norm;   // offset from body center, in units of body semi-axes
    dvec3 radii_mm;      // ellipsoid semi-axes
    double intensity_hu; // mean intensity inside the organ
};

/// Recipe for a family of synthetic anatomies. Organ layout is shared across
/// samples; per-sample variation comes from global scale, center jitter, a
/// smooth displacement field and intensity noise.
struct PhantomSpec {
    ivec3 grid_shape{64, 64, 48};
    dvec3 spacing_mm{2.0, 2.0, 3.0};
    dvec3 origin_mm{0.0, 0.0, 0.0};

    dvec3 body_semi_axes_mm{54.0, 54.0, 64.0};
    double body_hu = 0.0;
    double air_hu = -800.0;

    std::vector<OrganTemplate> organs;

    double scale_lo = 0.97;
    double scale_hi = 1.03;
    double center_jitter_mm = 1.5;
    double noise_std_hu = 12.0;
    double deform_amplitude_mm = 2.0;
    double deform_smoothness_mm = 64.0;

    dvec3 extent_mm() const { return to_dvec3(grid_shape) * spacing_mm; }
    dvec3 body_center_mm() const { return origin_mm + extent_mm() * 0.5; }
};

struct OrganLandmarks {
    std::string label;
    dvec3 center_mm;
    std::array<dvec3, 6> edge_points_mm; // order: x-, x+, y-, y+, z-, z+
};

struct PhantomSample {
    Volume volume;
    std::vector<std::string> labels;
    std::vector<Mask> masks;
    std::vector<OrganLandmarks> landmarks;
    std::uint64_t seed = 0;
};

inline dvec3 organ_center_mm(const PhantomSpec& spec, const OrganTemplate& organ) {
    return spec.body_center_mm() + organ.center_norm * spec.body_semi_axes_mm;
}

/// Validates a spec. Throws config_error when the organ layout cannot guarantee
/// nonempty disjoint masks and a seed-independent ordering of organ centers.
inline void validate_phantom_spec(const PhantomSpec& spec) {
    if (spec.grid_shape[0] < 1 || spec.grid_shape[1] < 1 || spec.grid_shape[2] < 1)
        throw config_error("phantom: grid shape must be positive");
    if (spec.spacing_mm[0] <= 0 || spec.spacing_mm[1] <= 0 || spec.spacing_mm[2] <= 0)
        throw config_error("phantom: spacing must be positive");
    if (spec.organs.empty()) throw config_error("phantom: at least one organ required");
    if (spec.scale_lo <= 0 || spec.scale_hi < spec.scale_lo)
        throw config_error("phantom: invalid scale range");

    const double jitter = spec.center_jitter_mm + spec.deform_amplitude_mm;
    const double smax = spec.scale_hi;

    for (const auto& o : spec.organs) {
        if (o.radii_mm[0] <= 0 || o.radii_mm[1] <= 0 || o.radii_mm[2] <= 0)
            throw config_error("phantom: organ " + o.label + " has non-positive radius");
    }

    // organs must stay inside the grid with one voxel of margin
    for (const auto& o : spec.organs) {
        const dvec3 c = organ_center_mm(spec, o);
        for (int a = 0; a < 3; ++a) {
            const double reach = std::abs(o.center_norm[a]) * spec.body_semi_axes_mm[a] * (smax - 1.0) +
                                 o.radii_mm[a] * smax + jitter;
            const double lo = spec.origin_mm[a] + spec.spacing_mm[a];
            const double hi = spec.origin_mm[a] + spec.extent_mm()[a] - spec.spacing_mm[a];
            if (c[a] - reach < lo || c[a] + reach > hi)
                throw config_error("phantom: organ " + o.label + " can leave the grid along axis " +
                                   std::to_string(a));
        }
    }

    // pairwise disjointness under worst-case jitter and scale
    for (std::size_t i = 0; i < spec.organs.size(); ++i) {
        for (std::size_t j = i + 1; j < spec.organs.size(); ++j) {
            const dvec3 ci = organ_center_mm(spec, spec.organs[i]);
            const dvec3 cj = organ_center_mm(spec, spec.organs[j]);
            const double ri = std::max({spec.organs[i].radii_mm[0], spec.organs[i].radii_mm[1],
                                        spec.organs[i].radii_mm[2]});
            const double rj = std::max({spec.organs[j].radii_mm[0], spec.organs[j].radii_mm[1],
                                        spec.organs[j].radii_mm[2]});
            if (distance(ci, cj) <= (ri + rj) * smax + 2.0 * jitter)
                throw config_error("phantom: organs " + spec.organs[i].label + " and " +
                                   spec.organs[j].label + " may overlap");
        }
    }

    // interval arithmetic on per-axis center positions: the ordering of organ
    // centers along each axis must be invariant across samples
    for (int a = 0; a < 3; ++a) {
        std::vector<std::pair<double, double>> intervals; // (lo, hi) of possible center coords
        for (const auto& o : spec.organs) {
            const double off = o.center_norm[a] * spec.body_semi_axes_mm[a];
            const double lo = std::min(off * spec.scale_lo, off * spec.scale_hi) - jitter;
            const double hi = std::max(off * spec.scale_lo, off * spec.scale_hi) + jitter;
            intervals.emplace_back(lo, hi);
        }
        std::sort(intervals.begin(), intervals.end());
        for (std::size_t k = 1; k < intervals.size(); ++k) {
            if (intervals[k].first <= intervals[k - 1].second)
                throw config_error(
                    "phantom: organ center ordering along axis " + std::to_string(a) +
                    " is not guaranteed (reduce jitter or spread the organ layout)");
        }
    }
}

/// Desk-scale default: 64x64x48 grid at (2,2,3) mm, 8 ellipsoidal organs laid
/// out so each axis carries a distinct, well separated ordering.
inline PhantomSpec default_phantom_spec() {
    PhantomSpec spec;
    const double slots[8] = {-0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7};
    const int perm_y[8] = {0, 2, 4, 6, 1, 3, 5, 7};
    const int perm_z[8] = {2, 6, 0, 4, 3, 7, 1, 5};
    const double rx[8] = {11, 10, 12, 10.5, 11.5, 10, 12, 11};
    const double rz[8] = {10, 11, 10, 11.5, 10.5, 12, 10, 11};
    for (int i = 0; i < 8; ++i) {
        OrganTemplate o;
        o.label = "organ_" + std::to_string(i);
        o.center_norm = {slots[i], slots[perm_y[i]], slots[perm_z[i]]};
        o.radii_mm = {rx[i], rx[(i + 3) % 8], rz[i]};
        o.intensity_hu = 40.0 + 12.0 * i;
        spec.organs.push_back(o);
    }
    return spec;
}

namespace detail {

/// Low-frequency displacement field: a coarse grid of random vectors,
/// trilinearly interpolated over the volume extent.
class DisplacementField {
public:
    DisplacementField(const PhantomSpec& spec, Rng& rng) {
        const dvec3 extent = spec.extent_mm();
        origin_ = spec.origin_mm - spec.spacing_mm * 0.5;
        for (int a = 0; a < 3; ++a) {
            n_[a] = std::max(2, int(std::lround(extent[a] / spec.deform_smoothness_mm)) + 1);
            step_[a] = extent[a] / (n_[a] - 1);
        }
        control_.resize(std::size_t(n_[0]) * n_[1] * n_[2]);
        const double amp = spec.deform_amplitude_mm;
        for (auto& v : control_) v = rng.uniform_vec3({-amp, -amp, -amp}, {amp, amp, amp});
    }

    dvec3 at(const dvec3& x) const {
        double t[3];
        int i0[3], i1[3];
        for (int a = 0; a < 3; ++a) {
            double f = (x[a] - origin_[a]) / step_[a];
            f = std::clamp(f, 0.0, double(n_[a] - 1));
            i0[a] = int(f);
            i1[a] = std::min(i0[a] + 1, n_[a] - 1);
            t[a] = f - i0[a];
        }
        dvec3 out{0, 0, 0};
        for (int bx = 0; bx < 2; ++bx)
            for (int by = 0; by < 2; ++by)
                for (int bz = 0; bz < 2; ++bz) {
                    const double wgt = (bx ? t[0] : 1 - t[0]) * (by ? t[1] : 1 - t[1]) *
                                       (bz ? t[2] : 1 - t[2]);
                    const auto& c = control_[(std::size_t(bx ? i1[0] : i0[0]) * n_[1] +
                                              (by ? i1[1] : i0[1])) *
                                                 n_[2] +
                                             (bz ? i1[2] : i0[2])];
                    out = out + c * wgt;
                }
        return out;
    }

private:
    dvec3 origin_;
    int n_[3];
    double step_[3];
    std::vector<dvec3> control_;
};

} // namespace detail

inline dvec3 organ_center(const Mask& mask) {
    dvec3 sum{0, 0, 0};
    std::int64_t n = 0;
    for (int h = 0; h < mask.shape[0]; ++h)
        for (int w = 0; w < mask.shape[1]; ++w)
            for (int d = 0; d < mask.shape[2]; ++d)
                if (mask.at(h, w, d)) {
                    sum = sum + mask.voxel_mm({h, w, d});
                    ++n;
                }
    if (n == 0) throw std::invalid_argument("organ_center: empty mask");
    return sum * (1.0 / double(n));
}

/// Six extreme points of a mask, two per axis, order (x-, x+, y-, y+, z-, z+).
/// Within the extreme slice the voxel closest to the mask centroid (in the
/// other two axes) wins; remaining ties break on the lexicographically
/// smallest index.
inline std::array<dvec3, 6> organ_edge_points(const Mask& mask) {
    const dvec3 centroid = organ_center(mask);
    int extreme[3][2] = {{std::numeric_limits<int>::max(), -1},
                         {std::numeric_limits<int>::max(), -1},
                         {std::numeric_limits<int>::max(), -1}};
    for (int h = 0; h < mask.shape[0]; ++h)
        for (int w = 0; w < mask.shape[1]; ++w)
            for (int d = 0; d < mask.shape[2]; ++d)
                if (mask.at(h, w, d)) {
                    const int idx[3] = {h, w, d};
                    for (int a = 0; a < 3; ++a) {
                        extreme[a][0] = std::min(extreme[a][0], idx[a]);
                        extreme[a][1] = std::max(extreme[a][1], idx[a]);
                    }
                }
    if (extreme[0][1] < 0) throw std::invalid_argument("organ_edge_points: empty mask");

    std::array<dvec3, 6> out;
    for (int a = 0; a < 3; ++a) {
        for (int side = 0; side < 2; ++side) {
            double best = std::numeric_limits<double>::infinity();
            ivec3 best_idx{-1, -1, -1};
            for (int h = 0; h < mask.shape[0]; ++h)
                for (int w = 0; w < mask.shape[1]; ++w)
                    for (int d = 0; d < mask.shape[2]; ++d) {
                        if (!mask.at(h, w, d)) continue;
                        const int idx[3] = {h, w, d};
                        if (idx[a] != extreme[a][side]) continue;
                        const dvec3 mm = mask.voxel_mm({h, w, d});
                        double dist2 = 0;
                        for (int b = 0; b < 3; ++b)
                            if (b != a) dist2 += (mm[b] - centroid[b]) * (mm[b] - centroid[b]);
                        if (dist2 < best) {
                            best = dist2;
                            best_idx = {h, w, d};
                        }
                    }
            out[2 * a + side] = mask.voxel_mm(best_idx);
        }
    }
    return out;
}

/// Deterministic synthetic anatomy. Same (spec, seed) gives bit-identical output.
inline PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
    validate_phantom_spec(spec);
    Rng rng(Rng::mix(seed, 0x70686e746dull)); // phantom stream

    const double scale = rng.uniform(spec.scale_lo, spec.scale_hi);
    const dvec3 body_center = spec.body_center_mm();

    const int n_organs = int(spec.organs.size());
    std::vector<dvec3> centers(n_organs);
    std::vector<dvec3> radii(n_organs);
    for (int i = 0; i < n_organs; ++i) {
        const auto& o = spec.organs[i];
        const double j = spec.center_jitter_mm;
        centers[i] = body_center + (o.center_norm * spec.body_semi_axes_mm) * scale +
                     rng.uniform_vec3({-j, -j, -j}, {j, j, j});
        radii[i] = o.radii_mm * scale;
    }

    const detail::DisplacementField deform(spec, rng);

    PhantomSample sample;
    sample.seed = seed;
    sample.volume = Volume(spec.grid_shape, spec.spacing_mm, spec.origin_mm);
    for (int i = 0; i < n_organs; ++i) {
        sample.labels.push_back(spec.organs[i].label);
        sample.masks.emplace_back(spec.grid_shape, spec.spacing_mm, spec.origin_mm);
    }

    const dvec3 body_semi = spec.body_semi_axes_mm * scale;
    for (int h = 0; h < spec.grid_shape[0]; ++h) {
        for (int w = 0; w < spec.grid_shape[1]; ++w) {
            for (int d = 0; d < spec.grid_shape[2]; ++d) {
                const dvec3 x = sample.volume.voxel_mm({h, w, d});
                const dvec3 y = x + deform.at(x);

                double intensity = spec.air_hu;
                const dvec3 b = (y - body_center) / body_semi;
                if (dot(b, b) <= 1.0) intensity = spec.body_hu;

                // assign to the nearest organ in normalized ellipsoid distance,
                // which keeps masks disjoint by construction
                double best_q = std::numeric_limits<double>::infinity();
                int best_organ = -1;
                for (int i = 0; i < n_organs; ++i) {
                    const dvec3 q = (y - centers[i]) / radii[i];
                    const double qq = dot(q, q);
                    if (qq <= 1.0 && qq < best_q) {
                        best_q = qq;
                        best_organ = i;
                    }
                }
                if (best_organ >= 0) {
                    intensity = spec.organs[best_organ].intensity_hu;
                    sample.masks[best_organ].at(h, w, d) = 1;
                }

                intensity += rng.normal() * spec.noise_std_hu;
                const double clamped = std::clamp(intensity, -32768.0, 32767.0);
                sample.volume.at(h, w, d) = std::int16_t(std::lround(clamped));
            }
        }
    }

    for (int i = 0; i < n_organs; ++i) {
        if (sample.masks[i].count() == 0)
            throw runtime_abort("generate_phantom: organ " + spec.organs[i].label +
                                " produced an empty mask (seed " + std::to_string(seed) + ")");
        OrganLandmarks lm;
        lm.label = spec.organs[i].label;
        lm.center_mm = organ_center(sample.masks[i]);
        lm.edge_points_mm = organ_edge_points(sample.masks[i]);
        sample.landmarks.push_back(lm);
    }
    return sample;
}

} // namespace ape

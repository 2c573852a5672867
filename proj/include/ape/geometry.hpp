#pragma once

#include <algorithm>
#include <cmath>

#include "ape/common.hpp"

namespace ape {

/// Diagonal affine map from voxel index space to physical mm: x = offset + i * scale.
/// No rotation component; crops, spacing changes and resamples all compose to this form.
struct AffineMap {
    dvec3 scale{1.0, 1.0, 1.0};
    dvec3 offset{0.0, 0.0, 0.0};

    dvec3 apply(const dvec3& index) const { return offset + index * scale; }

    dvec3 apply(const ivec3& index) const { return apply(to_dvec3(index)); }

    dvec3 invert(const dvec3& mm) const { return (mm - offset) / scale; }

    /// Nearest voxel index, clamped to [0, shape).
    ivec3 nearest_index(const dvec3& mm, const ivec3& shape) const {
        const dvec3 f = invert(mm);
        ivec3 out;
        for (int a = 0; a < 3; ++a) {
            const int i = int(std::llround(f[a]));
            out[a] = std::clamp(i, 0, shape[a] - 1);
        }
        return out;
    }
};

/// Axis-aligned box in physical mm.
struct Box {
    dvec3 lo{0.0, 0.0, 0.0};
    dvec3 hi{0.0, 0.0, 0.0};

    bool valid() const { return lo[0] <= hi[0] && lo[1] <= hi[1] && lo[2] <= hi[2]; }

    double volume() const {
        if (!valid()) return 0.0;
        return (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
    }

    dvec3 center() const { return (lo + hi) * 0.5; }

    bool contains(const dvec3& p) const {
        return p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1] &&
               p[2] >= lo[2] && p[2] <= hi[2];
    }

    bool empty() const {
        return !valid() || hi[0] <= lo[0] || hi[1] <= lo[1] || hi[2] <= lo[2];
    }
};

inline Box intersect(const Box& a, const Box& b) {
    Box r;
    for (int i = 0; i < 3; ++i) {
        r.lo[i] = std::max(a.lo[i], b.lo[i]);
        r.hi[i] = std::min(a.hi[i], b.hi[i]);
        if (r.hi[i] < r.lo[i]) r.hi[i] = r.lo[i] = std::max(a.lo[i], b.lo[i]); // collapse
    }
    return r;
}

/// Intersection volume without collapsing (0 when disjoint).
inline double intersection_volume(const Box& a, const Box& b) {
    double v = 1.0;
    for (int i = 0; i < 3; ++i) {
        const double lo = std::max(a.lo[i], b.lo[i]);
        const double hi = std::min(a.hi[i], b.hi[i]);
        if (hi <= lo) return 0.0;
        v *= hi - lo;
    }
    return v;
}

inline Box bounding_box(const dvec3* pts, int n) {
    Box b{pts[0], pts[0]};
    for (int i = 1; i < n; ++i) {
        for (int a = 0; a < 3; ++a) {
            b.lo[a] = std::min(b.lo[a], pts[i][a]);
            b.hi[a] = std::max(b.hi[a], pts[i][a]);
        }
    }
    return b;
}

} // namespace ape

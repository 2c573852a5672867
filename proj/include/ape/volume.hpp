#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ape/common.hpp"
#include "ape/geometry.hpp"

namespace ape {

/// 3D scalar image. Intensities are Hounsfield-unit-like int16; spacing is mm
/// per axis; origin is the physical mm coordinate of voxel (0,0,0) in the raw
/// image frame. Physical coordinate of voxel index i is origin + i * spacing.
struct Volume {
    ivec3 shape{0, 0, 0}; // (h, w, d), d contiguous
    dvec3 spacing{1.0, 1.0, 1.0};
    dvec3 origin{0.0, 0.0, 0.0};
    std::vector<std::int16_t> data;

    Volume() = default;
    Volume(ivec3 sh, dvec3 sp, dvec3 org)
        : shape(sh), spacing(sp), origin(org), data(std::size_t(volume_of(sh)), 0) {
        validate();
    }

    void validate() const {
        if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
            throw std::invalid_argument("Volume: each axis must have length >= 1");
        if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
            throw std::invalid_argument("Volume: spacing components must be positive");
        if (std::int64_t(data.size()) != volume_of(shape))
            throw std::invalid_argument("Volume: data size does not match shape");
    }

    std::size_t index(int h, int w, int d) const {
        return (std::size_t(h) * shape[1] + w) * shape[2] + d;
    }

    std::int16_t& at(int h, int w, int d) { return data[index(h, w, d)]; }
    std::int16_t at(int h, int w, int d) const { return data[index(h, w, d)]; }

    AffineMap index_to_mm() const { return AffineMap{spacing, origin}; }

    dvec3 voxel_mm(const ivec3& i) const { return origin + to_dvec3(i) * spacing; }

    /// Span of voxel centers.
    Box center_bounds() const {
        return Box{origin, origin + dvec3{double(shape[0] - 1), double(shape[1] - 1),
                                          double(shape[2] - 1)} *
                               spacing};
    }

    /// Full imaged extent, treating voxels as cells of size spacing.
    Box cell_bounds() const {
        return Box{origin - spacing * 0.5,
                   origin + (to_dvec3(shape) - dvec3{0.5, 0.5, 0.5}) * spacing};
    }

    double physical_volume() const {
        return double(volume_of(shape)) * spacing[0] * spacing[1] * spacing[2];
    }

    /// Trilinear interpolation at a physical point, clamped to the grid.
    float sample_mm(const dvec3& mm) const {
        dvec3 f = (mm - origin) / spacing;
        int i0[3], i1[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
            f[a] = std::clamp(f[a], 0.0, double(shape[a] - 1));
            i0[a] = int(f[a]);
            i1[a] = std::min(i0[a] + 1, shape[a] - 1);
            t[a] = f[a] - i0[a];
        }
        auto val = [&](int x, int y, int z) { return double(at(x, y, z)); };
        const double c00 = val(i0[0], i0[1], i0[2]) * (1 - t[2]) + val(i0[0], i0[1], i1[2]) * t[2];
        const double c01 = val(i0[0], i1[1], i0[2]) * (1 - t[2]) + val(i0[0], i1[1], i1[2]) * t[2];
        const double c10 = val(i1[0], i0[1], i0[2]) * (1 - t[2]) + val(i1[0], i0[1], i1[2]) * t[2];
        const double c11 = val(i1[0], i1[1], i0[2]) * (1 - t[2]) + val(i1[0], i1[1], i1[2]) * t[2];
        const double c0 = c00 * (1 - t[1]) + c01 * t[1];
        const double c1 = c10 * (1 - t[1]) + c11 * t[1];
        return float(c0 * (1 - t[0]) + c1 * t[0]);
    }
};

/// Boolean organ mask on a Volume grid.
struct Mask {
    ivec3 shape{0, 0, 0};
    dvec3 spacing{1.0, 1.0, 1.0};
    dvec3 origin{0.0, 0.0, 0.0};
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(ivec3 sh, dvec3 sp, dvec3 org)
        : shape(sh), spacing(sp), origin(org), data(std::size_t(volume_of(sh)), 0) {}

    std::size_t index(int h, int w, int d) const {
        return (std::size_t(h) * shape[1] + w) * shape[2] + d;
    }
    std::uint8_t& at(int h, int w, int d) { return data[index(h, w, d)]; }
    std::uint8_t at(int h, int w, int d) const { return data[index(h, w, d)]; }

    dvec3 voxel_mm(const ivec3& i) const { return origin + to_dvec3(i) * spacing; }

    std::int64_t count() const {
        std::int64_t n = 0;
        for (auto x : data) n += x != 0;
        return n;
    }
};

/// Per-voxel 3-channel embedding tensor aligned to a Volume grid.
/// Spacing/origin are stored as float32 to match the on-disk format exactly.
struct EmbeddingMap {
    ivec3 shape{0, 0, 0}; // (h, w, d)
    fvec3 spacing{1.f, 1.f, 1.f};
    fvec3 origin{0.f, 0.f, 0.f};
    std::vector<float> data; // channel-major: (3, h, w, d)

    EmbeddingMap() = default;
    EmbeddingMap(ivec3 sh, fvec3 sp, fvec3 org)
        : shape(sh), spacing(sp), origin(org), data(std::size_t(3) * volume_of(sh), 0.f) {}

    static constexpr int channels = 3;

    std::size_t index(int ch, int h, int w, int d) const {
        return ((std::size_t(ch) * shape[0] + h) * shape[1] + w) * shape[2] + d;
    }
    float& at(int ch, int h, int w, int d) { return data[index(ch, h, w, d)]; }
    float at(int ch, int h, int w, int d) const { return data[index(ch, h, w, d)]; }

    fvec3 embedding(const ivec3& i) const {
        return {at(0, i[0], i[1], i[2]), at(1, i[0], i[1], i[2]), at(2, i[0], i[1], i[2])};
    }

    dvec3 spacing_mm() const { return to_dvec3(spacing); }
    dvec3 origin_mm() const { return to_dvec3(origin); }

    dvec3 voxel_mm(const ivec3& i) const { return origin_mm() + to_dvec3(i) * spacing_mm(); }

    Box center_bounds() const {
        return Box{origin_mm(), origin_mm() + dvec3{double(shape[0] - 1), double(shape[1] - 1),
                                                    double(shape[2] - 1)} *
                                    spacing_mm()};
    }
};

struct ForegroundCrop {
    Volume volume;
    ivec3 offset{0, 0, 0};
    bool empty_foreground = false; // warning flag: nothing above threshold, input passed through
};

/// Minimal axis-aligned bounding box of voxels with intensity > threshold.
/// The cropped origin is shifted so retained voxels keep their physical coordinates.
inline ForegroundCrop foreground_crop(const Volume& v, double threshold_hu = -500.0) {
    ivec3 lo = v.shape, hi{-1, -1, -1};
    for (int h = 0; h < v.shape[0]; ++h)
        for (int w = 0; w < v.shape[1]; ++w)
            for (int d = 0; d < v.shape[2]; ++d)
                if (double(v.at(h, w, d)) > threshold_hu) {
                    lo[0] = std::min(lo[0], h);
                    lo[1] = std::min(lo[1], w);
                    lo[2] = std::min(lo[2], d);
                    hi[0] = std::max(hi[0], h);
                    hi[1] = std::max(hi[1], w);
                    hi[2] = std::max(hi[2], d);
                }
    if (hi[0] < 0) return ForegroundCrop{v, {0, 0, 0}, true};

    const ivec3 shape{hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
    Volume out(shape, v.spacing, v.origin + to_dvec3(lo) * v.spacing);
    for (int h = 0; h < shape[0]; ++h)
        for (int w = 0; w < shape[1]; ++w) {
            const auto* src = &v.data[v.index(h + lo[0], w + lo[1], lo[2])];
            auto* dst = &out.data[out.index(h, w, 0)];
            std::copy(src, src + shape[2], dst);
        }
    return ForegroundCrop{std::move(out), lo, false};
}

} // namespace ape

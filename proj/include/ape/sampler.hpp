#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "ape/geometry.hpp"
#include "ape/resample.hpp"
#include "ape/rng.hpp"
#include "ape/tensor.hpp"
#include "ape/volume.hpp"

namespace ape {

struct AugmentOp {
    std::string name;
    std::vector<double> params;
};

/// A cropped (and possibly resampled) view of a volume. index_to_mm carries the
/// crop offset and any spacing change, so patch voxel i maps straight into the
/// raw image's physical frame.
struct Patch {
    TensorF data; // (1, h, w, d) intensities
    AffineMap index_to_mm;
    std::vector<AugmentOp> ops;

    ivec3 shape() const { return data.spatial(); }

    dvec3 spacing() const { return index_to_mm.scale; }

    /// Physical cell footprint: voxels are cells of extent `scale` centered on
    /// their mapped coordinates. Preserved exactly by rescaling.
    Box footprint() const {
        const ivec3 sh = shape();
        const dvec3 half = index_to_mm.scale * 0.5;
        const dvec3 last = index_to_mm.apply(
            dvec3{double(sh[0] - 1), double(sh[1] - 1), double(sh[2] - 1)});
        return Box{index_to_mm.offset - half, last + half};
    }
};

struct PatchPair {
    Patch patch_a;
    Patch patch_b;
    Box overlap_region; // raw-image mm
};

/// N positive voxel pairs: the same physical point seen from both patches.
/// p is the voxel-center coordinate in patch_a's grid; both patches' mapped
/// centers lie within half the coarser voxel of it.
struct VoxelPairBatch {
    std::vector<ivec3> index_a;
    std::vector<ivec3> index_b;
    std::vector<dvec3> point_mm;

    std::size_t size() const { return point_mm.size(); }
};

struct VoxelBatch {
    std::vector<ivec3> indices;
    std::vector<dvec3> point_mm;
};

struct NormalizedCoords {
    std::vector<dvec3> points;
    dvec3 mean{0, 0, 0};
    dvec3 stddev{1, 1, 1}; // population convention, pre-replacement
    std::array<bool, 3> degenerate{false, false, false};
};

struct AugmentConfig {
    double rescale_prob = 0.8;
    double mask_prob = 0.3;
    int mask_max_rects = 2;
    double mask_max_fraction = 0.3; // per-axis fraction of the patch extent
    double mask_fill_hu = -800.0;
    double blur_prob = 0.2;
    double blur_sigma_min = 0.5, blur_sigma_max = 1.5; // voxels
    double sharpen_prob = 0.15;
    double sharpen_sigma = 1.0;
    double sharpen_amount_min = 0.3, sharpen_amount_max = 1.0;
    double noise_prob = 0.3;
    double noise_std_min = 5.0, noise_std_max = 25.0; // HU
    double window_prob = 0.25;
    double window_lo_min = -700.0, window_lo_max = -300.0;
    double window_hi_min = 150.0, window_hi_max = 400.0;
    // standalone rescale targets; sample_patch_pair overrides these with its
    // own spacing draw so that the voxel budget survives the resample
    dvec3 rescale_spacing_min{2.0, 2.0, 3.0};
    dvec3 rescale_spacing_max{4.0, 4.0, 6.0};
};

struct SamplerConfig {
    std::int64_t patch_budget = 32 * 32 * 24;
    double aspect_ratio_max = 2.0;
    dvec3 spacing_min_mm{2.0, 2.0, 3.0};
    dvec3 spacing_max_mm{4.0, 4.0, 6.0};
    double min_overlap_fraction = 0.25;
    AugmentConfig aug;

    void validate() const {
        if (patch_budget < 8)
            throw std::invalid_argument("sampler: patch_budget must be >= 8");
        if (aspect_ratio_max < 1.0)
            throw std::invalid_argument("sampler: aspect_ratio_max must be >= 1");
        if (min_overlap_fraction <= 0.0 || min_overlap_fraction > 1.0)
            throw std::invalid_argument("sampler: min_overlap_fraction must be in (0, 1]");
        for (int a = 0; a < 3; ++a)
            if (spacing_min_mm[a] <= 0 || spacing_max_mm[a] < spacing_min_mm[a])
                throw std::invalid_argument("sampler: invalid spacing range");
    }
};

namespace detail {

/// Patch voxel shape: total count ~ budget, per-axis aspect ratio <= amax.
/// Log-uniform aspect draws are recentered so their product is exactly 1,
/// keeping pairwise ratios within amax; the last axis is then solved from the
/// budget so the product stays within rounding of it.
inline ivec3 draw_patch_shape(Rng& rng, std::int64_t budget, double amax) {
    const double half_span = 0.5 * std::log(amax);
    double lg[3];
    for (double& l : lg) l = rng.uniform(-half_span, half_span);
    const double lg_mean = (lg[0] + lg[1] + lg[2]) / 3.0;
    const double side = std::cbrt(double(budget));
    ivec3 sh;
    sh[0] = std::max<int>(2, int(std::llround(side * std::exp(lg[0] - lg_mean))));
    sh[1] = std::max<int>(2, int(std::llround(side * std::exp(lg[1] - lg_mean))));
    sh[2] = std::max<int>(2, int(std::llround(double(budget) / (double(sh[0]) * sh[1]))));
    return sh;
}

inline std::string extent_str(const dvec3& e) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "(%.1f x %.1f x %.1f) mm", e[0], e[1], e[2]);
    return buf;
}

[[noreturn]] inline void throw_too_small(const dvec3& need_span, const Volume& v) {
    const Box cb = v.center_bounds();
    const dvec3 have = cb.hi - cb.lo;
    throw std::invalid_argument(
        "sampler: volume too small for patch sampling: voxel-center span must be at least " +
        extent_str(need_span) + ", volume has " + extent_str(have));
}

/// Exact voxel copy of a shape-sized block starting at integer index `start`.
inline Patch extract_crop(const Volume& v, const ivec3& start, const ivec3& sh) {
    Patch p;
    p.data = TensorF(1, sh[0], sh[1], sh[2]);
    for (int x = 0; x < sh[0]; ++x)
        for (int y = 0; y < sh[1]; ++y) {
            float* dst = p.data.row(0, x, y);
            const std::int16_t* src = &v.data[v.index(start[0] + x, start[1] + y, start[2])];
            for (int z = 0; z < sh[2]; ++z) dst[z] = float(src[z]);
        }
    p.index_to_mm = AffineMap{v.spacing, v.voxel_mm(start)};
    return p;
}

/// Per-patch extraction plan. When `rescale` is set the crop is taken on the
/// native grid with a shape chosen so that resampling to `target_shape`
/// afterwards lands on (approximately) the drawn spacing without changing the
/// physical footprint.
struct CropPlan {
    bool rescale = false;
    ivec3 native_shape{0, 0, 0}; // voxels copied from the volume
    ivec3 target_shape{0, 0, 0}; // final patch shape (== native_shape when !rescale)
};

inline CropPlan plan_crop(const Volume& v, const ivec3& sh, bool rescale, Rng& rng,
                          const SamplerConfig& cfg) {
    CropPlan plan;
    plan.rescale = rescale;
    plan.target_shape = sh;
    const Box cb = v.center_bounds();
    if (!rescale) {
        for (int a = 0; a < 3; ++a) {
            if (sh[a] > v.shape[a]) {
                dvec3 need;
                for (int b = 0; b < 3; ++b) need[b] = (sh[b] - 1) * v.spacing[b];
                throw_too_small(need, v);
            }
        }
        plan.native_shape = sh;
        return plan;
    }
    const dvec3 span = cb.hi - cb.lo;
    dvec3 sp;
    for (int a = 0; a < 3; ++a) {
        // cap so the covering native crop still fits: (n-1)*sv <= span with
        // n = round(sh*sp/sv) <= sh*sp/sv + 1/2
        const double cap = (span[a] + 0.5 * v.spacing[a]) / double(sh[a]);
        if (cap < cfg.spacing_min_mm[a]) {
            dvec3 need;
            for (int b = 0; b < 3; ++b)
                need[b] = sh[b] * cfg.spacing_min_mm[b] - 0.5 * v.spacing[b];
            throw_too_small(need, v);
        }
        sp[a] = rng.uniform(cfg.spacing_min_mm[a], std::min(cfg.spacing_max_mm[a], cap));
    }
    for (int a = 0; a < 3; ++a) {
        const double want = double(sh[a]) * sp[a] / v.spacing[a];
        plan.native_shape[a] =
            std::clamp<int>(int(std::llround(want)), 1, v.shape[a]);
    }
    return plan;
}

inline ivec3 draw_start(const Volume& v, const ivec3& native_shape, Rng& rng) {
    ivec3 s;
    for (int a = 0; a < 3; ++a)
        s[a] = int(rng.uniform_int(v.shape[a] - native_shape[a] + 1));
    return s;
}

inline Box crop_footprint(const Volume& v, const ivec3& start, const ivec3& nsh) {
    const dvec3 lo = v.voxel_mm(start) - v.spacing * 0.5;
    return Box{lo, lo + dvec3{double(nsh[0]), double(nsh[1]), double(nsh[2])} * v.spacing};
}

} // namespace detail

inline Patch rescale_patch_to_shape(const Patch& p, const ivec3& out_sh) {
    const ivec3 sh = p.shape();
    if (out_sh == sh) return p;
    const dvec3 sp = p.index_to_mm.scale;
    Patch q;
    q.data = trilinear_resize(p.data, out_sh);
    dvec3 out_sp, out_off;
    for (int a = 0; a < 3; ++a) {
        out_sp[a] = sh[a] * sp[a] / double(out_sh[a]);
        out_off[a] = p.index_to_mm.offset[a] + 0.5 * (out_sp[a] - sp[a]);
    }
    q.index_to_mm = AffineMap{out_sp, out_off};
    q.ops = p.ops;
    q.ops.push_back({"rescale",
                     {out_sp[0], out_sp[1], out_sp[2], double(out_sh[0]), double(out_sh[1]),
                      double(out_sh[2])}});
    return q;
}

/// Resample a patch to (approximately) the requested spacing. The physical
/// footprint is preserved exactly: the output shape is rounded, so the actual
/// spacing is extent / shape and may differ from the request by the rounding.
inline Patch rescale_patch(const Patch& p, const dvec3& target_spacing) {
    const ivec3 sh = p.shape();
    const dvec3 sp = p.index_to_mm.scale;
    ivec3 out_sh;
    for (int a = 0; a < 3; ++a) {
        const double extent = sh[a] * sp[a];
        out_sh[a] = std::max<int>(1, int(std::llround(extent / target_spacing[a])));
    }
    return rescale_patch_to_shape(p, out_sh);
}

/// Intensity and resolution augmentations. Only rescale touches index_to_mm.
/// `pending_rescale` (shape target) is supplied by sample_patch_pair, which
/// pre-draws the spacing so the voxel budget survives; standalone calls draw
/// the target spacing from cfg.rescale_spacing_* instead.
inline Patch augment_patch(const Patch& p, Rng& rng, const AugmentConfig& cfg,
                           const ivec3* pending_rescale = nullptr) {
    Patch q;
    if (pending_rescale != nullptr) {
        q = rescale_patch_to_shape(p, *pending_rescale);
    } else if (rng.bernoulli(cfg.rescale_prob)) {
        const dvec3 sp_t = rng.uniform_vec3(cfg.rescale_spacing_min, cfg.rescale_spacing_max);
        q = rescale_patch(p, sp_t);
    } else {
        q = p;
    }

    const ivec3 sh = q.shape();
    if (rng.bernoulli(cfg.mask_prob)) {
        const int rects = 1 + int(rng.uniform_int(std::max(1, cfg.mask_max_rects)));
        for (int r = 0; r < rects; ++r) {
            ivec3 lo, hi;
            AugmentOp op{"mask", {}};
            for (int a = 0; a < 3; ++a) {
                const int max_len =
                    std::max<int>(1, int(std::floor(cfg.mask_max_fraction * sh[a])));
                const int len = 1 + int(rng.uniform_int(max_len));
                lo[a] = int(rng.uniform_int(sh[a] - len + 1));
                hi[a] = lo[a] + len;
                op.params.push_back(lo[a]);
                op.params.push_back(hi[a]);
            }
            for (int x = lo[0]; x < hi[0]; ++x)
                for (int y = lo[1]; y < hi[1]; ++y) {
                    float* row = q.data.row(0, x, y);
                    for (int z = lo[2]; z < hi[2]; ++z) row[z] = float(cfg.mask_fill_hu);
                }
            q.ops.push_back(std::move(op));
        }
    }

    // blur and sharpen are mutually exclusive; both soften/exaggerate the same
    // frequency band and composing them is not a useful view
    if (rng.bernoulli(cfg.blur_prob)) {
        const double sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
        q.data = gaussian_blur(q.data, sigma);
        q.ops.push_back({"blur", {sigma}});
    } else if (rng.bernoulli(cfg.sharpen_prob)) {
        const double amount = rng.uniform(cfg.sharpen_amount_min, cfg.sharpen_amount_max);
        TensorF smooth = gaussian_blur(q.data, cfg.sharpen_sigma);
        for (std::size_t i = 0; i < q.data.v.size(); ++i)
            q.data.v[i] += float(amount) * (q.data.v[i] - smooth.v[i]);
        q.ops.push_back({"sharpen", {cfg.sharpen_sigma, amount}});
    }

    if (rng.bernoulli(cfg.noise_prob)) {
        const double std_hu = rng.uniform(cfg.noise_std_min, cfg.noise_std_max);
        for (float& x : q.data.v) x += float(rng.normal(0.0, std_hu));
        q.ops.push_back({"noise", {std_hu}});
    }

    if (rng.bernoulli(cfg.window_prob)) {
        const double lo = rng.uniform(cfg.window_lo_min, cfg.window_lo_max);
        const double hi = rng.uniform(cfg.window_hi_min, cfg.window_hi_max);
        for (float& x : q.data.v) x = std::clamp(x, float(lo), float(hi));
        q.ops.push_back({"window", {lo, hi}});
    }

    return q;
}

/// Two overlapping, independently augmented crops of the same volume.
/// Placement is on footprints, which rescaling preserves, so the overlap
/// constraint holds for the final patches no matter what augmentation does.
inline PatchPair sample_patch_pair(const Volume& v, Rng& rng, const SamplerConfig& cfg) {
    cfg.validate();
    const ivec3 sh = detail::draw_patch_shape(rng, cfg.patch_budget, cfg.aspect_ratio_max);

    const bool rescale_a = rng.bernoulli(cfg.aug.rescale_prob);
    const bool rescale_b = rng.bernoulli(cfg.aug.rescale_prob);
    const detail::CropPlan plan_a = detail::plan_crop(v, sh, rescale_a, rng, cfg);
    const detail::CropPlan plan_b = detail::plan_crop(v, sh, rescale_b, rng, cfg);

    const ivec3 start_a = detail::draw_start(v, plan_a.native_shape, rng);
    const Box fp_a = detail::crop_footprint(v, start_a, plan_a.native_shape);
    const double vol_a = fp_a.volume();

    const double want = cfg.min_overlap_fraction * (1.0 - 1e-12);
    ivec3 start_b{0, 0, 0};
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        start_b = detail::draw_start(v, plan_b.native_shape, rng);
        const Box fp_b = detail::crop_footprint(v, start_b, plan_b.native_shape);
        const double frac =
            intersection_volume(fp_a, fp_b) / std::min(vol_a, fp_b.volume());
        placed = frac >= want;
    }
    if (!placed) {
        // center b on a; with identical geometry this forces the same crop,
        // which also realizes min_overlap_fraction = 1
        const dvec3 c = fp_a.center();
        for (int a = 0; a < 3; ++a) {
            const double lo_mm = c[a] - 0.5 * plan_b.native_shape[a] * v.spacing[a] +
                                 0.5 * v.spacing[a];
            const int i = int(std::llround((lo_mm - v.origin[a]) / v.spacing[a]));
            start_b[a] = std::clamp(i, 0, v.shape[a] - plan_b.native_shape[a]);
        }
        const Box fp_b = detail::crop_footprint(v, start_b, plan_b.native_shape);
        const double frac =
            intersection_volume(fp_a, fp_b) / std::min(vol_a, fp_b.volume());
        if (frac < want)
            throw std::invalid_argument(
                "sampler: cannot satisfy min_overlap_fraction on this volume");
    }

    Patch crop_a = detail::extract_crop(v, start_a, plan_a.native_shape);
    Patch crop_b = detail::extract_crop(v, start_b, plan_b.native_shape);

    PatchPair pp;
    // the target shape is always dictated here, never drawn inside
    // augment_patch: a second rescale draw would shrink the voxel budget
    pp.patch_a = augment_patch(crop_a, rng, cfg.aug, &plan_a.target_shape);
    pp.patch_b = augment_patch(crop_b, rng, cfg.aug, &plan_b.target_shape);
    pp.overlap_region = intersect(pp.patch_a.footprint(), pp.patch_b.footprint());
    if (pp.overlap_region.empty())
        throw std::logic_error("sampler: empty overlap after placement");
    return pp;
}

/// N independent un-augmented crops (the naive batch mode).
inline std::vector<Patch> sample_independent_patches(const Volume& v, int n, Rng& rng,
                                                     const SamplerConfig& cfg) {
    cfg.validate();
    std::vector<Patch> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        const ivec3 sh = detail::draw_patch_shape(rng, cfg.patch_budget, cfg.aspect_ratio_max);
        const detail::CropPlan plan = detail::plan_crop(v, sh, false, rng, cfg);
        const ivec3 start = detail::draw_start(v, plan.native_shape, rng);
        out.push_back(detail::extract_crop(v, start, plan.native_shape));
    }
    return out;
}

/// k voxel pairs looking at the same physical point from both patches.
/// Points are drawn in the overlap eroded by half of a's voxel and snapped to
/// a's grid, so the snapped center stays inside the overlap and therefore
/// inside b's cell footprint; b's nearest voxel is then within half its own
/// voxel, which bounds both deviations by half the coarser voxel.
inline VoxelPairBatch sample_positive_pairs(const PatchPair& pp, int k, Rng& rng) {
    if (pp.overlap_region.empty())
        throw std::invalid_argument("sampler: positive pairs need a nonempty overlap");

    const Patch& a = pp.patch_a;
    const Patch& b = pp.patch_b;
    const dvec3 sp_a = a.index_to_mm.scale;

    Box eroded;
    for (int ax = 0; ax < 3; ++ax) {
        eroded.lo[ax] = pp.overlap_region.lo[ax] + 0.5 * sp_a[ax];
        eroded.hi[ax] = pp.overlap_region.hi[ax] - 0.5 * sp_a[ax];
    }

    // capacity = number of distinct a-voxel centers inside the eroded box
    std::int64_t capacity = 1;
    for (int ax = 0; ax < 3; ++ax) {
        if (eroded.hi[ax] < eroded.lo[ax]) {
            capacity = 0;
            break;
        }
        const double f_lo = (eroded.lo[ax] - a.index_to_mm.offset[ax]) / sp_a[ax];
        const double f_hi = (eroded.hi[ax] - a.index_to_mm.offset[ax]) / sp_a[ax];
        const std::int64_t i_lo = std::int64_t(std::ceil(f_lo - 1e-9));
        const std::int64_t i_hi = std::int64_t(std::floor(f_hi + 1e-9));
        capacity *= std::max<std::int64_t>(0, i_hi - i_lo + 1);
    }
    if (capacity < k)
        throw std::invalid_argument(
            "sampler: overlap too small to host " + std::to_string(k) +
            " distinct voxel pairs (capacity " + std::to_string(capacity) + ")");

    VoxelPairBatch out;
    out.index_a.reserve(std::size_t(k));
    out.index_b.reserve(std::size_t(k));
    out.point_mm.reserve(std::size_t(k));
    const ivec3 sh_a = a.shape(), sh_b = b.shape();
    for (int i = 0; i < k; ++i) {
        const dvec3 x = rng.uniform_vec3(eroded.lo, eroded.hi);
        const ivec3 ia = a.index_to_mm.nearest_index(x, sh_a);
        const dvec3 p = a.index_to_mm.apply(ia);
        const ivec3 ib = b.index_to_mm.nearest_index(p, sh_b);
        out.index_a.push_back(ia);
        out.index_b.push_back(ib);
        out.point_mm.push_back(p);
    }
    return out;
}

/// Uniform voxel draws over a patch grid (with replacement).
inline VoxelBatch sample_voxels(const Patch& p, int k, Rng& rng) {
    VoxelBatch out;
    out.indices.reserve(std::size_t(k));
    out.point_mm.reserve(std::size_t(k));
    const ivec3 sh = p.shape();
    for (int i = 0; i < k; ++i) {
        ivec3 idx;
        for (int a = 0; a < 3; ++a) idx[a] = int(rng.uniform_int(sh[a]));
        out.indices.push_back(idx);
        out.point_mm.push_back(p.index_to_mm.apply(idx));
    }
    return out;
}

/// Per-axis affine normalization over the batch: p̂ = (p - mean) / std with the
/// population std (divisor N). An axis with (numerically) zero variance gets
/// std replaced by 1e-6 and its degenerate flag raised.
inline NormalizedCoords normalize_coords(const std::vector<dvec3>& points) {
    if (points.size() < 2)
        throw std::invalid_argument("normalize_coords: need at least 2 points");
    NormalizedCoords out;
    const double n = double(points.size());
    dvec3 mean{0, 0, 0};
    for (const auto& p : points) mean = mean + p;
    mean = mean / n;
    dvec3 var{0, 0, 0};
    for (const auto& p : points) {
        const dvec3 d = p - mean;
        var = var + d * d;
    }
    var = var / n;
    out.mean = mean;
    dvec3 divisor;
    for (int a = 0; a < 3; ++a) {
        out.stddev[a] = std::sqrt(var[a]);
        out.degenerate[a] = out.stddev[a] < 1e-9;
        divisor[a] = out.degenerate[a] ? 1e-6 : out.stddev[a];
    }
    out.points.reserve(points.size());
    for (const auto& p : points) out.points.push_back((p - mean) / divisor);
    return out;
}

} // namespace ape

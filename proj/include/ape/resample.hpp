#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ape/tensor.hpp"

namespace ape {

/// Trilinear resize of a (c, h, w, d) tensor to a new spatial shape.
/// Cell-centered convention: output voxel o samples the source at fractional
/// index (o + 0.5) * (src_n / out_n) - 0.5, clamped to the grid.
template <typename T>
Tensor<T> trilinear_resize(const Tensor<T>& src, const ivec3& out_shape) {
    if (src.spatial() == out_shape) return src;
    Tensor<T> out(src.c, out_shape[0], out_shape[1], out_shape[2]);

    const int sh[3] = {src.h, src.w, src.d};
    const int oh[3] = {out_shape[0], out_shape[1], out_shape[2]};
    // precompute per-axis source indices and weights
    std::vector<int> lo[3], hi[3];
    std::vector<T> t1[3];
    for (int a = 0; a < 3; ++a) {
        lo[a].resize(oh[a]);
        hi[a].resize(oh[a]);
        t1[a].resize(oh[a]);
        const double ratio = double(sh[a]) / double(oh[a]);
        for (int o = 0; o < oh[a]; ++o) {
            double f = (o + 0.5) * ratio - 0.5;
            f = std::clamp(f, 0.0, double(sh[a] - 1));
            lo[a][o] = int(f);
            hi[a][o] = std::min(lo[a][o] + 1, sh[a] - 1);
            t1[a][o] = T(f - lo[a][o]);
        }
    }

    for (int c = 0; c < src.c; ++c)
        for (int x = 0; x < oh[0]; ++x)
            for (int y = 0; y < oh[1]; ++y) {
                const T tx = t1[0][x], ty = t1[1][y];
                const T* r00 = src.row(c, lo[0][x], lo[1][y]);
                const T* r01 = src.row(c, lo[0][x], hi[1][y]);
                const T* r10 = src.row(c, hi[0][x], lo[1][y]);
                const T* r11 = src.row(c, hi[0][x], hi[1][y]);
                T* dst = out.row(c, x, y);
                for (int z = 0; z < oh[2]; ++z) {
                    const int z0 = lo[2][z], z1 = hi[2][z];
                    const T tz = t1[2][z];
                    const T c00 = r00[z0] * (1 - tz) + r00[z1] * tz;
                    const T c01 = r01[z0] * (1 - tz) + r01[z1] * tz;
                    const T c10 = r10[z0] * (1 - tz) + r10[z1] * tz;
                    const T c11 = r11[z0] * (1 - tz) + r11[z1] * tz;
                    dst[z] = (c00 * (1 - ty) + c01 * ty) * (1 - tx) +
                             (c10 * (1 - ty) + c11 * ty) * tx;
                }
            }
    return out;
}

/// Adjoint of trilinear_resize: scatters output gradients back to the source grid.
template <typename T>
Tensor<T> trilinear_resize_backward(const Tensor<T>& grad_out, const ivec3& src_shape) {
    Tensor<T> grad_src(grad_out.c, src_shape[0], src_shape[1], src_shape[2]);
    if (grad_out.spatial() == src_shape) {
        grad_src.v = grad_out.v;
        return grad_src;
    }
    const int sh[3] = {src_shape[0], src_shape[1], src_shape[2]};
    const int oh[3] = {grad_out.h, grad_out.w, grad_out.d};
    std::vector<int> lo[3], hi[3];
    std::vector<T> t1[3];
    for (int a = 0; a < 3; ++a) {
        lo[a].resize(oh[a]);
        hi[a].resize(oh[a]);
        t1[a].resize(oh[a]);
        const double ratio = double(sh[a]) / double(oh[a]);
        for (int o = 0; o < oh[a]; ++o) {
            double f = (o + 0.5) * ratio - 0.5;
            f = std::clamp(f, 0.0, double(sh[a] - 1));
            lo[a][o] = int(f);
            hi[a][o] = std::min(lo[a][o] + 1, sh[a] - 1);
            t1[a][o] = T(f - lo[a][o]);
        }
    }
    for (int c = 0; c < grad_out.c; ++c)
        for (int x = 0; x < oh[0]; ++x)
            for (int y = 0; y < oh[1]; ++y)
                for (int z = 0; z < oh[2]; ++z) {
                    const T g = grad_out.at(c, x, y, z);
                    const T tx = t1[0][x], ty = t1[1][y], tz = t1[2][z];
                    grad_src.at(c, lo[0][x], lo[1][y], lo[2][z]) += g * (1 - tx) * (1 - ty) * (1 - tz);
                    grad_src.at(c, lo[0][x], lo[1][y], hi[2][z]) += g * (1 - tx) * (1 - ty) * tz;
                    grad_src.at(c, lo[0][x], hi[1][y], lo[2][z]) += g * (1 - tx) * ty * (1 - tz);
                    grad_src.at(c, lo[0][x], hi[1][y], hi[2][z]) += g * (1 - tx) * ty * tz;
                    grad_src.at(c, hi[0][x], lo[1][y], lo[2][z]) += g * tx * (1 - ty) * (1 - tz);
                    grad_src.at(c, hi[0][x], lo[1][y], hi[2][z]) += g * tx * (1 - ty) * tz;
                    grad_src.at(c, hi[0][x], hi[1][y], lo[2][z]) += g * tx * ty * (1 - tz);
                    grad_src.at(c, hi[0][x], hi[1][y], hi[2][z]) += g * tx * ty * tz;
                }
    return grad_src;
}

/// Separable Gaussian blur with replicate padding; sigma in voxels.
template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& src, double sigma) {
    if (sigma <= 0) return src;
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<T> kernel(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        const double k = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[i + radius] = T(k);
        sum += k;
    }
    for (auto& k : kernel) k = T(double(k) / sum);

    Tensor<T> a = src, b(src.c, src.h, src.w, src.d);
    const int dims[3] = {src.h, src.w, src.d};
    for (int axis = 0; axis < 3; ++axis) {
        for (int c = 0; c < src.c; ++c)
            for (int x = 0; x < dims[0]; ++x)
                for (int y = 0; y < dims[1]; ++y)
                    for (int z = 0; z < dims[2]; ++z) {
                        T acc = 0;
                        for (int k = -radius; k <= radius; ++k) {
                            int i[3] = {x, y, z};
                            i[axis] = std::clamp(i[axis] + k, 0, dims[axis] - 1);
                            acc += kernel[k + radius] * a.at(c, i[0], i[1], i[2]);
                        }
                        b.at(c, x, y, z) = acc;
                    }
        std::swap(a, b);
    }
    return a;
}

} // namespace ape

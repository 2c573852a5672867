#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "ape/common.hpp"

namespace ape {

/// Dense rank-4 tensor with layout (c, h, w, d), d contiguous.
template <typename T>
struct Tensor {
    int c = 0, h = 0, w = 0, d = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, int d_)
        : c(c_), h(h_), w(w_), d(d_), v(std::size_t(c_) * h_ * w_ * d_, T(0)) {}

    std::size_t size() const { return v.size(); }
    ivec3 spatial() const { return {h, w, d}; }
    std::int64_t spatial_size() const { return std::int64_t(h) * w * d; }

    std::size_t index(int ci, int hi, int wi, int di) const {
        return ((std::size_t(ci) * h + hi) * w + wi) * d + di;
    }

    T& at(int ci, int hi, int wi, int di) { return v[index(ci, hi, wi, di)]; }
    T at(int ci, int hi, int wi, int di) const { return v[index(ci, hi, wi, di)]; }

    T* row(int ci, int hi, int wi) { return v.data() + index(ci, hi, wi, 0); }
    const T* row(int ci, int hi, int wi) const { return v.data() + index(ci, hi, wi, 0); }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool same_shape(const Tensor& o) const {
        return c == o.c && h == o.h && w == o.w && d == o.d;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace ape

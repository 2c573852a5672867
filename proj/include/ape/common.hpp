#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ape {

/// Error raised by config parsing / validation. CLI maps it to exit code 2.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Error raised by file I/O. Carries a kind so callers can tell failure modes apart.
class io_error : public std::runtime_error {
public:
    enum class kind {
        missing_file,
        malformed_header,
        size_mismatch,
        invalid_channels,
        unwritable,
    };

    io_error(kind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
    kind error_kind() const { return kind_; }

private:
    kind kind_;
};

/// Unrecoverable runtime failure (non-finite loss etc). CLI maps it to exit code 3.
class runtime_abort : public std::runtime_error {
public:
    explicit runtime_abort(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename T>
using vec3 = std::array<T, 3>;

using dvec3 = vec3<double>;
using fvec3 = vec3<float>;
using ivec3 = vec3<int>;
using i64vec3 = vec3<std::int64_t>;

template <typename T>
constexpr vec3<T> operator+(const vec3<T>& a, const vec3<T>& b) {
    return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

template <typename T>
constexpr vec3<T> operator-(const vec3<T>& a, const vec3<T>& b) {
    return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

template <typename T>
constexpr vec3<T> operator*(const vec3<T>& a, const vec3<T>& b) {
    return {a[0] * b[0], a[1] * b[1], a[2] * b[2]};
}

template <typename T>
constexpr vec3<T> operator*(const vec3<T>& a, T s) {
    return {a[0] * s, a[1] * s, a[2] * s};
}

template <typename T>
constexpr vec3<T> operator/(const vec3<T>& a, const vec3<T>& b) {
    return {a[0] / b[0], a[1] / b[1], a[2] / b[2]};
}

template <typename T>
constexpr vec3<T> operator/(const vec3<T>& a, T s) {
    return {a[0] / s, a[1] / s, a[2] / s};
}

template <typename T>
inline T dot(const vec3<T>& a, const vec3<T>& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

template <typename T>
inline T norm(const vec3<T>& a) {
    return std::sqrt(dot(a, a));
}

template <typename T>
inline T distance(const vec3<T>& a, const vec3<T>& b) {
    return norm(a - b);
}

inline dvec3 to_dvec3(const ivec3& v) {
    return {double(v[0]), double(v[1]), double(v[2])};
}

inline dvec3 to_dvec3(const fvec3& v) {
    return {double(v[0]), double(v[1]), double(v[2])};
}

inline std::int64_t volume_of(const ivec3& shape) {
    return std::int64_t(shape[0]) * shape[1] * shape[2];
}

/// FNV-1a 64-bit, used for config hashes embedded in checkpoints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

} // namespace ape

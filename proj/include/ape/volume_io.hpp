#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ape/common.hpp"
#include "ape/volume.hpp"

namespace ape {

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t x) {
    buf.push_back(char(x & 0xff));
    buf.push_back(char((x >> 8) & 0xff));
    buf.push_back(char((x >> 16) & 0xff));
    buf.push_back(char((x >> 24) & 0xff));
}

inline void put_f32(std::string& buf, float f) {
    std::uint32_t x;
    std::memcpy(&x, &f, 4);
    put_u32(buf, x);
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}

inline float get_f32(const unsigned char* p) {
    const std::uint32_t x = get_u32(p);
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(io_error::kind::missing_file, "cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error(io_error::kind::unwritable, "cannot write " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw io_error(io_error::kind::unwritable, "short write to " + path);
}

/// Accepts "name", "name.raw" or "name.meta" and returns "name".
inline std::string sidecar_base(const std::string& path) {
    if (path.size() > 4 && (path.ends_with(".raw") || path.ends_with(".meta"))) {
        return path.substr(0, path.rfind('.'));
    }
    return path;
}

struct SidecarMeta {
    ivec3 shape;
    dvec3 spacing;
    dvec3 origin;
    std::string dtype;
};

inline SidecarMeta parse_meta(const std::string& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw io_error(io_error::kind::malformed_header, path + ": " + e.what());
    }
    SidecarMeta m;
    try {
        for (int a = 0; a < 3; ++a) {
            m.shape[a] = j.at("shape").at(a).get<int>();
            m.spacing[a] = j.at("spacing_mm").at(a).get<double>();
            m.origin[a] = j.at("origin_mm").at(a).get<double>();
        }
        m.dtype = j.at("dtype").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(io_error::kind::malformed_header, path + ": " + e.what());
    }
    if (m.shape[0] < 1 || m.shape[1] < 1 || m.shape[2] < 1 || m.spacing[0] <= 0 ||
        m.spacing[1] <= 0 || m.spacing[2] <= 0)
        throw io_error(io_error::kind::malformed_header, path + ": invalid shape or spacing");
    return m;
}

inline std::string format_meta(const ivec3& shape, const dvec3& spacing, const dvec3& origin,
                               const std::string& dtype) {
    nlohmann::ordered_json j;
    j["shape"] = {shape[0], shape[1], shape[2]};
    j["spacing_mm"] = {spacing[0], spacing[1], spacing[2]};
    j["origin_mm"] = {origin[0], origin[1], origin[2]};
    j["dtype"] = dtype;
    return j.dump() + "\n";
}

} // namespace detail

inline void save_volume(const Volume& v, const std::string& path) {
    v.validate();
    const std::string base = detail::sidecar_base(path);
    std::string payload;
    payload.reserve(v.data.size() * 2);
    for (std::int16_t s : v.data) {
        const auto u = std::uint16_t(s);
        payload.push_back(char(u & 0xff));
        payload.push_back(char(u >> 8));
    }
    detail::write_file(base + ".raw", payload);
    detail::write_file(base + ".meta", detail::format_meta(v.shape, v.spacing, v.origin, "int16"));
}

inline Volume load_volume(const std::string& path) {
    const std::string base = detail::sidecar_base(path);
    const auto meta = detail::parse_meta(base + ".meta");
    if (meta.dtype != "int16")
        throw io_error(io_error::kind::malformed_header,
                       base + ".meta: dtype must be int16, got " + meta.dtype);
    const std::string payload = detail::read_file(base + ".raw");
    const std::int64_t expect = volume_of(meta.shape) * 2;
    if (std::int64_t(payload.size()) != expect)
        throw io_error(io_error::kind::size_mismatch,
                       base + ".raw: expected " + std::to_string(expect) + " bytes for shape, got " +
                           std::to_string(payload.size()));
    Volume v(meta.shape, meta.spacing, meta.origin);
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        v.data[i] = std::int16_t(std::uint16_t(p[2 * i]) | std::uint16_t(p[2 * i + 1]) << 8);
    }
    return v;
}

inline void save_mask(const Mask& m, const std::string& path) {
    const std::string base = detail::sidecar_base(path);
    std::string payload(m.data.begin(), m.data.end());
    detail::write_file(base + ".raw", payload);
    detail::write_file(base + ".meta", detail::format_meta(m.shape, m.spacing, m.origin, "uint8"));
}

inline Mask load_mask(const std::string& path) {
    const std::string base = detail::sidecar_base(path);
    const auto meta = detail::parse_meta(base + ".meta");
    if (meta.dtype != "uint8")
        throw io_error(io_error::kind::malformed_header,
                       base + ".meta: dtype must be uint8, got " + meta.dtype);
    const std::string payload = detail::read_file(base + ".raw");
    if (std::int64_t(payload.size()) != volume_of(meta.shape))
        throw io_error(io_error::kind::size_mismatch,
                       base + ".raw: payload size does not match mask shape");
    Mask m(meta.shape, meta.spacing, meta.origin);
    std::memcpy(m.data.data(), payload.data(), payload.size());
    return m;
}

// EmbeddingMap container: "APEM", version u8 = 1, dims 3*u32 (H, W, D),
// spacing 3*f32, origin 3*f32, payload 3*H*W*D f32 little-endian, channel-major.
inline constexpr std::size_t kApemHeaderBytes = 4 + 1 + 12 + 12 + 12;

inline void save_embedding_map(const EmbeddingMap& m, const std::string& path) {
    if (std::int64_t(m.data.size()) != 3 * volume_of(m.shape))
        throw std::invalid_argument("EmbeddingMap: data size does not match shape");
    std::string buf;
    buf.reserve(kApemHeaderBytes + m.data.size() * 4);
    buf += "APEM";
    buf.push_back(char(1));
    for (int a = 0; a < 3; ++a) detail::put_u32(buf, std::uint32_t(m.shape[a]));
    for (int a = 0; a < 3; ++a) detail::put_f32(buf, m.spacing[a]);
    for (int a = 0; a < 3; ++a) detail::put_f32(buf, m.origin[a]);
    for (float f : m.data) detail::put_f32(buf, f);
    detail::write_file(path, buf);
}

inline EmbeddingMap load_embedding_map(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    if (bytes.size() < kApemHeaderBytes || bytes.compare(0, 4, "APEM") != 0)
        throw io_error(io_error::kind::malformed_header, path + ": not an APEM file");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (p[4] != 1)
        throw io_error(io_error::kind::malformed_header,
                       path + ": unsupported APEM version " + std::to_string(int(p[4])));
    ivec3 shape;
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t dim = detail::get_u32(p + 5 + 4 * a);
        if (dim == 0 || dim > 1u << 24)
            throw io_error(io_error::kind::malformed_header, path + ": bad dimension in header");
        shape[a] = int(dim);
    }
    fvec3 spacing, origin;
    for (int a = 0; a < 3; ++a) spacing[a] = detail::get_f32(p + 17 + 4 * a);
    for (int a = 0; a < 3; ++a) origin[a] = detail::get_f32(p + 29 + 4 * a);
    if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
        throw io_error(io_error::kind::malformed_header, path + ": non-positive spacing");

    const std::int64_t voxels = volume_of(shape);
    const std::int64_t payload = std::int64_t(bytes.size()) - std::int64_t(kApemHeaderBytes);
    if (payload != 3 * voxels * 4) {
        // a clean multiple of the grid size means the channel count is wrong,
        // anything else is a truncated or padded payload
        if (payload % (voxels * 4) == 0)
            throw io_error(io_error::kind::invalid_channels,
                           path + ": channel count " + std::to_string(payload / (voxels * 4)) +
                               ", expected 3");
        throw io_error(io_error::kind::size_mismatch, path + ": payload size mismatch");
    }
    EmbeddingMap m(shape, spacing, origin);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = detail::get_f32(p + kApemHeaderBytes + 4 * i);
    return m;
}

} // namespace ape

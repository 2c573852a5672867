#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "ape/common.hpp"
#include "ape/phantom.hpp"
#include "ape/volume_io.hpp"

namespace ape {

/// On-disk phantom dataset layout, one flat directory:
///   index.txt                    ids, one per line, write order
///   <id>_volume.raw/.meta        int16 HU volume
///   <id>_mask_<label>.raw/.meta  one byte mask per organ
///   <id>_landmarks.txt           per organ: label, center, 6 edge points
namespace dataset {

inline constexpr std::uint64_t kSeedSalt = 0x64617461ull; // "data"

inline std::string volume_base(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "_volume";
}
inline std::string mask_base(const std::string& dir, const std::string& id,
                             const std::string& label) {
    return dir + "/" + id + "_mask_" + label;
}
inline std::string landmarks_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "_landmarks.txt";
}
inline std::string index_path(const std::string& dir) { return dir + "/index.txt"; }

inline std::string format_mm(const dvec3& v) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", v[0], v[1], v[2]);
    return buf;
}

inline void save_landmarks(const std::string& path, const std::vector<OrganLandmarks>& lms) {
    std::string text;
    for (const auto& lm : lms) {
        text += lm.label + " " + format_mm(lm.center_mm);
        for (const auto& e : lm.edge_points_mm) text += " " + format_mm(e);
        text += "\n";
    }
    detail::write_file(path, text);
}

inline std::vector<OrganLandmarks> load_landmarks(const std::string& path) {
    const std::string text = detail::read_file(path);
    std::vector<OrganLandmarks> out;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        OrganLandmarks lm;
        if (!(ls >> lm.label >> lm.center_mm[0] >> lm.center_mm[1] >> lm.center_mm[2]))
            throw io_error(io_error::kind::malformed_header,
                           "landmarks: bad line in " + path);
        for (auto& e : lm.edge_points_mm)
            if (!(ls >> e[0] >> e[1] >> e[2]))
                throw io_error(io_error::kind::malformed_header,
                               "landmarks: truncated edge points in " + path);
        out.push_back(std::move(lm));
    }
    return out;
}

inline void write_index(const std::string& dir, const std::vector<std::string>& ids) {
    std::string text;
    for (const auto& id : ids) text += id + "\n";
    detail::write_file(index_path(dir), text);
}

inline std::vector<std::string> read_index(const std::string& dir) {
    const std::string text = detail::read_file(index_path(dir));
    std::vector<std::string> ids;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line))
        if (!line.empty()) ids.push_back(line);
    return ids;
}

inline void save_sample(const std::string& dir, const std::string& id,
                        const PhantomSample& sample) {
    save_volume(sample.volume, volume_base(dir, id));
    for (std::size_t i = 0; i < sample.masks.size(); ++i)
        save_mask(sample.masks[i], mask_base(dir, id, sample.labels[i]));
    save_landmarks(landmarks_path(dir, id), sample.landmarks);
}

inline Volume load_sample_volume(const std::string& dir, const std::string& id) {
    return load_volume(volume_base(dir, id));
}

inline Mask load_sample_mask(const std::string& dir, const std::string& id,
                             const std::string& label) {
    return load_mask(mask_base(dir, id, label));
}

inline std::vector<OrganLandmarks> load_sample_landmarks(const std::string& dir,
                                                         const std::string& id) {
    return load_landmarks(landmarks_path(dir, id));
}

inline std::string phantom_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "phantom_%03d", i);
    return buf;
}

/// Generates `count` phantoms under `dir` and writes the index listing
/// exactly the written ids. Bytes are a pure function of (spec, seed).
inline std::vector<std::string> generate(const PhantomSpec& spec, int count,
                                         std::uint64_t seed, const std::string& dir) {
    if (count < 1) throw config_error("generate: count must be >= 1");
    std::filesystem::create_directories(dir);
    std::vector<std::string> ids;
    ids.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) {
        const std::string id = phantom_id(i);
        const auto sample = generate_phantom(spec, Rng::mix(seed, kSeedSalt + std::uint64_t(i)));
        save_sample(dir, id, sample);
        ids.push_back(id);
    }
    write_index(dir, ids);
    return ids;
}

} // namespace dataset
} // namespace ape

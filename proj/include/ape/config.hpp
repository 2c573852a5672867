#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ape/common.hpp"
#include "ape/model.hpp"
#include "ape/train.hpp"
#include "ape/volume_io.hpp"

namespace ape {

/// Everything a CLI run needs, assembled from a flat key=value document.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    int workers = 0; // 0 = default worker pool
    TrainConfig train;
    EmbedConfig embed;
    int generate_count = 20;
    int eval_shots = 5;
};

namespace config {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

/// key = value lines; '#' comments; blank lines ignored; duplicates rejected.
inline std::map<std::string, std::string> parse_pairs(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream lines(text);
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) +
                               ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw config_error("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key))
            throw config_error("config: duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error("config: key '" + key + "' needs a number, got '" + v + "'");
    }
}

inline std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error("config: key '" + key + "' needs an integer, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "0" || v == "false") return false;
    if (v == "1" || v == "true") return true;
    throw config_error("config: key '" + key + "' needs 0/1/true/false, got '" + v + "'");
}

inline std::vector<double> to_list(const std::string& key, const std::string& v,
                                  std::size_t want) {
    std::vector<double> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(to_double(key, trim(cur)));
            cur.clear();
        } else
            cur += c;
    }
    if (!trim(cur).empty()) out.push_back(to_double(key, trim(cur)));
    if (want != 0 && out.size() != want)
        throw config_error("config: key '" + key + "' needs " + std::to_string(want) +
                           " comma-separated values");
    return out;
}

inline std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (double x : to_list(key, v, 0)) out.push_back(int(x));
    if (out.empty()) throw config_error("config: key '" + key + "' needs at least one value");
    return out;
}

} // namespace detail

/// Applies parsed pairs onto the defaults. Unknown keys are a hard error so a
/// typo cannot silently run with defaults.
inline ExperimentConfig apply(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg;
    using detail::to_bool;
    using detail::to_double;
    using detail::to_int;
    using detail::to_int_list;
    using detail::to_list;

    for (const auto& [key, v] : kv) {
        if (key == "seed") cfg.seed = std::uint64_t(to_int(key, v));
        else if (key == "workers") cfg.workers = int(to_int(key, v));
        else if (key == "generate.count") cfg.generate_count = int(to_int(key, v));
        else if (key == "eval.shots") cfg.eval_shots = int(to_int(key, v));
        else if (key == "train.variant") cfg.train.variant = parse_variant(v);
        else if (key == "train.lambda") cfg.train.lambda = to_double(key, v);
        else if (key == "train.steps") cfg.train.steps = int(to_int(key, v));
        else if (key == "train.pairs_per_step") cfg.train.pairs_per_step = int(to_int(key, v));
        else if (key == "train.voxels_per_patch") cfg.train.voxels_per_patch = int(to_int(key, v));
        else if (key == "train.lr") cfg.train.lr = to_double(key, v);
        else if (key == "train.weight_decay") cfg.train.weight_decay = to_double(key, v);
        else if (key == "train.clip") cfg.train.clip = to_double(key, v);
        else if (key == "train.checkpoint_every") cfg.train.checkpoint_every = int(to_int(key, v));
        else if (key == "train.phantom_count") cfg.train.phantom_count = int(to_int(key, v));
        else if (key == "train.log_wallclock") cfg.train.log_wallclock = to_bool(key, v);
        else if (key == "sampler.patch_budget") cfg.train.sampler.patch_budget = to_int(key, v);
        else if (key == "sampler.aspect_ratio_max")
            cfg.train.sampler.aspect_ratio_max = to_double(key, v);
        else if (key == "sampler.min_overlap_fraction")
            cfg.train.sampler.min_overlap_fraction = to_double(key, v);
        else if (key == "sampler.spacing_min_mm") {
            const auto l = to_list(key, v, 3);
            cfg.train.sampler.spacing_min_mm = {l[0], l[1], l[2]};
        } else if (key == "sampler.spacing_max_mm") {
            const auto l = to_list(key, v, 3);
            cfg.train.sampler.spacing_max_mm = {l[0], l[1], l[2]};
        } else if (key == "model.stem_channels")
            cfg.train.model.stem_channels = int(to_int(key, v));
        else if (key == "model.encoder_channels")
            cfg.train.model.encoder_channels = to_int_list(key, v);
        else if (key == "model.decoder_channels")
            cfg.train.model.decoder_channels = to_int_list(key, v);
        else if (key == "model.bn_eps") cfg.train.model.bn_eps = to_double(key, v);
        else if (key == "model.bn_momentum") cfg.train.model.bn_momentum = to_double(key, v);
        else if (key == "phantom.noise_std_hu") cfg.train.phantom.noise_std_hu = to_double(key, v);
        else if (key == "phantom.deform_amplitude_mm")
            cfg.train.phantom.deform_amplitude_mm = to_double(key, v);
        else if (key == "phantom.center_jitter_mm")
            cfg.train.phantom.center_jitter_mm = to_double(key, v);
        else if (key == "embed.window") {
            const auto l = to_list(key, v, 3);
            cfg.embed.window = {int(l[0]), int(l[1]), int(l[2])};
        } else if (key == "embed.overlap") cfg.embed.overlap = to_double(key, v);
        else if (key == "embed.blend") {
            if (v == "triangular") cfg.embed.blend = BlendMode::triangular;
            else if (v == "nearest") cfg.embed.blend = BlendMode::nearest;
            else throw config_error("config: embed.blend must be triangular|nearest");
        } else
            throw config_error("config: unknown key '" + key + "'");
    }
    return cfg;
}

inline ExperimentConfig parse(const std::string& text) { return apply(parse_pairs(text)); }

inline ExperimentConfig load(const std::string& path) {
    return parse(ape::detail::read_file(path));
}

} // namespace config
} // namespace ape

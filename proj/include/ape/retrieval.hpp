#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ape/common.hpp"
#include "ape/volume.hpp"

namespace ape {

/// A landmark query carried between volumes: the embedding looked up in the
/// source volume plus enough provenance to audit the result.
struct Query {
    fvec3 embedding{0, 0, 0};
    std::string volume_id;
    std::string landmark;
    dvec3 source_mm{0, 0, 0};
};

struct RetrievalResult {
    ivec3 voxel{0, 0, 0};
    dvec3 mm{0, 0, 0};
    double embed_dist = 0;
    double radial_error_mm = -1; // < 0 until a ground truth is attached
};

/// Embedding of the voxel whose center is nearest to point_mm. The point must
/// lie inside the map's physical footprint (voxel cells, not just centers).
inline fvec3 query_embedding(const EmbeddingMap& map, const dvec3& point_mm) {
    const dvec3 sp = map.spacing_mm();
    const dvec3 org = map.origin_mm();
    ivec3 idx;
    for (int a = 0; a < 3; ++a) {
        const double rel = (point_mm[a] - org[a]) / sp[a];
        if (rel < -0.5 || rel > double(map.shape[a]) - 0.5)
            throw std::invalid_argument("query_embedding: point outside the map footprint");
        idx[a] = int(std::lround(rel));
        idx[a] = std::clamp(idx[a], 0, map.shape[a] - 1);
    }
    return map.embedding(idx);
}

/// Exhaustive nearest-neighbor scan over every voxel of the map. Ties resolve
/// to the lexicographically smallest index, which is scan order here. The
/// three channel planes are streamed in parallel so the pass stays linear.
inline RetrievalResult nearest_voxel(const EmbeddingMap& map, const fvec3& query) {
    const std::int64_t n = std::int64_t(map.shape[0]) * map.shape[1] * map.shape[2];
    if (n == 0) throw std::invalid_argument("nearest_voxel: empty map");
    const float* c0 = map.data.data();
    const float* c1 = c0 + n;
    const float* c2 = c1 + n;
    const float q0 = query[0], q1 = query[1], q2 = query[2];

    double best = std::numeric_limits<double>::infinity();
    std::int64_t best_i = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d0 = double(c0[i]) - q0;
        const double d1 = double(c1[i]) - q1;
        const double d2 = double(c2[i]) - q2;
        const double d = d0 * d0 + d1 * d1 + d2 * d2;
        if (d < best) {
            best = d;
            best_i = i;
        }
    }

    RetrievalResult r;
    const int wd = map.shape[1] * map.shape[2];
    r.voxel = {int(best_i / wd), int((best_i / map.shape[2]) % map.shape[1]),
               int(best_i % map.shape[2])};
    r.mm = map.voxel_mm(r.voxel);
    r.embed_dist = std::sqrt(best);
    return r;
}

inline double radial_error(const dvec3& a, const dvec3& b) {
    const dvec3 d = a - b;
    return std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
}

inline RetrievalResult nearest_voxel(const EmbeddingMap& map, const Query& q) {
    return nearest_voxel(map, q.embedding);
}

/// One row per (volume, organ) with the embedding under the organ's center.
/// Organs without a center landmark are skipped with a warning so a single
/// degenerate phantom cannot sink a whole export.
struct OrganCenter {
    std::string label;
    dvec3 center_mm{0, 0, 0};
};

inline std::string export_center_embeddings(const std::vector<std::string>& volume_ids,
                                            const std::vector<const EmbeddingMap*>& maps,
                                            const std::vector<std::vector<OrganCenter>>& centers,
                                            const std::vector<std::string>& organ_order,
                                            std::vector<std::string>* warnings = nullptr) {
    if (volume_ids.size() != maps.size() || volume_ids.size() != centers.size())
        throw std::invalid_argument("export_center_embeddings: per-volume lists disagree");
    std::string csv = "volume_id,organ,e1,e2,e3\n";
    char buf[128];
    for (std::size_t v = 0; v < maps.size(); ++v) {
        for (const auto& organ : organ_order) {
            const OrganCenter* found = nullptr;
            for (const auto& c : centers[v])
                if (c.label == organ) {
                    found = &c;
                    break;
                }
            if (!found) {
                if (warnings)
                    warnings->push_back("volume " + volume_ids[v] + ": no center landmark for " +
                                       organ + ", row skipped");
                continue;
            }
            const fvec3 e = query_embedding(*maps[v], found->center_mm);
            std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", double(e[0]), double(e[1]),
                          double(e[2]));
            csv += volume_ids[v] + "," + organ + "," + buf + "\n";
        }
    }
    return csv;
}

struct MreSummary {
    double mean = 0;
    double stddev = 0; // population convention
    std::size_t count = 0;
};

inline MreSummary mre(const std::vector<double>& errors) {
    if (errors.empty()) throw std::invalid_argument("mre: no errors to summarize");
    MreSummary s;
    s.count = errors.size();
    double sum = 0;
    for (double e : errors) sum += e;
    s.mean = sum / double(errors.size());
    double var = 0;
    for (double e : errors) var += (e - s.mean) * (e - s.mean);
    s.stddev = std::sqrt(var / double(errors.size()));
    return s;
}

} // namespace ape

#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ape/localization.hpp"
#include "ape/phantom.hpp"
#include "ape/retrieval.hpp"
#include "ape/rng.hpp"

namespace ape {

namespace eval {

inline constexpr std::uint64_t kFoldSalt = 0x666f6c64ull; // "fold"

inline std::string format_num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", x);
    return buf;
}

// ---------------------------------------------------------------- retrieval

/// Per-volume inputs; landmarks aligned with ids and maps.
struct RetrievalInputs {
    std::vector<std::string> ids;
    std::vector<const EmbeddingMap*> maps;
    std::vector<std::vector<OrganLandmarks>> landmarks;
};

struct RetrievalDetailRow {
    std::string train_id;
    std::string test_id;
    std::string landmark;
    dvec3 query_mm{0, 0, 0};
    ivec3 retrieved_voxel{0, 0, 0};
    dvec3 retrieved_mm{0, 0, 0};
    double embed_dist = 0;
    double error_mm = 0;
};

struct RetrievalReport {
    MreSummary overall;
    std::vector<std::pair<std::string, MreSummary>> per_landmark; // landmark order
    std::vector<RetrievalDetailRow> details; // ordered (train, test, landmark)
};

/// The paper's protocol: every ordered (train, test) volume pair, querying
/// each organ's center landmark. K volumes give K*(K-1) errors per landmark.
inline RetrievalReport run_retrieval(const RetrievalInputs& in) {
    const std::size_t K = in.ids.size();
    if (K < 2)
        throw config_error("eval-retrieval: needs at least 2 volumes, got " +
                           std::to_string(K));
    if (in.maps.size() != K || in.landmarks.size() != K)
        throw std::invalid_argument("run_retrieval: per-volume lists disagree");

    RetrievalReport rep;
    std::vector<std::string> organ_order;
    for (const auto& lm : in.landmarks[0]) organ_order.push_back(lm.label);

    std::map<std::string, std::vector<double>> per_landmark;
    std::vector<double> all;
    for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = 0; j < K; ++j) {
            if (i == j) continue;
            for (const auto& lm : in.landmarks[i]) {
                const OrganLandmarks* truth = nullptr;
                for (const auto& cand : in.landmarks[j])
                    if (cand.label == lm.label) {
                        truth = &cand;
                        break;
                    }
                if (!truth) continue; // organ missing on the test volume
                RetrievalDetailRow row;
                row.train_id = in.ids[i];
                row.test_id = in.ids[j];
                row.landmark = lm.label;
                row.query_mm = lm.center_mm;
                const fvec3 q = query_embedding(*in.maps[i], lm.center_mm);
                const auto r = nearest_voxel(*in.maps[j], q);
                row.retrieved_voxel = r.voxel;
                row.retrieved_mm = r.mm;
                row.embed_dist = r.embed_dist;
                row.error_mm = radial_error(r.mm, truth->center_mm);
                all.push_back(row.error_mm);
                per_landmark[lm.label].push_back(row.error_mm);
                rep.details.push_back(std::move(row));
            }
        }
    }
    rep.overall = mre(all);
    for (const auto& label : organ_order)
        if (per_landmark.count(label))
            rep.per_landmark.push_back({label, mre(per_landmark[label])});
    return rep;
}

inline std::string retrieval_detail_csv(const RetrievalReport& rep) {
    std::string csv =
        "train_id,test_id,landmark,query_x_mm,query_y_mm,query_z_mm,"
        "retrieved_h,retrieved_w,retrieved_d,retrieved_x_mm,retrieved_y_mm,retrieved_z_mm,"
        "embedding_distance,radial_error_mm\n";
    for (const auto& r : rep.details) {
        csv += r.train_id + "," + r.test_id + "," + r.landmark;
        for (int a = 0; a < 3; ++a) csv += "," + format_num(r.query_mm[a]);
        for (int a = 0; a < 3; ++a) csv += "," + std::to_string(r.retrieved_voxel[a]);
        for (int a = 0; a < 3; ++a) csv += "," + format_num(r.retrieved_mm[a]);
        csv += "," + format_num(r.embed_dist) + "," + format_num(r.error_mm) + "\n";
    }
    return csv;
}

inline std::string retrieval_summary_csv(const RetrievalReport& rep) {
    std::string csv = "landmark,mre_mm,std_mm,pairs\n";
    for (const auto& [label, s] : rep.per_landmark)
        csv += label + "," + format_num(s.mean) + "," + format_num(s.stddev) + "," +
               std::to_string(s.count) + "\n";
    csv += "ALL," + format_num(rep.overall.mean) + "," + format_num(rep.overall.stddev) + "," +
           std::to_string(rep.overall.count) + "\n";
    return csv;
}

// ------------------------------------------------------------- localization

struct LocalizationInputs {
    std::vector<std::string> ids;
    std::vector<const EmbeddingMap*> maps;
    std::vector<std::vector<OrganLandmarks>> landmarks;
    // masks[v][o] aligned with organ_order; null when the organ is absent
    std::vector<std::vector<const Mask*>> masks;
    std::vector<std::string> organ_order;
    int shots = 5;
    std::uint64_t seed = 0;
};

struct LocalizationDetailRow {
    std::string organ;
    std::string test_id;
    int fold = 0;
    Box predicted;
    Box truth;
    double iou = 0;
};

struct OrganLocalization {
    std::string organ;
    double iou_mean = 0;
    double iou_std = 0;
    VrResult vr;
    std::size_t cases = 0;
};

struct LocalizationReport {
    std::vector<OrganLocalization> per_organ;
    std::vector<LocalizationDetailRow> details;
    double mean_iou = 0; // over all (organ, test) cases
};

/// Deterministic partition of ids into folds of exactly `shots` volumes.
/// A remainder smaller than `shots` is dropped rather than forming a short
/// fold, keeping every prediction an S-shot prediction.
inline std::vector<std::vector<std::size_t>> shot_folds(std::size_t n, int shots,
                                                        std::uint64_t seed) {
    if (shots < 1) throw config_error("eval-localization: shots must be >= 1");
    if (std::size_t(shots) > n)
        throw config_error("eval-localization: shots = " + std::to_string(shots) +
                           " exceeds the dataset size " + std::to_string(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(Rng::mix(seed, kFoldSalt));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> folds;
    for (std::size_t base = 0; base + std::size_t(shots) <= n; base += std::size_t(shots))
        folds.push_back({order.begin() + std::ptrdiff_t(base),
                         order.begin() + std::ptrdiff_t(base) + shots});
    return folds;
}

/// Cross-validation: each fold provides the S shot volumes, every volume
/// outside it is a test image. IoU against the mask's ground-truth box;
/// VR@99 per organ over all (fold, test) cases.
inline LocalizationReport run_localization(const LocalizationInputs& in) {
    const std::size_t K = in.ids.size();
    if (in.maps.size() != K || in.landmarks.size() != K || in.masks.size() != K)
        throw std::invalid_argument("run_localization: per-volume lists disagree");
    const auto folds = shot_folds(K, in.shots, in.seed);

    LocalizationReport rep;
    std::vector<double> all_ious;
    for (std::size_t o = 0; o < in.organ_order.size(); ++o) {
        const std::string& organ = in.organ_order[o];
        std::vector<double> ious;
        std::vector<VrCase> vr_cases;
        for (std::size_t f = 0; f < folds.size(); ++f) {
            // the S shot query sets for this organ
            std::vector<EdgeQueries> shots;
            bool shot_missing = false;
            for (const std::size_t v : folds[f]) {
                const OrganLandmarks* lm = nullptr;
                for (const auto& cand : in.landmarks[v])
                    if (cand.label == organ) {
                        lm = &cand;
                        break;
                    }
                if (!lm) {
                    shot_missing = true;
                    break;
                }
                EdgeQueries qs;
                for (std::size_t e = 0; e < 6; ++e) {
                    qs[e].embedding = query_embedding(*in.maps[v], lm->edge_points_mm[e]);
                    qs[e].volume_id = in.ids[v];
                    qs[e].landmark = organ;
                    qs[e].source_mm = lm->edge_points_mm[e];
                }
                shots.push_back(qs);
            }
            if (shot_missing) continue;

            for (std::size_t v = 0; v < K; ++v) {
                if (std::find(folds[f].begin(), folds[f].end(), v) != folds[f].end()) continue;
                const Mask* mask = in.masks[v][o];
                if (!mask || mask->count() == 0) continue;
                const Box pred = few_shot_box(shots, *in.maps[v]);
                const Box truth = mask_box(*mask);
                LocalizationDetailRow row;
                row.organ = organ;
                row.test_id = in.ids[v];
                row.fold = int(f);
                row.predicted = pred;
                row.truth = truth;
                row.iou = iou(pred, truth);
                ious.push_back(row.iou);
                all_ious.push_back(row.iou);
                rep.details.push_back(row);

                VrCase c;
                c.prediction = pred;
                c.mask = mask;
                c.bounds = physical_bounds(mask->shape, mask->spacing, mask->origin);
                c.raw_volume = c.bounds.volume();
                vr_cases.push_back(c);
            }
        }
        if (ious.empty()) continue;
        OrganLocalization ol;
        ol.organ = organ;
        ol.cases = ious.size();
        const auto s = mre(ious); // same mean/std arithmetic
        ol.iou_mean = s.mean;
        ol.iou_std = s.stddev;
        ol.vr = vr_at_99(vr_cases);
        rep.per_organ.push_back(std::move(ol));
    }
    if (!all_ious.empty()) rep.mean_iou = mre(all_ious).mean;
    return rep;
}

inline std::string localization_summary_csv(const LocalizationReport& rep) {
    std::string csv = "organ,iou_mean,iou_std,alpha_star,vr_mean,vr_std,best_recall,cases\n";
    for (const auto& o : rep.per_organ) {
        csv += o.organ + "," + format_num(o.iou_mean) + "," + format_num(o.iou_std) + ",";
        csv += o.vr.alpha ? format_num(*o.vr.alpha) : std::string("none");
        csv += "," + format_num(o.vr.mean_vr) + "," + format_num(o.vr.std_vr);
        csv += "," + format_num(o.vr.best_recall) + "," + std::to_string(o.cases) + "\n";
    }
    return csv;
}

inline std::string localization_detail_csv(const LocalizationReport& rep) {
    std::string csv =
        "organ,test_id,fold,pred_lo_x,pred_lo_y,pred_lo_z,pred_hi_x,pred_hi_y,pred_hi_z,"
        "truth_lo_x,truth_lo_y,truth_lo_z,truth_hi_x,truth_hi_y,truth_hi_z,iou\n";
    for (const auto& r : rep.details) {
        csv += r.organ + "," + r.test_id + "," + std::to_string(r.fold);
        for (int a = 0; a < 3; ++a) csv += "," + format_num(r.predicted.lo[a]);
        for (int a = 0; a < 3; ++a) csv += "," + format_num(r.predicted.hi[a]);
        for (int a = 0; a < 3; ++a) csv += "," + format_num(r.truth.lo[a]);
        for (int a = 0; a < 3; ++a) csv += "," + format_num(r.truth.hi[a]);
        csv += "," + format_num(r.iou) + "\n";
    }
    return csv;
}

} // namespace eval
} // namespace ape

#pragma once

// Verification metrics: pair scoring, best-threshold accuracy, TAR at a
// FAR operating point, rank-1 identification, and the sample-vs-center
// score-distribution summary. Every metric is an exact count ratio, so
// the test suite can demand equality with brute-force enumeration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "adadistill/data.hpp"
#include "adadistill/errors.hpp"
#include "adadistill/losses.hpp"
#include "adadistill/numkit.hpp"

namespace adadistill {

struct ScoreSet {
    Vec genuine;
    Vec impostor;
};

struct RocPoint {
    double threshold = 0.0;
    double tar = 0.0;
    double far = 0.0;
    bool unreliable_far = false;  // impostor count too small for the target
};

inline ScoreSet score_pairs(const Mat& embeddings, const PairList& pairs) {
    ScoreSet scores;
    auto score_one = [&](std::pair<std::size_t, std::size_t> p) {
        if (p.first >= embeddings.rows || p.second >= embeddings.rows) {
            throw IndexOutOfRangeError("score_pairs: pair index out of range");
        }
        return cosine(embeddings.row(p.first), embeddings.row(p.second));
    };
    scores.genuine.reserve(pairs.genuine.size());
    for (auto p : pairs.genuine) scores.genuine.push_back(score_one(p));
    scores.impostor.reserve(pairs.impostor.size());
    for (auto p : pairs.impostor) scores.impostor.push_back(score_one(p));
    return scores;
}

namespace detail {

inline void require_scores(const ScoreSet& scores, const char* what) {
    if (scores.genuine.empty() || scores.impostor.empty()) {
        throw EmptyScoresError(std::string(what) + ": need non-empty genuine and impostor lists");
    }
    check_finite(scores.genuine, what);
    check_finite(scores.impostor, what);
}

} // namespace detail

// Best pair-classification accuracy over candidate thresholds: the -1/+1
// sentinels plus midpoints of adjacent distinct scores. A genuine pair
// counts when its score >= t, an impostor when < t. Ties between equally
// good thresholds resolve to the smaller one.
inline std::pair<double, double> verification_accuracy(const ScoreSet& scores) {
    detail::require_scores(scores, "verification_accuracy");

    Vec genuine = scores.genuine;
    Vec impostor = scores.impostor;
    std::sort(genuine.begin(), genuine.end());
    std::sort(impostor.begin(), impostor.end());

    Vec merged;
    merged.reserve(genuine.size() + impostor.size());
    merged.insert(merged.end(), genuine.begin(), genuine.end());
    merged.insert(merged.end(), impostor.begin(), impostor.end());
    std::sort(merged.begin(), merged.end());
    merged.erase(std::unique(merged.begin(), merged.end()), merged.end());

    Vec candidates;
    candidates.push_back(-1.0);
    for (std::size_t i = 0; i + 1 < merged.size(); ++i) {
        candidates.push_back((merged[i] + merged[i + 1]) / 2.0);
    }
    candidates.push_back(1.0);

    const double total = double(genuine.size() + impostor.size());
    double best_acc = -1.0, best_thr = 0.0;
    for (double t : candidates) {
        const auto gen_ok = genuine.end() - std::lower_bound(genuine.begin(), genuine.end(), t);
        const auto imp_ok = std::lower_bound(impostor.begin(), impostor.end(), t) -
                            impostor.begin();
        const double acc = double(gen_ok + imp_ok) / total;
        if (acc > best_acc) {
            best_acc = acc;
            best_thr = t;
        }
    }
    return {best_acc, best_thr};
}

// Conservative operating point: with impostors sorted descending and
// k = floor(far_target * M), the threshold sits just above the k-th
// impostor score, so the empirical FAR never exceeds the target.
inline RocPoint tar_at_far(const ScoreSet& scores, double far_target) {
    detail::require_scores(scores, "tar_at_far");
    if (!(far_target >= 0.0 && far_target <= 1.0)) {
        throw InvalidSpecError("tar_at_far: far_target must be in [0,1]");
    }

    Vec impostor = scores.impostor;
    std::sort(impostor.begin(), impostor.end(), std::greater<>());
    const std::size_t m = impostor.size();
    const auto k = std::size_t(far_target * double(m));

    RocPoint point;
    point.unreliable_far = double(m) * far_target < 1.0;
    if (k >= m) {
        point.threshold = -1.0;  // cosine floor admits every pair
    } else {
        point.threshold = std::nextafter(impostor[k], std::numeric_limits<double>::infinity());
    }

    std::size_t gen_ok = 0;
    for (double s : scores.genuine) {
        if (s >= point.threshold) ++gen_ok;
    }
    std::size_t imp_ok = 0;
    for (double s : impostor) {
        if (s >= point.threshold) ++imp_ok;
    }
    point.tar = double(gen_ok) / double(scores.genuine.size());
    point.far = double(imp_ok) / double(m);
    return point;
}

// One point per admissible impostor count; handy for ROC dumps.
inline std::vector<RocPoint> roc_curve(const ScoreSet& scores) {
    detail::require_scores(scores, "roc_curve");
    const std::size_t m = scores.impostor.size();
    std::vector<RocPoint> points;
    points.reserve(m + 1);
    for (std::size_t k = 0; k <= m; ++k) {
        points.push_back(tar_at_far(scores, double(k) / double(m)));
    }
    return points;
}

// Fraction of probes whose most similar gallery row shares their label;
// similarity ties resolve to the lowest gallery index.
inline double rank1_identification(const Mat& probe_embeddings,
                                   std::span<const std::size_t> probe_labels,
                                   const Mat& gallery_embeddings,
                                   std::span<const std::size_t> gallery_labels) {
    if (gallery_embeddings.rows == 0) {
        throw EmptyGalleryError("rank1_identification: empty gallery");
    }
    if (probe_embeddings.rows == 0) {
        throw InsufficientSamplesError("rank1_identification: no probes");
    }
    if (probe_labels.size() != probe_embeddings.rows ||
        gallery_labels.size() != gallery_embeddings.rows) {
        throw DimensionMismatchError("rank1_identification: label counts do not match rows");
    }
    if (probe_embeddings.cols != gallery_embeddings.cols) {
        throw DimensionMismatchError("rank1_identification: embedding dims differ");
    }
    std::size_t correct = 0;
    for (std::size_t p = 0; p < probe_embeddings.rows; ++p) {
        std::size_t best = 0;
        double best_score = cosine(probe_embeddings.row(p), gallery_embeddings.row(0));
        for (std::size_t g = 1; g < gallery_embeddings.rows; ++g) {
            const double s = cosine(probe_embeddings.row(p), gallery_embeddings.row(g));
            if (s > best_score) {
                best_score = s;
                best = g;
            }
        }
        if (gallery_labels[best] == probe_labels[p]) ++correct;
    }
    return double(correct) / double(probe_embeddings.rows);
}

// Per-class mean of normalized embeddings, re-normalized. Classes whose
// mean cancels to (near) zero cannot define a direction; their rows stay
// zero and their ids are reported for the caller to exclude.
struct CenterEstimate {
    Mat centers;
    std::vector<std::size_t> degenerate_classes;
};

inline CenterEstimate estimate_class_centers(const Mat& embeddings,
                                             std::span<const std::size_t> labels,
                                             std::size_t class_count) {
    if (labels.size() != embeddings.rows) {
        throw DimensionMismatchError("estimate_class_centers: label count vs rows");
    }
    CenterEstimate est;
    est.centers = Mat(class_count, embeddings.cols);
    std::vector<std::size_t> counts(class_count, 0);
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        if (labels[i] >= class_count) {
            throw LabelOutOfRangeError("estimate_class_centers: label out of range");
        }
        Vec u = l2_normalize(embeddings.row(i));
        auto row = est.centers.row(labels[i]);
        for (std::size_t t = 0; t < u.size(); ++t) row[t] += u[t];
        ++counts[labels[i]];
    }
    for (std::size_t j = 0; j < class_count; ++j) {
        if (counts[j] == 0) {
            est.degenerate_classes.push_back(j);
            continue;
        }
        auto row = est.centers.row(j);
        for (double& x : row) x /= double(counts[j]);
        if (norm(row) <= kNormEpsilon) {
            std::fill(row.begin(), row.end(), 0.0);
            est.degenerate_classes.push_back(j);
            continue;
        }
        l2_normalize_inplace(row);
    }
    return est;
}

// The score-distribution comparison behind the "samples match their
// center better than each other" claim: all same-class pair cosines
// against each sample's cosine to its class center.
struct DistributionSummary {
    Vec sample_sample;
    Vec sample_center;
    double mean_sample_sample = 0.0;
    double mean_sample_center = 0.0;
};

inline DistributionSummary center_vs_sample_distributions(const Mat& embeddings,
                                                          std::span<const std::size_t> labels,
                                                          const CenterBank& bank) {
    if (labels.size() != embeddings.rows) {
        throw DimensionMismatchError("center_vs_sample_distributions: label count vs rows");
    }
    if (embeddings.cols != bank.dim()) {
        throw DimensionMismatchError("center_vs_sample_distributions: embedding dim vs bank");
    }
    std::vector<std::size_t> counts(bank.class_count(), 0);
    for (std::size_t y : labels) {
        if (y >= bank.class_count()) {
            throw LabelOutOfRangeError("center_vs_sample_distributions: label out of range");
        }
        ++counts[y];
    }
    for (std::size_t j = 0; j < counts.size(); ++j) {
        if (counts[j] == 1) {
            throw InsufficientSamplesError("center_vs_sample_distributions: class " +
                                           std::to_string(j) + " has a single sample");
        }
    }

    DistributionSummary out;
    for (std::size_t a = 0; a < embeddings.rows; ++a) {
        for (std::size_t b = a + 1; b < embeddings.rows; ++b) {
            if (labels[a] != labels[b]) continue;
            out.sample_sample.push_back(cosine(embeddings.row(a), embeddings.row(b)));
        }
        out.sample_center.push_back(cosine(embeddings.row(a), bank.center(labels[a])));
    }
    for (double s : out.sample_sample) out.mean_sample_sample += s;
    if (!out.sample_sample.empty()) out.mean_sample_sample /= double(out.sample_sample.size());
    for (double s : out.sample_center) out.mean_sample_center += s;
    if (!out.sample_center.empty()) out.mean_sample_center /= double(out.sample_center.size());
    return out;
}

// ---------------------------------------------------------------------
// Report plumbing: a flat JSON array of metric records plus an optional
// ROC CSV.
// ---------------------------------------------------------------------

struct MetricRecord {
    std::string name;
    double value = 0.0;
    nlohmann::json parameters = nlohmann::json::object();
    std::size_t genuine_pairs = 0;
    std::size_t impostor_pairs = 0;
    std::vector<std::string> warnings;
};

inline nlohmann::json metrics_to_json(const std::vector<MetricRecord>& records) {
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricRecord& r : records) {
        nlohmann::json item;
        item["metric"] = r.name;
        item["value"] = r.value;
        item["parameters"] = r.parameters;
        item["pair_counts"] = {{"genuine", r.genuine_pairs}, {"impostor", r.impostor_pairs}};
        item["warnings"] = r.warnings;
        arr.push_back(item);
    }
    return arr;
}

inline void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileFormatError("write_roc_csv: cannot open '" + path + "'");
    out << "threshold,tar,far\n";
    char line[128];
    for (const RocPoint& p : points) {
        std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g\n", p.threshold, p.tar, p.far);
        out << line;
    }
}

} // namespace adadistill

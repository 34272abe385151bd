#pragma once

// ROC analysis over duplicate scores and cross-set threshold selection.
//
// Decision rule everywhere: score >= threshold  =>  predicted duplicate.
// Candidate thresholds are the observed scores plus one value above the
// maximum; scores take finitely many values, so nothing is lost.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dedup3d/core.hpp"

namespace dedup3d {

inline bool predicts_duplicate(double score, double threshold) noexcept { return score >= threshold; }

struct ScoredItem {
    double score = 0.0;
    bool is_positive = false;
    std::optional<CaseId> query_case;
    std::optional<CaseId> top1_case;
    std::optional<CaseId> ground_truth;
};

struct ScoredSet {
    std::string name;
    std::vector<ScoredItem> items;
};

struct ConfusionCounts {
    std::uint32_t tp = 0, fp = 0, tn = 0, fn = 0;

    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Zero denominators yield 0.
inline double safe_ratio(std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

struct RocPoint {
    double threshold = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    ConfusionCounts counts;
};

/// Thresholds strictly decreasing; sensitivity non-decreasing along the list.
struct RocCurve {
    std::vector<RocPoint> points;
    std::uint32_t positives = 0;
    std::uint32_t negatives = 0;
};

/// Stage-1 confusion of a scored set at one threshold.
inline ConfusionCounts confusion_at(const ScoredSet& s, double threshold) {
    ConfusionCounts c;
    for (const auto& it : s.items) {
        const bool predicted = predicts_duplicate(it.score, threshold);
        if (it.is_positive)
            (predicted ? c.tp : c.fn)++;
        else
            (predicted ? c.fp : c.tn)++;
    }
    return c;
}

inline RocCurve roc_curve(const ScoredSet& s) {
    RocCurve r;
    for (const auto& it : s.items) {
        if (!std::isfinite(it.score)) throw Error(Errc::NonFiniteValue, "set '" + s.name + "' has a non-finite score");
        (it.is_positive ? r.positives : r.negatives)++;
    }
    if (r.positives == 0 || r.negatives == 0)
        throw Error(Errc::DegenerateSet, "set '" + s.name + "' needs at least one positive and one negative item");

    std::vector<std::pair<double, bool>> sorted;
    sorted.reserve(s.items.size());
    for (const auto& it : s.items) sorted.emplace_back(it.score, it.is_positive);
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    const auto point = [&](double t, std::uint32_t tp, std::uint32_t fp) {
        ConfusionCounts c{tp, fp, r.negatives - fp, r.positives - tp};
        return RocPoint{t, safe_ratio(tp, r.positives), safe_ratio(c.tn, r.negatives), c};
    };
    r.points.push_back(point(sorted.front().first + 1.0, 0, 0));
    std::uint32_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        const double t = sorted[i].first;
        for (; i < sorted.size() && sorted[i].first == t; ++i) (sorted[i].second ? tp : fp)++;
        r.points.push_back(point(t, tp, fp));
    }
    return r;
}

/// Trapezoidal area under sensitivity vs. (1 - specificity), accumulated in
/// integer counts so tied scores receive exactly half credit.
inline double auc(const RocCurve& r) {
    if (r.positives == 0 || r.negatives == 0) throw Error(Errc::DegenerateSet, "AUC needs both classes");
    std::uint64_t twice_area = 0;  // in units of 1 / (P * N)
    for (std::size_t i = 1; i < r.points.size(); ++i) {
        const auto& a = r.points[i - 1].counts;
        const auto& b = r.points[i].counts;
        twice_area += std::uint64_t{b.fp - a.fp} * (std::uint64_t{a.tp} + b.tp);
    }
    return static_cast<double>(twice_area) / (2.0 * r.positives * r.negatives);
}

struct YoudenPoint {
    double threshold = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
};

/// Operating point maximizing sensitivity + specificity; among equals, the
/// larger threshold wins. Compared exactly via TP*N + TN*P.
inline YoudenPoint youden_threshold(const RocCurve& r) {
    if (r.points.empty()) throw Error(Errc::DegenerateSet, "empty ROC curve");
    const auto key = [&](const RocPoint& p) {
        return std::uint64_t{p.counts.tp} * r.negatives + std::uint64_t{p.counts.tn} * r.positives;
    };
    const RocPoint* best = &r.points.front();
    for (const auto& p : r.points)
        if (key(p) > key(*best)) best = &p;  // points are in decreasing threshold order
    return {best->threshold, best->sensitivity, best->specificity};
}

struct CalibrationResult {
    std::vector<std::string> set_names;
    std::vector<double> candidate_thresholds;   // T[u]
    std::vector<std::vector<double>> se_matrix;  // SE[u][v]: sensitivity of set v at T[u]
    std::vector<std::vector<double>> sp_matrix;
    std::vector<double> mean_scores;             // mean_v (SE[u][v] + SP[u][v])
    double t_opt = 0.0;
    std::size_t chosen_set_index = 0;
};

/// Mean-score differences below this are treated as ties (resolved toward the smaller set index).
inline constexpr double kCalibrationTieTolerance = 1e-12;

/// Per-set Youden thresholds become candidates; the candidate with the best
/// mean (sensitivity + specificity) across all sets is chosen.
inline CalibrationResult select_optimal_threshold(const std::vector<ScoredSet>& sets) {
    if (sets.empty()) throw Error(Errc::DegenerateSet, "calibration needs at least one query set");
    const std::size_t n = sets.size();
    CalibrationResult res;
    for (const auto& s : sets) {
        res.set_names.push_back(s.name);
        res.candidate_thresholds.push_back(youden_threshold(roc_curve(s)).threshold);
    }
    res.se_matrix.assign(n, std::vector<double>(n));
    res.sp_matrix.assign(n, std::vector<double>(n));
    res.mean_scores.assign(n, 0.0);
    for (std::size_t u = 0; u < n; ++u) {
        double sum = 0.0;
        for (std::size_t v = 0; v < n; ++v) {
            const auto c = confusion_at(sets[v], res.candidate_thresholds[u]);
            res.se_matrix[u][v] = safe_ratio(c.tp, c.tp + c.fn);
            res.sp_matrix[u][v] = safe_ratio(c.tn, c.tn + c.fp);
            sum += res.se_matrix[u][v] + res.sp_matrix[u][v];
        }
        res.mean_scores[u] = sum / static_cast<double>(n);
    }
    for (std::size_t u = 1; u < n; ++u)
        if (res.mean_scores[u] > res.mean_scores[res.chosen_set_index] + kCalibrationTieTolerance) res.chosen_set_index = u;
    res.t_opt = res.candidate_thresholds[res.chosen_set_index];
    return res;
}

}  // namespace dedup3d

#pragma once

// Two-stage duplicate classification metrics and the bucket split.
//
// Stage 1 classifies on the score alone. Stage 2 additionally requires the
// top-1 retrieved case to equal the ground truth; a positive query above the
// threshold with the wrong top-1 case is a false positive ("ID mismatch").

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dedup3d/ann_index.hpp"
#include "dedup3d/calibration.hpp"
#include "dedup3d/embedding_io.hpp"
#include "dedup3d/retrieval.hpp"

namespace dedup3d {

enum class Prediction { PredictedDuplicate, PredictedNonDuplicate };

inline Prediction stage1_classify(const QueryScore& score, double threshold) {
    return predicts_duplicate(score.c_k, threshold) ? Prediction::PredictedDuplicate : Prediction::PredictedNonDuplicate;
}

struct StageMetrics {
    std::string name;
    double threshold = 0.0;
    std::optional<double> auc;  // stage 1; needs both classes

    ConfusionCounts stage1;
    double stage1_sensitivity = 0.0;
    double stage1_specificity = 0.0;

    ConfusionCounts stage2;  // stage2.fp = id_mismatches + negatives above threshold
    std::uint32_t id_mismatches = 0;
    double stage2_sensitivity = 0.0;
    /// TN / negatives.
    double stage2_spec_strict = 0.0;
    /// TN / (negatives + ID mismatches).
    double stage2_spec_folded = 0.0;
};

inline ScoredSet to_scored_set(std::string name, std::span<const QueryScore> scores) {
    ScoredSet s{std::move(name), {}};
    s.items.reserve(scores.size());
    for (const auto& q : scores)
        s.items.push_back({q.c_k, q.label.is_positive(), q.query_case, q.top1_case, q.label.ground_truth()});
    return s;
}

inline StageMetrics stage2_confusion(std::span<const QueryScore> scores, double threshold) {
    StageMetrics m;
    m.threshold = threshold;
    std::uint32_t positives = 0, negatives = 0;
    for (const auto& q : scores) {
        const bool predicted = stage1_classify(q, threshold) == Prediction::PredictedDuplicate;
        if (q.label.is_positive()) {
            if (!q.label.ground_truth())
                throw Error(Errc::MissingGroundTruth, "positive query '" + q.query_case.str() + "' has no ground truth");
            ++positives;
            if (!predicted) {
                ++m.stage1.fn;
                ++m.stage2.fn;
                continue;
            }
            ++m.stage1.tp;
            if (q.top1_case == q.label.ground_truth()) {
                ++m.stage2.tp;
            } else {
                ++m.stage2.fp;
                ++m.id_mismatches;
            }
        } else {
            ++negatives;
            if (predicted) {
                ++m.stage1.fp;
                ++m.stage2.fp;
            } else {
                ++m.stage1.tn;
                ++m.stage2.tn;
            }
        }
    }
    m.stage1_sensitivity = safe_ratio(m.stage1.tp, positives);
    m.stage1_specificity = safe_ratio(m.stage1.tn, negatives);
    m.stage2_sensitivity = safe_ratio(m.stage2.tp, positives);
    m.stage2_spec_strict = safe_ratio(m.stage2.tn, negatives);
    m.stage2_spec_folded = safe_ratio(m.stage2.tn, std::uint64_t{negatives} + m.id_mismatches);
    if (positives > 0 && negatives > 0) m.auc = auc(roc_curve(to_scored_set("", scores)));
    return m;
}

struct LabeledQuery {
    EmbeddingSet embeddings;
    QueryLabel label;
};

inline std::vector<QueryScore> score_queries(std::span<const LabeledQuery> queries, const Index& index, std::uint32_t k,
                                             bool exclude_self = false) {
    std::vector<QueryScore> out;
    out.reserve(queries.size());
    for (const auto& q : queries) out.push_back(score_query(q.embeddings, index, k, q.label, exclude_self));
    return out;
}

/// Scores every query and reports stage-1 AUC (positives vs. negatives in
/// the list) plus both stages at `threshold`.
inline StageMetrics evaluate_query_set(const std::string& name, std::span<const LabeledQuery> queries, const Index& index,
                                       std::uint32_t k, double threshold) {
    auto m = stage2_confusion(score_queries(queries, index, k), threshold);
    m.name = name;
    return m;
}

// ---------------------------------------------------------------------------
// Buckets

struct TaskSplit {
    std::string task;
    std::vector<CaseId> a;  // database / duplicate queries
    std::vector<CaseId> c;  // non-duplicate queries
};

struct BucketAssignment {
    std::vector<TaskSplit> tasks;  // in order of first appearance

    std::vector<CaseId> all_a() const {
        std::vector<CaseId> out;
        for (const auto& t : tasks) out.insert(out.end(), t.a.begin(), t.a.end());
        return out;
    }
    std::vector<CaseId> all_c() const {
        std::vector<CaseId> out;
        for (const auto& t : tasks) out.insert(out.end(), t.c.begin(), t.c.end());
        return out;
    }
};

enum class CaseOrder { Manifest, Lexicographic };

/// Per task, the first floor(count / 2) cases go to A and the rest to C.
inline BucketAssignment split_buckets(const std::vector<ManifestEntry>& entries, CaseOrder order = CaseOrder::Manifest) {
    std::vector<std::string> task_order;
    std::map<std::string, std::vector<CaseId>> by_task;
    for (const auto& e : entries) {
        auto [it, inserted] = by_task.try_emplace(e.task);
        if (inserted) task_order.push_back(e.task);
        if (std::find(it->second.begin(), it->second.end(), e.case_id) == it->second.end()) it->second.push_back(e.case_id);
    }
    if (task_order.empty()) throw Error(Errc::EmptyTask, "no cases to split");
    BucketAssignment out;
    for (const auto& task : task_order) {
        auto cases = by_task[task];
        if (cases.empty()) throw Error(Errc::EmptyTask, "task '" + task + "' has no cases");
        if (order == CaseOrder::Lexicographic) std::sort(cases.begin(), cases.end());
        const std::size_t half = cases.size() / 2;
        out.tasks.push_back({task, {cases.begin(), cases.begin() + static_cast<std::ptrdiff_t>(half)},
                             {cases.begin() + static_cast<std::ptrdiff_t>(half), cases.end()}});
    }
    return out;
}

/// Writes DB_*A / NONDUP_*C buckets and labels for the given split (1 or 2).
inline void assign_buckets(std::vector<ManifestEntry>& entries, int split, CaseOrder order = CaseOrder::Manifest) {
    if (split != 1 && split != 2) throw Error(Errc::InvalidArgument, "split must be 1 or 2");
    const auto assignment = split_buckets(entries, order);
    std::map<std::string, bool> in_a;
    for (const auto& t : assignment.tasks) {
        for (const auto& id : t.a) in_a[t.task + '\n' + id.str()] = true;
        for (const auto& id : t.c) in_a[t.task + '\n' + id.str()] = false;
    }
    for (auto& e : entries) {
        if (in_a.at(e.task + '\n' + e.case_id.str())) {
            e.bucket = split == 1 ? Bucket::DB_1A : Bucket::DB_2A;
            e.label = QueryLabel::duplicate(e.case_id);
        } else {
            e.bucket = split == 1 ? Bucket::NONDUP_1C : Bucket::NONDUP_2C;
            e.label = QueryLabel::non_duplicate();
        }
    }
}

}  // namespace dedup3d

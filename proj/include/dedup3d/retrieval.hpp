#pragma once

// Volume-level scoring from slice-level retrieval. Each query slice votes for
// the case owning its nearest database slice; the score c(k) is the share of
// query slices voting for the k most-voted cases.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "dedup3d/ann_index.hpp"
#include "dedup3d/core.hpp"

namespace dedup3d {

struct CaseHistogram {
    std::map<CaseId, std::uint32_t> counts;
    std::uint32_t total_slices = 0;

    friend bool operator==(const CaseHistogram&, const CaseHistogram&) = default;
};

/// Cases by descending count, ties in ascending case id order.
struct RankedCases {
    std::vector<std::pair<CaseId, std::uint32_t>> entries;
};

struct NormalizedCount {
    double c_k = 0.0;
    RankedCases ranked;
};

struct QueryScore {
    CaseId query_case;
    double c_k = 0.0;
    std::uint32_t k = 1;
    std::optional<CaseId> top1_case;  // empty only when no slice produced a hit
    QueryLabel label;
};

/// One vote per query slice for the case of its rank-1 hit. With exclude_self
/// the query's own case is invisible to the search; a slice without any hit
/// still counts towards total_slices.
inline CaseHistogram case_histogram(const EmbeddingSet& query, const Index& index, bool exclude_self) {
    validate_embedding_set(query);
    if (query.dim != index.dim())
        throw Error(Errc::DimensionMismatch, "query dim " + std::to_string(query.dim) + " != index dim " +
                                                 std::to_string(index.dim()));
    CaseHistogram h;
    h.total_slices = static_cast<std::uint32_t>(query.slice_count());
    const std::optional<CaseId> excluded = exclude_self ? std::optional<CaseId>(query.case_id) : std::nullopt;
    for (const auto& v : query.vectors) {
        const auto hits = index.search(v, 1, excluded);
        if (!hits.empty()) ++h.counts[hits.front().case_id];
    }
    return h;
}

inline RankedCases rank_cases(const CaseHistogram& h) {
    RankedCases r;
    r.entries.assign(h.counts.begin(), h.counts.end());
    // std::map iterates in ascending case order; a stable sort keeps that order among equal counts.
    std::stable_sort(r.entries.begin(), r.entries.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return r;
}

inline NormalizedCount normalized_count(const CaseHistogram& h, std::uint32_t k) {
    if (k == 0) throw Error(Errc::InvalidArgument, "k must be positive");
    if (h.total_slices == 0) throw Error(Errc::EmptySet, "histogram over zero slices");
    NormalizedCount out;
    out.ranked = rank_cases(h);
    std::uint64_t top = 0;
    const std::size_t take = std::min<std::size_t>(k, out.ranked.entries.size());
    for (std::size_t i = 0; i < take; ++i) top += out.ranked.entries[i].second;
    out.c_k = static_cast<double>(top) / static_cast<double>(h.total_slices);
    return out;
}

inline QueryScore score_from_histogram(const CaseId& query_case, const CaseHistogram& h, std::uint32_t k, QueryLabel label) {
    auto nc = normalized_count(h, k);
    std::optional<CaseId> top1;
    if (!nc.ranked.entries.empty()) top1 = nc.ranked.entries.front().first;
    return QueryScore{query_case, nc.c_k, k, std::move(top1), std::move(label)};
}

inline QueryScore score_query(const EmbeddingSet& query, const Index& index, std::uint32_t k, QueryLabel label,
                              bool exclude_self) {
    return score_from_histogram(query.case_id, case_histogram(query, index, exclude_self), k, std::move(label));
}

}  // namespace dedup3d

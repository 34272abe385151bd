#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dedup3d/error.hpp"

namespace dedup3d {

/// Opaque case identity, e.g. "BRATS_432". Never empty.
class CaseId {
public:
    CaseId() = delete;
    explicit CaseId(std::string value) : value_(std::move(value)) {
        if (value_.empty()) throw Error(Errc::InvalidArgument, "case id must be non-empty");
    }

    const std::string& str() const noexcept { return value_; }

    friend auto operator<=>(const CaseId&, const CaseId&) = default;
    friend bool operator==(const CaseId&, const CaseId&) = default;

private:
    std::string value_;
};

struct Shape3 {
    std::size_t nz = 0;
    std::size_t ny = 0;
    std::size_t nx = 0;

    std::size_t voxel_count() const noexcept { return nz * ny * nx; }
    std::size_t slice_size() const noexcept { return ny * nx; }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Single-channel 2D image, row-major (y, x).
struct Image2D {
    std::size_t ny = 0;
    std::size_t nx = 0;
    std::vector<float> pixels;

    Image2D() = default;
    Image2D(std::size_t rows, std::size_t cols, float fill = 0.0f) : ny(rows), nx(cols), pixels(rows * cols, fill) {}

    float& at(std::size_t y, std::size_t x) { return pixels[y * nx + x]; }
    float at(std::size_t y, std::size_t x) const { return pixels[y * nx + x]; }
    friend bool operator==(const Image2D&, const Image2D&) = default;
};

/// 3D scalar grid with axes (z, y, x); z is the axial slice axis.
class Volume {
public:
    Volume(CaseId case_id, Shape3 shape, std::vector<float> voxels, std::optional<std::string> transform_tag = {})
        : case_id_(std::move(case_id)), shape_(shape), voxels_(std::move(voxels)), transform_tag_(std::move(transform_tag)) {
        if (shape_.nz == 0 || shape_.ny == 0 || shape_.nx == 0)
            throw Error(Errc::InvalidArgument, "volume extents must be positive");
        if (voxels_.size() != shape_.voxel_count())
            throw Error(Errc::DimensionMismatch, "voxel count does not match shape");
        for (const float v : voxels_)
            if (!std::isfinite(v)) throw Error(Errc::NonFiniteValue, "volume '" + case_id_.str() + "' has a non-finite voxel");
    }

    Volume(CaseId case_id, Shape3 shape, float fill = 0.0f)
        : Volume(std::move(case_id), shape, std::vector<float>(shape.voxel_count(), fill)) {}

    const CaseId& case_id() const noexcept { return case_id_; }
    const Shape3& shape() const noexcept { return shape_; }
    std::span<const float> voxels() const noexcept { return voxels_; }
    const std::optional<std::string>& transform_tag() const noexcept { return transform_tag_; }

    float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels_[(z * shape_.ny + y) * shape_.nx + x]; }

    std::span<const float> slice(std::size_t z) const {
        return std::span<const float>(voxels_).subspan(z * shape_.slice_size(), shape_.slice_size());
    }

    Image2D slice_image(std::size_t z) const {
        Image2D img(shape_.ny, shape_.nx);
        const auto s = slice(z);
        std::copy(s.begin(), s.end(), img.pixels.begin());
        return img;
    }

    friend bool operator==(const Volume&, const Volume&) = default;

private:
    CaseId case_id_;
    Shape3 shape_;
    std::vector<float> voxels_;
    std::optional<std::string> transform_tag_;
};

/// Per-slice embeddings of one case, in the source volume's z order.
struct EmbeddingSet {
    CaseId case_id;
    std::size_t dim = 0;
    std::vector<std::vector<float>> vectors;

    std::size_t slice_count() const noexcept { return vectors.size(); }
    friend bool operator==(const EmbeddingSet&, const EmbeddingSet&) = default;
};

/// Throws DimensionMismatch, NonFiniteValue or EmptySet.
inline void validate_embedding_set(const EmbeddingSet& es) {
    if (es.vectors.empty()) throw Error(Errc::EmptySet, "embedding set '" + es.case_id.str() + "' has no slices");
    if (es.dim == 0) throw Error(Errc::DimensionMismatch, "embedding dim must be positive");
    for (std::size_t i = 0; i < es.vectors.size(); ++i) {
        const auto& v = es.vectors[i];
        if (v.size() != es.dim)
            throw Error(Errc::DimensionMismatch, "slice " + std::to_string(i) + " has length " + std::to_string(v.size()) +
                                                     ", expected " + std::to_string(es.dim));
        for (const float x : v)
            if (!std::isfinite(x)) throw Error(Errc::NonFiniteValue, "slice " + std::to_string(i) + " has a non-finite component");
    }
}

enum class QueryKind { Duplicate, NearDuplicate, NonDuplicate };

constexpr std::string_view query_kind_name(QueryKind kind) {
    switch (kind) {
        case QueryKind::Duplicate: return "Duplicate";
        case QueryKind::NearDuplicate: return "NearDuplicate";
        case QueryKind::NonDuplicate: return "NonDuplicate";
    }
    return "";
}

inline std::optional<QueryKind> parse_query_kind(std::string_view text) {
    if (text == "Duplicate") return QueryKind::Duplicate;
    if (text == "NearDuplicate") return QueryKind::NearDuplicate;
    if (text == "NonDuplicate") return QueryKind::NonDuplicate;
    return std::nullopt;
}

/// Role of a query volume. Ground truth is present iff kind != NonDuplicate.
class QueryLabel {
public:
    static QueryLabel duplicate(CaseId ground_truth) { return {QueryKind::Duplicate, std::move(ground_truth), {}}; }
    static QueryLabel near_duplicate(CaseId ground_truth, std::string transform_tag) {
        return {QueryKind::NearDuplicate, std::move(ground_truth), std::move(transform_tag)};
    }
    static QueryLabel non_duplicate() { return {QueryKind::NonDuplicate, std::nullopt, {}}; }

    QueryLabel(QueryKind kind, std::optional<CaseId> ground_truth, std::optional<std::string> transform_tag)
        : kind_(kind), ground_truth_(std::move(ground_truth)), transform_tag_(std::move(transform_tag)) {
        if (ground_truth_.has_value() != (kind_ != QueryKind::NonDuplicate))
            throw Error(Errc::InvalidArgument, "ground truth must be present iff the query is a (near-)duplicate");
    }

    QueryKind kind() const noexcept { return kind_; }
    bool is_positive() const noexcept { return kind_ != QueryKind::NonDuplicate; }
    const std::optional<CaseId>& ground_truth() const noexcept { return ground_truth_; }
    const std::optional<std::string>& transform_tag() const noexcept { return transform_tag_; }

    friend bool operator==(const QueryLabel&, const QueryLabel&) = default;

private:
    QueryKind kind_;
    std::optional<CaseId> ground_truth_;
    std::optional<std::string> transform_tag_;
};

}  // namespace dedup3d

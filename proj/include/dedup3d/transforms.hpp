#pragma once

// Near-duplicate synthesis: geometric and intensity perturbations of a volume.
// Everything except crop_border preserves the volume shape. Per-slice
// operations act on axial (x, y) planes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dedup3d/core.hpp"
#include "dedup3d/embedder.hpp"
#include "dedup3d/jpeg_codec.hpp"
#include "dedup3d/random.hpp"

namespace dedup3d {

enum class TransformKind { Crop, Rotate, Translate, Blur, JpegCompress, GaussianNoise };

inline constexpr TransformKind kAllTransformKinds[] = {TransformKind::Crop,         TransformKind::Rotate,
                                                       TransformKind::Translate,    TransformKind::Blur,
                                                       TransformKind::JpegCompress, TransformKind::GaussianNoise};

constexpr std::string_view transform_kind_name(TransformKind kind) {
    switch (kind) {
        case TransformKind::Crop: return "crop";
        case TransformKind::Rotate: return "rotate";
        case TransformKind::Translate: return "translate";
        case TransformKind::Blur: return "blur";
        case TransformKind::JpegCompress: return "jpeg";
        case TransformKind::GaussianNoise: return "noise";
    }
    return "";
}

inline std::optional<TransformKind> parse_transform_kind(std::string_view text) {
    for (const auto kind : kAllTransformKinds)
        if (transform_kind_name(kind) == text) return kind;
    return std::nullopt;
}

struct TransformSpec {
    TransformKind kind = TransformKind::Crop;
    double strength = 0.0;
    std::uint64_t seed = 0;  // GaussianNoise only

    void validate() const {
        const auto fail = [&](const char* what) {
            throw Error(Errc::InvalidArgument, std::string(transform_kind_name(kind)) + ": " + what);
        };
        if (!std::isfinite(strength)) fail("strength must be finite");
        switch (kind) {
            case TransformKind::Crop:
                if (strength < 0.0 || strength >= 0.5) fail("fraction must be in [0, 0.5)");
                break;
            case TransformKind::Rotate: break;
            case TransformKind::Translate:
                if (strength < 0.0 || strength >= 1.0) fail("fraction must be in [0, 1)");
                break;
            case TransformKind::Blur:
            case TransformKind::GaussianNoise:
                if (strength < 0.0) fail("strength must be non-negative");
                break;
            case TransformKind::JpegCompress:
                if (strength <= 0.0 || strength > 100.0) fail("quality must be in (0, 100]");
                break;
        }
    }

    /// "<kind>:<strength>", e.g. "crop:0.05" or "jpeg:100".
    std::string tag() const {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.10g", strength);
        return std::string(transform_kind_name(kind)) + ":" + buf;
    }

    friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

inline TransformSpec parse_transform_tag(std::string_view tag) {
    const auto colon = tag.find(':');
    if (colon == std::string_view::npos) throw Error(Errc::InvalidArgument, "transform tag must be kind:strength");
    const auto kind = parse_transform_kind(tag.substr(0, colon));
    if (!kind) throw Error(Errc::InvalidArgument, "unknown transform kind in '" + std::string(tag) + "'");
    const std::string number(tag.substr(colon + 1));
    char* end = nullptr;
    const double strength = std::strtod(number.c_str(), &end);
    if (number.empty() || end != number.c_str() + number.size())
        throw Error(Errc::InvalidArgument, "bad transform strength in '" + std::string(tag) + "'");
    TransformSpec spec{*kind, strength, 0};
    spec.validate();
    return spec;
}

namespace detail {

inline Volume with_voxels(const Volume& v, Shape3 shape, std::vector<float> voxels) {
    return Volume(v.case_id(), shape, std::move(voxels), v.transform_tag());
}

/// Symmetric index reflection about pixel edges: (d c b a | a b c d | d c b a).
inline std::size_t reflect_index(long long i, std::size_t n) {
    const long long period = 2 * static_cast<long long>(n);
    long long m = i % period;
    if (m < 0) m += period;
    return static_cast<std::size_t>(m < static_cast<long long>(n) ? m : period - 1 - m);
}

inline double snap(double coord) {
    const double r = std::round(coord);
    return std::abs(coord - r) < 1e-9 ? r : coord;
}

}  // namespace detail

/// Removes floor(fraction/2 * extent) voxels from both ends of every axis.
inline Volume crop_border(const Volume& v, double fraction) {
    if (!(fraction >= 0.0 && fraction < 0.5)) throw Error(Errc::InvalidArgument, "crop fraction must be in [0, 0.5)");
    const auto per_side = [&](std::size_t extent) {
        return static_cast<std::size_t>(std::floor(fraction / 2.0 * static_cast<double>(extent) + 1e-9));
    };
    const Shape3 in = v.shape();
    const std::size_t cz = per_side(in.nz), cy = per_side(in.ny), cx = per_side(in.nx);
    if (2 * cz >= in.nz || 2 * cy >= in.ny || 2 * cx >= in.nx)
        throw Error(Errc::DegenerateOutput, "crop leaves an empty axis");
    const Shape3 out{in.nz - 2 * cz, in.ny - 2 * cy, in.nx - 2 * cx};
    std::vector<float> voxels;
    voxels.reserve(out.voxel_count());
    for (std::size_t z = 0; z < out.nz; ++z)
        for (std::size_t y = 0; y < out.ny; ++y)
            for (std::size_t x = 0; x < out.nx; ++x) voxels.push_back(v.at(z + cz, y + cy, x + cx));
    return detail::with_voxels(v, out, std::move(voxels));
}

/// Rotates every axial slice counterclockwise (in x-right, y-up terms of the
/// index grid) about its center. Bilinear sampling; samples falling outside
/// the grid are 0.
inline Volume rotate_xy(const Volume& v, double degrees) {
    if (!std::isfinite(degrees)) throw Error(Errc::InvalidArgument, "rotation angle must be finite");
    if (degrees == 0.0) return v;
    const Shape3 s = v.shape();
    const double theta = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(theta), sn = std::sin(theta);
    const double cy = (static_cast<double>(s.ny) - 1.0) / 2.0, cx = (static_cast<double>(s.nx) - 1.0) / 2.0;
    const double max_y = static_cast<double>(s.ny - 1), max_x = static_cast<double>(s.nx - 1);

    std::vector<float> out(s.voxel_count(), 0.0f);
    for (std::size_t y = 0; y < s.ny; ++y) {
        for (std::size_t x = 0; x < s.nx; ++x) {
            // Inverse map: output pixel p samples input at R(-theta) (p - c) + c.
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            const double sx = detail::snap(c * dx + sn * dy + cx);
            const double sy = detail::snap(-sn * dx + c * dy + cy);
            if (sx < 0.0 || sy < 0.0 || sx > max_x || sy > max_y) continue;
            const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
            const std::size_t x1 = std::min(x0 + 1, s.nx - 1), y1 = std::min(y0 + 1, s.ny - 1);
            const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
            for (std::size_t z = 0; z < s.nz; ++z) {
                const double top = (1.0 - fx) * v.at(z, y0, x0) + fx * v.at(z, y0, x1);
                const double bottom = (1.0 - fx) * v.at(z, y1, x0) + fx * v.at(z, y1, x1);
                out[(z * s.ny + y) * s.nx + x] = static_cast<float>((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    return detail::with_voxels(v, s, std::move(out));
}

/// Shifts every slice by round(fraction * extent) voxels in +x and +y; vacated voxels are 0.
inline Volume translate_xy(const Volume& v, double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw Error(Errc::InvalidArgument, "shift fraction must be in [0, 1)");
    const Shape3 s = v.shape();
    const auto sy = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(s.ny)));
    const auto sx = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(s.nx)));
    if (sx == 0 && sy == 0) return v;
    std::vector<float> out(s.voxel_count(), 0.0f);
    for (std::size_t z = 0; z < s.nz; ++z)
        for (std::size_t y = sy; y < s.ny; ++y)
            for (std::size_t x = sx; x < s.nx; ++x) out[(z * s.ny + y) * s.nx + x] = v.at(z, y - sy, x - sx);
    return detail::with_voxels(v, s, std::move(out));
}

/// Normalized 1D Gaussian weights over [-ceil(3 sigma), ceil(3 sigma)].
inline std::vector<double> gaussian_kernel_1d(double sigma) {
    const auto radius = static_cast<long long>(std::ceil(3.0 * sigma));
    std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (long long i = -radius; i <= radius; ++i) {
        const double x = static_cast<double>(i);
        w[static_cast<std::size_t>(i + radius)] = std::exp(-x * x / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i + radius)];
    }
    for (auto& x : w) x /= sum;
    return w;
}

/// Separable 2D Gaussian per axial slice with reflect padding.
inline Volume gaussian_blur(const Volume& v, double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error(Errc::InvalidArgument, "sigma must be >= 0");
    if (sigma == 0.0) return v;
    const auto w = gaussian_kernel_1d(sigma);
    const auto radius = static_cast<long long>(w.size() / 2);
    const Shape3 s = v.shape();
    std::vector<float> out(s.voxel_count());
    std::vector<double> tmp(s.slice_size());
    for (std::size_t z = 0; z < s.nz; ++z) {
        const auto src = v.slice(z);
        for (std::size_t y = 0; y < s.ny; ++y)
            for (std::size_t x = 0; x < s.nx; ++x) {
                double acc = 0.0;
                for (long long k = -radius; k <= radius; ++k)
                    acc += w[static_cast<std::size_t>(k + radius)] *
                           src[y * s.nx + detail::reflect_index(static_cast<long long>(x) + k, s.nx)];
                tmp[y * s.nx + x] = acc;
            }
        for (std::size_t y = 0; y < s.ny; ++y)
            for (std::size_t x = 0; x < s.nx; ++x) {
                double acc = 0.0;
                for (long long k = -radius; k <= radius; ++k)
                    acc += w[static_cast<std::size_t>(k + radius)] *
                           tmp[detail::reflect_index(static_cast<long long>(y) + k, s.ny) * s.nx + x];
                out[(z * s.ny + y) * s.nx + x] = static_cast<float>(acc);
            }
    }
    return detail::with_voxels(v, s, std::move(out));
}

/// Per-slice 8-bit JPEG round trip of the min-max scaled volume. The result
/// is in [0, 1] (decoded byte / 255).
inline Volume jpeg_roundtrip(const Volume& v, double quality) {
    if (!(quality > 0.0 && quality <= 100.0)) throw Error(Errc::InvalidArgument, "quality must be in (0, 100]");
    const int q = std::clamp(static_cast<int>(std::lround(quality)), 1, 100);
    const Volume scaled = minmax_scale(v);
    const Shape3 s = v.shape();
    std::vector<float> out(s.voxel_count());
    jpeg::GrayImage img{static_cast<std::uint32_t>(s.nx), static_cast<std::uint32_t>(s.ny),
                        std::vector<std::uint8_t>(s.slice_size())};
    for (std::size_t z = 0; z < s.nz; ++z) {
        const auto src = scaled.slice(z);
        for (std::size_t i = 0; i < src.size(); ++i)
            img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(src[i] * 255.0), 0L, 255L));
        const auto decoded = jpeg::decode(jpeg::encode(img, q));
        if (decoded.width != img.width || decoded.height != img.height)
            throw Error(Errc::CodecError, "decoded JPEG has unexpected dimensions");
        for (std::size_t i = 0; i < src.size(); ++i)
            out[z * s.slice_size() + i] = static_cast<float>(decoded.pixels[i] / 255.0);
    }
    return detail::with_voxels(v, s, std::move(out));
}

/// Adds i.i.d. N(0, std^2) per voxel from a seeded generator; no clipping.
inline Volume add_gaussian_noise(const Volume& v, double std_dev, std::uint64_t seed) {
    if (!(std_dev >= 0.0) || !std::isfinite(std_dev)) throw Error(Errc::InvalidArgument, "noise std must be >= 0");
    if (std_dev == 0.0) return v;
    Rng rng(seed);
    const auto src = v.voxels();
    std::vector<float> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<float>(src[i] + std_dev * rng.normal());
    return detail::with_voxels(v, v.shape(), std::move(out));
}

/// Dispatches on spec.kind; the result keeps the case id and carries spec.tag().
inline Volume apply(const TransformSpec& spec, const Volume& v) {
    spec.validate();
    const Volume out = [&] {
        switch (spec.kind) {
            case TransformKind::Crop: return crop_border(v, spec.strength);
            case TransformKind::Rotate: return rotate_xy(v, spec.strength);
            case TransformKind::Translate: return translate_xy(v, spec.strength);
            case TransformKind::Blur: return gaussian_blur(v, spec.strength);
            case TransformKind::JpegCompress: return jpeg_roundtrip(v, spec.strength);
            case TransformKind::GaussianNoise: return add_gaussian_noise(v, spec.strength, spec.seed);
        }
        throw Error(Errc::InvalidArgument, "unknown transform kind");
    }();
    return Volume(out.case_id(), out.shape(), std::vector<float>(out.voxels().begin(), out.voxels().end()), spec.tag());
}

/// The 6 x 4 ladder of the benchmark protocol, weakest strength first per kind.
inline std::vector<TransformSpec> default_transform_grid() {
    const std::pair<TransformKind, std::array<double, 4>> ladder[] = {
        {TransformKind::Crop, {0.05, 0.10, 0.15, 0.20}},   {TransformKind::Rotate, {5, 10, 15, 20}},
        {TransformKind::Translate, {0.05, 0.10, 0.15, 0.20}}, {TransformKind::Blur, {1, 2, 4, 8}},
        {TransformKind::JpegCompress, {100, 75, 50, 25}},  {TransformKind::GaussianNoise, {0.1, 0.2, 0.4, 0.8}},
    };
    std::vector<TransformSpec> grid;
    for (const auto& [kind, strengths] : ladder)
        for (const double s : strengths) grid.push_back({kind, s, 0});
    return grid;
}

}  // namespace dedup3d

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dedup3d/core.hpp"

namespace dedup3d {

struct ToyEmbedderConfig {
    std::size_t target_side = 16;
    std::size_t preprocess_side = 224;

    void validate() const {
        if (target_side == 0 || preprocess_side == 0)
            throw Error(Errc::InvalidArgument, "embedder sides must be positive");
        if (target_side > preprocess_side)
            throw Error(Errc::InvalidArgument, "target_side must not exceed preprocess_side");
    }
};

/// Volume-level (v - min) / (max - min); a constant volume maps to zeros.
inline Volume minmax_scale(const Volume& volume) {
    const auto vox = volume.voxels();
    const auto [lo_it, hi_it] = std::minmax_element(vox.begin(), vox.end());
    const double lo = *lo_it;
    const double range = static_cast<double>(*hi_it) - lo;
    std::vector<float> out(vox.size(), 0.0f);
    if (range > 0.0)
        for (std::size_t i = 0; i < vox.size(); ++i) out[i] = static_cast<float>((vox[i] - lo) / range);
    return Volume(volume.case_id(), volume.shape(), std::move(out), volume.transform_tag());
}

/// Bilinear resize with corner-aligned sampling: output corners coincide with
/// input corners, so a constant image stays constant and equal sizes are an
/// exact copy.
inline Image2D resize_bilinear(const Image2D& src, std::size_t out_ny, std::size_t out_nx) {
    if (src.ny == 0 || src.nx == 0) throw Error(Errc::InvalidArgument, "cannot resize an empty slice");
    if (out_ny == 0 || out_nx == 0) throw Error(Errc::InvalidArgument, "resize target must be positive");
    if (src.ny == out_ny && src.nx == out_nx) return src;

    const auto axis = [](std::size_t in, std::size_t out, std::size_t i, std::size_t& i0, std::size_t& i1, double& frac) {
        if (in == 1 || out == 1) {
            i0 = i1 = 0;
            frac = 0.0;
            return;
        }
        const double pos = static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
        i0 = std::min(static_cast<std::size_t>(pos), in - 1);
        i1 = std::min(i0 + 1, in - 1);
        frac = pos - static_cast<double>(i0);
    };

    std::vector<std::size_t> x0(out_nx), x1(out_nx);
    std::vector<double> fx(out_nx);
    for (std::size_t x = 0; x < out_nx; ++x) axis(src.nx, out_nx, x, x0[x], x1[x], fx[x]);

    Image2D dst(out_ny, out_nx);
    for (std::size_t y = 0; y < out_ny; ++y) {
        std::size_t y0, y1;
        double fy;
        axis(src.ny, out_ny, y, y0, y1, fy);
        for (std::size_t x = 0; x < out_nx; ++x) {
            const double top = (1.0 - fx[x]) * src.at(y0, x0[x]) + fx[x] * src.at(y0, x1[x]);
            const double bottom = (1.0 - fx[x]) * src.at(y1, x0[x]) + fx[x] * src.at(y1, x1[x]);
            dst.at(y, x) = static_cast<float>((1.0 - fy) * top + fy * bottom);
        }
    }
    return dst;
}

inline Image2D resize_slice(const Image2D& slice, std::size_t side) { return resize_bilinear(slice, side, side); }

/// Area average pooling to side x side. Cell i covers source rows
/// [floor(i*n/side), floor((i+1)*n/side)); cells are exact blocks when side divides n.
inline Image2D average_pool(const Image2D& src, std::size_t side) {
    if (side == 0 || side > src.ny || side > src.nx) throw Error(Errc::InvalidArgument, "pool side out of range");
    Image2D dst(side, side);
    for (std::size_t cy = 0; cy < side; ++cy) {
        const std::size_t y_begin = cy * src.ny / side, y_end = (cy + 1) * src.ny / side;
        for (std::size_t cx = 0; cx < side; ++cx) {
            const std::size_t x_begin = cx * src.nx / side, x_end = (cx + 1) * src.nx / side;
            double sum = 0.0;
            for (std::size_t y = y_begin; y < y_end; ++y)
                for (std::size_t x = x_begin; x < x_end; ++x) sum += src.at(y, x);
            dst.at(cy, cx) = static_cast<float>(sum / static_cast<double>((y_end - y_begin) * (x_end - x_begin)));
        }
    }
    return dst;
}

/// Deterministic stand-in for a learned slice encoder: volume min-max scaling,
/// per-slice bilinear resize to preprocess_side, then average pooling to
/// target_side and row-major flattening.
inline EmbeddingSet embed_volume(const Volume& volume, const ToyEmbedderConfig& cfg = {}) {
    cfg.validate();
    const Volume scaled = minmax_scale(volume);
    EmbeddingSet es{volume.case_id(), cfg.target_side * cfg.target_side, {}};
    es.vectors.reserve(volume.shape().nz);
    for (std::size_t z = 0; z < volume.shape().nz; ++z) {
        const Image2D resized = resize_slice(scaled.slice_image(z), cfg.preprocess_side);
        es.vectors.push_back(average_pool(resized, cfg.target_side).pixels);
    }
    return es;
}

}  // namespace dedup3d

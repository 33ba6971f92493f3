#pragma once

#include <complex>
#include <span>

#include "comemo/seqplan.hpp"

namespace comemo {

struct RopeConfig {
    int head_dim = 16;
    double theta_base = 10000.0;

    // theta_i = theta_base^(-2i/d), strictly decreasing in i
    double freq(int i) const { return std::pow(theta_base, -2.0 * i / head_dim); }
};

inline void validate_rope(const RopeConfig& cfg) {
    require_arg(cfg.head_dim > 0 && cfg.head_dim % 2 == 0, "RopeConfig: head_dim must be positive and even");
    require_arg(cfg.theta_base > 0.0, "RopeConfig: theta_base must be positive");
}

enum class EncodingMode { vanilla, dhr, dhr_nc };

inline const char* to_string(EncodingMode m) {
    switch (m) {
        case EncodingMode::vanilla: return "vanilla";
        case EncodingMode::dhr: return "dhr";
        case EncodingMode::dhr_nc: return "dhr_nc";
    }
    return "?";
}

inline EncodingMode encoding_mode_from(const std::string& s) {
    if (s == "vanilla") return EncodingMode::vanilla;
    if (s == "dhr") return EncodingMode::dhr;
    if (s == "dhr_nc") return EncodingMode::dhr_nc;
    throw std::invalid_argument("unknown encoding mode: " + s);
}

struct PositionMap {
    std::vector<int> ids;  // one per sequence token
    EncodingMode mode = EncodingMode::vanilla;

    int last_id() const { return ids.empty() ? -1 : *std::max_element(ids.begin(), ids.end()); }
};

// Thumbnail patch covering global patch coords (gx = col, gy = row). Both
// axes use floor(global * thumb / global_extent); with tile_patch ==
// thumb_patch this is floor(g / tile_count_along_axis).
inline std::pair<int, int> anchor_patch(const DhrLayout& l, int gx, int gy) {
    int ax = static_cast<int>(static_cast<int64_t>(gx) * l.thumb_patch / l.global_cols());
    int ay = static_cast<int>(static_cast<int64_t>(gy) * l.thumb_patch / l.global_rows());
    return {ax, ay};
}

namespace detail {

// Per-image ID assignment shared by dhr and dhr_nc. Returns IDs for the
// in-plan token order (tiles row-major, thumbnail last, or thumbnail only),
// plus the first ID available after the image block.
struct ImageIds {
    std::vector<int> tile_ids;   // one per tile token, in sequence order
    std::vector<int> thumb_ids;  // one per thumbnail token, row-major
    int next_id = 0;
};

inline ImageIds image_ids(const DhrLayout& l, int base, EncodingMode mode) {
    ImageIds out;
    int tp = l.thumb_patch;
    out.thumb_ids.resize(static_cast<size_t>(l.thumb_tokens()));
    // tile cell (gy, gx) -> anchor thumb index
    auto anchor_index = [&](int gy, int gx) {
        auto [ax, ay] = anchor_patch(l, gx, gy);
        return ay * tp + ax;
    };
    if (mode == EncodingMode::dhr) {
        for (int j = 0; j < l.thumb_tokens(); ++j) out.thumb_ids[static_cast<size_t>(j)] = base + j;
        for (int tr = 0; tr < l.tile_rows; ++tr)
            for (int tc = 0; tc < l.tile_cols; ++tc)
                for (int r = 0; r < l.tile_patch; ++r)
                    for (int c = 0; c < l.tile_patch; ++c) {
                        int gy = tr * l.tile_patch + r, gx = tc * l.tile_patch + c;
                        out.tile_ids.push_back(base + anchor_index(gy, gx));
                    }
        out.next_id = base + l.thumb_tokens();
        return out;
    }
    // dhr_nc: thumbnail patch j's ID leaves room for the tile tokens anchored
    // to it, which take consecutive IDs immediately after it. Anchored tokens
    // are ordered by global cell (row-major).
    std::vector<int> anchored_count(static_cast<size_t>(l.thumb_tokens()), 0);
    for (int gy = 0; gy < l.global_rows(); ++gy)
        for (int gx = 0; gx < l.global_cols(); ++gx) anchored_count[static_cast<size_t>(anchor_index(gy, gx))]++;
    std::vector<int> thumb_id(static_cast<size_t>(l.thumb_tokens()), 0);
    int id = base;
    for (int j = 0; j < l.thumb_tokens(); ++j) {
        thumb_id[static_cast<size_t>(j)] = id;
        id += 1 + anchored_count[static_cast<size_t>(j)];
    }
    out.next_id = id;
    out.thumb_ids = thumb_id;
    // global cell (gy, gx) -> ID = anchor's thumb ID + 1 + rank among the
    // anchor's cells in global row-major order
    std::vector<int> seen(static_cast<size_t>(l.thumb_tokens()), 0);
    std::vector<int> cell_id(static_cast<size_t>(l.global_rows() * l.global_cols()), 0);
    for (int gy = 0; gy < l.global_rows(); ++gy)
        for (int gx = 0; gx < l.global_cols(); ++gx) {
            int a = anchor_index(gy, gx);
            cell_id[static_cast<size_t>(gy * l.global_cols() + gx)] =
                thumb_id[static_cast<size_t>(a)] + 1 + seen[static_cast<size_t>(a)]++;
        }
    for (int tr = 0; tr < l.tile_rows; ++tr)
        for (int tc = 0; tc < l.tile_cols; ++tc)
            for (int r = 0; r < l.tile_patch; ++r)
                for (int c = 0; c < l.tile_patch; ++c) {
                    int gy = tr * l.tile_patch + r, gx = tc * l.tile_patch + c;
                    out.tile_ids.push_back(cell_id[static_cast<size_t>(gy * l.global_cols() + gx)]);
                }
    return out;
}

}  // namespace detail

inline PositionMap assign_position_ids(const SequencePlan& plan, const std::map<int, DhrLayout>& layouts,
                                       EncodingMode mode) {
    PositionMap pm;
    pm.mode = mode;
    pm.ids.reserve(static_cast<size_t>(plan.total_len));
    if (mode == EncodingMode::vanilla) {
        for (int i = 0; i < plan.total_len; ++i) pm.ids.push_back(i);
        return pm;
    }
    int next_id = 0;
    // Image blocks are contiguous (tiles then thumbnail); walk segments and
    // assign each image's block in one shot when its first segment appears.
    size_t si = 0;
    while (si < plan.segments.size()) {
        const Segment& seg = plan.segments[si];
        if (seg.kind == SegmentKind::text) {
            for (int t = 0; t < seg.token_count; ++t) pm.ids.push_back(next_id++);
            ++si;
            continue;
        }
        auto it = layouts.find(seg.image_id);
        require_arg(it != layouts.end(), "assign_position_ids: no layout for image " + std::to_string(seg.image_id));
        const DhrLayout& l = it->second;
        size_t block_end = si;
        bool has_tiles = false;
        while (block_end < plan.segments.size() && plan.segments[block_end].image_id == seg.image_id) {
            has_tiles |= plan.segments[block_end].kind == SegmentKind::image_tiles;
            ++block_end;
        }
        if (!has_tiles) {
            // thumbnail-only image block: plain consecutive IDs in every mode
            for (; si < block_end; ++si)
                for (int t = 0; t < plan.segments[si].token_count; ++t) pm.ids.push_back(next_id++);
            continue;
        }
        detail::ImageIds ids = detail::image_ids(l, next_id, mode);
        size_t tile_cursor = 0;
        for (; si < block_end; ++si) {
            const Segment& s2 = plan.segments[si];
            if (s2.kind == SegmentKind::image_tiles)
                for (int t = 0; t < s2.token_count; ++t) pm.ids.push_back(ids.tile_ids[tile_cursor++]);
            else
                for (int t = 0; t < s2.token_count; ++t) pm.ids.push_back(ids.thumb_ids[static_cast<size_t>(t)]);
        }
        next_id = ids.next_id;
    }
    return pm;
}

// Rotate (2i, 2i+1) pairs by pos * theta_i. Norm-preserving.
inline void apply_rotary_inplace(std::span<double> vec, double pos, const RopeConfig& cfg) {
    require_shape(vec.size() % 2 == 0, "apply_rotary: vector length must be even");
    require_shape(static_cast<int>(vec.size()) == cfg.head_dim, "apply_rotary: vector length must equal head_dim");
    for (int i = 0; i < cfg.head_dim / 2; ++i) {
        double ang = pos * cfg.freq(i);
        double c = std::cos(ang), s = std::sin(ang);
        double x = vec[2 * i], y = vec[2 * i + 1];
        vec[2 * i] = x * c - y * s;
        vec[2 * i + 1] = x * s + y * c;
    }
}

inline std::vector<double> apply_rotary(std::vector<double> vec, double pos, const RopeConfig& cfg) {
    apply_rotary_inplace(vec, pos, cfg);
    return vec;
}

// dot(R_m q, R_n k); computed via the real rotations. Equals the complex form
// Re[sum q_[2i:2i+1] k*_[2i:2i+1] e^{i(m-n)theta_i}].
inline double rope_inner_product(const std::vector<double>& q, const std::vector<double>& k, double m, double n,
                                 const RopeConfig& cfg) {
    require_shape(q.size() == k.size(), "rope_inner_product: dimension mismatch");
    std::vector<double> qr = apply_rotary(q, m, cfg);
    std::vector<double> kr = apply_rotary(k, n, cfg);
    double acc = 0.0;
    for (size_t i = 0; i < qr.size(); ++i) acc += qr[i] * kr[i];
    return acc;
}

}  // namespace comemo

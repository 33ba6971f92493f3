#pragma once

#include <map>
#include <optional>
#include <variant>

#include "comemo/common.hpp"

namespace comemo {

// A grid of patch feature vectors. Stands in for ViT patch outputs; rows x
// cols cells, each a dim-sized feature vector.
struct PatchGrid {
    int rows = 0;
    int cols = 0;
    int dim = 0;
    std::vector<double> data;  // row-major cells, contiguous features

    PatchGrid() = default;
    PatchGrid(int r, int c, int d) : rows(r), cols(c), dim(d), data(static_cast<size_t>(r) * c * d, 0.0) {}

    double* cell(int r, int c) { return data.data() + (static_cast<size_t>(r) * cols + c) * dim; }
    const double* cell(int r, int c) const { return data.data() + (static_cast<size_t>(r) * cols + c) * dim; }
    size_t n_cells() const { return static_cast<size_t>(rows) * cols; }
};

struct SyntheticImage {
    PatchGrid patch_grid;
    // payload symbol per (row, col); cells without payload carry the background
    std::map<std::pair<int, int>, int> payload;
};

// Geometry of one dynamic-high-resolution split: a tile_rows x tile_cols grid
// of tiles plus a single thumbnail. tile_patch and thumb_patch are the
// post-pixel-shuffle patches per side; they must agree so tile patches can
// anchor onto thumbnail patches one-to-many.
struct DhrLayout {
    int tile_rows = 1;
    int tile_cols = 1;
    int tile_patch = 2;
    int thumb_patch = 2;
    int shuffle_factor = 1;

    int tile_count() const { return tile_rows * tile_cols; }
    // pre-shuffle global grid dims expected of the source image
    int src_rows() const { return tile_rows * tile_patch * shuffle_factor; }
    int src_cols() const { return tile_cols * tile_patch * shuffle_factor; }
    // post-shuffle global patch grid
    int global_rows() const { return tile_rows * tile_patch; }
    int global_cols() const { return tile_cols * tile_patch; }
    int tokens_per_tile() const { return tile_patch * tile_patch; }
    int thumb_tokens() const { return thumb_patch * thumb_patch; }
    // tokens an image contributes to a full-detail sequence
    int full_tokens() const { return tile_count() * tokens_per_tile() + thumb_tokens(); }
};

inline void validate_layout(const DhrLayout& l, int max_tiles = 12) {
    require_arg(l.tile_rows >= 1 && l.tile_cols >= 1, "DhrLayout: tile grid must be at least 1x1");
    require_arg(l.tile_patch >= 1 && l.thumb_patch >= 1, "DhrLayout: patch counts must be positive");
    require_arg(l.tile_patch == l.thumb_patch, "DhrLayout: tile_patch must equal thumb_patch");
    require_arg(l.shuffle_factor >= 1, "DhrLayout: shuffle_factor must be >= 1");
    require_arg(l.tile_count() <= max_tiles, "DhrLayout: tile count exceeds max tiles per image");
}

enum class SegmentKind { text, image_tiles, image_thumbnail };

struct Segment {
    SegmentKind kind = SegmentKind::text;
    int token_count = 0;
    int image_id = -1;  // valid for image segments only
};

struct ImageSpan {
    int first = 0;
    int last = 0;  // inclusive
};

struct SequencePlan {
    std::vector<Segment> segments;
    std::map<int, ImageSpan> image_spans;
    int total_len = 0;

    std::vector<int> image_order() const {
        std::vector<int> ids;
        for (const auto& s : segments)
            if (s.kind != SegmentKind::text && (ids.empty() || ids.back() != s.image_id))
                ids.push_back(s.image_id);
        return ids;
    }
};

// Space-to-channel rearrangement: factor^2 neighboring cells fold into one
// cell with factor^2 x the feature dim. Lossless.
inline PatchGrid pixel_shuffle(const PatchGrid& grid, int factor) {
    require_arg(factor >= 1, "pixel_shuffle: factor must be >= 1");
    require_shape(grid.rows % factor == 0 && grid.cols % factor == 0,
                  "pixel_shuffle: grid dims not divisible by factor");
    PatchGrid out(grid.rows / factor, grid.cols / factor, grid.dim * factor * factor);
    for (int r = 0; r < out.rows; ++r) {
        for (int c = 0; c < out.cols; ++c) {
            double* dst = out.cell(r, c);
            for (int dr = 0; dr < factor; ++dr)
                for (int dc = 0; dc < factor; ++dc) {
                    const double* src = grid.cell(r * factor + dr, c * factor + dc);
                    std::copy(src, src + grid.dim, dst);
                    dst += grid.dim;
                }
        }
    }
    return out;
}

struct TiledImage {
    std::vector<PatchGrid> tiles;  // row-major by tile grid position, post-shuffle
    PatchGrid thumbnail;           // post-shuffle
};

inline PatchGrid crop(const PatchGrid& g, int r0, int c0, int rows, int cols) {
    PatchGrid out(rows, cols, g.dim);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double* src = g.cell(r0 + r, c0 + c);
            std::copy(src, src + g.dim, out.cell(r, c));
        }
    return out;
}

// Average-pool g down to (rows, cols); g dims must be divisible.
inline PatchGrid average_pool(const PatchGrid& g, int rows, int cols) {
    require_shape(g.rows % rows == 0 && g.cols % cols == 0, "average_pool: target dims must divide source dims");
    int wr = g.rows / rows, wc = g.cols / cols;
    PatchGrid out(rows, cols, g.dim);
    double inv = 1.0 / (wr * wc);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double* dst = out.cell(r, c);
            for (int dr = 0; dr < wr; ++dr)
                for (int dc = 0; dc < wc; ++dc) {
                    const double* src = g.cell(r * wr + dr, c * wc + dc);
                    for (int k = 0; k < g.dim; ++k) dst[k] += src[k];
                }
            for (int k = 0; k < g.dim; ++k) dst[k] *= inv;
        }
    return out;
}

// Split into tiles plus one pooled thumbnail, then pixel-shuffle both.
inline TiledImage tile_image(const SyntheticImage& img, const DhrLayout& layout) {
    validate_layout(layout);
    const PatchGrid& g = img.patch_grid;
    require_shape(g.rows == layout.src_rows() && g.cols == layout.src_cols(),
                  "tile_image: image dims do not match layout");
    TiledImage out;
    int side = layout.tile_patch * layout.shuffle_factor;
    for (int tr = 0; tr < layout.tile_rows; ++tr)
        for (int tc = 0; tc < layout.tile_cols; ++tc)
            out.tiles.push_back(pixel_shuffle(crop(g, tr * side, tc * side, side, side), layout.shuffle_factor));
    PatchGrid pooled = average_pool(g, layout.thumb_patch * layout.shuffle_factor,
                                    layout.thumb_patch * layout.shuffle_factor);
    out.thumbnail = pixel_shuffle(pooled, layout.shuffle_factor);
    return out;
}

struct PlanItem {
    // text item: token_count > 0 and image_id < 0; image item: image_id >= 0
    int token_count = 0;
    int image_id = -1;
    DhrLayout layout;

    static PlanItem text(int n) {
        PlanItem it;
        it.token_count = n;
        return it;
    }
    static PlanItem image(int id, DhrLayout l) {
        PlanItem it;
        it.image_id = id;
        it.layout = l;
        return it;
    }
    bool is_image() const { return image_id >= 0; }
};

enum class ImageDetail { thumbnail, full };

inline const char* to_string(ImageDetail d) { return d == ImageDetail::full ? "full" : "thumbnail"; }

inline ImageDetail detail_from(const std::string& s) {
    if (s == "full") return ImageDetail::full;
    if (s == "thumbnail") return ImageDetail::thumbnail;
    throw std::invalid_argument("unknown image detail: " + s);
}

// Assemble the interleaved sequence layout. Images emit tiles row-major then
// the thumbnail; with ImageDetail::thumbnail the tile segments are dropped
// (the unilateral DHR allocation case).
inline SequencePlan build_plan(const std::vector<PlanItem>& items, ImageDetail detail = ImageDetail::full) {
    require_arg(!items.empty(), "build_plan: at least one item required");
    SequencePlan plan;
    for (const auto& it : items) {
        if (!it.is_image()) {
            require_arg(it.token_count >= 1, "build_plan: text segment must have tokens");
            plan.segments.push_back({SegmentKind::text, it.token_count, -1});
            plan.total_len += it.token_count;
            continue;
        }
        validate_layout(it.layout);
        require_arg(!plan.image_spans.count(it.image_id), "build_plan: duplicate image_id");
        int first = plan.total_len;
        if (detail == ImageDetail::full)
            for (int t = 0; t < it.layout.tile_count(); ++t) {
                plan.segments.push_back({SegmentKind::image_tiles, it.layout.tokens_per_tile(), it.image_id});
                plan.total_len += it.layout.tokens_per_tile();
            }
        plan.segments.push_back({SegmentKind::image_thumbnail, it.layout.thumb_tokens(), it.image_id});
        plan.total_len += it.layout.thumb_tokens();
        plan.image_spans[it.image_id] = {first, plan.total_len - 1};
    }
    return plan;
}

// Synthetic stand-in for a ViT: a fixed seed-derived symbol embedding table
// plus per-cell noise. Not trainable.
class SyntheticEncoder {
public:
    SyntheticEncoder(int n_symbols, int d_vit, uint64_t seed) : d_vit_(d_vit), table_(Tensor::matrix(n_symbols, d_vit)) {
        Rng rng(seed ^ 0x5337ea11dead10ccULL);
        for (auto& x : table_.v) x = rng.normal();
    }

    int feature_dim() const { return d_vit_; }

    // background = symbol 0
    SyntheticImage make_image(int rows, int cols, const std::map<std::pair<int, int>, int>& payload,
                              uint64_t image_seed, double noise_scale = 0.05) const {
        SyntheticImage img;
        img.patch_grid = PatchGrid(rows, cols, d_vit_);
        img.payload = payload;
        Rng rng(image_seed);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                int sym = 0;
                auto it = payload.find({r, c});
                if (it != payload.end()) sym = it->second;
                require_arg(sym >= 0 && sym < table_.rows(), "make_image: payload symbol out of range");
                double* dst = img.patch_grid.cell(r, c);
                const double* src = table_.row(sym);
                for (int k = 0; k < d_vit_; ++k) dst[k] = src[k] + noise_scale * rng.normal();
            }
        return img;
    }

private:
    int d_vit_;
    Tensor table_;  // n_symbols x d_vit
};

}  // namespace comemo

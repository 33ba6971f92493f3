#pragma once

#include <functional>
#include <optional>

#include "comemo/rope.hpp"

namespace comemo {

enum class AllocationMode { dhr_s, dhr_x, dhr_b };

inline const char* to_string(AllocationMode m) {
    switch (m) {
        case AllocationMode::dhr_s: return "dhr-s";
        case AllocationMode::dhr_x: return "dhr-x";
        case AllocationMode::dhr_b: return "dhr-b";
    }
    return "?";
}

inline AllocationMode allocation_mode_from(const std::string& s) {
    if (s == "dhr-s") return AllocationMode::dhr_s;
    if (s == "dhr-x") return AllocationMode::dhr_x;
    if (s == "dhr-b") return AllocationMode::dhr_b;
    throw std::invalid_argument("unknown allocation mode: " + s);
}

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 8;
    int mixin_every = 4;
    int vocab_size = 64;
    int d_vit = 32;
    int d_ff = 128;
    int shuffle_factor = 1;
    double rope_theta = 10000.0;
    ImageDetail context_detail = ImageDetail::full;
    ImageDetail memory_detail = ImageDetail::full;
    bool use_memory = true;  // false: gate-free baseline decoder (LVLM-S shape)

    int head_dim() const { return d_model / n_heads; }
    int n_mixin() const { return (n_layers + mixin_every - 1) / mixin_every; }
    int proj_in() const { return d_vit * shuffle_factor * shuffle_factor; }
    RopeConfig rope() const { return {head_dim(), rope_theta}; }

    void apply_allocation(AllocationMode m) {
        switch (m) {
            case AllocationMode::dhr_s:
                context_detail = ImageDetail::full;
                memory_detail = ImageDetail::thumbnail;
                break;
            case AllocationMode::dhr_x:
                context_detail = ImageDetail::thumbnail;
                memory_detail = ImageDetail::full;
                break;
            case AllocationMode::dhr_b:
                context_detail = ImageDetail::full;
                memory_detail = ImageDetail::full;
                break;
        }
    }
};

inline void validate_config(const ModelConfig& cfg) {
    require_arg(cfg.d_model > 0 && cfg.n_heads > 0 && cfg.d_model % cfg.n_heads == 0,
                "ModelConfig: d_model must be divisible by n_heads");
    require_arg(cfg.head_dim() % 2 == 0, "ModelConfig: head_dim must be even for rotary");
    require_arg(cfg.n_layers >= 1 && cfg.mixin_every >= 1, "ModelConfig: n_layers and mixin_every must be positive");
    require_arg(cfg.vocab_size >= 2 && cfg.d_vit >= 1 && cfg.d_ff >= 1, "ModelConfig: bad dims");
    require_arg(cfg.shuffle_factor >= 1, "ModelConfig: shuffle_factor must be >= 1");
}

struct GateState {
    double attn_gate = 0.0;
    double ffw_gate = 0.0;
};

struct BlockParams {
    Tensor attn_norm_g, wq, wk, wv, wo;
    Tensor ffw_norm_g, w1, w2;
};

// Gated cross-attention + gated FFW. Attention reads the raw residual stream
// and raw memory states (so zero projections really are identities); only the
// FFW branch is pre-normed.
struct MixinParams {
    Tensor wq, wk, wv, wo;
    Tensor ffw_norm_g, w1, w2;
    Tensor attn_gate, ffw_gate;  // scalars

    GateState gates() const { return {attn_gate.v[0], ffw_gate.v[0]}; }
};

struct ModelParams {
    ModelConfig cfg;
    Tensor embed;      // vocab x d
    Tensor projector;  // proj_in x d, shared by context and memory paths
    std::vector<BlockParams> blocks;
    std::vector<MixinParams> mixins;
    Tensor final_norm_g;
    Tensor head;  // d x vocab

    template <class F>
    void for_each(F&& f) {
        f("embed", embed);
        f("projector", projector);
        for (size_t i = 0; i < blocks.size(); ++i) {
            std::string p = "blocks." + std::to_string(i) + ".";
            auto& b = blocks[i];
            f(p + "attn_norm.g", b.attn_norm_g);
            f(p + "wq", b.wq);
            f(p + "wk", b.wk);
            f(p + "wv", b.wv);
            f(p + "wo", b.wo);
            f(p + "ffw_norm.g", b.ffw_norm_g);
            f(p + "w1", b.w1);
            f(p + "w2", b.w2);
        }
        for (size_t i = 0; i < mixins.size(); ++i) {
            std::string p = "mixins." + std::to_string(i) + ".";
            auto& m = mixins[i];
            f(p + "wq", m.wq);
            f(p + "wk", m.wk);
            f(p + "wv", m.wv);
            f(p + "wo", m.wo);
            f(p + "ffw_norm.g", m.ffw_norm_g);
            f(p + "w1", m.w1);
            f(p + "w2", m.w2);
            f(p + "attn_gate", m.attn_gate);
            f(p + "ffw_gate", m.ffw_gate);
        }
        f("final_norm.g", final_norm_g);
        f("head", head);
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each([&](const std::string& n, Tensor& t) { f(n, static_cast<const Tensor&>(t)); });
    }

    int tensor_count() const { return 4 + 8 * static_cast<int>(blocks.size()) + 9 * static_cast<int>(mixins.size()); }

    uint64_t param_checksum() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for_each([&](const std::string&, const Tensor& t) { h = fnv1a(t.v.data(), t.v.size() * sizeof(double), h); });
        return h;
    }
};

enum class ParamGroup { embedding, projector, blocks, mixin, gates, head };

inline ParamGroup group_of(const std::string& name) {
    if (name.rfind("embed", 0) == 0) return ParamGroup::embedding;
    if (name.rfind("projector", 0) == 0) return ParamGroup::projector;
    if (name.rfind("mixins.", 0) == 0)
        return name.find("gate") != std::string::npos ? ParamGroup::gates : ParamGroup::mixin;
    if (name.rfind("head", 0) == 0) return ParamGroup::head;
    return ParamGroup::blocks;  // blocks.* and final_norm
}

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::embedding: return "embedding";
        case ParamGroup::projector: return "projector";
        case ParamGroup::blocks: return "blocks";
        case ParamGroup::mixin: return "mixin";
        case ParamGroup::gates: return "gates";
        case ParamGroup::head: return "head";
    }
    return "?";
}

// zero-valued parameter set with the right shapes
inline ModelParams make_params(const ModelConfig& cfg) {
    validate_config(cfg);
    ModelParams p;
    p.cfg = cfg;
    int d = cfg.d_model;
    p.embed = Tensor::matrix(cfg.vocab_size, d);
    p.projector = Tensor::matrix(cfg.proj_in(), d);
    p.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& b : p.blocks) {
        b.attn_norm_g = Tensor({d});
        b.wq = Tensor::matrix(d, d);
        b.wk = Tensor::matrix(d, d);
        b.wv = Tensor::matrix(d, d);
        b.wo = Tensor::matrix(d, d);
        b.ffw_norm_g = Tensor({d});
        b.w1 = Tensor::matrix(d, cfg.d_ff);
        b.w2 = Tensor::matrix(cfg.d_ff, d);
    }
    p.mixins.resize(static_cast<size_t>(cfg.n_mixin()));
    for (auto& m : p.mixins) {
        m.wq = Tensor::matrix(d, d);
        m.wk = Tensor::matrix(d, d);
        m.wv = Tensor::matrix(d, d);
        m.wo = Tensor::matrix(d, d);
        m.ffw_norm_g = Tensor({d});
        m.w1 = Tensor::matrix(d, cfg.d_ff);
        m.w2 = Tensor::matrix(cfg.d_ff, d);
        m.attn_gate = Tensor({1});
        m.ffw_gate = Tensor({1});
    }
    p.final_norm_g = Tensor({d});
    p.head = Tensor::matrix(d, cfg.vocab_size);
    return p;
}

// Deterministic per seed. Gates start at zero so every mixin layer is an
// identity at initialization.
inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams p = make_params(cfg);
    Rng rng(seed);
    auto fill = [&](Tensor& t, double scale) {
        for (auto& x : t.v) x = scale * rng.normal();
    };
    p.for_each([&](const std::string& name, Tensor& t) {
        if (name.find("norm.g") != std::string::npos) {
            std::fill(t.v.begin(), t.v.end(), 1.0);
        } else if (name.find("gate") != std::string::npos) {
            t.zero();
        } else if (name == "embed") {
            fill(t, 0.5);
        } else {
            fill(t, 1.0 / std::sqrt(static_cast<double>(t.rows())));
        }
    });
    return p;
}

struct CrossMask {
    int n_seq = 0;
    int n_mem = 0;
    std::vector<uint8_t> vis;  // n_seq x n_mem

    bool at(int p, int m) const { return vis[static_cast<size_t>(p) * n_mem + m] != 0; }
};

// Visibility: query p sees all memory tokens of image I iff I's insertion
// position (end of its span) is <= p. Per-image blocks are all-or-nothing.
inline CrossMask build_cross_mask(const SequencePlan& plan, const std::vector<int>& mem_counts) {
    std::vector<int> order = plan.image_order();
    require_arg(mem_counts.size() == order.size(), "build_cross_mask: one memory count per image");
    CrossMask m;
    m.n_seq = plan.total_len;
    int total = 0;
    for (int c : mem_counts) total += c;
    m.n_mem = total;
    m.vis.assign(static_cast<size_t>(m.n_seq) * m.n_mem, 0);
    int col = 0;
    for (size_t i = 0; i < order.size(); ++i) {
        const ImageSpan& span = plan.image_spans.at(order[i]);
        for (int p = span.last; p < plan.total_len; ++p)
            for (int c = 0; c < mem_counts[i]; ++c) m.vis[static_cast<size_t>(p) * m.n_mem + col + c] = 1;
        col += mem_counts[i];
    }
    return m;
}

// default: memory tokens are exactly the in-plan image tokens
inline CrossMask build_cross_mask(const SequencePlan& plan) {
    std::vector<int> counts;
    for (int id : plan.image_order()) {
        const ImageSpan& s = plan.image_spans.at(id);
        counts.push_back(s.last - s.first + 1);
    }
    return build_cross_mask(plan, counts);
}

// One fully prepared sequence: layout, position IDs, token ids, targets and
// the feature rows feeding both visual paths.
struct SequenceData {
    SequencePlan plan;
    PositionMap posmap;
    std::vector<int> tokens;        // -1 at image positions
    std::vector<int> targets;       // per position; -1 = no target
    std::vector<uint8_t> loss_mask; // positions contributing to the loss
    Tensor ctx_feats;               // (#image positions) x proj_in
    std::vector<int> feat_row_of;   // position -> ctx_feats row or -1
    Tensor mem_feats;               // M x proj_in
    std::vector<int> mem_pos_ids;   // M
    std::vector<int> mem_image_begin;  // per image, first memory row
    std::vector<int> mem_image_count;  // per image
    std::vector<int> insertion_pos;    // per image, span end index
    CrossMask cross;

    int len() const { return plan.total_len; }
    int n_mem() const { return static_cast<int>(mem_pos_ids.size()); }
};

// Assemble a SequenceData from plan items + images. text_tokens supplies ids
// for the text positions in order; targets/loss_mask start cleared.
inline SequenceData prepare_sequence(const std::vector<PlanItem>& items,
                                     const std::map<int, SyntheticImage>& images, EncodingMode mode,
                                     const ModelConfig& cfg, const std::vector<int>& text_tokens) {
    validate_config(cfg);
    SequenceData sd;
    sd.plan = build_plan(items, cfg.context_detail);
    std::map<int, DhrLayout> layouts;
    for (const auto& it : items)
        if (it.is_image()) layouts[it.image_id] = it.layout;
    sd.posmap = assign_position_ids(sd.plan, layouts, mode);

    // token ids / feature rows per position
    sd.tokens.assign(static_cast<size_t>(sd.plan.total_len), -1);
    sd.targets.assign(static_cast<size_t>(sd.plan.total_len), -1);
    sd.loss_mask.assign(static_cast<size_t>(sd.plan.total_len), 0);
    sd.feat_row_of.assign(static_cast<size_t>(sd.plan.total_len), -1);

    std::map<int, TiledImage> tiled;
    for (const auto& [id, img] : images) {
        require_arg(layouts.count(id), "prepare_sequence: image without plan item");
        tiled[id] = tile_image(img, layouts.at(id));
    }
    for (const auto& [id, l] : layouts)
        require_arg(tiled.count(id), "prepare_sequence: no features for image " + std::to_string(id));
    for (const auto& [id, t] : tiled) {
        int cell_dim = t.thumbnail.dim;
        require_shape(cell_dim == cfg.proj_in(), "prepare_sequence: shuffled feature dim != projector input dim");
    }

    // context features, walking segments
    int n_img_pos = 0;
    for (const auto& s : sd.plan.segments)
        if (s.kind != SegmentKind::text) n_img_pos += s.token_count;
    sd.ctx_feats = Tensor::matrix(n_img_pos, cfg.proj_in());
    {
        int pos = 0, row = 0;
        size_t text_cursor = 0;
        std::map<int, int> tile_cursor;  // image -> tile cells consumed
        for (const auto& s : sd.plan.segments) {
            if (s.kind == SegmentKind::text) {
                for (int t = 0; t < s.token_count; ++t, ++pos) {
                    require_arg(text_cursor < text_tokens.size(), "prepare_sequence: not enough text tokens");
                    sd.tokens[static_cast<size_t>(pos)] = text_tokens[text_cursor++];
                }
                continue;
            }
            const TiledImage& ti = tiled.at(s.image_id);
            const DhrLayout& l = layouts.at(s.image_id);
            for (int t = 0; t < s.token_count; ++t, ++pos, ++row) {
                const double* src;
                if (s.kind == SegmentKind::image_tiles) {
                    int& cur = tile_cursor[s.image_id];
                    int per_tile = l.tokens_per_tile();
                    src = ti.tiles[static_cast<size_t>(cur / per_tile)].data.data() +
                          static_cast<size_t>(cur % per_tile) * cfg.proj_in();
                    ++cur;
                } else {
                    src = ti.thumbnail.data.data() + static_cast<size_t>(t) * cfg.proj_in();
                }
                std::copy(src, src + cfg.proj_in(), sd.ctx_feats.row(row));
                sd.feat_row_of[static_cast<size_t>(pos)] = row;
            }
        }
        require_arg(text_cursor == text_tokens.size(), "prepare_sequence: too many text tokens");
    }

    // memory view: per image, token features + position IDs
    std::vector<int> order = sd.plan.image_order();
    std::vector<std::vector<double>> mem_rows;
    for (int id : order) {
        const TiledImage& ti = tiled.at(id);
        const DhrLayout& l = layouts.at(id);
        const ImageSpan& span = sd.plan.image_spans.at(id);
        int thumb_first = span.last - l.thumb_tokens() + 1;  // thumbnail segment is last in the block
        auto thumb_id = [&](int j) { return sd.posmap.ids[static_cast<size_t>(thumb_first + j)]; };
        sd.mem_image_begin.push_back(static_cast<int>(mem_rows.size()));
        if (cfg.memory_detail == ImageDetail::full) {
            int per_tile = l.tokens_per_tile();
            for (int tile = 0; tile < l.tile_count(); ++tile)
                for (int cell = 0; cell < per_tile; ++cell) {
                    const double* f = ti.tiles[static_cast<size_t>(tile)].data.data() +
                                      static_cast<size_t>(cell) * cfg.proj_in();
                    mem_rows.emplace_back(f, f + cfg.proj_in());
                    int id_of_token;
                    if (cfg.context_detail == ImageDetail::full) {
                        // this token exists in the plan at span.first + tile*per_tile + cell
                        id_of_token = sd.posmap.ids[static_cast<size_t>(span.first + tile * per_tile + cell)];
                    } else {
                        // tiles are memory-only; anchor onto the thumbnail patch
                        int tr = tile / l.tile_cols, tc = tile % l.tile_cols;
                        int gy = tr * l.tile_patch + cell / l.tile_patch;
                        int gx = tc * l.tile_patch + cell % l.tile_patch;
                        auto [ax, ay] = anchor_patch(l, gx, gy);
                        id_of_token = thumb_id(ay * l.thumb_patch + ax);
                    }
                    sd.mem_pos_ids.push_back(id_of_token);
                }
        }
        for (int j = 0; j < l.thumb_tokens(); ++j) {
            const double* f = ti.thumbnail.data.data() + static_cast<size_t>(j) * cfg.proj_in();
            mem_rows.emplace_back(f, f + cfg.proj_in());
            sd.mem_pos_ids.push_back(thumb_id(j));
        }
        sd.mem_image_count.push_back(static_cast<int>(mem_rows.size()) - sd.mem_image_begin.back());
        sd.insertion_pos.push_back(span.last);
    }
    sd.mem_feats = Tensor::matrix(static_cast<int64_t>(mem_rows.size()), cfg.proj_in());
    for (size_t r = 0; r < mem_rows.size(); ++r)
        std::copy(mem_rows[r].begin(), mem_rows[r].end(), sd.mem_feats.row(static_cast<int64_t>(r)));
    sd.cross = build_cross_mask(sd.plan, sd.mem_image_count);
    return sd;
}

// ---------------------------------------------------------------------------
// row-level primitives (shared by prefill and incremental decode so the two
// compute bitwise-identical results)

namespace rowops {

inline constexpr double kRmsEps = 1e-6;

// y = x W, W is (in x out); accumulation over rows ascending
inline void linear(const double* x, const Tensor& w, double* y) {
    int64_t in = w.rows(), out = w.cols();
    std::fill(y, y + out, 0.0);
    for (int64_t r = 0; r < in; ++r) {
        double xr = x[r];
        const double* wr = w.row(r);
        for (int64_t c = 0; c < out; ++c) y[c] += xr * wr[c];
    }
}

// y += grad_out W^T  (grad wrt x); and dW += x^T grad_out
inline void linear_backward(const double* x, const Tensor& w, const double* dy, double* dx_accum, Tensor& dw) {
    int64_t in = w.rows(), out = w.cols();
    for (int64_t r = 0; r < in; ++r) {
        const double* wr = w.row(r);
        double* dwr = dw.row(r);
        double acc = 0.0;
        double xr = x[r];
        for (int64_t c = 0; c < out; ++c) {
            acc += dy[c] * wr[c];
            dwr[c] += xr * dy[c];
        }
        dx_accum[r] += acc;
    }
}

inline double rms_of(const double* x, int d) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += x[i] * x[i];
    return std::sqrt(acc / d + kRmsEps);
}

inline void rmsnorm(const double* x, const Tensor& g, int d, double* y, double* rms_out) {
    double r = rms_of(x, d);
    for (int i = 0; i < d; ++i) y[i] = x[i] * g.v[static_cast<size_t>(i)] / r;
    if (rms_out) *rms_out = r;
}

// dx += backward(dy); dg accumulated
inline void rmsnorm_backward(const double* x, const Tensor& g, int d, double rms, const double* dy, double* dx_accum,
                             Tensor& dg) {
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += dy[i] * g.v[static_cast<size_t>(i)] * x[i];
    double r3 = rms * rms * rms;
    for (int i = 0; i < d; ++i) {
        dx_accum[i] += dy[i] * g.v[static_cast<size_t>(i)] / rms - x[i] * dot / (d * r3);
        dg.v[static_cast<size_t>(i)] += dy[i] * x[i] / rms;
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

// rotary over n_heads contiguous head_dim groups
inline void rotate_heads(double* row, int n_heads, double pos, const RopeConfig& rope) {
    for (int h = 0; h < n_heads; ++h)
        apply_rotary_inplace(std::span<double>(row + static_cast<size_t>(h) * rope.head_dim,
                                               static_cast<size_t>(rope.head_dim)),
                             pos, rope);
}

}  // namespace rowops

// ---------------------------------------------------------------------------
// forward cache (recorded during prefill for the backward pass)

struct BlockCache {
    Tensor x_in;             // L x d residual stream entering the block
    Tensor n1;               // L x d
    std::vector<double> rms1;
    Tensor q, k, v;          // L x d (q, k rotated)
    std::vector<Tensor> probs;  // per head, L x L lower-triangular
    Tensor ao;               // L x d concat head outputs
    Tensor x_mid;            // L x d after attention residual
    Tensor n2;               // L x d
    std::vector<double> rms2;
    Tensor u;                // L x dff pre-gelu
    Tensor gact;             // L x dff
};

struct MixinCache {
    Tensor x_in;                // L x d
    Tensor q;                   // L x d rotated
    Tensor mk, mv;              // M x d rotated memory keys / values
    std::vector<Tensor> probs;  // per head, L x M
    Tensor ao;                  // L x d
    Tensor co;                  // L x d cross output (post wo)
    Tensor x_mid;               // L x d after gated attention residual
    Tensor n3;                  // L x d
    std::vector<double> rms3;
    Tensor u, gact;             // L x dff
    Tensor fo;                  // L x d ffw output (pre-gate)
};

struct ForwardCache {
    Tensor x0;        // L x d embedded context input
    Tensor bank;      // M x d projected memory states
    std::vector<BlockCache> blocks;
    std::vector<MixinCache> mixins;  // indexed by mixin ordinal
    Tensor xf;        // L x d residual stream entering the final norm
    Tensor nf;        // L x d
    std::vector<double> rmsf;
    Tensor logits;    // L x vocab
};

struct RunOptions {
    bool want_cache = false;
    std::optional<bool> use_memory;  // override cfg.use_memory (baseline comparisons)
};

// Projected image hidden states plus their rotary position IDs; computed once
// per prompt, immutable during decoding.
struct MemoryBank {
    Tensor states;             // M x d
    std::vector<int> pos_ids;  // M
    std::vector<Tensor> k_rot; // per mixin, M x d rotated keys
    std::vector<Tensor> v;     // per mixin, M x d values
};

inline MemoryBank build_memory_bank(const ModelParams& params, const SequenceData& seq, bool with_mixin_kv = true) {
    const ModelConfig& cfg = params.cfg;
    int64_t m_count = seq.mem_feats.rows();
    MemoryBank bank;
    bank.states = Tensor::matrix(m_count, cfg.d_model);
    for (int64_t m = 0; m < m_count; ++m) rowops::linear(seq.mem_feats.row(m), params.projector, bank.states.row(m));
    bank.pos_ids = seq.mem_pos_ids;
    if (!with_mixin_kv) return bank;
    RopeConfig rope = cfg.rope();
    for (const MixinParams& mp : params.mixins) {
        Tensor k = Tensor::matrix(m_count, cfg.d_model);
        Tensor v = Tensor::matrix(m_count, cfg.d_model);
        for (int64_t m = 0; m < m_count; ++m) {
            rowops::linear(bank.states.row(m), mp.wk, k.row(m));
            rowops::rotate_heads(k.row(m), cfg.n_heads, static_cast<double>(bank.pos_ids[static_cast<size_t>(m)]), rope);
            rowops::linear(bank.states.row(m), mp.wv, v.row(m));
        }
        bank.k_rot.push_back(std::move(k));
        bank.v.push_back(std::move(v));
    }
    return bank;
}

// Single mixin layer applied to explicit inputs (Algorithm-1 shape):
//   h <- h + tanh(attn_gate) * cross_attn(q=h, kv=mem; rotary at pos_s/pos_i)
//   h <- h + tanh(ffw_gate) * ffw(prenorm(h))
// Rows whose mask row is all-false get a zero attention term. probs_out, if
// given, receives the per-head attention weights (n_seq x n_mem each).
inline Tensor mixin_forward(const Tensor& h_s, const Tensor& h_i, const MixinParams& mp, const std::vector<int>& pos_s,
                            const std::vector<int>& pos_i, const CrossMask& mask, int n_heads, const RopeConfig& rope,
                            std::vector<Tensor>* probs_out = nullptr) {
    int64_t n_seq = h_s.rows(), n_mem = h_i.rows();
    int d = static_cast<int>(h_s.cols());
    require_shape(n_seq == static_cast<int64_t>(pos_s.size()) && n_mem == static_cast<int64_t>(pos_i.size()),
                  "mixin_forward: positions must match row counts");
    require_shape(mask.n_seq == n_seq && mask.n_mem == n_mem, "mixin_forward: mask shape mismatch");
    int dh = d / n_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    double t_attn = std::tanh(mp.attn_gate.v[0]);
    double t_ffw = std::tanh(mp.ffw_gate.v[0]);

    Tensor k(Tensor::matrix(n_mem, d)), v(Tensor::matrix(n_mem, d));
    for (int64_t m = 0; m < n_mem; ++m) {
        rowops::linear(h_i.row(m), mp.wk, k.row(m));
        rowops::rotate_heads(k.row(m), n_heads, static_cast<double>(pos_i[static_cast<size_t>(m)]), rope);
        rowops::linear(h_i.row(m), mp.wv, v.row(m));
    }

    if (probs_out) probs_out->assign(static_cast<size_t>(n_heads), Tensor::matrix(n_seq, std::max<int64_t>(n_mem, 1)));
    Tensor out = h_s;
    std::vector<double> qrow(static_cast<size_t>(d)), ao(static_cast<size_t>(d)), co(static_cast<size_t>(d));
    for (int64_t i = 0; i < n_seq; ++i) {
        rowops::linear(h_s.row(i), mp.wq, qrow.data());
        rowops::rotate_heads(qrow.data(), n_heads, static_cast<double>(pos_s[static_cast<size_t>(i)]), rope);
        std::fill(ao.begin(), ao.end(), 0.0);
        for (int h = 0; h < n_heads; ++h) {
            const double* qh = qrow.data() + static_cast<size_t>(h) * dh;
            double best = -std::numeric_limits<double>::infinity();
            for (int64_t m = 0; m < n_mem; ++m) {
                if (!mask.at(static_cast<int>(i), static_cast<int>(m))) continue;
                const double* kh = k.row(m) + static_cast<size_t>(h) * dh;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                best = std::max(best, s * scale);
            }
            if (best == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
            double denom = 0.0;
            std::vector<double> p(static_cast<size_t>(n_mem), 0.0);
            for (int64_t m = 0; m < n_mem; ++m) {
                if (!mask.at(static_cast<int>(i), static_cast<int>(m))) continue;
                const double* kh = k.row(m) + static_cast<size_t>(h) * dh;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                p[static_cast<size_t>(m)] = std::exp(s * scale - best);
                denom += p[static_cast<size_t>(m)];
            }
            double* aoh = ao.data() + static_cast<size_t>(h) * dh;
            for (int64_t m = 0; m < n_mem; ++m) {
                if (!mask.at(static_cast<int>(i), static_cast<int>(m))) continue;
                double w = p[static_cast<size_t>(m)] / denom;
                if (probs_out) (*probs_out)[static_cast<size_t>(h)].at(i, m) = w;
                const double* vh = v.row(m) + static_cast<size_t>(h) * dh;
                for (int c = 0; c < dh; ++c) aoh[c] += w * vh[c];
            }
        }
        rowops::linear(ao.data(), mp.wo, co.data());
        for (int c = 0; c < d; ++c) out.at(i, c) += t_attn * co[c];
    }
    // gated FFW on the updated stream
    std::vector<double> n3(static_cast<size_t>(d)), u(static_cast<size_t>(mp.w1.cols())), fo(static_cast<size_t>(d));
    for (int64_t i = 0; i < n_seq; ++i) {
        rowops::rmsnorm(out.row(i), mp.ffw_norm_g, d, n3.data(), nullptr);
        rowops::linear(n3.data(), mp.w1, u.data());
        for (auto& x : u) x = rowops::gelu(x);
        rowops::linear(u.data(), mp.w2, fo.data());
        for (int c = 0; c < d; ++c) out.at(i, c) += t_ffw * fo[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// the decoder run: incremental by construction; prefill == step-by-step

class ModelRun {
public:
    ModelRun(const ModelParams& params, const SequenceData& seq, RunOptions opts = {})
        : params_(params), cfg_(params.cfg), seq_(seq), opts_(opts), rope_(cfg_.rope()) {
        use_memory_ = opts.use_memory.value_or(cfg_.use_memory);
        if (use_memory_) bank_ = build_memory_bank(params_, seq_);
        kc_.resize(static_cast<size_t>(cfg_.n_layers));
        vc_.resize(static_cast<size_t>(cfg_.n_layers));
        if (opts_.want_cache) init_cache();
    }

    // runs every plan row; returns logits (L x vocab)
    Tensor prefill() {
        int L = seq_.len();
        Tensor logits = Tensor::matrix(L, cfg_.vocab_size);
        std::vector<double> x(static_cast<size_t>(cfg_.d_model));
        for (int p = 0; p < L; ++p) {
            embed_row(p, x.data());
            process_row(x.data(), seq_.posmap.ids[static_cast<size_t>(p)], p, logits.row(p));
        }
        if (opts_.want_cache) cache_.logits = logits;
        return logits;
    }

    // one generated token; pos_id per the decode contract
    std::vector<double> step(int token, int pos_id) {
        std::vector<double> x(static_cast<size_t>(cfg_.d_model));
        const double* e = params_.embed.row(token);
        std::copy(e, e + cfg_.d_model, x.begin());
        std::vector<double> logits(static_cast<size_t>(cfg_.vocab_size));
        process_row(x.data(), pos_id, rows_, logits.data());
        return logits;
    }

    const ForwardCache& cache() const { return cache_; }
    ForwardCache& mutable_cache() { return cache_; }
    const MemoryBank& bank() const { return bank_; }
    bool memory_enabled() const { return use_memory_ && bank_.states.rows() > 0; }

private:
    bool mixin_after(int block) const { return use_memory_ && block % cfg_.mixin_every == 0; }
    int mixin_ordinal(int block) const { return block / cfg_.mixin_every; }

    void embed_row(int p, double* x) {
        int fr = seq_.feat_row_of[static_cast<size_t>(p)];
        if (fr >= 0) {
            rowops::linear(seq_.ctx_feats.row(fr), params_.projector, x);
        } else {
            int tok = seq_.tokens[static_cast<size_t>(p)];
            require_arg(tok >= 0 && tok < cfg_.vocab_size, "token id out of range at position " + std::to_string(p));
            const double* e = params_.embed.row(tok);
            std::copy(e, e + cfg_.d_model, x);
        }
        if (opts_.want_cache) std::copy(x, x + cfg_.d_model, cache_.x0.row(p));
    }

    bool mem_visible(int seq_idx, int m) const {
        if (seq_idx >= seq_.len()) return true;  // generated tokens see every inserted image
        return seq_.cross.at(seq_idx, m);
    }

    // the per-token pipeline; appends to KV caches and (optionally) records
    void process_row(double* x, int pos_id, int seq_idx, double* logits_out) {
        int d = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.head_dim();
        double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        bool rec = opts_.want_cache && seq_idx < seq_.len();
        std::vector<double> n1(static_cast<size_t>(d)), qrow(static_cast<size_t>(d)), krow(static_cast<size_t>(d)),
            vrow(static_cast<size_t>(d)), ao(static_cast<size_t>(d)), attn(static_cast<size_t>(d)),
            n2(static_cast<size_t>(d)), u(static_cast<size_t>(cfg_.d_ff)), f(static_cast<size_t>(d));
        for (int b = 0; b < cfg_.n_layers; ++b) {
            BlockCache* bc = rec ? &cache_.blocks[static_cast<size_t>(b)] : nullptr;
            if (bc) std::copy(x, x + d, bc->x_in.row(seq_idx));
            const BlockParams& bp = params_.blocks[static_cast<size_t>(b)];
            double rms1;
            rowops::rmsnorm(x, bp.attn_norm_g, d, n1.data(), &rms1);
            rowops::linear(n1.data(), bp.wq, qrow.data());
            rowops::linear(n1.data(), bp.wk, krow.data());
            rowops::linear(n1.data(), bp.wv, vrow.data());
            rowops::rotate_heads(qrow.data(), H, static_cast<double>(pos_id), rope_);
            rowops::rotate_heads(krow.data(), H, static_cast<double>(pos_id), rope_);
            auto& kc = kc_[static_cast<size_t>(b)];
            auto& vc = vc_[static_cast<size_t>(b)];
            kc.insert(kc.end(), krow.begin(), krow.end());
            vc.insert(vc.end(), vrow.begin(), vrow.end());
            int n_keys = static_cast<int>(kc.size()) / d;
            if (bc) {
                std::copy(n1.begin(), n1.end(), bc->n1.row(seq_idx));
                bc->rms1[static_cast<size_t>(seq_idx)] = rms1;
                std::copy(qrow.begin(), qrow.end(), bc->q.row(seq_idx));
                std::copy(krow.begin(), krow.end(), bc->k.row(seq_idx));
                std::copy(vrow.begin(), vrow.end(), bc->v.row(seq_idx));
            }
            std::fill(ao.begin(), ao.end(), 0.0);
            for (int h = 0; h < H; ++h) {
                const double* qh = qrow.data() + static_cast<size_t>(h) * dh;
                double best = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < n_keys; ++j) {
                    const double* kh = kc.data() + static_cast<size_t>(j) * d + static_cast<size_t>(h) * dh;
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                    best = std::max(best, s * scale);
                }
                double denom = 0.0;
                std::vector<double> p(static_cast<size_t>(n_keys));
                for (int j = 0; j < n_keys; ++j) {
                    const double* kh = kc.data() + static_cast<size_t>(j) * d + static_cast<size_t>(h) * dh;
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                    p[static_cast<size_t>(j)] = std::exp(s * scale - best);
                    denom += p[static_cast<size_t>(j)];
                }
                double* aoh = ao.data() + static_cast<size_t>(h) * dh;
                for (int j = 0; j < n_keys; ++j) {
                    double w = p[static_cast<size_t>(j)] / denom;
                    if (bc) bc->probs[static_cast<size_t>(h)].at(seq_idx, j) = w;
                    const double* vh = vc.data() + static_cast<size_t>(j) * d + static_cast<size_t>(h) * dh;
                    for (int c = 0; c < dh; ++c) aoh[c] += w * vh[c];
                }
            }
            rowops::linear(ao.data(), bp.wo, attn.data());
            for (int c = 0; c < d; ++c) x[c] += attn[c];
            if (bc) {
                std::copy(ao.begin(), ao.end(), bc->ao.row(seq_idx));
                std::copy(x, x + d, bc->x_mid.row(seq_idx));
            }
            double rms2;
            rowops::rmsnorm(x, bp.ffw_norm_g, d, n2.data(), &rms2);
            rowops::linear(n2.data(), bp.w1, u.data());
            if (bc) {
                std::copy(n2.begin(), n2.end(), bc->n2.row(seq_idx));
                bc->rms2[static_cast<size_t>(seq_idx)] = rms2;
                std::copy(u.begin(), u.end(), bc->u.row(seq_idx));
            }
            for (auto& z : u) z = rowops::gelu(z);
            if (bc) std::copy(u.begin(), u.end(), bc->gact.row(seq_idx));
            rowops::linear(u.data(), bp.w2, f.data());
            for (int c = 0; c < d; ++c) x[c] += f[c];
            if (mixin_after(b)) mixin_row(x, pos_id, seq_idx, mixin_ordinal(b), rec);
        }
        if (rec) std::copy(x, x + d, cache_.xf.row(seq_idx));
        double rmsf;
        rowops::rmsnorm(x, params_.final_norm_g, d, n1.data(), &rmsf);
        if (rec) {
            std::copy(n1.begin(), n1.end(), cache_.nf.row(seq_idx));
            cache_.rmsf[static_cast<size_t>(seq_idx)] = rmsf;
        }
        rowops::linear(n1.data(), params_.head, logits_out);
        ++rows_;
    }

    void mixin_row(double* x, int pos_id, int seq_idx, int ordinal, bool rec) {
        int d = cfg_.d_model, H = cfg_.n_heads, dh = cfg_.head_dim();
        double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const MixinParams& mp = params_.mixins[static_cast<size_t>(ordinal)];
        MixinCache* mc = rec ? &cache_.mixins[static_cast<size_t>(ordinal)] : nullptr;
        if (mc) std::copy(x, x + d, mc->x_in.row(seq_idx));
        int M = static_cast<int>(bank_.pos_ids.size());
        double t_attn = std::tanh(mp.attn_gate.v[0]);
        double t_ffw = std::tanh(mp.ffw_gate.v[0]);
        std::vector<double> qrow(static_cast<size_t>(d)), ao(static_cast<size_t>(d), 0.0), co(static_cast<size_t>(d));
        rowops::linear(x, mp.wq, qrow.data());
        rowops::rotate_heads(qrow.data(), H, static_cast<double>(pos_id), rope_);
        if (mc) std::copy(qrow.begin(), qrow.end(), mc->q.row(seq_idx));
        const Tensor& k = bank_.k_rot[static_cast<size_t>(ordinal)];
        const Tensor& v = bank_.v[static_cast<size_t>(ordinal)];
        for (int h = 0; h < H; ++h) {
            const double* qh = qrow.data() + static_cast<size_t>(h) * dh;
            double best = -std::numeric_limits<double>::infinity();
            for (int m = 0; m < M; ++m) {
                if (!mem_visible(seq_idx, m)) continue;
                const double* kh = k.row(m) + static_cast<size_t>(h) * dh;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                best = std::max(best, s * scale);
            }
            if (best == -std::numeric_limits<double>::infinity()) continue;
            double denom = 0.0;
            std::vector<double> p(static_cast<size_t>(M), 0.0);
            for (int m = 0; m < M; ++m) {
                if (!mem_visible(seq_idx, m)) continue;
                const double* kh = k.row(m) + static_cast<size_t>(h) * dh;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += qh[c] * kh[c];
                p[static_cast<size_t>(m)] = std::exp(s * scale - best);
                denom += p[static_cast<size_t>(m)];
            }
            double* aoh = ao.data() + static_cast<size_t>(h) * dh;
            for (int m = 0; m < M; ++m) {
                if (!mem_visible(seq_idx, m)) continue;
                double w = p[static_cast<size_t>(m)] / denom;
                if (mc) mc->probs[static_cast<size_t>(h)].at(seq_idx, m) = w;
                const double* vh = v.row(m) + static_cast<size_t>(h) * dh;
                for (int c = 0; c < dh; ++c) aoh[c] += w * vh[c];
            }
        }
        rowops::linear(ao.data(), mp.wo, co.data());
        for (int c = 0; c < d; ++c) x[c] += t_attn * co[c];
        if (mc) {
            std::copy(ao.begin(), ao.end(), mc->ao.row(seq_idx));
            std::copy(co.begin(), co.end(), mc->co.row(seq_idx));
            std::copy(x, x + d, mc->x_mid.row(seq_idx));
        }
        std::vector<double> n3(static_cast<size_t>(d)), u(static_cast<size_t>(cfg_.d_ff)), fo(static_cast<size_t>(d));
        double rms3;
        rowops::rmsnorm(x, mp.ffw_norm_g, d, n3.data(), &rms3);
        rowops::linear(n3.data(), mp.w1, u.data());
        if (mc) {
            std::copy(n3.begin(), n3.end(), mc->n3.row(seq_idx));
            mc->rms3[static_cast<size_t>(seq_idx)] = rms3;
            std::copy(u.begin(), u.end(), mc->u.row(seq_idx));
        }
        for (auto& z : u) z = rowops::gelu(z);
        if (mc) std::copy(u.begin(), u.end(), mc->gact.row(seq_idx));
        rowops::linear(u.data(), mp.w2, fo.data());
        for (int c = 0; c < d; ++c) x[c] += t_ffw * fo[c];
        if (mc) std::copy(fo.begin(), fo.end(), mc->fo.row(seq_idx));
    }

    void init_cache() {
        int L = seq_.len(), d = cfg_.d_model, dff = cfg_.d_ff;
        cache_.x0 = Tensor::matrix(L, d);
        cache_.blocks.resize(static_cast<size_t>(cfg_.n_layers));
        for (auto& bc : cache_.blocks) {
            bc.x_in = Tensor::matrix(L, d);
            bc.n1 = Tensor::matrix(L, d);
            bc.rms1.assign(static_cast<size_t>(L), 0.0);
            bc.q = Tensor::matrix(L, d);
            bc.k = Tensor::matrix(L, d);
            bc.v = Tensor::matrix(L, d);
            bc.probs.assign(static_cast<size_t>(cfg_.n_heads), Tensor::matrix(L, L));
            bc.ao = Tensor::matrix(L, d);
            bc.x_mid = Tensor::matrix(L, d);
            bc.n2 = Tensor::matrix(L, d);
            bc.rms2.assign(static_cast<size_t>(L), 0.0);
            bc.u = Tensor::matrix(L, dff);
            bc.gact = Tensor::matrix(L, dff);
        }
        if (use_memory_) {
            int M = seq_.n_mem();
            cache_.bank = bank_.states;
            cache_.mixins.resize(static_cast<size_t>(cfg_.n_mixin()));
            for (size_t j = 0; j < cache_.mixins.size(); ++j) {
                cache_.mixins[j].mk = bank_.k_rot[j];
                cache_.mixins[j].mv = bank_.v[j];
            }
            for (auto& m : cache_.mixins) {
                m.x_in = Tensor::matrix(L, d);
                m.q = Tensor::matrix(L, d);
                m.probs.assign(static_cast<size_t>(cfg_.n_heads), Tensor::matrix(L, std::max(M, 1)));
                m.ao = Tensor::matrix(L, d);
                m.co = Tensor::matrix(L, d);
                m.x_mid = Tensor::matrix(L, d);
                m.n3 = Tensor::matrix(L, d);
                m.rms3.assign(static_cast<size_t>(L), 0.0);
                m.u = Tensor::matrix(L, dff);
                m.gact = Tensor::matrix(L, dff);
                m.fo = Tensor::matrix(L, d);
            }
        }
        cache_.xf = Tensor::matrix(L, d);
        cache_.nf = Tensor::matrix(L, d);
        cache_.rmsf.assign(static_cast<size_t>(L), 0.0);
    }

    const ModelParams& params_;
    ModelConfig cfg_;
    const SequenceData& seq_;
    RunOptions opts_;
    RopeConfig rope_;
    bool use_memory_ = true;
    MemoryBank bank_;
    std::vector<std::vector<double>> kc_, vc_;  // per block rotated keys/values
    ForwardCache cache_;
    int rows_ = 0;
};

// causal dual-path forward over a full prepared sequence
inline Tensor model_forward(const ModelParams& params, const SequenceData& seq, ForwardCache* cache = nullptr,
                            std::optional<bool> use_memory = std::nullopt) {
    require_shape(static_cast<int>(seq.posmap.ids.size()) == seq.plan.total_len,
                  "model_forward: posmap not aligned to plan");
    RunOptions opts;
    opts.want_cache = cache != nullptr;
    opts.use_memory = use_memory;
    ModelRun run(params, seq, opts);
    Tensor logits = run.prefill();
    if (cache) *cache = std::move(run.mutable_cache());
    return logits;
}

// ---------------------------------------------------------------------------
// backward

// Gradients of the scalar loss wrt all parameters, accumulated into `grads`
// (same shapes as `params`, typically zero-initialized by the caller).
// Optionally also reports per-input-position gradient L2 norms.
inline void model_backward(const ModelParams& params, const SequenceData& seq, const ForwardCache& cache,
                           const Tensor& dlogits, ModelParams& grads, std::vector<double>* input_grad_norm = nullptr,
                           std::optional<bool> use_memory = std::nullopt) {
    const ModelConfig& cfg = params.cfg;
    bool memory = use_memory.value_or(cfg.use_memory);
    int L = seq.len(), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim(), dff = cfg.d_ff;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    RopeConfig rope = cfg.rope();
    int M = memory ? static_cast<int>(cache.bank.rows()) : 0;

    Tensor dx = Tensor::matrix(L, d);  // gradient flowing down the residual stream
    for (int p = 0; p < L; ++p) {
        std::vector<double> dnf(static_cast<size_t>(d), 0.0);
        rowops::linear_backward(cache.nf.row(p), params.head, dlogits.row(p), dnf.data(), grads.head);
        rowops::rmsnorm_backward(cache.xf.row(p), params.final_norm_g, d, cache.rmsf[static_cast<size_t>(p)],
                                 dnf.data(), dx.row(p), grads.final_norm_g);
    }

    Tensor dbank = Tensor::matrix(std::max(M, 1), d);

    auto mixin_backward = [&](int ordinal) {
        const MixinParams& mp = params.mixins[static_cast<size_t>(ordinal)];
        MixinParams& mg = grads.mixins[static_cast<size_t>(ordinal)];
        const MixinCache& mc = cache.mixins[static_cast<size_t>(ordinal)];
        double t_attn = std::tanh(mp.attn_gate.v[0]);
        double t_ffw = std::tanh(mp.ffw_gate.v[0]);
        double sech2_a = 1.0 - t_attn * t_attn;
        double sech2_f = 1.0 - t_ffw * t_ffw;
        // gated FFW: out = x_mid + tanh(fg) * fo
        Tensor dxmid = Tensor::matrix(L, d);
        std::vector<double> dfo(static_cast<size_t>(d)), dg(static_cast<size_t>(dff)), du(static_cast<size_t>(dff)),
            dn3(static_cast<size_t>(d));
        for (int p = 0; p < L; ++p) {
            const double* dout = dx.row(p);
            double gf = 0.0;
            for (int c = 0; c < d; ++c) gf += dout[c] * mc.fo.at(p, c);
            mg.ffw_gate.v[0] += sech2_f * gf;
            for (int c = 0; c < d; ++c) dfo[static_cast<size_t>(c)] = dout[c] * t_ffw;
            std::fill(dg.begin(), dg.end(), 0.0);
            std::fill(dn3.begin(), dn3.end(), 0.0);
            rowops::linear_backward(mc.gact.row(p), mp.w2, dfo.data(), dg.data(), mg.w2);
            for (int c = 0; c < dff; ++c)
                du[static_cast<size_t>(c)] = dg[static_cast<size_t>(c)] * rowops::gelu_grad(mc.u.at(p, c));
            rowops::linear_backward(mc.n3.row(p), mp.w1, du.data(), dn3.data(), mg.w1);
            std::copy(dout, dout + d, dxmid.row(p));
            rowops::rmsnorm_backward(mc.x_mid.row(p), mp.ffw_norm_g, d, mc.rms3[static_cast<size_t>(p)], dn3.data(),
                                     dxmid.row(p), mg.ffw_norm_g);
        }
        // gated cross attention: x_mid = x_in + tanh(ag) * (ao @ wo)
        if (M > 0) {
            Tensor dqr = Tensor::matrix(L, d);
            Tensor dkr = Tensor::matrix(M, d), dvv = Tensor::matrix(M, d);
            std::vector<double> dco(static_cast<size_t>(d)), dao(static_cast<size_t>(d));
            for (int p = 0; p < L; ++p) {
                const double* dxm = dxmid.row(p);
                double ga = 0.0;
                for (int c = 0; c < d; ++c) ga += dxm[c] * mc.co.at(p, c);
                mg.attn_gate.v[0] += sech2_a * ga;
                for (int c = 0; c < d; ++c) dco[static_cast<size_t>(c)] = dxm[c] * t_attn;
                std::fill(dao.begin(), dao.end(), 0.0);
                rowops::linear_backward(mc.ao.row(p), mp.wo, dco.data(), dao.data(), mg.wo);
                for (int h = 0; h < H; ++h) {
                    const Tensor& probs = mc.probs[static_cast<size_t>(h)];
                    const double* daoh = dao.data() + static_cast<size_t>(h) * dh;
                    const double* qh = mc.q.row(p) + static_cast<size_t>(h) * dh;
                    double* dqh = dqr.row(p) + static_cast<size_t>(h) * dh;
                    std::vector<double> dp(static_cast<size_t>(M), 0.0);
                    double dot = 0.0;
                    for (int m = 0; m < M; ++m) {
                        if (!seq.cross.at(p, m)) continue;
                        const double* vh = mc.mv.row(m) + static_cast<size_t>(h) * dh;
                        double acc = 0.0;
                        for (int c = 0; c < dh; ++c) acc += daoh[c] * vh[c];
                        dp[static_cast<size_t>(m)] = acc;
                        double w = probs.at(p, m);
                        dot += w * acc;
                        double* dvh = dvv.row(m) + static_cast<size_t>(h) * dh;
                        for (int c = 0; c < dh; ++c) dvh[c] += w * daoh[c];
                    }
                    for (int m = 0; m < M; ++m) {
                        if (!seq.cross.at(p, m)) continue;
                        double ds = probs.at(p, m) * (dp[static_cast<size_t>(m)] - dot) * scale;
                        const double* kh = mc.mk.row(m) + static_cast<size_t>(h) * dh;
                        for (int c = 0; c < dh; ++c) dqh[c] += ds * kh[c];
                        double* dkh = dkr.row(m) + static_cast<size_t>(h) * dh;
                        for (int c = 0; c < dh; ++c) dkh[c] += ds * qh[c];
                    }
                }
            }
            for (int p = 0; p < L; ++p) {
                rowops::rotate_heads(dqr.row(p), H, -static_cast<double>(seq.posmap.ids[static_cast<size_t>(p)]),
                                     rope);
                std::copy(dxmid.row(p), dxmid.row(p) + d, dx.row(p));
                rowops::linear_backward(mc.x_in.row(p), mp.wq, dqr.row(p), dx.row(p), mg.wq);
            }
            for (int m = 0; m < M; ++m) {
                rowops::rotate_heads(dkr.row(m), H, -static_cast<double>(seq.mem_pos_ids[static_cast<size_t>(m)]),
                                     rope);
                rowops::linear_backward(cache.bank.row(m), mp.wk, dkr.row(m), dbank.row(m), mg.wk);
                rowops::linear_backward(cache.bank.row(m), mp.wv, dvv.row(m), dbank.row(m), mg.wv);
            }
        } else {
            for (int p = 0; p < L; ++p) std::copy(dxmid.row(p), dxmid.row(p) + d, dx.row(p));
        }
    };

    auto block_backward = [&](int b) {
        const BlockParams& bp = params.blocks[static_cast<size_t>(b)];
        BlockParams& bg = grads.blocks[static_cast<size_t>(b)];
        const BlockCache& bc = cache.blocks[static_cast<size_t>(b)];
        // FFW: x_out = x_mid + gelu(rmsnorm(x_mid) @ w1) @ w2
        Tensor dxmid = Tensor::matrix(L, d);
        std::vector<double> dg(static_cast<size_t>(dff)), du(static_cast<size_t>(dff)), dn2(static_cast<size_t>(d));
        for (int p = 0; p < L; ++p) {
            std::fill(dg.begin(), dg.end(), 0.0);
            std::fill(dn2.begin(), dn2.end(), 0.0);
            rowops::linear_backward(bc.gact.row(p), bp.w2, dx.row(p), dg.data(), bg.w2);
            for (int c = 0; c < dff; ++c)
                du[static_cast<size_t>(c)] = dg[static_cast<size_t>(c)] * rowops::gelu_grad(bc.u.at(p, c));
            rowops::linear_backward(bc.n2.row(p), bp.w1, du.data(), dn2.data(), bg.w1);
            std::copy(dx.row(p), dx.row(p) + d, dxmid.row(p));
            rowops::rmsnorm_backward(bc.x_mid.row(p), bp.ffw_norm_g, d, bc.rms2[static_cast<size_t>(p)], dn2.data(),
                                     dxmid.row(p), bg.ffw_norm_g);
        }
        // causal self attention
        Tensor dqr = Tensor::matrix(L, d), dkr = Tensor::matrix(L, d), dvv = Tensor::matrix(L, d);
        std::vector<double> dao(static_cast<size_t>(d));
        for (int p = 0; p < L; ++p) {
            std::fill(dao.begin(), dao.end(), 0.0);
            rowops::linear_backward(bc.ao.row(p), bp.wo, dxmid.row(p), dao.data(), bg.wo);
            for (int h = 0; h < H; ++h) {
                const Tensor& probs = bc.probs[static_cast<size_t>(h)];
                const double* daoh = dao.data() + static_cast<size_t>(h) * dh;
                const double* qh = bc.q.row(p) + static_cast<size_t>(h) * dh;
                double* dqh = dqr.row(p) + static_cast<size_t>(h) * dh;
                std::vector<double> dp(static_cast<size_t>(p) + 1, 0.0);
                double dot = 0.0;
                for (int j = 0; j <= p; ++j) {
                    const double* vh = bc.v.row(j) + static_cast<size_t>(h) * dh;
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c) acc += daoh[c] * vh[c];
                    dp[static_cast<size_t>(j)] = acc;
                    double w = probs.at(p, j);
                    dot += w * acc;
                    double* dvh = dvv.row(j) + static_cast<size_t>(h) * dh;
                    for (int c = 0; c < dh; ++c) dvh[c] += w * daoh[c];
                }
                for (int j = 0; j <= p; ++j) {
                    double ds = probs.at(p, j) * (dp[static_cast<size_t>(j)] - dot) * scale;
                    const double* kh = bc.k.row(j) + static_cast<size_t>(h) * dh;
                    for (int c = 0; c < dh; ++c) dqh[c] += ds * kh[c];
                    double* dkh = dkr.row(j) + static_cast<size_t>(h) * dh;
                    for (int c = 0; c < dh; ++c) dkh[c] += ds * qh[c];
                }
            }
        }
        std::vector<double> dn1(static_cast<size_t>(d));
        for (int p = 0; p < L; ++p) {
            double pos = static_cast<double>(seq.posmap.ids[static_cast<size_t>(p)]);
            rowops::rotate_heads(dqr.row(p), H, -pos, rope);
            rowops::rotate_heads(dkr.row(p), H, -pos, rope);
            std::fill(dn1.begin(), dn1.end(), 0.0);
            rowops::linear_backward(bc.n1.row(p), bp.wq, dqr.row(p), dn1.data(), bg.wq);
            rowops::linear_backward(bc.n1.row(p), bp.wk, dkr.row(p), dn1.data(), bg.wk);
            rowops::linear_backward(bc.n1.row(p), bp.wv, dvv.row(p), dn1.data(), bg.wv);
            std::copy(dxmid.row(p), dxmid.row(p) + d, dx.row(p));
            rowops::rmsnorm_backward(bc.x_in.row(p), bp.attn_norm_g, d, bc.rms1[static_cast<size_t>(p)], dn1.data(),
                                     dx.row(p), bg.attn_norm_g);
        }
    };

    for (int b = cfg.n_layers - 1; b >= 0; --b) {
        if (memory && b % cfg.mixin_every == 0) mixin_backward(b / cfg.mixin_every);
        block_backward(b);
    }

    if (input_grad_norm) {
        input_grad_norm->assign(static_cast<size_t>(L), 0.0);
        for (int p = 0; p < L; ++p) {
            double acc = 0.0;
            const double* r = dx.row(p);
            for (int c = 0; c < d; ++c) acc += r[c] * r[c];
            (*input_grad_norm)[static_cast<size_t>(p)] = std::sqrt(acc);
        }
    }

    // scatter into embeddings / projector
    std::vector<double> scratch(static_cast<size_t>(cfg.proj_in()));
    for (int p = 0; p < L; ++p) {
        int fr = seq.feat_row_of[static_cast<size_t>(p)];
        if (fr >= 0) {
            std::fill(scratch.begin(), scratch.end(), 0.0);
            rowops::linear_backward(seq.ctx_feats.row(fr), params.projector, dx.row(p), scratch.data(),
                                    grads.projector);
        } else {
            int tok = seq.tokens[static_cast<size_t>(p)];
            double* er = grads.embed.row(tok);
            const double* r = dx.row(p);
            for (int c = 0; c < d; ++c) er[c] += r[c];
        }
    }
    for (int m = 0; m < M; ++m) {
        std::fill(scratch.begin(), scratch.end(), 0.0);
        rowops::linear_backward(seq.mem_feats.row(m), params.projector, dbank.row(m), scratch.data(), grads.projector);
    }
}

// ---------------------------------------------------------------------------
// decoding

inline int argmax_row(const double* row, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;  // ties keep the lowest index
    return best;
}

struct DecodeResult {
    std::vector<int> tokens;   // generated ids, in order
    std::vector<int> pos_ids;  // their rotary position ids
};

// Greedy decoding with the KV cache; generated token t gets position id
// last_prompt_id + 1 + t. Memory K/V are computed once at prompt time.
inline DecodeResult greedy_decode(const ModelParams& params, const SequenceData& prompt, int steps,
                                  std::optional<bool> use_memory = std::nullopt) {
    require_arg(steps >= 1, "greedy_decode: steps must be >= 1");
    RunOptions opts;
    opts.use_memory = use_memory;
    ModelRun run(params, prompt, opts);
    Tensor logits = run.prefill();
    DecodeResult out;
    int next = argmax_row(logits.row(prompt.len() - 1), params.cfg.vocab_size);
    int base = prompt.posmap.last_id();
    for (int t = 0; t < steps; ++t) {
        int pos = base + 1 + t;
        out.tokens.push_back(next);
        out.pos_ids.push_back(pos);
        if (t + 1 == steps) break;
        std::vector<double> row = run.step(next, pos);
        next = argmax_row(row.data(), params.cfg.vocab_size);
    }
    return out;
}

}  // namespace comemo

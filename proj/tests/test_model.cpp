#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

namespace {

using namespace comemo;
using testsupport::max_abs_diff;
using testsupport::random_sequence;
using testsupport::small_config;

TEST(Config, DerivedQuantities) {
    ModelConfig cfg;  // desk defaults
    EXPECT_EQ(cfg.d_model, 64);
    EXPECT_EQ(cfg.head_dim(), 16);
    EXPECT_EQ(cfg.n_mixin(), 2);  // ceil(8 / 4)
    EXPECT_EQ(cfg.proj_in(), cfg.d_vit);
    cfg.shuffle_factor = 2;
    EXPECT_EQ(cfg.proj_in(), 4 * cfg.d_vit);
    cfg.n_layers = 9;
    EXPECT_EQ(cfg.n_mixin(), 3);  // ceil(9 / 4)

    EXPECT_EQ(cfg.rope().head_dim, cfg.head_dim());
    EXPECT_DOUBLE_EQ(cfg.rope().theta_base, cfg.rope_theta);
}

TEST(Config, AllocationModesSetDetailPair) {
    ModelConfig s = small_config();
    s.apply_allocation(AllocationMode::dhr_s);
    EXPECT_EQ(s.context_detail, ImageDetail::full);
    EXPECT_EQ(s.memory_detail, ImageDetail::thumbnail);

    ModelConfig x = small_config();
    x.apply_allocation(AllocationMode::dhr_x);
    EXPECT_EQ(x.context_detail, ImageDetail::thumbnail);
    EXPECT_EQ(x.memory_detail, ImageDetail::full);

    ModelConfig b = small_config();
    b.apply_allocation(AllocationMode::dhr_b);
    EXPECT_EQ(b.context_detail, ImageDetail::full);
    EXPECT_EQ(b.memory_detail, ImageDetail::full);

    EXPECT_EQ(allocation_mode_from("dhr-x"), AllocationMode::dhr_x);
    EXPECT_STREQ(to_string(AllocationMode::dhr_s), "dhr-s");
    EXPECT_THROW(allocation_mode_from("dhr-z"), std::invalid_argument);
}

TEST(Config, ValidationRejectsBadDims) {
    ModelConfig cfg = small_config();
    EXPECT_NO_THROW(validate_config(cfg));
    cfg.n_heads = 3;  // 16 % 3 != 0
    EXPECT_THROW(validate_config(cfg), std::invalid_argument);

    ModelConfig odd = small_config();
    odd.d_model = 3;
    odd.n_heads = 1;  // head_dim 3 is odd
    EXPECT_THROW(validate_config(odd), std::invalid_argument);

    ModelConfig v = small_config();
    v.vocab_size = 1;
    EXPECT_THROW(validate_config(v), std::invalid_argument);
}

TEST(Params, RegistryCountsAndNames) {
    ModelConfig cfg = small_config();
    ModelParams p = make_params(cfg);
    EXPECT_EQ(p.tensor_count(), 4 + 8 * 4 + 9 * 2);

    int seen = 0;
    std::vector<std::string> names;
    p.for_each([&](const std::string& n, Tensor& t) {
        ++seen;
        names.push_back(n);
        for (double x : t.v) EXPECT_EQ(x, 0.0);  // make_params leaves zeros
    });
    EXPECT_EQ(seen, p.tensor_count());
    EXPECT_EQ(names.front(), "embed");
    EXPECT_EQ(names[1], "projector");
    EXPECT_NE(std::find(names.begin(), names.end(), "blocks.0.wq"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "mixins.1.attn_gate"), names.end());
    EXPECT_EQ(names.back(), "head");

    EXPECT_EQ(p.embed.rows(), cfg.vocab_size);
    EXPECT_EQ(p.projector.rows(), cfg.proj_in());
    EXPECT_EQ(p.projector.cols(), cfg.d_model);
    EXPECT_EQ(p.head.cols(), cfg.vocab_size);
    ASSERT_EQ(p.mixins.size(), 2u);
    EXPECT_EQ(p.mixins[0].attn_gate.numel(), 1);
}

TEST(Params, GroupAssignment) {
    EXPECT_EQ(group_of("embed"), ParamGroup::embedding);
    EXPECT_EQ(group_of("projector"), ParamGroup::projector);
    EXPECT_EQ(group_of("blocks.3.ffw_norm.g"), ParamGroup::blocks);
    EXPECT_EQ(group_of("final_norm.g"), ParamGroup::blocks);
    EXPECT_EQ(group_of("head"), ParamGroup::head);
    EXPECT_EQ(group_of("mixins.0.wq"), ParamGroup::mixin);
    EXPECT_EQ(group_of("mixins.0.attn_gate"), ParamGroup::gates);
    EXPECT_EQ(group_of("mixins.1.ffw_gate"), ParamGroup::gates);
    EXPECT_STREQ(to_string(ParamGroup::gates), "gates");
}

TEST(Params, InitIsDeterministicWithZeroGates) {
    ModelConfig cfg = small_config();
    ModelParams a = init_params(cfg, 42);
    ModelParams b = init_params(cfg, 42);
    ModelParams c = init_params(cfg, 43);
    EXPECT_EQ(a.param_checksum(), b.param_checksum());
    EXPECT_NE(a.param_checksum(), c.param_checksum());

    for (const MixinParams& m : a.mixins) {
        EXPECT_EQ(m.attn_gate.v[0], 0.0);  // identity mixins at init
        EXPECT_EQ(m.ffw_gate.v[0], 0.0);
    }
    for (const BlockParams& bp : a.blocks) {
        for (double g : bp.attn_norm_g.v) EXPECT_EQ(g, 1.0);
        for (double g : bp.ffw_norm_g.v) EXPECT_EQ(g, 1.0);
    }
    for (double g : a.final_norm_g.v) EXPECT_EQ(g, 1.0);
}

// ---------------------------------------------------------------------------
// mixin layer closed forms

CrossMask full_mask(int n_seq, int n_mem) {
    CrossMask m;
    m.n_seq = n_seq;
    m.n_mem = n_mem;
    m.vis.assign(static_cast<size_t>(n_seq) * n_mem, 1);
    return m;
}

void set_identity(Tensor& t) {
    t.zero();
    for (int64_t i = 0; i < std::min(t.rows(), t.cols()); ++i) t.at(i, i) = 1.0;
}

MixinParams identity_mixin(const ModelConfig& cfg, double attn_gate, double ffw_gate) {
    MixinParams mp = make_params(cfg).mixins[0];
    set_identity(mp.wq);
    set_identity(mp.wk);
    set_identity(mp.wv);
    set_identity(mp.wo);
    mp.attn_gate.v[0] = attn_gate;
    mp.ffw_gate.v[0] = ffw_gate;
    return mp;
}

TEST(Mixin, ZeroGatesAreExactIdentity) {
    ModelConfig cfg = small_config();
    Rng rng(8);
    ModelParams p = init_params(cfg, 1);
    MixinParams mp = p.mixins[0];  // gates start at zero
    Tensor h_s = Tensor::matrix(3, cfg.d_model);
    Tensor h_i = Tensor::matrix(2, cfg.d_model);
    for (auto& x : h_s.v) x = rng.normal();
    for (auto& x : h_i.v) x = rng.normal();
    Tensor out = mixin_forward(h_s, h_i, mp, {0, 1, 2}, {0, 1}, full_mask(3, 2), cfg.n_heads, cfg.rope());
    for (size_t i = 0; i < h_s.v.size(); ++i) EXPECT_EQ(out.v[i], h_s.v[i]);
}

TEST(Mixin, IdentityProjectionSinglePairAddsGatedMemory) {
    // one query, one visible memory row, identity projections, ffw gate 0:
    // softmax over a single key is exactly 1, so out = h_s + tanh(g) * h_i
    ModelConfig cfg = small_config();
    MixinParams mp = identity_mixin(cfg, 0.7, 0.0);
    Rng rng(9);
    Tensor h_s = Tensor::matrix(1, cfg.d_model);
    Tensor h_i = Tensor::matrix(1, cfg.d_model);
    for (auto& x : h_s.v) x = rng.normal();
    for (auto& x : h_i.v) x = rng.normal();
    Tensor out = mixin_forward(h_s, h_i, mp, {5}, {5}, full_mask(1, 1), cfg.n_heads, cfg.rope());
    double g = std::tanh(0.7);
    for (size_t i = 0; i < h_s.v.size(); ++i) EXPECT_DOUBLE_EQ(out.v[i], h_s.v[i] + g * h_i.v[i]);
}

TEST(Mixin, GatedFfwBranchMatchesScalarFormulas) {
    // attention gate 0, identity w1/w2 (square), so with gain-1 norm:
    // out = h + tanh(g) * gelu(h / rms(h))
    ModelConfig cfg = small_config();
    cfg.d_ff = cfg.d_model;
    MixinParams mp = make_params(cfg).mixins[0];
    set_identity(mp.w1);
    set_identity(mp.w2);
    for (auto& x : mp.ffw_norm_g.v) x = 1.0;
    mp.ffw_gate.v[0] = 0.31;
    Rng rng(10);
    Tensor h = Tensor::matrix(1, cfg.d_model);
    for (auto& x : h.v) x = rng.normal();
    Tensor out = mixin_forward(h, Tensor::matrix(0, cfg.d_model), mp, {0}, {}, full_mask(1, 0), cfg.n_heads,
                               cfg.rope());
    double ss = 0.0;
    for (double x : h.v) ss += x * x;
    double rms = std::sqrt(ss / cfg.d_model + 1e-6);
    for (size_t i = 0; i < h.v.size(); ++i) {
        double n = h.v[i] / rms;
        double gelu = 0.5 * n * (1.0 + std::erf(n / std::sqrt(2.0)));
        EXPECT_NEAR(out.v[i], h.v[i] + std::tanh(0.31) * gelu, 1e-12);
    }
}

TEST(Mixin, FullyMaskedRowsGetNoAttentionTerm) {
    ModelConfig cfg = small_config();
    MixinParams mp = identity_mixin(cfg, 1.2, 0.0);
    Rng rng(11);
    Tensor h_s = Tensor::matrix(2, cfg.d_model);
    Tensor h_i = Tensor::matrix(1, cfg.d_model);
    for (auto& x : h_s.v) x = rng.normal();
    for (auto& x : h_i.v) x = rng.normal();
    CrossMask m = full_mask(2, 1);
    m.vis[0] = 0;  // row 0 sees nothing
    std::vector<Tensor> probs;
    Tensor out = mixin_forward(h_s, h_i, mp, {0, 1}, {0}, m, cfg.n_heads, cfg.rope(), &probs);
    for (int c = 0; c < cfg.d_model; ++c) EXPECT_EQ(out.at(0, c), h_s.at(0, c));
    double g = std::tanh(1.2);
    for (int c = 0; c < cfg.d_model; ++c) EXPECT_DOUBLE_EQ(out.at(1, c), h_s.at(1, c) + g * h_i.at(0, c));
    ASSERT_EQ(probs.size(), static_cast<size_t>(cfg.n_heads));
    for (const Tensor& ph : probs) {
        EXPECT_EQ(ph.at(0, 0), 0.0);  // masked row has zero weights
        EXPECT_DOUBLE_EQ(ph.at(1, 0), 1.0);
    }
}

TEST(Mixin, AttentionWeightsDependOnMemoryPositions) {
    // two identical memory rows at different rotary positions: the query
    // prefers one of them, and the per-head weights still sum to 1
    ModelConfig cfg = small_config();
    MixinParams mp = identity_mixin(cfg, 1.0, 0.0);
    Rng rng(12);
    Tensor h_s = Tensor::matrix(1, cfg.d_model);
    Tensor h_i = Tensor::matrix(2, cfg.d_model);
    for (auto& x : h_s.v) x = rng.normal();
    for (int c = 0; c < cfg.d_model; ++c) h_i.at(0, c) = h_i.at(1, c) = rng.normal();

    std::vector<Tensor> probs;
    mixin_forward(h_s, h_i, mp, {0}, {0, 7}, full_mask(1, 2), cfg.n_heads, cfg.rope(), &probs);
    for (const Tensor& ph : probs) {
        EXPECT_NEAR(ph.at(0, 0) + ph.at(0, 1), 1.0, 1e-12);
        EXPECT_NE(ph.at(0, 0), ph.at(0, 1));  // rotation at 0 vs 7 splits the scores
    }

    // same positions -> exactly even split
    std::vector<Tensor> even;
    mixin_forward(h_s, h_i, mp, {0}, {7, 7}, full_mask(1, 2), cfg.n_heads, cfg.rope(), &even);
    for (const Tensor& ph : even) {
        EXPECT_DOUBLE_EQ(ph.at(0, 0), 0.5);
        EXPECT_DOUBLE_EQ(ph.at(0, 1), 0.5);
    }
}

TEST(Mixin, RejectsMismatchedShapes) {
    ModelConfig cfg = small_config();
    MixinParams mp = identity_mixin(cfg, 0.0, 0.0);
    Tensor h_s = Tensor::matrix(2, cfg.d_model);
    Tensor h_i = Tensor::matrix(1, cfg.d_model);
    EXPECT_THROW(mixin_forward(h_s, h_i, mp, {0}, {0}, full_mask(2, 1), cfg.n_heads, cfg.rope()), ShapeError);
    EXPECT_THROW(mixin_forward(h_s, h_i, mp, {0, 1}, {0}, full_mask(1, 1), cfg.n_heads, cfg.rope()), ShapeError);
}

// ---------------------------------------------------------------------------
// full model forward

TEST(Forward, ShapesAndDeterminism) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 4);
    SequenceData seq = random_sequence(cfg, enc, 17, EncodingMode::dhr, 1);
    Tensor a = model_forward(p, seq);
    Tensor b = model_forward(p, seq);
    EXPECT_EQ(a.rows(), seq.len());
    EXPECT_EQ(a.cols(), cfg.vocab_size);
    EXPECT_EQ(a.v, b.v);
    for (double x : a.v) EXPECT_TRUE(std::isfinite(x));
}

TEST(Forward, CacheMatchesReturnedLogitsAndBank) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 4);
    SequenceData seq = random_sequence(cfg, enc, 18, EncodingMode::dhr, 1);

    ForwardCache cache;
    Tensor logits = model_forward(p, seq, &cache);
    EXPECT_EQ(cache.logits.v, logits.v);
    ASSERT_EQ(cache.blocks.size(), static_cast<size_t>(cfg.n_layers));
    ASSERT_EQ(cache.mixins.size(), static_cast<size_t>(cfg.n_mixin()));

    MemoryBank bank = build_memory_bank(p, seq);
    EXPECT_EQ(cache.bank.v, bank.states.v);

    // causal attention rows: weights over keys 0..p sum to 1, later keys zero
    int L = seq.len();
    for (const BlockCache& bc : cache.blocks)
        for (const Tensor& ph : bc.probs)
            for (int q = 0; q < L; ++q) {
                double sum = 0.0;
                for (int j = 0; j < L; ++j) {
                    if (j > q) EXPECT_EQ(ph.at(q, j), 0.0);
                    sum += ph.at(q, j);
                }
                EXPECT_NEAR(sum, 1.0, 1e-9);
            }
}

TEST(MemoryBank, ProjectsOnceAndRotatesPerMixin) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 5);
    SequenceData seq = random_sequence(cfg, enc, 19, EncodingMode::dhr, 1, 1);
    ASSERT_GT(seq.n_mem(), 0);

    MemoryBank bank = build_memory_bank(p, seq);
    EXPECT_EQ(bank.states.rows(), seq.n_mem());
    EXPECT_EQ(bank.pos_ids, seq.mem_pos_ids);
    ASSERT_EQ(bank.k_rot.size(), static_cast<size_t>(cfg.n_mixin()));
    ASSERT_EQ(bank.v.size(), static_cast<size_t>(cfg.n_mixin()));

    // row m of states is the projector applied to the raw memory features
    std::vector<double> want(static_cast<size_t>(cfg.d_model));
    rowops::linear(seq.mem_feats.row(0), p.projector, want.data());
    for (int c = 0; c < cfg.d_model; ++c) EXPECT_EQ(bank.states.at(0, c), want[c]);

    // keys are rotated at the memory position ids; values are unrotated
    for (size_t j = 0; j < bank.k_rot.size(); ++j) {
        std::vector<double> k(static_cast<size_t>(cfg.d_model)), v(static_cast<size_t>(cfg.d_model));
        rowops::linear(bank.states.row(0), p.mixins[j].wk, k.data());
        rowops::rotate_heads(k.data(), cfg.n_heads, bank.pos_ids[0], cfg.rope());
        rowops::linear(bank.states.row(0), p.mixins[j].wv, v.data());
        for (int c = 0; c < cfg.d_model; ++c) {
            EXPECT_EQ(bank.k_rot[j].at(0, c), k[c]);
            EXPECT_EQ(bank.v[j].at(0, c), v[c]);
        }
    }
}

TEST(Forward, GateZeroMatchesMemoryFreeBaseline) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 6);  // gates are zero at init
    for (uint64_t s = 0; s < 8; ++s) {
        SequenceData seq = random_sequence(cfg, enc, 100 + s, EncodingMode::dhr, 0);
        Tensor with_mem = model_forward(p, seq, nullptr, true);
        Tensor without = model_forward(p, seq, nullptr, false);
        EXPECT_EQ(max_abs_diff(with_mem, without), 0.0) << "seed " << s;
    }

    // opened gates break the equivalence (the memory path is really on)
    ModelParams q = init_params(cfg, 6);
    for (MixinParams& m : q.mixins) m.attn_gate.v[0] = 0.5;
    SequenceData seq = random_sequence(cfg, enc, 100, EncodingMode::dhr, 1);
    EXPECT_GT(max_abs_diff(model_forward(q, seq, nullptr, true), model_forward(q, seq, nullptr, false)), 0.0);
}

TEST(Forward, LaterTokensNeverAffectEarlierLogits) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 7);
    for (MixinParams& m : p.mixins) m.attn_gate.v[0] = 0.4;  // memory path live

    SequenceData seq = random_sequence(cfg, enc, 23, EncodingMode::dhr, 1);
    Tensor base = model_forward(p, seq);
    int L = seq.len();

    // flip the last text token; logits before it must be bitwise unchanged
    SequenceData mod = seq;
    mod.tokens[static_cast<size_t>(L - 1)] = (mod.tokens[static_cast<size_t>(L - 1)] + 1) % cfg.vocab_size;
    if (mod.tokens[static_cast<size_t>(L - 1)] < 3) mod.tokens[static_cast<size_t>(L - 1)] = 3;
    Tensor moved = model_forward(p, mod);
    for (int q = 0; q < L - 1; ++q)
        for (int c = 0; c < cfg.vocab_size; ++c) EXPECT_EQ(moved.at(q, c), base.at(q, c));
    // and the flipped position itself does change
    EXPECT_GT(max_abs_diff(moved, base), 0.0);
}

TEST(Forward, LaterImageMemoryNeverLeaksBackward) {
    // perturb the memory features of the final image: every logit before that
    // image's insertion position must be bitwise unchanged
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 8);
    for (MixinParams& m : p.mixins) m.attn_gate.v[0] = 0.6;

    SequenceData seq = random_sequence(cfg, enc, 31, EncodingMode::dhr, 2, 2);
    ASSERT_GE(seq.insertion_pos.size(), 2u);
    Tensor base = model_forward(p, seq);

    SequenceData mod = seq;
    size_t last_img = mod.insertion_pos.size() - 1;
    int begin = mod.mem_image_begin[last_img];
    int count = mod.mem_image_count[last_img];
    for (int r = begin; r < begin + count; ++r)
        for (int c = 0; c < cfg.proj_in(); ++c) mod.mem_feats.at(r, c) += 3.0;
    Tensor moved = model_forward(p, mod);

    int insertion = seq.insertion_pos[last_img];
    for (int q = 0; q < insertion; ++q)
        for (int c = 0; c < cfg.vocab_size; ++c)
            EXPECT_EQ(moved.at(q, c), base.at(q, c)) << "q=" << q;
    // from the insertion position on, the perturbation is visible
    double after = 0.0;
    for (int q = insertion; q < seq.len(); ++q)
        for (int c = 0; c < cfg.vocab_size; ++c) after = std::max(after, std::abs(moved.at(q, c) - base.at(q, c)));
    EXPECT_GT(after, 0.0);
}

// ---------------------------------------------------------------------------
// decoding

TEST(Decode, ArgmaxBreaksTiesTowardLowestIndex) {
    std::vector<double> row{1.0, 3.0, 3.0, -1.0};
    EXPECT_EQ(argmax_row(row.data(), 4), 1);
    std::vector<double> flat{2.0, 2.0, 2.0};
    EXPECT_EQ(argmax_row(flat.data(), 3), 0);
}

TEST(Decode, FirstTokenIsArgmaxOfLastPromptRow) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 9);
    SequenceData seq = random_sequence(cfg, enc, 41, EncodingMode::dhr, 1);
    Tensor logits = model_forward(p, seq);
    DecodeResult dec = greedy_decode(p, seq, 1);
    ASSERT_EQ(dec.tokens.size(), 1u);
    EXPECT_EQ(dec.tokens[0], argmax_row(logits.row(seq.len() - 1), cfg.vocab_size));
}

TEST(Decode, PositionIdsContinueAfterLastPromptId) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 9);
    SequenceData seq = random_sequence(cfg, enc, 43, EncodingMode::dhr, 1);
    int base = seq.posmap.last_id();
    DecodeResult dec = greedy_decode(p, seq, 3);
    EXPECT_EQ(dec.pos_ids, (std::vector<int>{base + 1, base + 2, base + 3}));
}

// extend a prompt's trailing text by the generated tokens and re-run the full
// forward; under every encoding mode the appended text continues the id
// stream, so this is the cache-free reference decoder
std::vector<int> decode_by_reforward(const ModelParams& p, const std::vector<PlanItem>& items,
                                     const std::map<int, SyntheticImage>& images, EncodingMode mode,
                                     const std::vector<int>& tokens, int steps) {
    std::vector<int> out;
    std::vector<int> toks = tokens;
    for (int t = 0; t < steps; ++t) {
        std::vector<PlanItem> cur = items;
        if (t > 0) cur.push_back(PlanItem::text(t));
        SequenceData seq = prepare_sequence(cur, images, mode, p.cfg, toks);
        Tensor logits = model_forward(p, seq);
        int next = argmax_row(logits.row(seq.len() - 1), p.cfg.vocab_size);
        out.push_back(next);
        toks.push_back(next);
    }
    return out;
}

TEST(Decode, MatchesStepwiseFullReforwards) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    for (EncodingMode mode : {EncodingMode::vanilla, EncodingMode::dhr, EncodingMode::dhr_nc}) {
        for (uint64_t s = 0; s < 3; ++s) {
            ModelParams p = init_params(cfg, 50 + s);
            for (MixinParams& m : p.mixins) m.attn_gate.v[0] = 0.3;

            Rng rng(200 + s);
            DhrLayout l = testsupport::small_random_layout(rng);
            std::map<int, SyntheticImage> images{{0, enc.make_image(l.src_rows(), l.src_cols(), {}, rng.next_u64())}};
            std::vector<PlanItem> items{PlanItem::text(2), PlanItem::image(0, l), PlanItem::text(2)};
            std::vector<int> toks{3, 4, 5, 6};

            SequenceData prompt = prepare_sequence(items, images, mode, cfg, toks);
            DecodeResult fast = greedy_decode(p, prompt, 6);
            std::vector<int> slow = decode_by_reforward(p, items, images, mode, toks, 6);
            EXPECT_EQ(fast.tokens, slow) << to_string(mode) << " seed " << s;
        }
    }
}

TEST(Decode, LeavesMemoryBankBitwiseUntouched) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 10);
    for (MixinParams& m : p.mixins) m.attn_gate.v[0] = 0.8;
    SequenceData seq = random_sequence(cfg, enc, 61, EncodingMode::dhr, 1);

    ModelRun run(p, seq);
    ASSERT_TRUE(run.memory_enabled());
    uint64_t before = checksum(run.bank().states);
    std::vector<uint64_t> k_before, v_before;
    for (const Tensor& t : run.bank().k_rot) k_before.push_back(checksum(t));
    for (const Tensor& t : run.bank().v) v_before.push_back(checksum(t));

    run.prefill();
    int pos = seq.posmap.last_id();
    int tok = 3;
    for (int t = 0; t < 5; ++t) {
        std::vector<double> row = run.step(tok, pos + 1 + t);
        tok = argmax_row(row.data(), cfg.vocab_size);
    }

    EXPECT_EQ(checksum(run.bank().states), before);
    for (size_t j = 0; j < k_before.size(); ++j) {
        EXPECT_EQ(checksum(run.bank().k_rot[j]), k_before[j]);
        EXPECT_EQ(checksum(run.bank().v[j]), v_before[j]);
    }
}

}  // namespace

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace {

using namespace comemo;
using testsupport::small_config;

TaskSpec base_spec(TaskKind kind, uint64_t seed) {
    TaskSpec spec;
    spec.kind = kind;
    spec.mode = EncodingMode::dhr;
    spec.layout.tile_rows = 1;
    spec.layout.tile_cols = 2;
    spec.layout.tile_patch = 2;
    spec.layout.thumb_patch = 2;
    spec.seed = seed;
    return spec;
}

TEST(GenTask, DeterministicPerSeedAndIndex) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    TaskSpec spec = base_spec(TaskKind::visual_needle, 9);
    TaskInstance a = gen_task(spec, cfg, enc, 7);
    TaskInstance b = gen_task(spec, cfg, enc, 7);
    TaskInstance c = gen_task(spec, cfg, enc, 8);
    EXPECT_EQ(a.answer, b.answer);
    EXPECT_EQ(a.seq.tokens, b.seq.tokens);
    EXPECT_EQ(a.seq.ctx_feats.v, b.seq.ctx_feats.v);
    EXPECT_EQ(a.seq.mem_feats.v, b.seq.mem_feats.v);
    EXPECT_NE(a.seq.tokens, c.seq.tokens);
}

TEST(GenTask, PromptIsPrefixOfFullInstance) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    for (TaskKind kind : {TaskKind::copy, TaskKind::visual_needle, TaskKind::grid_probe}) {
        TaskSpec spec = base_spec(kind, 3);
        TaskInstance full = gen_task(spec, cfg, enc, 1, true);
        TaskInstance prompt = gen_task(spec, cfg, enc, 1, false);
        int pl = prompt.seq.len();
        ASSERT_LT(pl, full.seq.len()) << to_string(kind);
        for (int p = 0; p < pl; ++p)
            EXPECT_EQ(full.seq.tokens[static_cast<size_t>(p)], prompt.seq.tokens[static_cast<size_t>(p)])
                << to_string(kind) << " pos " << p;
        EXPECT_EQ(full.answer, prompt.answer) << to_string(kind);
        EXPECT_EQ(full.prompt_end, prompt.prompt_end) << to_string(kind);
        EXPECT_EQ(full.seq.ctx_feats.v, prompt.seq.ctx_feats.v) << to_string(kind);
        // the prompt variant carries no loss positions; the full one does
        EXPECT_TRUE(std::all_of(prompt.seq.loss_mask.begin(), prompt.seq.loss_mask.end(),
                                [](uint8_t m) { return m == 0; }));
        EXPECT_GE(std::count(full.seq.loss_mask.begin(), full.seq.loss_mask.end(), 1), 1) << to_string(kind);
    }
}

TEST(GenTask, CopyEchoesTheSpan) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    TaskSpec spec = base_spec(TaskKind::copy, 5);
    spec.span_len = 4;
    TaskInstance inst = gen_task(spec, cfg, enc, 0);
    // [BOS s0 s1 s2 s3 SEP s0 s1 s2 s3]
    ASSERT_EQ(inst.seq.len(), 10);
    EXPECT_EQ(inst.seq.tokens[0], kBosToken);
    EXPECT_EQ(inst.seq.tokens[5], kSepToken);
    ASSERT_EQ(inst.answer.size(), 4u);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(1 + i)], inst.answer[static_cast<size_t>(i)]);
        EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(6 + i)], inst.answer[static_cast<size_t>(i)]);
        EXPECT_GE(inst.answer[static_cast<size_t>(i)], kPayloadMin);
    }
    // teacher forcing: positions SEP..SEP+3 predict the echoed span
    for (int p = 5; p <= 8; ++p) {
        EXPECT_EQ(inst.seq.loss_mask[static_cast<size_t>(p)], 1);
        EXPECT_EQ(inst.seq.targets[static_cast<size_t>(p)], inst.seq.tokens[static_cast<size_t>(p + 1)]);
    }
    EXPECT_EQ(inst.prompt_end, 5);
    EXPECT_EQ(std::count(inst.seq.loss_mask.begin(), inst.seq.loss_mask.end(), 1), 4);
}

TEST(GenTask, NeedlePlacementFollowsDepth) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    TaskSpec spec = base_spec(TaskKind::visual_needle, 5);
    spec.n_images = 4;

    spec.depth = 0.0;
    EXPECT_EQ(gen_task(spec, cfg, enc, 0).needle_image, 0);
    spec.depth = 1.0;
    EXPECT_EQ(gen_task(spec, cfg, enc, 0).needle_image, 3);
    spec.depth = 0.5;
    EXPECT_EQ(gen_task(spec, cfg, enc, 0).needle_image, 2);  // round(0.5 * 3)

    spec.depth = 0.5;
    TaskInstance inst = gen_task(spec, cfg, enc, 1);
    int L = inst.seq.len();
    // [4 x (image(12) + filler(8))] + [SEP ans]
    EXPECT_EQ(L, 4 * (12 + 8) + 2);
    EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(L - 2)], kSepToken);
    EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(L - 1)], inst.answer[0]);
    EXPECT_EQ(inst.seq.targets[static_cast<size_t>(L - 2)], inst.answer[0]);
    EXPECT_EQ(inst.seq.loss_mask[static_cast<size_t>(L - 2)], 1);
    EXPECT_EQ(inst.prompt_end, L - 2);

    // the needle image is the one whose features differ from a payload-free render
    ASSERT_EQ(inst.seq.insertion_pos.size(), 4u);
}

TEST(GenTask, GridProbeAnswerMatchesGeneratorPayload) {
    // replay the documented draw order (payload row-major, probe row, probe
    // col, image seed) and check the emitted instance against it end to end
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    TaskSpec spec = base_spec(TaskKind::grid_probe, 17);
    for (uint64_t index = 0; index < 10; ++index) {
        TaskInstance inst = gen_task(spec, cfg, enc, index);

        Rng rng = Rng(spec.seed).fork(index);
        int rows = spec.layout.src_rows(), cols = spec.layout.src_cols();
        int n_payload = cfg.vocab_size - kPayloadMin;
        std::map<std::pair<int, int>, int> payload;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                payload[{r, c}] = kPayloadMin + static_cast<int>(rng.below(static_cast<uint64_t>(n_payload)));
        int pr = static_cast<int>(rng.below(static_cast<uint64_t>(rows)));
        int pc = static_cast<int>(rng.below(static_cast<uint64_t>(cols)));
        uint64_t image_seed = rng.next_u64();

        EXPECT_EQ(inst.answer[0], payload.at({pr, pc}));
        int L = inst.seq.len();
        EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(L - 4)], kSepToken);
        EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(L - 3)], kRowTokenBase + pr);
        EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(L - 2)], kColTokenBase + pc);
        EXPECT_EQ(inst.seq.tokens[static_cast<size_t>(L - 1)], inst.answer[0]);

        // the features really encode that payload map
        std::map<int, SyntheticImage> images{{0, enc.make_image(rows, cols, payload, image_seed)}};
        SequenceData want = prepare_sequence({PlanItem::image(0, spec.layout), PlanItem::text(4)}, images, spec.mode,
                                             cfg, {kSepToken, kRowTokenBase + pr, kColTokenBase + pc, inst.answer[0]});
        EXPECT_EQ(inst.seq.ctx_feats.v, want.ctx_feats.v);
        EXPECT_EQ(inst.seq.mem_feats.v, want.mem_feats.v);
    }
}

TEST(GenTask, RejectsInfeasibleSpecs) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);

    TaskSpec bad_span = base_spec(TaskKind::copy, 1);
    bad_span.span_len = 0;
    EXPECT_THROW(gen_task(bad_span, cfg, enc, 0), std::invalid_argument);

    TaskSpec bad_images = base_spec(TaskKind::visual_needle, 1);
    bad_images.n_images = 0;
    EXPECT_THROW(gen_task(bad_images, cfg, enc, 0), std::invalid_argument);

    TaskSpec bad_depth = base_spec(TaskKind::visual_needle, 1);
    bad_depth.depth = 1.5;
    EXPECT_THROW(gen_task(bad_depth, cfg, enc, 0), std::invalid_argument);

    TaskSpec big_grid = base_spec(TaskKind::grid_probe, 1);
    big_grid.layout.tile_rows = 3;
    big_grid.layout.tile_patch = 3;
    big_grid.layout.thumb_patch = 3;  // 9 x 6 source > 8 rows
    EXPECT_THROW(gen_task(big_grid, cfg, enc, 0), std::invalid_argument);
}

TEST(GenTask, StreamMatchesGenerator) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    TaskSpec spec = base_spec(TaskKind::visual_needle, 23);
    DataStream stream = task_stream(spec, cfg, enc);
    SequenceData a = stream(5);
    TaskInstance b = gen_task(spec, cfg, enc, 5);
    EXPECT_EQ(a.tokens, b.seq.tokens);
    EXPECT_EQ(a.ctx_feats.v, b.seq.ctx_feats.v);
    EXPECT_GE(std::count(a.loss_mask.begin(), a.loss_mask.end(), 1), 1);
}

// ---------------------------------------------------------------------------
// position binning

TEST(Bins, FormulaPartitionsEveryLength) {
    for (int len : {1, 7, 100, 999, 10000}) {
        std::vector<int> count(kProfileBins, 0);
        for (int pos = 0; pos < len; ++pos) {
            int b = bin_of(pos, len);
            ASSERT_GE(b, 0);
            ASSERT_LT(b, kProfileBins);
            count[static_cast<size_t>(b)]++;
        }
        int total = 0;
        for (int c : count) total += c;
        EXPECT_EQ(total, len);  // partition: each token lands in exactly one bin
    }
    // len == 100: identity mapping
    for (int pos = 0; pos < 100; ++pos) EXPECT_EQ(bin_of(pos, 100), pos);
    // cap at the last bin
    EXPECT_EQ(bin_of(9999, 10000), 99);
    EXPECT_EQ(bin_of(0, 1), 0);
}

TEST(Profiles, UniformAttentionSpreadsMassByTokenCount) {
    // all-zero parameters give zero queries/keys, hence uniform causal
    // attention; the final query's mass per bin is (tokens in bin) / len
    ModelConfig cfg = small_config();
    ModelParams p = make_params(cfg);
    std::vector<int> toks(10, 3);
    SequenceData seq = prepare_sequence({PlanItem::text(10)}, {}, EncodingMode::vanilla, cfg, toks);
    BinProfile prof = attention_profile(p, {seq});
    EXPECT_EQ(prof.quantity, BinQuantity::attention);
    double sum = 0.0;
    for (int b = 0; b < kProfileBins; ++b) {
        int tokens_here = 0;
        for (int pos = 0; pos < 10; ++pos)
            if (bin_of(pos, 10) == b) ++tokens_here;
        EXPECT_NEAR(prof.value[static_cast<size_t>(b)], tokens_here / 10.0, 1e-12);
        sum += prof.value[static_cast<size_t>(b)];
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(Profiles, AttentionBinsSumToOnePerQuery) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 77);
    std::vector<SequenceData> samples;
    for (uint64_t s = 0; s < 3; ++s) samples.push_back(testsupport::random_sequence(cfg, enc, 300 + s, EncodingMode::dhr));
    BinProfile prof = attention_profile(p, samples);
    double sum = 0.0;
    for (double v : prof.value) {
        EXPECT_GE(v, 0.0);
        sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_THROW(attention_profile(p, {}), std::invalid_argument);
}

TEST(Profiles, GradientProfilePoolsInputNorms) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, 3);
    ModelParams p = init_params(cfg, 78);
    SequenceData seq = testsupport::random_sequence(cfg, enc, 301, EncodingMode::dhr, 1);
    BinProfile prof = gradient_profile(p, {seq});
    EXPECT_EQ(prof.quantity, BinQuantity::gradient);
    int L = seq.len();
    double mass = 0.0;
    for (int b = 0; b < kProfileBins; ++b) {
        double v = prof.value[static_cast<size_t>(b)];
        EXPECT_GE(v, 0.0);
        bool covered = false;
        for (int pos = 0; pos < L; ++pos) covered |= bin_of(pos, L) == b;
        if (!covered) EXPECT_EQ(v, 0.0);
        mass += v;
    }
    EXPECT_GT(mass, 0.0);  // some position carries gradient

    BinProfile again = gradient_profile(p, {seq});
    EXPECT_EQ(prof.value, again.value);
}

// ---------------------------------------------------------------------------
// needle-in-a-haystack evaluation

TEST(Niah, GridShapeRangeAndQuantization) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    ModelParams p = init_params(cfg, 80);
    TaskSpec base = base_spec(TaskKind::visual_needle, 31);
    base.n_images = 2;
    const int trials = 4;
    NiahResult r = evaluate_niah(p, base, enc, {1, 2}, {0.0, 0.5, 1.0}, trials, 5);

    EXPECT_EQ(r.lengths, (std::vector<int>{1, 2}));
    EXPECT_EQ(r.depths, (std::vector<double>{0.0, 0.5, 1.0}));
    EXPECT_EQ(r.accuracy.rows(), 2);
    EXPECT_EQ(r.accuracy.cols(), 3);
    for (double a : r.accuracy.v) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
        // cell means of Bernoulli outcomes: multiples of 1/trials
        double scaled = a * trials;
        EXPECT_NEAR(scaled, std::round(scaled), 1e-9);
    }
    EXPECT_NEAR(r.at_depth(0.5), (r.accuracy.at(0, 1) + r.accuracy.at(1, 1)) / 2.0, 1e-12);
    EXPECT_THROW(r.at_depth(0.25), std::invalid_argument);

    NiahResult again = evaluate_niah(p, base, enc, {1, 2}, {0.0, 0.5, 1.0}, trials, 5);
    EXPECT_EQ(r.accuracy.v, again.accuracy.v);
}

TEST(Niah, UntrainedModelScoresNearChance) {
    ModelConfig cfg = small_config();
    SyntheticEncoder enc = make_encoder(cfg, 4);
    ModelParams p = init_params(cfg, 81);
    TaskSpec base = base_spec(TaskKind::visual_needle, 37);
    base.n_images = 2;
    base.layout.tile_cols = 1;  // smaller images keep this quick
    NiahResult r = evaluate_niah(p, base, enc, {2}, {0.0, 0.5, 1.0}, 8, 6);
    // random logits pick the right payload token only by accident
    EXPECT_LT(r.mean(), 0.35);
}

}  // namespace

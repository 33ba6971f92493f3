#pragma once

#include <array>

#include "comemo/training.hpp"

namespace comemo {

// Token-space conventions shared by the synthetic tasks. Image payload
// symbols and text tokens live in one id space so an answer read from an
// image is a plain vocabulary token.
inline constexpr int kBosToken = 1;
inline constexpr int kSepToken = 2;
inline constexpr int kRowTokenBase = 8;   // + source row of a probe (grids up to 8)
inline constexpr int kColTokenBase = 16;  // + source col of a probe
inline constexpr int kPayloadMin = 24;    // payload / filler symbols start here

enum class TaskKind { copy, visual_needle, grid_probe };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::visual_needle: return "visual_needle";
        case TaskKind::grid_probe: return "grid_probe";
    }
    return "?";
}

inline TaskKind task_from(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "visual_needle") return TaskKind::visual_needle;
    if (s == "grid_probe") return TaskKind::grid_probe;
    throw std::invalid_argument("unknown task: " + s);
}

struct TaskSpec {
    TaskKind kind = TaskKind::visual_needle;
    EncodingMode mode = EncodingMode::dhr;
    DhrLayout layout;
    int span_len = 8;    // copy: tokens to repeat
    int filler_len = 8;  // visual_needle: text tokens after each image
    int n_images = 3;    // visual_needle: images in the haystack
    double depth = 0.5;  // visual_needle: relative position of the needle
    uint64_t seed = 0;
};

struct TaskInstance {
    SequenceData seq;
    std::vector<int> answer;  // expected continuation after the prompt
    int needle_image = -1;    // visual_needle: which image holds the payload
    int prompt_end = -1;      // index of the last prompt position
};

inline SyntheticEncoder make_encoder(const ModelConfig& cfg, uint64_t seed) {
    return SyntheticEncoder(cfg.vocab_size, cfg.d_vit, seed);
}

// Deterministic instance generator: the same (spec, index) produces the same
// instance; include_answer=false yields the identical prompt without the
// answer tokens (for decoding evals).
inline TaskInstance gen_task(const TaskSpec& spec, const ModelConfig& cfg, const SyntheticEncoder& enc, uint64_t index,
                             bool include_answer = true) {
    require_arg(cfg.vocab_size > kPayloadMin + 1, "gen_task: vocabulary too small for the task token space");
    require_arg(enc.feature_dim() == cfg.d_vit, "gen_task: encoder feature dim != d_vit");
    Rng rng = Rng(spec.seed).fork(index);
    int n_payload = cfg.vocab_size - kPayloadMin;
    auto payload_tok = [&]() { return kPayloadMin + static_cast<int>(rng.below(static_cast<uint64_t>(n_payload))); };

    TaskInstance inst;
    switch (spec.kind) {
        case TaskKind::copy: {
            require_arg(spec.span_len >= 1, "gen_task: copy span must be >= 1");
            std::vector<int> span(static_cast<size_t>(spec.span_len));
            for (auto& t : span) t = payload_tok();
            std::vector<int> toks;
            toks.push_back(kBosToken);
            toks.insert(toks.end(), span.begin(), span.end());
            toks.push_back(kSepToken);
            if (include_answer) toks.insert(toks.end(), span.begin(), span.end());
            std::vector<PlanItem> items{PlanItem::text(static_cast<int>(toks.size()))};
            inst.seq = prepare_sequence(items, {}, spec.mode, cfg, toks);
            int sep_pos = 1 + spec.span_len;
            if (include_answer) {
                for (int p = sep_pos; p < sep_pos + spec.span_len; ++p) {
                    inst.seq.targets[static_cast<size_t>(p)] = toks[static_cast<size_t>(p + 1)];
                    inst.seq.loss_mask[static_cast<size_t>(p)] = 1;
                }
            }
            inst.answer = span;
            inst.prompt_end = sep_pos;
            break;
        }
        case TaskKind::visual_needle: {
            require_arg(spec.n_images >= 1, "gen_task: visual_needle needs >= 1 image");
            require_arg(spec.depth >= 0.0 && spec.depth <= 1.0, "gen_task: depth must be in [0, 1]");
            int needle = static_cast<int>(std::llround(spec.depth * (spec.n_images - 1)));
            int ans = payload_tok();
            std::map<int, SyntheticImage> images;
            std::vector<PlanItem> items;
            std::vector<int> toks;
            for (int i = 0; i < spec.n_images; ++i) {
                std::map<std::pair<int, int>, int> payload;
                if (i == needle)
                    for (int r = 0; r < spec.layout.src_rows(); ++r)
                        for (int c = 0; c < spec.layout.src_cols(); ++c) payload[{r, c}] = ans;
                images[i] = enc.make_image(spec.layout.src_rows(), spec.layout.src_cols(), payload, rng.next_u64());
                items.push_back(PlanItem::image(i, spec.layout));
                items.push_back(PlanItem::text(spec.filler_len));
                for (int t = 0; t < spec.filler_len; ++t) toks.push_back(payload_tok());
            }
            items.push_back(PlanItem::text(include_answer ? 2 : 1));
            toks.push_back(kSepToken);
            if (include_answer) toks.push_back(ans);
            inst.seq = prepare_sequence(items, images, spec.mode, cfg, toks);
            int sep_pos = inst.seq.plan.total_len - (include_answer ? 2 : 1);
            if (include_answer) {
                inst.seq.targets[static_cast<size_t>(sep_pos)] = ans;
                inst.seq.loss_mask[static_cast<size_t>(sep_pos)] = 1;
            }
            inst.answer = {ans};
            inst.needle_image = needle;
            inst.prompt_end = sep_pos;
            break;
        }
        case TaskKind::grid_probe: {
            int rows = spec.layout.src_rows(), cols = spec.layout.src_cols();
            require_arg(rows <= 8 && cols <= 8, "gen_task: grid_probe grids are limited to 8x8");
            std::map<std::pair<int, int>, int> payload;
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) payload[{r, c}] = payload_tok();
            int pr = static_cast<int>(rng.below(static_cast<uint64_t>(rows)));
            int pc = static_cast<int>(rng.below(static_cast<uint64_t>(cols)));
            int ans = payload.at({pr, pc});
            std::map<int, SyntheticImage> images{{0, enc.make_image(rows, cols, payload, rng.next_u64())}};
            std::vector<PlanItem> items{PlanItem::image(0, spec.layout),
                                        PlanItem::text(include_answer ? 4 : 3)};
            std::vector<int> toks{kSepToken, kRowTokenBase + pr, kColTokenBase + pc};
            if (include_answer) toks.push_back(ans);
            inst.seq = prepare_sequence(items, images, spec.mode, cfg, toks);
            int q_pos = inst.seq.plan.total_len - (include_answer ? 2 : 1);
            if (include_answer) {
                inst.seq.targets[static_cast<size_t>(q_pos)] = ans;
                inst.seq.loss_mask[static_cast<size_t>(q_pos)] = 1;
            }
            inst.answer = {ans};
            inst.prompt_end = q_pos;
            break;
        }
    }
    return inst;
}

// data stream over a task family, for run_stage (captures a copy of the encoder)
inline DataStream task_stream(const TaskSpec& spec, const ModelConfig& cfg, SyntheticEncoder enc) {
    return [spec, cfg, enc = std::move(enc)](uint64_t index) { return gen_task(spec, cfg, enc, index).seq; };
}

// ---------------------------------------------------------------------------
// analysis instruments

// mean |tanh(attn_gate)| across mixin layers: how much the memory pathway is used
inline double average_gates(const ModelParams& params) {
    require_arg(!params.mixins.empty(), "average_gates: model has no mixin layers");
    double s = 0.0;
    for (const MixinParams& m : params.mixins) s += std::abs(std::tanh(m.attn_gate.v[0]));
    return s / static_cast<double>(params.mixins.size());
}

enum class BinQuantity { attention, gradient };

inline const char* to_string(BinQuantity q) {
    return q == BinQuantity::attention ? "attention" : "gradient";
}

inline constexpr int kProfileBins = 100;

struct BinProfile {
    BinQuantity quantity = BinQuantity::attention;
    std::array<double, kProfileBins> value{};
};

inline int bin_of(int pos, int len) { return std::min(kProfileBins - 1, pos * kProfileBins / len); }

// Attention mass of the final query over relative sequence position, averaged
// over heads and layers, then over samples. Each sample's bins sum to 1.
inline BinProfile attention_profile(const ModelParams& params, const std::vector<SequenceData>& samples) {
    require_arg(!samples.empty(), "attention_profile: need at least one sample");
    BinProfile prof;
    prof.quantity = BinQuantity::attention;
    for (const SequenceData& seq : samples) {
        ForwardCache cache;
        model_forward(params, seq, &cache);
        int L = seq.len();
        int nh = params.cfg.n_heads, nb = params.cfg.n_layers;
        for (int j = 0; j < L; ++j) {
            double w = 0.0;
            for (const BlockCache& bc : cache.blocks)
                for (const Tensor& probs : bc.probs) w += probs.at(L - 1, j);
            w /= static_cast<double>(nh) * nb;
            prof.value[static_cast<size_t>(bin_of(j, L))] += w;
        }
    }
    for (auto& v : prof.value) v /= static_cast<double>(samples.size());
    return prof;
}

// Mean L2 norm of dLoss/d(input row) by relative position, pooled over all
// (sample, position) pairs falling in a bin.
inline BinProfile gradient_profile(const ModelParams& params, const std::vector<SequenceData>& samples) {
    require_arg(!samples.empty(), "gradient_profile: need at least one sample");
    BinProfile prof;
    prof.quantity = BinQuantity::gradient;
    std::array<double, kProfileBins> count{};
    for (const SequenceData& seq : samples) {
        ForwardCache cache;
        Tensor logits = model_forward(params, seq, &cache);
        Tensor dlogits;
        compute_loss(logits, seq, &dlogits);
        ModelParams grads = make_params(params.cfg);
        std::vector<double> norms;
        model_backward(params, seq, cache, dlogits, grads, &norms);
        int L = seq.len();
        for (int p = 0; p < L; ++p) {
            int b = bin_of(p, L);
            prof.value[static_cast<size_t>(b)] += norms[static_cast<size_t>(p)];
            count[static_cast<size_t>(b)] += 1.0;
        }
    }
    for (int b = 0; b < kProfileBins; ++b)
        if (count[static_cast<size_t>(b)] > 0.0) prof.value[static_cast<size_t>(b)] /= count[static_cast<size_t>(b)];
    return prof;
}

// ---------------------------------------------------------------------------
// needle-in-a-haystack evaluation

struct NiahResult {
    std::vector<int> lengths;    // filler lengths (context size axis)
    std::vector<double> depths;  // needle depth axis
    Tensor accuracy;             // lengths x depths

    double at_depth(double depth) const {  // mean accuracy across lengths at one depth
        for (size_t j = 0; j < depths.size(); ++j)
            if (depths[j] == depth) {
                double s = 0.0;
                for (size_t i = 0; i < lengths.size(); ++i) s += accuracy.at(static_cast<int64_t>(i), static_cast<int64_t>(j));
                return s / static_cast<double>(lengths.size());
            }
        throw std::invalid_argument("at_depth: depth not evaluated");
    }

    double mean() const {
        double s = 0.0;
        for (double a : accuracy.v) s += a;
        return s / static_cast<double>(accuracy.v.size());
    }
};

// Greedy single-step retrieval accuracy over a (length x depth) grid of
// visual_needle prompts; `trials` instances per cell.
inline NiahResult evaluate_niah(const ModelParams& params, const TaskSpec& base, const SyntheticEncoder& enc,
                                const std::vector<int>& lengths, const std::vector<double>& depths, int trials,
                                uint64_t eval_seed) {
    require_arg(!lengths.empty() && !depths.empty() && trials >= 1, "evaluate_niah: empty evaluation grid");
    NiahResult res;
    res.lengths = lengths;
    res.depths = depths;
    res.accuracy = Tensor::matrix(static_cast<int64_t>(lengths.size()), static_cast<int64_t>(depths.size()));
    for (size_t i = 0; i < lengths.size(); ++i)
        for (size_t j = 0; j < depths.size(); ++j) {
            TaskSpec spec = base;
            spec.kind = TaskKind::visual_needle;
            spec.filler_len = lengths[i];
            spec.depth = depths[j];
            spec.seed = Rng(eval_seed).fork((i << 16) | j).next_u64();
            int hits = 0;
            for (int t = 0; t < trials; ++t) {
                TaskInstance inst = gen_task(spec, params.cfg, enc, static_cast<uint64_t>(t), false);
                DecodeResult dec = greedy_decode(params, inst.seq, 1);
                if (dec.tokens[0] == inst.answer[0]) ++hits;
            }
            res.accuracy.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) =
                static_cast<double>(hits) / trials;
        }
    return res;
}

}  // namespace comemo

#pragma once

#include <map>

#include "comemo/model.hpp"

namespace comemo {

// Mean cross-entropy over loss-masked positions; optionally writes dL/dlogits
// (softmax minus one-hot, divided by the number of targets; zero elsewhere).
inline double compute_loss(const Tensor& logits, const SequenceData& seq, Tensor* dlogits = nullptr) {
    int L = seq.len();
    int V = static_cast<int>(logits.cols());
    require_shape(logits.rows() == L, "compute_loss: logits rows != sequence length");
    int n = 0;
    for (int p = 0; p < L; ++p) n += seq.loss_mask[static_cast<size_t>(p)] ? 1 : 0;
    require_arg(n >= 1, "compute_loss: no masked positions");
    if (dlogits) {
        *dlogits = Tensor::matrix(L, V);
    }
    double total = 0.0;
    for (int p = 0; p < L; ++p) {
        if (!seq.loss_mask[static_cast<size_t>(p)]) continue;
        int tgt = seq.targets[static_cast<size_t>(p)];
        require_arg(tgt >= 0 && tgt < V, "compute_loss: target out of range at position " + std::to_string(p));
        const double* row = logits.row(p);
        double mx = row[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < V; ++c) denom += std::exp(row[c] - mx);
        double logz = mx + std::log(denom);
        total += logz - row[tgt];
        if (dlogits) {
            double* dr = dlogits->row(p);
            for (int c = 0; c < V; ++c) dr[c] = std::exp(row[c] - logz) / n;
            dr[tgt] -= 1.0 / n;
        }
    }
    return total / n;
}

// ---------------------------------------------------------------------------
// training stages

enum class Stage { pretrain1, pretrain2, finetune };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::pretrain1: return "pretrain1";
        case Stage::pretrain2: return "pretrain2";
        case Stage::finetune: return "finetune";
    }
    return "?";
}

inline Stage stage_from(const std::string& s) {
    if (s == "pretrain1") return Stage::pretrain1;
    if (s == "pretrain2") return Stage::pretrain2;
    if (s == "finetune") return Stage::finetune;
    throw std::invalid_argument("unknown stage: " + s);
}

enum class LrSchedule { constant_warmup, cosine };

struct StageConfig {
    Stage stage = Stage::pretrain1;
    int steps = 200;
    int batch_size = 8;
    double lr = 1e-4;
    LrSchedule schedule = LrSchedule::constant_warmup;
    double warmup_ratio = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;

    int warmup_steps() const { return std::max(1, static_cast<int>(std::llround(warmup_ratio * steps))); }
};

// Stage defaults; step counts keep the 2:2:9 proportion of the full recipe.
inline StageConfig make_stage(Stage s) {
    StageConfig c;
    c.stage = s;
    switch (s) {
        case Stage::pretrain1:
        case Stage::pretrain2:
            c.steps = 200;
            c.lr = 1e-4;
            c.schedule = LrSchedule::constant_warmup;
            break;
        case Stage::finetune:
            c.steps = 900;
            c.lr = 4e-5;
            c.schedule = LrSchedule::cosine;
            break;
    }
    return c;
}

// pretrain1 trains projector + mixin layers (gates included); pretrain2
// freezes the gates; finetune trains everything.
inline bool trainable_in(Stage s, const std::string& name) {
    ParamGroup g = group_of(name);
    switch (s) {
        case Stage::pretrain1:
            return g == ParamGroup::projector || g == ParamGroup::mixin || g == ParamGroup::gates;
        case Stage::pretrain2:
            return g == ParamGroup::projector || g == ParamGroup::mixin;
        case Stage::finetune:
            return true;
    }
    return false;
}

// Learning rate at an integer step (0-based). Warmup is linear up to lr; the
// cosine branch decays to exactly 0 at step == steps.
inline double lr_at(const StageConfig& c, int step) {
    int w = c.warmup_steps();
    if (step < w) return c.lr * (step + 1) / w;
    if (c.schedule == LrSchedule::constant_warmup) return c.lr;
    double span = static_cast<double>(std::max(1, c.steps - w));
    double p = std::clamp((step - w) / span, 0.0, 1.0);
    return c.lr * 0.5 * (1.0 + std::cos(M_PI * p));
}

struct TrainMetricsRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::vector<double> gates;  // tanh(attn_gate) per mixin, in order
};

struct StageReport {
    std::vector<TrainMetricsRow> rows;
    double final_loss = 0.0;
};

// deterministic sample source: index -> prepared sequence
using DataStream = std::function<SequenceData(uint64_t)>;

namespace detail {

struct NamedTensors {
    std::vector<std::string> names;
    std::vector<Tensor*> tensors;
};

inline NamedTensors collect(ModelParams& p) {
    NamedTensors nt;
    p.for_each([&](const std::string& n, Tensor& t) {
        nt.names.push_back(n);
        nt.tensors.push_back(&t);
    });
    return nt;
}

}  // namespace detail

// One full optimization stage with AdamW: batch-mean loss, global-norm
// gradient clipping over the trainable set, frozen groups left bitwise
// untouched. Throws on non-finite loss.
inline StageReport run_stage(ModelParams& params, const StageConfig& cfg, const DataStream& stream,
                             uint64_t sample_base = 0) {
    require_arg(cfg.steps >= 1 && cfg.batch_size >= 1, "run_stage: steps and batch_size must be positive");
    ModelParams m_state = make_params(params.cfg);
    ModelParams v_state = make_params(params.cfg);
    ModelParams grads = make_params(params.cfg);
    detail::NamedTensors pt = detail::collect(params);
    detail::NamedTensors gt = detail::collect(grads);
    detail::NamedTensors mt = detail::collect(m_state);
    detail::NamedTensors vt = detail::collect(v_state);
    std::vector<uint8_t> train_flag(pt.names.size());
    for (size_t i = 0; i < pt.names.size(); ++i) train_flag[i] = trainable_in(cfg.stage, pt.names[i]) ? 1 : 0;

    StageReport report;
    for (int step = 0; step < cfg.steps; ++step) {
        for (Tensor* g : gt.tensors) g->zero();
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            SequenceData seq = stream(sample_base + static_cast<uint64_t>(step) * cfg.batch_size + b);
            ForwardCache cache;
            Tensor logits = model_forward(params, seq, &cache);
            Tensor dlogits;
            loss_sum += compute_loss(logits, seq, &dlogits);
            for (auto& x : dlogits.v) x /= cfg.batch_size;
            model_backward(params, seq, cache, dlogits, grads);
        }
        double loss = loss_sum / cfg.batch_size;
        if (!std::isfinite(loss))
            throw std::runtime_error("run_stage: non-finite loss at step " + std::to_string(step) + ", aborting");

        double sq = 0.0;
        for (size_t i = 0; i < gt.tensors.size(); ++i) {
            if (!train_flag[i]) continue;
            for (double g : gt.tensors[i]->v) sq += g * g;
        }
        double gnorm = std::sqrt(sq);
        double clip_scale = (gnorm > cfg.clip_norm) ? cfg.clip_norm / gnorm : 1.0;

        double lr = lr_at(cfg, step);
        double t = static_cast<double>(step + 1);
        double bc1 = 1.0 - std::pow(cfg.beta1, t);
        double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (size_t i = 0; i < pt.tensors.size(); ++i) {
            if (!train_flag[i]) continue;
            Tensor& th = *pt.tensors[i];
            Tensor& g = *gt.tensors[i];
            Tensor& m = *mt.tensors[i];
            Tensor& v = *vt.tensors[i];
            for (size_t j = 0; j < th.v.size(); ++j) {
                double gj = g.v[j] * clip_scale;
                m.v[j] = cfg.beta1 * m.v[j] + (1.0 - cfg.beta1) * gj;
                v.v[j] = cfg.beta2 * v.v[j] + (1.0 - cfg.beta2) * gj * gj;
                double mhat = m.v[j] / bc1;
                double vhat = v.v[j] / bc2;
                th.v[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * th.v[j]);
            }
        }

        TrainMetricsRow row;
        row.step = step;
        row.loss = loss;
        row.lr = lr;
        for (const MixinParams& mp : params.mixins) row.gates.push_back(std::tanh(mp.attn_gate.v[0]));
        report.rows.push_back(std::move(row));
        report.final_loss = loss;
    }
    return report;
}

// ---------------------------------------------------------------------------
// finite-difference gradient verification

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::map<std::string, double> group_max;  // worst relative error per group
    int n_checked = 0;
};

// Central differences on randomly sampled coordinates of every tensor,
// compared against the analytic gradients. Relative error uses
// |a - n| / max(1, |a|, |n|).
inline GradCheckReport grad_check(const ModelParams& params, const SequenceData& seq, int per_tensor = 3,
                                  double eps = 1e-5, uint64_t seed = 0) {
    ModelParams grads = make_params(params.cfg);
    {
        ForwardCache cache;
        Tensor logits = model_forward(params, seq, &cache);
        Tensor dlogits;
        compute_loss(logits, seq, &dlogits);
        model_backward(params, seq, cache, dlogits, grads);
    }
    ModelParams work = params;
    detail::NamedTensors wt = detail::collect(work);
    detail::NamedTensors gt = detail::collect(grads);
    auto loss_of = [&]() {
        Tensor logits = model_forward(work, seq);
        return compute_loss(logits, seq);
    };
    Rng rng(seed);
    GradCheckReport rep;
    for (size_t i = 0; i < wt.tensors.size(); ++i) {
        Tensor& t = *wt.tensors[i];
        const Tensor& g = *gt.tensors[i];
        std::string group = to_string(group_of(wt.names[i]));
        int n_coords = std::min<int>(per_tensor, static_cast<int>(t.v.size()));
        for (int c = 0; c < n_coords; ++c) {
            size_t idx = static_cast<size_t>(rng.below(t.v.size()));
            double saved = t.v[idx];
            t.v[idx] = saved + eps;
            double lp = loss_of();
            t.v[idx] = saved - eps;
            double lm = loss_of();
            t.v[idx] = saved;
            double numeric = (lp - lm) / (2.0 * eps);
            double analytic = g.v[idx];
            double rel = std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            auto [it, inserted] = rep.group_max.try_emplace(group, rel);
            if (!inserted) it->second = std::max(it->second, rel);
            ++rep.n_checked;
        }
    }
    return rep;
}

}  // namespace comemo

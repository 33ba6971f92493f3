// Command-line workbench around the library: train on synthetic multimodal
// tasks, decode, run retrieval evals and attention analyses, and self-check
// the numerical invariants. Every artifact-producing run also writes a
// reproducibility record (resolved settings + version); identical settings
// and seed give byte-identical artifacts.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "comemo/comemo.hpp"

namespace {

using namespace comemo;

// ---------------------------------------------------------------------------
// settings: one string map per command, resolved from defaults, then the
// --config file, then explicit flags (later sources win)

using KvList = std::vector<std::pair<std::string, std::string>>;

struct Resolved {
    std::map<std::string, std::string> kv;
    std::set<std::string> explicit_keys;  // set via config file or flag

    const std::string& str(const std::string& k) const { return kv.at(k); }
    bool is_explicit(const std::string& k) const { return explicit_keys.count(k) > 0; }
};

KvList model_defaults() {
    return {{"d_model", "64"},     {"n_heads", "4"},        {"n_layers", "8"},  {"mixin_every", "4"},
            {"vocab_size", "64"},  {"d_vit", "32"},         {"d_ff", "128"},    {"shuffle_factor", "1"},
            {"rope_theta", "10000"}, {"use_memory", "true"}, {"allocation", ""}, {"mode", "dhr"}};
}

KvList task_defaults() {
    return {{"task", "visual_needle"}, {"span_len", "8"},   {"filler_len", "8"}, {"n_images", "3"},
            {"depth", "0.5"},          {"tile_rows", "2"},  {"tile_cols", "2"},  {"tile_patch", "2"},
            {"thumb_patch", "2"}};
}

KvList defaults_for(const std::string& cmd) {
    KvList kv = {{"seed", "0"}};
    auto extend = [&kv](const KvList& more) { kv.insert(kv.end(), more.begin(), more.end()); };
    if (cmd == "train") {
        extend(model_defaults());
        extend(task_defaults());
        extend({{"stage", "finetune"}, {"steps", ""}, {"batch", ""}, {"lr", ""}, {"init_from", ""}});
    } else if (cmd == "decode") {
        extend(model_defaults());
        extend(task_defaults());
        extend({{"ckpt", ""}, {"gen_steps", "8"}, {"task_index", "0"}});
    } else if (cmd == "eval-niah") {
        extend(model_defaults());
        extend(task_defaults());
        extend({{"ckpt", ""}, {"lengths", "4,8,16"}, {"depths", "0,0.5,1"}, {"trials", "8"}});
    } else if (cmd == "analyze-bins") {
        extend(model_defaults());
        extend(task_defaults());
        extend({{"ckpt", ""}, {"samples", "4"}, {"quantity", "both"}});
    } else if (cmd == "analyze-decay") {
        extend({{"d", "64"}, {"max", "4096"}, {"trials", "1000"}, {"theta", "10000"}, {"kind", "empirical"}});
    }
    return kv;  // verify only takes a seed
}

const std::map<std::string, std::string>& key_help() {
    static const std::map<std::string, std::string> h = {
        {"seed", "master seed for init, data and evals"},
        {"d_model", "residual stream width"},
        {"n_heads", "attention heads"},
        {"n_layers", "causal blocks"},
        {"mixin_every", "cross-attention mixin after every k-th block"},
        {"vocab_size", "token vocabulary size"},
        {"d_vit", "visual feature width"},
        {"d_ff", "feed-forward hidden width"},
        {"shuffle_factor", "pixel-shuffle fold applied to visual patches"},
        {"rope_theta", "rotary frequency base"},
        {"use_memory", "enable the cross-attention memory path (true/false)"},
        {"allocation", "detail split: dhr-s, dhr-x or dhr-b (empty = full detail on both paths)"},
        {"mode", "position-id scheme: vanilla, dhr or dhr_nc"},
        {"task", "synthetic task: copy, visual_needle or grid_probe"},
        {"span_len", "copy task: span length"},
        {"filler_len", "visual_needle: filler tokens after each image"},
        {"n_images", "visual_needle: haystack size"},
        {"depth", "visual_needle: relative needle position in [0,1]"},
        {"tile_rows", "image layout: tile grid rows"},
        {"tile_cols", "image layout: tile grid cols"},
        {"tile_patch", "image layout: patches per tile side"},
        {"thumb_patch", "image layout: patches per thumbnail side"},
        {"stage", "training stage: pretrain1, pretrain2 or finetune"},
        {"steps", "optimization steps (empty = stage preset)"},
        {"batch", "sequences per step (empty = stage preset)"},
        {"lr", "peak learning rate (empty = stage preset)"},
        {"init_from", "checkpoint to start from (empty = fresh init)"},
        {"ckpt", "checkpoint to load (empty = fresh init)"},
        {"gen_steps", "tokens to generate"},
        {"task_index", "which task instance to decode"},
        {"lengths", "comma-separated filler lengths (context-size axis)"},
        {"depths", "comma-separated needle depths"},
        {"trials", "draws per evaluation cell / curve"},
        {"samples", "task instances to profile"},
        {"quantity", "profile: attention, gradient or both"},
        {"d", "rotary head dimension"},
        {"max", "largest key distance"},
        {"theta", "rotary frequency base"},
        {"kind", "curve selection: empirical, bound or both"},
    };
    return h;
}

const std::set<std::string>& registry() {
    static const std::set<std::string> keys = [] {
        std::set<std::string> s;
        for (const char* cmd : {"train", "decode", "eval-niah", "analyze-bins", "analyze-decay", "verify"})
            for (const auto& [k, v] : defaults_for(cmd)) s.insert(k);
        return s;
    }();
    return keys;
}

struct ArgBag {
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> opts;

    void wire(CLI::App* cmd, const KvList& defaults) {
        for (const auto& [key, def] : defaults) {
            std::string flag = "--" + key;
            std::replace(flag.begin(), flag.end(), '_', '-');
            std::string help = key_help().at(key);
            if (!def.empty()) help += " [" + def + "]";
            opts[key] = cmd->add_option(flag, values[key], help);
        }
    }
};

Resolved resolve(const KvList& defaults, const std::string& config_path, const ArgBag& bag) {
    Resolved r;
    for (const auto& [k, v] : defaults) r.kv[k] = v;
    if (!config_path.empty()) {
        for (const auto& [k, v] : parse_config_file(config_path)) {
            if (!registry().count(k)) throw std::invalid_argument("config: unknown setting '" + k + "'");
            if (r.kv.count(k)) {  // keys belonging to other commands are ignored
                r.kv[k] = v;
                r.explicit_keys.insert(k);
            }
        }
    }
    for (const auto& [k, opt] : bag.opts)
        if (opt->count() > 0) {
            r.kv[k] = bag.values.at(k);
            r.explicit_keys.insert(k);
        }
    return r;
}

// ---------------------------------------------------------------------------
// typed accessors (errors name the offending setting)

int geti(const Resolved& s, const std::string& k) {
    try {
        size_t pos = 0;
        int v = std::stoi(s.str(k), &pos);
        if (pos != s.str(k).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("setting " + k + ": not an integer: '" + s.str(k) + "'");
    }
}

uint64_t getu(const Resolved& s, const std::string& k) {
    try {
        size_t pos = 0;
        uint64_t v = std::stoull(s.str(k), &pos);
        if (pos != s.str(k).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("setting " + k + ": not a non-negative integer: '" + s.str(k) + "'");
    }
}

double getd(const Resolved& s, const std::string& k) {
    try {
        size_t pos = 0;
        double v = std::stod(s.str(k), &pos);
        if (pos != s.str(k).size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("setting " + k + ": not a number: '" + s.str(k) + "'");
    }
}

bool getb(const Resolved& s, const std::string& k) {
    const std::string& v = s.str(k);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("setting " + k + ": expected true/false: '" + v + "'");
}

std::vector<int> int_list(const Resolved& s, const std::string& k) {
    std::vector<int> out;
    std::string v = s.str(k);
    size_t pos = 0;
    while (pos <= v.size()) {
        size_t comma = v.find(',', pos);
        std::string item = v.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        pos = (comma == std::string::npos) ? v.size() + 1 : comma + 1;
        try {
            size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw std::invalid_argument("setting " + k + ": bad list entry '" + item + "'");
        }
    }
    return out;
}

std::vector<double> double_list(const Resolved& s, const std::string& k) {
    std::vector<double> out;
    std::string v = s.str(k);
    size_t pos = 0;
    while (pos <= v.size()) {
        size_t comma = v.find(',', pos);
        std::string item = v.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        pos = (comma == std::string::npos) ? v.size() + 1 : comma + 1;
        try {
            size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw std::invalid_argument("setting " + k + ": bad list entry '" + item + "'");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// domain object builders

ModelConfig config_of(const Resolved& s) {
    ModelConfig cfg;
    cfg.d_model = geti(s, "d_model");
    cfg.n_heads = geti(s, "n_heads");
    cfg.n_layers = geti(s, "n_layers");
    cfg.mixin_every = geti(s, "mixin_every");
    cfg.vocab_size = geti(s, "vocab_size");
    cfg.d_vit = geti(s, "d_vit");
    cfg.d_ff = geti(s, "d_ff");
    cfg.shuffle_factor = geti(s, "shuffle_factor");
    cfg.rope_theta = getd(s, "rope_theta");
    cfg.use_memory = getb(s, "use_memory");
    if (!s.str("allocation").empty()) cfg.apply_allocation(allocation_mode_from(s.str("allocation")));
    validate_config(cfg);
    return cfg;
}

TaskSpec spec_of(const Resolved& s) {
    TaskSpec spec;
    spec.kind = task_from(s.str("task"));
    spec.mode = encoding_mode_from(s.str("mode"));
    spec.layout.tile_rows = geti(s, "tile_rows");
    spec.layout.tile_cols = geti(s, "tile_cols");
    spec.layout.tile_patch = geti(s, "tile_patch");
    spec.layout.thumb_patch = geti(s, "thumb_patch");
    spec.layout.shuffle_factor = geti(s, "shuffle_factor");
    validate_layout(spec.layout);
    spec.span_len = geti(s, "span_len");
    spec.filler_len = geti(s, "filler_len");
    spec.n_images = geti(s, "n_images");
    spec.depth = getd(s, "depth");
    spec.seed = getu(s, "seed");
    return spec;
}

// Fresh init from the model flags, or a checkpoint (whose config then wins;
// only allocation/use_memory flags given explicitly still apply on top).
ModelParams params_of(const Resolved& s, const std::string& ckpt_key) {
    const std::string& path = s.str(ckpt_key);
    if (path.empty()) return init_params(config_of(s), getu(s, "seed"));
    ModelParams p = load_checkpoint(path);
    if (s.is_explicit("allocation") && !s.str("allocation").empty())
        p.cfg.apply_allocation(allocation_mode_from(s.str("allocation")));
    if (s.is_explicit("use_memory")) p.cfg.use_memory = getb(s, "use_memory");
    validate_config(p.cfg);
    return p;
}

void write_record(const std::filesystem::path& out, const std::string& command, const Resolved& s,
                  const KvList& extra = {}) {
    KvList kv;
    kv.emplace_back("command", command);
    for (const auto& [k, v] : s.kv) kv.emplace_back(k, v);
    kv.insert(kv.end(), extra.begin(), extra.end());
    write_file_atomic(out / "run.txt", run_record(kv));
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(v[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// commands

int cmd_train(const Resolved& s, const std::filesystem::path& out) {
    ModelParams params = params_of(s, "init_from");
    const ModelConfig& cfg = params.cfg;
    TaskSpec spec = spec_of(s);
    StageConfig stage = make_stage(stage_from(s.str("stage")));
    if (!s.str("steps").empty()) stage.steps = geti(s, "steps");
    if (!s.str("batch").empty()) stage.batch_size = geti(s, "batch");
    if (!s.str("lr").empty()) stage.lr = getd(s, "lr");

    DataStream stream = task_stream(spec, cfg, make_encoder(cfg, getu(s, "seed")));
    StageReport report = run_stage(params, stage, stream);

    write_file_atomic(out / "metrics.csv", metrics_csv(report.rows));
    save_checkpoint(params, out / "checkpoint.bin");
    write_record(out, "train", s, {{"resolved_config", config_to_json(cfg).dump()}});
    std::cout << "steps=" << stage.steps << "\n";
    std::cout << "final_loss=" << fmt_double(report.final_loss) << "\n";
    std::cout << "average_gates=" << fmt_double(average_gates(params)) << "\n";
    std::cout << "checkpoint=" << (out / "checkpoint.bin").string() << "\n";
    return 0;
}

int cmd_decode(const Resolved& s, const std::filesystem::path& out) {
    ModelParams params = params_of(s, "ckpt");
    TaskSpec spec = spec_of(s);
    SyntheticEncoder enc = make_encoder(params.cfg, getu(s, "seed"));
    TaskInstance inst = gen_task(spec, params.cfg, enc, getu(s, "task_index"), false);
    DecodeResult dec = greedy_decode(params, inst.seq, geti(s, "gen_steps"));

    bool match = dec.tokens.size() >= inst.answer.size() &&
                 std::equal(inst.answer.begin(), inst.answer.end(), dec.tokens.begin());
    std::string text;
    text += "prompt=" + join_ints(inst.seq.tokens) + "\n";
    text += "generated=" + join_ints(dec.tokens) + "\n";
    text += "pos_ids=" + join_ints(dec.pos_ids) + "\n";
    text += "answer=" + join_ints(inst.answer) + "\n";
    text += std::string("match=") + (match ? "1" : "0") + "\n";
    write_file_atomic(out / "decode.txt", text);
    write_record(out, "decode", s, {{"resolved_config", config_to_json(params.cfg).dump()}});
    std::cout << "generated=" << join_ints(dec.tokens) << "\n";
    std::cout << "answer=" << join_ints(inst.answer) << "\n";
    std::cout << "match=" << (match ? "1" : "0") << "\n";
    return 0;
}

int cmd_eval_niah(const Resolved& s, const std::filesystem::path& out) {
    ModelParams params = params_of(s, "ckpt");
    TaskSpec spec = spec_of(s);
    SyntheticEncoder enc = make_encoder(params.cfg, getu(s, "seed"));
    NiahResult res = evaluate_niah(params, spec, enc, int_list(s, "lengths"), double_list(s, "depths"),
                                   geti(s, "trials"), getu(s, "seed"));

    write_file_atomic(out / "niah.csv", niah_csv(res));
    write_file_atomic(out / "niah.pgm", niah_pgm(res));
    write_record(out, "eval-niah", s, {{"resolved_config", config_to_json(params.cfg).dump()}});
    std::cout << "cells=" << res.lengths.size() * res.depths.size() << "\n";
    std::cout << "mean_accuracy=" << fmt_double(res.mean()) << "\n";
    return 0;
}

int cmd_analyze_decay(const Resolved& s, const std::filesystem::path& out) {
    RopeConfig rc;
    rc.head_dim = geti(s, "d");
    rc.theta_base = getd(s, "theta");
    validate_rope(rc);
    int dmax = geti(s, "max");
    int trials = geti(s, "trials");
    require_arg(dmax >= 1, "analyze-decay: max must be >= 1");
    const std::string& kind = s.str("kind");
    if (kind != "empirical" && kind != "bound" && kind != "both")
        throw std::invalid_argument("setting kind: expected empirical, bound or both: '" + kind + "'");

    std::vector<DecayCurve> curves;
    if (kind == "empirical" || kind == "both") curves.push_back(empirical_decay_curve(rc, dmax, trials, getu(s, "seed")));
    if (kind == "bound" || kind == "both") curves.push_back(bound_decay_curve(rc, dmax, trials, getu(s, "seed")));

    double value_at_zero = curves.front().values.at(0);
    // the csv carries distances 1..max; the zero-distance anchor goes to stdout
    for (DecayCurve& c : curves) {
        c.distances.erase(c.distances.begin());
        c.values.erase(c.values.begin());
    }
    double tail = 0.0;
    size_t half = curves.front().values.size() / 2;
    for (size_t i = half; i < curves.front().values.size(); ++i) tail += curves.front().values[i];
    tail /= static_cast<double>(curves.front().values.size() - half);

    write_file_atomic(out / "decay.csv", decay_csv(curves));
    write_record(out, "analyze-decay", s);
    std::cout << "rows=" << curves.size() * static_cast<size_t>(dmax) << "\n";
    std::cout << "value_at_zero=" << fmt_double(value_at_zero) << "\n";
    std::cout << "tail_mean=" << fmt_double(tail) << "\n";
    return 0;
}

int cmd_analyze_bins(const Resolved& s, const std::filesystem::path& out) {
    ModelParams params = params_of(s, "ckpt");
    TaskSpec spec = spec_of(s);
    SyntheticEncoder enc = make_encoder(params.cfg, getu(s, "seed"));
    int n = geti(s, "samples");
    require_arg(n >= 1, "analyze-bins: samples must be >= 1");
    const std::string& quantity = s.str("quantity");
    if (quantity != "attention" && quantity != "gradient" && quantity != "both")
        throw std::invalid_argument("setting quantity: expected attention, gradient or both: '" + quantity + "'");

    std::vector<SequenceData> samples;
    for (int i = 0; i < n; ++i) samples.push_back(gen_task(spec, params.cfg, enc, static_cast<uint64_t>(i)).seq);

    std::vector<BinProfile> profiles;
    if (quantity == "attention" || quantity == "both") profiles.push_back(attention_profile(params, samples));
    if (quantity == "gradient" || quantity == "both") profiles.push_back(gradient_profile(params, samples));

    write_file_atomic(out / "bins.csv", bins_csv(profiles));
    write_record(out, "analyze-bins", s, {{"resolved_config", config_to_json(params.cfg).dump()}});
    std::cout << "samples=" << n << "\n";
    for (const BinProfile& p : profiles) {
        double sum = 0.0;
        for (double v : p.value) sum += v;
        std::cout << to_string(p.quantity) << "_sum=" << fmt_double(sum) << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// verify: numerical invariants on fixed small instances; nonzero exit if any
// check fails

ModelConfig verify_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 4;
    cfg.mixin_every = 2;
    cfg.vocab_size = 32;
    cfg.d_vit = 6;
    cfg.d_ff = 32;
    return cfg;
}

TaskSpec verify_spec(uint64_t seed) {
    TaskSpec spec;
    spec.kind = TaskKind::visual_needle;
    spec.mode = EncodingMode::dhr;
    spec.layout.tile_rows = 1;
    spec.layout.tile_cols = 2;
    spec.layout.tile_patch = 2;
    spec.layout.thumb_patch = 2;
    spec.n_images = 2;
    spec.filler_len = 2;
    spec.seed = seed;
    return spec;
}

int cmd_verify(const Resolved& s, const std::filesystem::path& out) {
    uint64_t seed = getu(s, "seed");
    bool all_ok = true;
    auto report = [&all_ok](const std::string& name, bool pass, const std::string& detail) {
        std::cout << "verify " << name << ": " << (pass ? "ok" : "FAIL") << " (" << detail << ")\n";
        all_ok = all_ok && pass;
    };

    {  // phase-sum identity of the rotary inner product
        double worst = 0.0;
        for (int d : {8, 64}) {
            RopeConfig rc;
            rc.head_dim = d;
            Rng rng(seed ^ static_cast<uint64_t>(d));
            for (int t = 0; t < 400; ++t) {
                std::vector<double> h(static_cast<size_t>(d));
                for (auto& x : h) x = rng.normal();
                auto [lhs, rhs] = abel_identity_check(complex_pairs(h), static_cast<double>(rng.below(4096)), rc);
                worst = std::max(worst, std::abs(lhs - rhs));
            }
        }
        report("abel-identity", worst <= 1e-10, "max |lhs-rhs| = " + fmt_double(worst));
    }

    {  // score magnitude never exceeds the partial-sum bound
        RopeConfig rc;
        rc.head_dim = 64;
        Rng rng(seed ^ 0xb0d7ull);
        int violations = 0;
        for (int t = 0; t < 400; ++t) {
            std::vector<double> q(64), k(64);
            for (auto& x : q) x = rng.normal();
            for (auto& x : k) x = rng.normal();
            BoundResult b = decay_bound(q, k, static_cast<double>(rng.below(4096)), rc);
            if (b.inner_abs > b.bound + 1e-9) ++violations;
        }
        report("decay-bound", violations == 0, std::to_string(violations) + " violations in 400 draws");
    }

    ModelConfig cfg = verify_config();
    SyntheticEncoder enc(cfg.vocab_size, cfg.d_vit, seed ^ 0xe2cull);

    {  // zero-initialized gates leave the text path bit-for-bit unchanged
        ModelParams p = init_params(cfg, seed);
        double worst = 0.0;
        for (uint64_t i = 0; i < 8; ++i) {
            SequenceData seq = gen_task(verify_spec(seed + 1), cfg, enc, i).seq;
            Tensor with_mem = model_forward(p, seq);
            Tensor without = model_forward(p, seq, nullptr, false);
            for (size_t j = 0; j < with_mem.v.size(); ++j)
                worst = std::max(worst, std::abs(with_mem.v[j] - without.v[j]));
        }
        report("gate-zero-identity", worst <= 1e-9, "max |dlogit| = " + fmt_double(worst));
    }

    {  // analytic gradients against central differences
        ModelParams p = init_params(cfg, seed + 2);
        for (size_t i = 0; i < p.mixins.size(); ++i) p.mixins[i].attn_gate.v[0] = (i % 2 == 0) ? 0.3 : -0.2;
        SequenceData seq = gen_task(verify_spec(seed + 3), cfg, enc, 0).seq;
        GradCheckReport r = grad_check(p, seq, 2, 1e-5, seed);
        report("gradient-check", r.max_rel_err < 1e-5,
               "max rel err = " + fmt_double(r.max_rel_err) + " over " + std::to_string(r.n_checked) + " coords");
    }

    {  // cached greedy decoding equals step-wise full re-forwards
        int mismatches = 0, total = 0;
        for (EncodingMode mode : {EncodingMode::vanilla, EncodingMode::dhr, EncodingMode::dhr_nc}) {
            for (uint64_t t = 0; t < 2; ++t) {
                ModelParams p = init_params(cfg, seed + 10 + t);
                for (MixinParams& m : p.mixins) m.attn_gate.v[0] = 0.3;
                Rng rng(seed + 20 + t);
                DhrLayout l = verify_spec(0).layout;
                std::map<int, SyntheticImage> images{
                    {0, enc.make_image(l.src_rows(), l.src_cols(), {}, rng.next_u64())}};
                std::vector<PlanItem> items{PlanItem::text(2), PlanItem::image(0, l), PlanItem::text(2)};
                std::vector<int> toks{3, 4, 5, 6};
                SequenceData prompt = prepare_sequence(items, images, mode, cfg, toks);
                DecodeResult fast = greedy_decode(p, prompt, 6);
                std::vector<int> cur_toks = toks;
                for (int step = 0; step < 6; ++step) {
                    std::vector<PlanItem> cur = items;
                    if (step > 0) cur.push_back(PlanItem::text(step));
                    SequenceData seq = prepare_sequence(cur, images, mode, cfg, cur_toks);
                    Tensor logits = model_forward(p, seq);
                    int next = argmax_row(logits.row(seq.len() - 1), cfg.vocab_size);
                    ++total;
                    if (next != fast.tokens[static_cast<size_t>(step)]) ++mismatches;
                    cur_toks.push_back(next);
                }
            }
        }
        report("decode-consistency", mismatches == 0,
               std::to_string(mismatches) + " mismatches in " + std::to_string(total) + " steps");
    }

    write_record(out, "verify", s, {{"result", all_ok ? "pass" : "fail"}});
    return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-path decoder workbench: training, decoding and attention analysis on synthetic multimodal tasks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersionString));

    struct Command {
        CLI::App* sub = nullptr;
        ArgBag bag;
        std::string config_path;
        std::string out_dir = "out";
        int (*run)(const Resolved&, const std::filesystem::path&) = nullptr;
    };
    std::map<std::string, Command> commands;
    auto wire = [&](const std::string& name, const std::string& desc,
                    int (*run)(const Resolved&, const std::filesystem::path&)) {
        Command& c = commands[name];
        c.sub = app.add_subcommand(name, desc);
        c.run = run;
        c.sub->add_option("--config", c.config_path, "key=value settings file (flags override it)");
        c.sub->add_option("--out", c.out_dir, "artifact directory [out]");
        c.bag.wire(c.sub, defaults_for(name));
    };
    wire("train", "optimize one training stage on a synthetic task", cmd_train);
    wire("decode", "greedy-decode a generated task prompt", cmd_decode);
    wire("eval-niah", "needle-retrieval accuracy grid (csv + pgm heatmap)", cmd_eval_niah);
    wire("analyze-decay", "attention-score decay against key distance (csv)", cmd_analyze_decay);
    wire("analyze-bins", "positional attention/gradient profiles (csv)", cmd_analyze_bins);
    wire("verify", "self-check suite; nonzero exit on any failure", cmd_verify);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        if (code != 0) std::cerr << app.help();
        return code;
    }

    for (const auto& [name, c] : commands) {
        if (!c.sub->parsed()) continue;
        try {
            Resolved s = resolve(defaults_for(name), c.config_path, c.bag);
            return c.run(s, c.out_dir);
        } catch (const ShapeError& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        } catch (const std::invalid_argument& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 2;
}

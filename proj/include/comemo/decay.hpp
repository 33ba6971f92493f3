#pragma once

#include <complex>

#include "comemo/rope.hpp"

namespace comemo {

using cd = std::complex<double>;

enum class CurveKind { empirical, bound };

inline const char* to_string(CurveKind k) { return k == CurveKind::empirical ? "empirical" : "bound"; }

struct DecayCurve {
    std::vector<double> distances;  // strictly increasing
    std::vector<double> values;     // non-negative
    CurveKind kind = CurveKind::empirical;
};

// pair (2i, 2i+1) of a real vector as one complex component
inline std::vector<cd> complex_pairs(const std::vector<double>& v) {
    require_shape(v.size() % 2 == 0, "complex_pairs: even length required");
    std::vector<cd> out(v.size() / 2);
    for (size_t i = 0; i < out.size(); ++i) out[i] = cd(v[2 * i], v[2 * i + 1]);
    return out;
}

// partial phase sums S_j = sum_{i<j} e^{i*delta*theta_i}, j = 0..d/2 (S_0 = 0)
inline std::vector<cd> phase_partial_sums(double delta, const RopeConfig& cfg) {
    std::vector<cd> s(static_cast<size_t>(cfg.head_dim / 2) + 1, cd(0.0, 0.0));
    for (int i = 0; i < cfg.head_dim / 2; ++i) {
        double ang = delta * cfg.freq(i);
        s[static_cast<size_t>(i) + 1] = s[static_cast<size_t>(i)] + cd(std::cos(ang), std::sin(ang));
    }
    return s;
}

// Both sides of the Abel summation identity
//   sum h_i (S_{i+1}-S_i) = -sum S_{i+1} (h_{i+1}-h_i)
// with h_{d/2} = 0 and S_0 = 0 applied internally. Returns real parts.
inline std::pair<double, double> abel_identity_check(const std::vector<cd>& h, double delta, const RopeConfig& cfg) {
    require_arg(!h.empty(), "abel_identity_check: h must be non-empty");
    require_shape(static_cast<int>(h.size()) * 2 == cfg.head_dim, "abel_identity_check: |h| must equal head_dim/2");
    std::vector<cd> s = phase_partial_sums(delta, cfg);
    cd lhs(0.0, 0.0), rhs(0.0, 0.0);
    size_t n = h.size();
    for (size_t i = 0; i < n; ++i) {
        lhs += h[i] * (s[i + 1] - s[i]);
        cd h_next = (i + 1 < n) ? h[i + 1] : cd(0.0, 0.0);
        rhs -= s[i + 1] * (h_next - h[i]);
    }
    return {lhs.real(), rhs.real()};
}

struct BoundResult {
    double inner_abs = 0.0;  // |sum h_i e^{i*delta*theta_i}|
    double bound = 0.0;      // max|h_{i+1}-h_i| * sum|S_{i+1}|
};

inline BoundResult decay_bound(const std::vector<double>& q, const std::vector<double>& k, double delta,
                               const RopeConfig& cfg) {
    require_shape(q.size() == k.size(), "decay_bound: dimension mismatch");
    std::vector<cd> qc = complex_pairs(q), kc = complex_pairs(k);
    size_t n = qc.size();
    std::vector<cd> h(n);
    for (size_t i = 0; i < n; ++i) h[i] = qc[i] * std::conj(kc[i]);
    std::vector<cd> s = phase_partial_sums(delta, cfg);
    cd inner(0.0, 0.0);
    double max_diff = 0.0, sum_s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double ang = delta * cfg.freq(static_cast<int>(i));
        inner += h[i] * cd(std::cos(ang), std::sin(ang));
        cd h_next = (i + 1 < n) ? h[i + 1] : cd(0.0, 0.0);
        max_diff = std::max(max_diff, std::abs(h_next - h[i]));
        sum_s += std::abs(s[i + 1]);
    }
    return {std::abs(inner), max_diff * sum_s};
}

// Remote-decay estimate: per trial draw one standard normal vector and pair
// it with itself (a self-correlated q,k pair keeps the per-pair products
// phase-aligned, which is what exhibits the decay; independent pairs are
// provably distance-invariant). Distances 0..delta_max inclusive, same draws
// reused across distances.
inline DecayCurve empirical_decay_curve(const RopeConfig& cfg, int delta_max, int trials, uint64_t seed) {
    validate_rope(cfg);
    require_arg(trials >= 1, "empirical_decay_curve: trials must be >= 1");
    require_arg(delta_max >= 0, "empirical_decay_curve: delta_max must be >= 0");
    size_t n = static_cast<size_t>(cfg.head_dim / 2);
    Rng rng(seed);
    std::vector<std::vector<cd>> hs(static_cast<size_t>(trials), std::vector<cd>(n));
    for (auto& h : hs) {
        std::vector<double> q(static_cast<size_t>(cfg.head_dim));
        for (auto& x : q) x = rng.normal();
        std::vector<cd> qc = complex_pairs(q);
        for (size_t i = 0; i < n; ++i) h[i] = qc[i] * std::conj(qc[i]);  // |q_i|^2, real
    }
    DecayCurve curve;
    curve.kind = CurveKind::empirical;
    std::vector<cd> phase(n);
    for (int delta = 0; delta <= delta_max; ++delta) {
        for (size_t i = 0; i < n; ++i) {
            double ang = static_cast<double>(delta) * cfg.freq(static_cast<int>(i));
            phase[i] = cd(std::cos(ang), std::sin(ang));
        }
        double acc = 0.0;
        for (const auto& h : hs) {
            cd sum(0.0, 0.0);
            for (size_t i = 0; i < n; ++i) sum += h[i] * phase[i];
            acc += std::abs(sum);
        }
        curve.distances.push_back(static_cast<double>(delta));
        curve.values.push_back(acc / trials);
    }
    return curve;
}

// Companion theoretical curve: mean_t max|h_{i+1}-h_i| (distance-free) times
// sum_i |S_{i+1}(delta)|. Same draw scheme as the empirical curve.
inline DecayCurve bound_decay_curve(const RopeConfig& cfg, int delta_max, int trials, uint64_t seed) {
    validate_rope(cfg);
    require_arg(trials >= 1, "bound_decay_curve: trials must be >= 1");
    size_t n = static_cast<size_t>(cfg.head_dim / 2);
    Rng rng(seed);
    double mean_max_diff = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::vector<double> q(static_cast<size_t>(cfg.head_dim));
        for (auto& x : q) x = rng.normal();
        std::vector<cd> qc = complex_pairs(q);
        double max_diff = 0.0;
        for (size_t i = 0; i < n; ++i) {
            cd h_i = qc[i] * std::conj(qc[i]);
            cd h_next = (i + 1 < n) ? qc[i + 1] * std::conj(qc[i + 1]) : cd(0.0, 0.0);
            max_diff = std::max(max_diff, std::abs(h_next - h_i));
        }
        mean_max_diff += max_diff;
    }
    mean_max_diff /= trials;
    DecayCurve curve;
    curve.kind = CurveKind::bound;
    for (int delta = 0; delta <= delta_max; ++delta) {
        std::vector<cd> s = phase_partial_sums(static_cast<double>(delta), cfg);
        double sum_s = 0.0;
        for (size_t i = 1; i < s.size(); ++i) sum_s += std::abs(s[i]);
        curve.distances.push_back(static_cast<double>(delta));
        curve.values.push_back(mean_max_diff * sum_s);
    }
    return curve;
}

}  // namespace comemo

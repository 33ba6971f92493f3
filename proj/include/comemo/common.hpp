#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace comemo {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts unsupported");

// Thrown when tensor/grid dimensions do not line up.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(const std::string& msg, std::string tensor = {})
        : std::runtime_error(tensor.empty() ? msg : msg + " (tensor: " + tensor + ")"),
          tensor_name(std::move(tensor)) {}
    std::string tensor_name;
};

inline void require_arg(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Dense row-major tensor of doubles. Everything in this project is scalar,
// 1-D or 2-D; higher ranks are not needed.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    static Tensor scalar(double x) {
        Tensor t{{1}};
        t.v[0] = x;
        return t;
    }
    static Tensor matrix(int64_t rows, int64_t cols) { return Tensor({rows, cols}); }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }
    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }

    double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols() + c)]; }
    double* row(int64_t r) { return v.data() + r * cols(); }
    const double* row(int64_t r) const { return v.data() + r * cols(); }

    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// streams are identical across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // unbiased uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // standard normal via Box-Muller
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // child stream for an independent purpose (e.g. per-trial streams)
    Rng fork(uint64_t salt) {
        uint64_t s = gen_() ^ (salt * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
        return Rng(s);
    }

private:
    std::mt19937_64 gen_;
};

// FNV-1a over the raw bytes; used for bitwise change/no-change contracts.
inline uint64_t fnv1a(const void* data, size_t n_bytes, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n_bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t checksum(const Tensor& t) {
    return fnv1a(t.v.data(), t.v.size() * sizeof(double));
}

}  // namespace comemo

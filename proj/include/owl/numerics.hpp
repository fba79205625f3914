// Minimal dense kernels shared by the target model, drafter and trainer.
// Everything accumulates in double and stores float; no SIMD, no blocking.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace owl {

using TokenId = int32_t;
using Vec = std::vector<float>;

struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data; // row-major

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    Vec row_vec(int r) const { return Vec(row(r), row(r) + cols); }
    bool empty() const { return data.empty(); }
};

inline double dot(const float* a, const float* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

// y = W x, W is [rows x cols], x has cols entries.
inline Vec matvec(const Mat& w, const Vec& x) {
    if (static_cast<int>(x.size()) != w.cols)
        throw std::invalid_argument("matvec: inner dimension mismatch (" +
                                    std::to_string(w.cols) + " vs " + std::to_string(x.size()) + ")");
    Vec y(w.rows);
    for (int r = 0; r < w.rows; ++r)
        y[r] = static_cast<float>(dot(w.row(r), x.data(), w.cols));
    return y;
}

// y = W^T x, x has rows entries. Used by backward passes.
inline Vec matvec_t(const Mat& w, const Vec& x) {
    if (static_cast<int>(x.size()) != w.rows)
        throw std::invalid_argument("matvec_t: inner dimension mismatch");
    Vec y(w.cols, 0.0f);
    std::vector<double> acc(w.cols, 0.0);
    for (int r = 0; r < w.rows; ++r) {
        const float* wr = w.row(r);
        double xr = x[r];
        for (int c = 0; c < w.cols; ++c) acc[c] += xr * wr[c];
    }
    for (int c = 0; c < w.cols; ++c) y[c] = static_cast<float>(acc[c]);
    return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Exact-erf GeLU: x * Phi(x). The tanh approximation is deliberately not used.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

// d/dx gelu(x) = Phi(x) + x * phi(x)
inline double gelu_grad(double x) {
    double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

constexpr double kLayerNormEps = 1e-5;

// LayerNorm followed by GeLU; gain/bias optional (nullptr = identity affine).
inline Vec norm_act(const Vec& x, const float* gain = nullptr, const float* bias = nullptr) {
    if (x.empty()) throw std::invalid_argument("norm_act: empty input");
    int n = static_cast<int>(x.size());
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= n;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    Vec y(n);
    for (int i = 0; i < n; ++i) {
        double h = (x[i] - mean) * inv;
        if (gain) h = h * gain[i] + (bias ? bias[i] : 0.0);
        y[i] = static_cast<float>(gelu(h));
    }
    return y;
}

inline double log_sum_exp(std::span<const float> logits) {
    double mx = -HUGE_VAL;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (float v : logits) s += std::exp(static_cast<double>(v) - mx);
    return mx + std::log(s);
}

// Highest-probability k entries, descending; ties break toward the lower token id.
inline std::vector<std::pair<TokenId, float>> softmax_topk(const Vec& logits, int k) {
    int v = static_cast<int>(logits.size());
    if (k < 1 || k > v) throw std::invalid_argument("softmax_topk: k out of range");
    std::vector<TokenId> idx(v);
    for (int i = 0; i < v; ++i) idx[i] = i;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](TokenId a, TokenId b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });
    double lse = log_sum_exp(logits);
    std::vector<std::pair<TokenId, float>> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i)
        out.emplace_back(idx[i], static_cast<float>(std::exp(static_cast<double>(logits[idx[i]]) - lse)));
    return out;
}

// Same selection as softmax_topk but returns log-probabilities in double,
// which is what cumulative tree scores are built from.
inline std::vector<std::pair<TokenId, double>> logprob_topk(const Vec& logits, int k) {
    auto top = softmax_topk(logits, k);
    double lse = log_sum_exp(logits);
    std::vector<std::pair<TokenId, double>> out;
    out.reserve(top.size());
    for (auto& [t, p] : top) out.emplace_back(t, static_cast<double>(logits[t]) - lse);
    return out;
}

// -log softmax(logits)[target], in log space.
inline double cross_entropy(const Vec& logits, TokenId target) {
    if (target < 0 || target >= static_cast<int>(logits.size()))
        throw std::invalid_argument("cross_entropy: target out of range");
    return log_sum_exp(logits) - static_cast<double>(logits[target]);
}

// Lowest index wins ties.
inline TokenId argmax(std::span<const float> v) {
    TokenId best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline bool all_finite(std::span<const float> v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace owl

// Frozen decoder-only verifier: pre-norm blocks, rotary attention driven by
// explicit per-token position ids and per-query visibility masks, and a
// rollback-capable KV cache. The [SPEC] row of the token embedding is the
// single trainable tensor; everything else is fixed after seed/load.
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "owl/numerics.hpp"
#include "owl/rng.hpp"
#include "owl/tensor_file.hpp"

namespace owl {

constexpr char kModelMagic[4] = {'S', 'P', 'D', 'L'};
constexpr double kRmsNormEps = 1e-5;
constexpr double kRopeBase = 10000.0;
constexpr int kMlpMult = 4;

struct ModelConfig {
    int vocab_size = 257; // 256 byte tokens + [SPEC]
    int hidden = 64;
    int layers = 2;
    int heads = 2;
    int max_positions = 65536;

    int head_dim() const { return hidden / heads; }
    TokenId spec_token() const { return vocab_size - 1; }

    void validate() const {
        if (vocab_size < 2 || hidden < 2 || layers < 1 || heads < 1 || hidden % heads != 0 ||
            head_dim() % 2 != 0)
            throw std::invalid_argument("bad model config");
    }
};

struct LayerWeights {
    Vec attn_norm_g;
    Mat wq, wk, wv, wo; // hidden x hidden
    Vec mlp_norm_g;
    Mat w_up;   // (mlp_mult*hidden) x hidden
    Mat w_down; // hidden x (mlp_mult*hidden)
};

struct TargetModel {
    ModelConfig cfg;
    Mat tok_emb; // vocab x hidden
    std::vector<LayerWeights> layers;
    Vec final_norm_g;
    Mat lm_head; // vocab x hidden

    TokenId spec_token() const { return cfg.spec_token(); }

    std::span<float> spec_embedding() {
        return {tok_emb.row(spec_token()), static_cast<size_t>(cfg.hidden)};
    }
    std::span<const float> spec_embedding() const {
        return {tok_emb.row(spec_token()), static_cast<size_t>(cfg.hidden)};
    }
};

// RMS norm with learned gain; used by the verifier blocks (drafter uses norm_act).
inline Vec rms_norm(const Vec& x, const Vec& gain) {
    double ms = 0.0;
    for (float v : x) ms += static_cast<double>(v) * v;
    ms /= x.size();
    double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
    Vec y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i] * inv * gain[i]);
    return y;
}

// Half-split rotary: pairs (i, i+hd/2), angle = pos * base^(-2i/hd).
inline void rope_in_place(float* v, int head_dim, int pos, bool inverse = false) {
    int half = head_dim / 2;
    for (int i = 0; i < half; ++i) {
        double theta = pos * std::pow(kRopeBase, -2.0 * i / head_dim);
        if (inverse) theta = -theta;
        double c = std::cos(theta), s = std::sin(theta);
        double a = v[i], b = v[i + half];
        v[i] = static_cast<float>(a * c - b * s);
        v[i + half] = static_cast<float>(a * s + b * c);
    }
}

// ---------------------------------------------------------------------------
// KV cache

class KvCache {
public:
    KvCache() = default;
    explicit KvCache(const ModelConfig& cfg) : hidden_(cfg.hidden), k_(cfg.layers), v_(cfg.layers) {}

    int len() const { return static_cast<int>(tokens_.size()); }

    void append(int layer, const Vec& k, const Vec& v) {
        k_[layer].insert(k_[layer].end(), k.begin(), k.end());
        v_[layer].insert(v_[layer].end(), v.begin(), v.end());
    }
    void append_meta(TokenId token, int pos) {
        tokens_.push_back(token);
        positions_.push_back(pos);
    }

    const float* key(int layer, int idx) const { return k_[layer].data() + static_cast<size_t>(idx) * hidden_; }
    const float* value(int layer, int idx) const { return v_[layer].data() + static_cast<size_t>(idx) * hidden_; }
    int position(int idx) const { return positions_[idx]; }
    TokenId token(int idx) const { return tokens_[idx]; }

    void rollback(int new_len) {
        if (new_len > len()) throw std::invalid_argument("rollback: new length exceeds current length");
        tokens_.resize(new_len);
        positions_.resize(new_len);
        for (auto& lk : k_) lk.resize(static_cast<size_t>(new_len) * hidden_);
        for (auto& lv : v_) lv.resize(static_cast<size_t>(new_len) * hidden_);
    }

    // Keep only `kept` (batch-relative indices, ascending order of retention)
    // from the tail that starts at `base`; everything else past base is dropped.
    void keep_tail(int base, const std::vector<int>& kept) {
        int n = len() - base;
        for (int idx : kept)
            if (idx < 0 || idx >= n) throw std::invalid_argument("keep_tail: index out of range");
        for (size_t j = 0; j < kept.size(); ++j) {
            int src = base + kept[j];
            int dst = base + static_cast<int>(j);
            if (src == dst) continue;
            tokens_[dst] = tokens_[src];
            positions_[dst] = positions_[src];
            for (auto& lk : k_)
                std::copy_n(lk.data() + static_cast<size_t>(src) * hidden_, hidden_,
                            lk.data() + static_cast<size_t>(dst) * hidden_);
            for (auto& lv : v_)
                std::copy_n(lv.data() + static_cast<size_t>(src) * hidden_, hidden_,
                            lv.data() + static_cast<size_t>(dst) * hidden_);
        }
        rollback(base + static_cast<int>(kept.size()));
    }

    bool contains_token(TokenId t) const {
        for (TokenId x : tokens_)
            if (x == t) return true;
        return false;
    }

private:
    int hidden_ = 0;
    std::vector<Vec> k_, v_; // per layer, len*hidden flattened
    std::vector<TokenId> tokens_;
    std::vector<int> positions_;
};

// ---------------------------------------------------------------------------
// Attention mask: query i sees keys [0, prefix_len[i]) plus `extra[i]`
// (absolute cache indices, batch entry j lives at base+j). Causal is the
// degenerate case with empty extras.

struct AttentionMask {
    std::vector<int> prefix_len;
    std::vector<std::vector<int>> extra;

    int queries() const { return static_cast<int>(prefix_len.size()); }

    static AttentionMask causal(int base_len, int n) {
        AttentionMask m;
        m.prefix_len.resize(n);
        m.extra.resize(n);
        for (int i = 0; i < n; ++i) m.prefix_len[i] = base_len + i + 1;
        return m;
    }

    bool sees(int query, int key) const {
        if (key < prefix_len[query]) return true;
        for (int e : extra[query])
            if (e == key) return true;
        return false;
    }
};

struct ForwardResult {
    Mat hidden; // n x hidden, post final norm (what the drafter consumes)
    Mat logits; // n x vocab
};

// Appends the batch to the cache and returns per-token hidden/logits.
inline ForwardResult forward(const TargetModel& model, KvCache& cache,
                             std::span<const TokenId> tokens, std::span<const int> positions,
                             const AttentionMask& mask) {
    const ModelConfig& cfg = model.cfg;
    int n = static_cast<int>(tokens.size());
    int base = cache.len();
    if (n == 0) throw std::invalid_argument("forward: empty batch");
    if (static_cast<int>(positions.size()) != n || mask.queries() != n)
        throw std::invalid_argument("forward: tokens/positions/mask size mismatch");
    for (int i = 0; i < n; ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
            throw std::invalid_argument("forward: token id out of range");
        if (!mask.sees(i, base + i)) throw std::invalid_argument("forward: query must see itself");
        if (mask.prefix_len[i] > base + n)
            throw std::invalid_argument("forward: mask references a key index >= cache length + query count");
        for (int e : mask.extra[i])
            if (e < 0 || e >= base + n)
                throw std::invalid_argument("forward: mask references a key index >= cache length + query count");
    }

    int hd = cfg.head_dim();
    std::vector<Vec> x(n);
    for (int i = 0; i < n; ++i) {
        x[i] = model.tok_emb.row_vec(tokens[i]);
        cache.append_meta(tokens[i], positions[i]);
    }

    Vec q(cfg.hidden);
    std::vector<Vec> qs(n, Vec(cfg.hidden));
    for (int layer = 0; layer < cfg.layers; ++layer) {
        const LayerWeights& lw = model.layers[layer];
        // Stage all new K/V first so masks may reference later batch entries.
        for (int i = 0; i < n; ++i) {
            Vec a = rms_norm(x[i], lw.attn_norm_g);
            qs[i] = matvec(lw.wq, a);
            Vec k = matvec(lw.wk, a);
            Vec v = matvec(lw.wv, a);
            for (int h = 0; h < cfg.heads; ++h) {
                rope_in_place(qs[i].data() + h * hd, hd, positions[i]);
                rope_in_place(k.data() + h * hd, hd, positions[i]);
            }
            cache.append(layer, k, v);
        }
        for (int i = 0; i < n; ++i) {
            Vec attn(cfg.hidden, 0.0f);
            for (int h = 0; h < cfg.heads; ++h) {
                const float* qh = qs[i].data() + h * hd;
                double scale = 1.0 / std::sqrt(static_cast<double>(hd));
                std::vector<int> visible;
                visible.reserve(mask.prefix_len[i] + mask.extra[i].size());
                for (int kdx = 0; kdx < mask.prefix_len[i]; ++kdx) visible.push_back(kdx);
                for (int e : mask.extra[i])
                    if (e >= mask.prefix_len[i]) visible.push_back(e);
                std::vector<double> score(visible.size());
                double mx = -HUGE_VAL;
                for (size_t j = 0; j < visible.size(); ++j) {
                    score[j] = dot(qh, cache.key(layer, visible[j]) + h * hd, hd) * scale;
                    mx = std::max(mx, score[j]);
                }
                double denom = 0.0;
                for (double& s : score) {
                    s = std::exp(s - mx);
                    denom += s;
                }
                std::vector<double> out(hd, 0.0);
                for (size_t j = 0; j < visible.size(); ++j) {
                    const float* vh = cache.value(layer, visible[j]) + h * hd;
                    double p = score[j] / denom;
                    for (int dch = 0; dch < hd; ++dch) out[dch] += p * vh[dch];
                }
                for (int dch = 0; dch < hd; ++dch) attn[h * hd + dch] = static_cast<float>(out[dch]);
            }
            Vec proj = matvec(lw.wo, attn);
            for (int c = 0; c < cfg.hidden; ++c) x[i][c] += proj[c];

            Vec m = rms_norm(x[i], lw.mlp_norm_g);
            Vec up = matvec(lw.w_up, m);
            for (float& u : up) u = static_cast<float>(gelu(u));
            Vec down = matvec(lw.w_down, up);
            for (int c = 0; c < cfg.hidden; ++c) x[i][c] += down[c];
        }
    }

    ForwardResult r{Mat(n, cfg.hidden), Mat(n, cfg.vocab_size)};
    for (int i = 0; i < n; ++i) {
        Vec h = rms_norm(x[i], model.final_norm_g);
        std::copy(h.begin(), h.end(), r.hidden.row(i));
        Vec logits = matvec(model.lm_head, h);
        if (!all_finite(logits)) throw std::runtime_error("forward: non-finite logits");
        std::copy(logits.begin(), logits.end(), r.logits.row(i));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Seeding and serialization

// Draw order and distributions are fixed so the same seed yields identical
// weights everywhere: token embedding N(0,1); query/key projections
// N(0, 1.3/sqrt(d0)); value/output/up projections N(0, 1/sqrt(fan_in)); norm
// gains 1. The hotter query/key scale keeps greedy continuations from
// collapsing to a constant token while leaving plenty of repeated spans.
inline TargetModel seed_model(uint64_t seed, const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    TargetModel m;
    m.cfg = cfg;
    double proj = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    double qk = 1.3 * proj;
    double mlp = 1.0 / std::sqrt(static_cast<double>(kMlpMult * cfg.hidden));
    m.tok_emb = detail::random_mat(rng, cfg.vocab_size, cfg.hidden, 1.0);
    m.layers.resize(cfg.layers);
    for (auto& lw : m.layers) {
        lw.attn_norm_g.assign(cfg.hidden, 1.0f);
        lw.wq = detail::random_mat(rng, cfg.hidden, cfg.hidden, qk);
        lw.wk = detail::random_mat(rng, cfg.hidden, cfg.hidden, qk);
        lw.wv = detail::random_mat(rng, cfg.hidden, cfg.hidden, proj);
        lw.wo = detail::random_mat(rng, cfg.hidden, cfg.hidden, proj);
        lw.mlp_norm_g.assign(cfg.hidden, 1.0f);
        lw.w_up = detail::random_mat(rng, kMlpMult * cfg.hidden, cfg.hidden, proj);
        lw.w_down = detail::random_mat(rng, cfg.hidden, kMlpMult * cfg.hidden, mlp);
    }
    m.final_norm_g.assign(cfg.hidden, 1.0f);
    m.lm_head = detail::random_mat(rng, cfg.vocab_size, cfg.hidden, proj);
    return m;
}

inline void save_model(const TargetModel& m, const std::string& path) {
    std::map<std::string, NamedTensor> t;
    t["tok_emb"] = tensor_of(m.tok_emb);
    for (int i = 0; i < m.cfg.layers; ++i) {
        std::string p = "l" + std::to_string(i) + ".";
        t[p + "attn_norm.g"] = tensor_of(m.layers[i].attn_norm_g);
        t[p + "wq"] = tensor_of(m.layers[i].wq);
        t[p + "wk"] = tensor_of(m.layers[i].wk);
        t[p + "wv"] = tensor_of(m.layers[i].wv);
        t[p + "wo"] = tensor_of(m.layers[i].wo);
        t[p + "mlp_norm.g"] = tensor_of(m.layers[i].mlp_norm_g);
        t[p + "w_up"] = tensor_of(m.layers[i].w_up);
        t[p + "w_down"] = tensor_of(m.layers[i].w_down);
    }
    t["final_norm.g"] = tensor_of(m.final_norm_g);
    t["lm_head"] = tensor_of(m.lm_head);
    write_tensor_file(path, kModelMagic,
                      {static_cast<uint32_t>(m.cfg.vocab_size), static_cast<uint32_t>(m.cfg.hidden),
                       static_cast<uint32_t>(m.cfg.layers), static_cast<uint32_t>(m.cfg.heads),
                       static_cast<uint32_t>(m.cfg.max_positions)},
                      t);
}

inline TargetModel load_model(const std::string& path) {
    TensorFile tf = read_tensor_file(path, kModelMagic);
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(tf.fields[0]);
    cfg.hidden = static_cast<int>(tf.fields[1]);
    cfg.layers = static_cast<int>(tf.fields[2]);
    cfg.heads = static_cast<int>(tf.fields[3]);
    cfg.max_positions = static_cast<int>(tf.fields[4]);
    cfg.validate();
    TargetModel m;
    m.cfg = cfg;
    m.tok_emb = take_mat(tf, "tok_emb", cfg.vocab_size, cfg.hidden);
    m.layers.resize(cfg.layers);
    for (int i = 0; i < cfg.layers; ++i) {
        std::string p = "l" + std::to_string(i) + ".";
        m.layers[i].attn_norm_g = take_vec(tf, p + "attn_norm.g", cfg.hidden);
        m.layers[i].wq = take_mat(tf, p + "wq", cfg.hidden, cfg.hidden);
        m.layers[i].wk = take_mat(tf, p + "wk", cfg.hidden, cfg.hidden);
        m.layers[i].wv = take_mat(tf, p + "wv", cfg.hidden, cfg.hidden);
        m.layers[i].wo = take_mat(tf, p + "wo", cfg.hidden, cfg.hidden);
        m.layers[i].mlp_norm_g = take_vec(tf, p + "mlp_norm.g", cfg.hidden);
        m.layers[i].w_up = take_mat(tf, p + "w_up", kMlpMult * cfg.hidden, cfg.hidden);
        m.layers[i].w_down = take_mat(tf, p + "w_down", cfg.hidden, kMlpMult * cfg.hidden);
    }
    m.final_norm_g = take_vec(tf, "final_norm.g", cfg.hidden);
    m.lm_head = take_mat(tf, "lm_head", cfg.vocab_size, cfg.hidden);
    return m;
}

} // namespace owl

// Drafter training against the frozen verifier.
//
// A training batch packs a sequence with one [SPEC] query per prefix in a
// single forward pass: real token k sits at position k and attends causally
// among real tokens only; the [SPEC] for the prefix of length p sits at
// position p and attends that prefix plus itself. Real hidden states and K/V
// are therefore independent of the [SPEC] embedding and are computed once;
// the [SPEC] columns are recomputed (and differentiated) every step.
//
// The loss averages, over anchors k, the drafter's teacher-forced rollout
// cross-entropy plus the cross-entropy of the frozen LM head applied to the
// [SPEC] hidden of prefix k against token k. Only the drafter tensors and the
// [SPEC] embedding row receive gradients.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "owl/drafter.hpp"
#include "owl/engine.hpp"
#include "owl/numerics.hpp"
#include "owl/target_model.hpp"

namespace owl {

// ---------------------------------------------------------------------------
// Training batch

struct TrainBatch {
    std::vector<TokenId> seq; // L tokens
    Mat real_hidden;          // L x d0, post final norm
    Mat spec_hidden;          // L x d0, row p-1 = [SPEC] hidden after prefix length p
    std::vector<Mat> key, value; // per layer, L x d0: real entries only (post-rope)

    int length() const { return static_cast<int>(seq.size()); }
};

// Mask for the 2L-query training batch: L real tokens causal among
// themselves, then one [SPEC] per prefix seeing that prefix plus itself.
inline AttentionMask training_mask(int L) {
    AttentionMask mask = AttentionMask::causal(0, L);
    mask.prefix_len.resize(2 * L);
    mask.extra.resize(2 * L);
    for (int j = 0; j < L; ++j) {
        mask.prefix_len[L + j] = j + 1; // the prefix of length j+1
        mask.extra[L + j] = {L + j};    // plus itself
    }
    return mask;
}

// One forward over 2L queries per the training layout described above.
inline TrainBatch build_training_batch(const TargetModel& model, std::span<const TokenId> sequence) {
    int L = static_cast<int>(sequence.size());
    if (L < 2) throw std::invalid_argument("build_training_batch: sequence too short");
    for (TokenId t : sequence)
        if (t == model.spec_token())
            throw std::invalid_argument("build_training_batch: sequence contains the reserved [SPEC] id");

    std::vector<TokenId> tokens(sequence.begin(), sequence.end());
    std::vector<int> positions(L);
    for (int i = 0; i < L; ++i) positions[i] = i;
    for (int j = 0; j < L; ++j) {
        tokens.push_back(model.spec_token());
        positions.push_back(j + 1);
    }
    AttentionMask mask = training_mask(L);

    KvCache cache(model.cfg);
    ForwardResult fr = forward(model, cache, tokens, positions, mask);

    TrainBatch b;
    b.seq.assign(sequence.begin(), sequence.end());
    b.real_hidden = Mat(L, model.cfg.hidden);
    b.spec_hidden = Mat(L, model.cfg.hidden);
    for (int i = 0; i < L; ++i) {
        std::copy_n(fr.hidden.row(i), model.cfg.hidden, b.real_hidden.row(i));
        std::copy_n(fr.hidden.row(L + i), model.cfg.hidden, b.spec_hidden.row(i));
    }
    b.key.assign(model.cfg.layers, Mat(L, model.cfg.hidden));
    b.value.assign(model.cfg.layers, Mat(L, model.cfg.hidden));
    for (int layer = 0; layer < model.cfg.layers; ++layer)
        for (int i = 0; i < L; ++i) {
            std::copy_n(cache.key(layer, i), model.cfg.hidden, b.key[layer].row(i));
            std::copy_n(cache.value(layer, i), model.cfg.hidden, b.value[layer].row(i));
        }
    return b;
}

// ---------------------------------------------------------------------------
// [SPEC] column forward/backward against cached real K/V

struct SpecLayerTrace {
    Vec x_in, n1, q, k_self, v_self; // q/k post-rope
    std::vector<double> probs;       // heads x (p+1), head-major
    Vec attn, x_mid, n2, up;         // up pre-GeLU
};

struct SpecColTrace {
    std::vector<SpecLayerTrace> layer;
    Vec x_final; // pre final-norm
};

// Forward one [SPEC] column for prefix length p (position p), attending the
// first p cached real keys plus itself.
inline Vec spec_column_forward(const TargetModel& model, const TrainBatch& batch, const Vec& spec_emb,
                               int p, SpecColTrace* tr) {
    const ModelConfig& cfg = model.cfg;
    int hd = cfg.head_dim();
    Vec x = spec_emb;
    if (tr) tr->layer.resize(cfg.layers);
    for (int layer = 0; layer < cfg.layers; ++layer) {
        const LayerWeights& lw = model.layers[layer];
        SpecLayerTrace* lt = tr ? &tr->layer[layer] : nullptr;
        Vec n1 = rms_norm(x, lw.attn_norm_g);
        Vec q = matvec(lw.wq, n1);
        Vec k = matvec(lw.wk, n1);
        Vec v = matvec(lw.wv, n1);
        for (int h = 0; h < cfg.heads; ++h) {
            rope_in_place(q.data() + h * hd, hd, p);
            rope_in_place(k.data() + h * hd, hd, p);
        }
        Vec attn(cfg.hidden);
        std::vector<double> probs(static_cast<size_t>(cfg.heads) * (p + 1));
        for (int h = 0; h < cfg.heads; ++h) {
            const float* qh = q.data() + h * hd;
            double scale = 1.0 / std::sqrt(static_cast<double>(hd));
            double mx = -HUGE_VAL;
            std::vector<double> score(p + 1);
            for (int j = 0; j < p; ++j) {
                score[j] = dot(qh, batch.key[layer].row(j) + h * hd, hd) * scale;
                mx = std::max(mx, score[j]);
            }
            score[p] = dot(qh, k.data() + h * hd, hd) * scale;
            mx = std::max(mx, score[p]);
            double denom = 0.0;
            for (double& s : score) {
                s = std::exp(s - mx);
                denom += s;
            }
            std::vector<double> out(hd, 0.0);
            for (int j = 0; j <= p; ++j) {
                const float* vh = (j < p ? batch.value[layer].row(j) : v.data()) + h * hd;
                double prob = score[j] / denom;
                probs[static_cast<size_t>(h) * (p + 1) + j] = prob;
                for (int c = 0; c < hd; ++c) out[c] += prob * vh[c];
            }
            for (int c = 0; c < hd; ++c) attn[h * hd + c] = static_cast<float>(out[c]);
        }
        Vec x_mid = x;
        Vec proj = matvec(lw.wo, attn);
        for (int c = 0; c < cfg.hidden; ++c) x_mid[c] += proj[c];
        Vec n2 = rms_norm(x_mid, lw.mlp_norm_g);
        Vec up = matvec(lw.w_up, n2);
        Vec gup(up.size());
        for (size_t i = 0; i < up.size(); ++i) gup[i] = static_cast<float>(gelu(up[i]));
        Vec down = matvec(lw.w_down, gup);
        Vec x_out = x_mid;
        for (int c = 0; c < cfg.hidden; ++c) x_out[c] += down[c];
        if (lt) {
            lt->x_in = x;
            lt->n1 = n1;
            lt->q = q;
            lt->k_self = k;
            lt->v_self = v;
            lt->probs = std::move(probs);
            lt->attn = attn;
            lt->x_mid = x_mid;
            lt->n2 = n2;
            lt->up = up;
        }
        x = std::move(x_out);
    }
    if (tr) tr->x_final = x;
    return rms_norm(x, model.final_norm_g);
}

inline Mat spec_columns_forward(const TargetModel& model, const TrainBatch& batch, const Vec& spec_emb,
                                std::vector<SpecColTrace>* traces) {
    int L = batch.length();
    Mat out(L, model.cfg.hidden);
    if (traces) traces->resize(L);
    for (int p = 1; p <= L; ++p) {
        Vec h = spec_column_forward(model, batch, spec_emb, p, traces ? &(*traces)[p - 1] : nullptr);
        std::copy(h.begin(), h.end(), out.row(p - 1));
    }
    return out;
}

namespace detail {

// d(rms_norm)/dx with fixed gain; signals in double.
inline std::vector<double> rms_norm_backward(const Vec& x, const Vec& gain, const std::vector<double>& dy) {
    int n = static_cast<int>(x.size());
    double ms = 0.0;
    for (float v : x) ms += static_cast<double>(v) * v;
    ms /= n;
    double r = std::sqrt(ms + kRmsNormEps);
    double sum_dyx = 0.0;
    for (int i = 0; i < n; ++i) sum_dyx += dy[i] * gain[i] * x[i];
    std::vector<double> dx(n);
    for (int i = 0; i < n; ++i) dx[i] = dy[i] * gain[i] / r - x[i] * sum_dyx / (n * r * r * r);
    return dx;
}

inline std::vector<double> matvec_t_d(const Mat& w, const std::vector<double>& x) {
    std::vector<double> y(w.cols, 0.0);
    for (int r = 0; r < w.rows; ++r) {
        const float* wr = w.row(r);
        double xr = x[r];
        for (int c = 0; c < w.cols; ++c) y[c] += xr * wr[c];
    }
    return y;
}

inline void rope_backward_in_place(double* v, int head_dim, int pos) {
    int half = head_dim / 2;
    for (int i = 0; i < half; ++i) {
        double theta = -(pos * std::pow(kRopeBase, -2.0 * i / head_dim));
        double c = std::cos(theta), s = std::sin(theta);
        double a = v[i], b = v[i + half];
        v[i] = a * c - b * s;
        v[i + half] = a * s + b * c;
    }
}

} // namespace detail

// Backward of one [SPEC] column: dL/d(spec hidden) -> dL/d(spec embedding),
// accumulated into de. Frozen model weights receive nothing.
inline void spec_column_backward(const TargetModel& model, const TrainBatch& batch, int p,
                                 const SpecColTrace& tr, const std::vector<double>& dh,
                                 std::vector<double>& de) {
    const ModelConfig& cfg = model.cfg;
    int hd = cfg.head_dim();
    std::vector<double> dx = detail::rms_norm_backward(tr.x_final, model.final_norm_g, dh);
    for (int layer = cfg.layers - 1; layer >= 0; --layer) {
        const LayerWeights& lw = model.layers[layer];
        const SpecLayerTrace& lt = tr.layer[layer];
        // MLP
        std::vector<double> dgup = detail::matvec_t_d(lw.w_down, dx);
        std::vector<double> dup(dgup.size());
        for (size_t i = 0; i < dup.size(); ++i) dup[i] = dgup[i] * gelu_grad(lt.up[i]);
        std::vector<double> dn2(cfg.hidden, 0.0);
        for (int r = 0; r < lw.w_up.rows; ++r) {
            const float* wr = lw.w_up.row(r);
            for (int c = 0; c < cfg.hidden; ++c) dn2[c] += dup[r] * wr[c];
        }
        std::vector<double> dx_mid = detail::rms_norm_backward(lt.x_mid, lw.mlp_norm_g, dn2);
        for (int c = 0; c < cfg.hidden; ++c) dx_mid[c] += dx[c];
        // attention
        std::vector<double> dattn = detail::matvec_t_d(lw.wo, dx_mid);
        std::vector<double> dq(cfg.hidden, 0.0), dk(cfg.hidden, 0.0), dv(cfg.hidden, 0.0);
        double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < cfg.heads; ++h) {
            const double* probs = lt.probs.data() + static_cast<size_t>(h) * (p + 1);
            const double* dout = dattn.data() + h * hd;
            std::vector<double> dp(p + 1);
            double common = 0.0;
            for (int j = 0; j <= p; ++j) {
                const float* vh = (j < p ? batch.value[layer].row(j) : lt.v_self.data()) + h * hd;
                double s = 0.0;
                for (int c = 0; c < hd; ++c) s += dout[c] * vh[c];
                dp[j] = s;
                common += probs[j] * s;
            }
            for (int j = 0; j <= p; ++j) {
                double ds = probs[j] * (dp[j] - common) * scale;
                const float* kh = (j < p ? batch.key[layer].row(j) : lt.k_self.data()) + h * hd;
                for (int c = 0; c < hd; ++c) dq[h * hd + c] += ds * kh[c];
                if (j == p) {
                    const float* qh = lt.q.data() + h * hd;
                    for (int c = 0; c < hd; ++c) dk[h * hd + c] += ds * qh[c];
                }
            }
            for (int c = 0; c < hd; ++c) dv[h * hd + c] += probs[p] * dout[c];
            detail::rope_backward_in_place(dq.data() + h * hd, hd, p);
            detail::rope_backward_in_place(dk.data() + h * hd, hd, p);
        }
        std::vector<double> dn1(cfg.hidden, 0.0);
        for (int r = 0; r < cfg.hidden; ++r) {
            const float* qr = lw.wq.row(r);
            const float* kr = lw.wk.row(r);
            const float* vr = lw.wv.row(r);
            for (int c = 0; c < cfg.hidden; ++c) dn1[c] += dq[r] * qr[c] + dk[r] * kr[c] + dv[r] * vr[c];
        }
        std::vector<double> dx_in = detail::rms_norm_backward(lt.x_in, lw.attn_norm_g, dn1);
        for (int c = 0; c < cfg.hidden; ++c) dx_in[c] += dx_mid[c];
        dx = std::move(dx_in);
    }
    for (int c = 0; c < cfg.hidden; ++c) de[c] += dx[c];
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct DrafterGrads {
    std::vector<double> emb, head;
    std::vector<double> w_gate[4], u_gate[4], r_gate[4];
    std::vector<double> ln_c_g, ln_c_b, ln_z_g, ln_z_b;
    std::vector<double> spec_embedding;
    double loss = 0.0;

    static DrafterGrads zeros_like(const DrafterWeights& w, int d0) {
        DrafterGrads g;
        g.emb.assign(w.emb.data.size(), 0.0);
        g.head.assign(w.head.data.size(), 0.0);
        for (int m = 0; m < 4; ++m) {
            g.w_gate[m].assign(w.w_gate[m].data.size(), 0.0);
            g.u_gate[m].assign(w.u_gate[m].data.size(), 0.0);
            g.r_gate[m].assign(w.r_gate[m].data.size(), 0.0);
        }
        g.ln_c_g.assign(w.ln_c_g.size(), 0.0);
        g.ln_c_b.assign(w.ln_c_b.size(), 0.0);
        g.ln_z_g.assign(w.ln_z_g.size(), 0.0);
        g.ln_z_b.assign(w.ln_z_b.size(), 0.0);
        g.spec_embedding.assign(d0, 0.0);
        return g;
    }

    void add_scaled(const DrafterGrads& o, double a) {
        auto ax = [a](std::vector<double>& dst, const std::vector<double>& src) {
            for (size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
        };
        ax(emb, o.emb);
        ax(head, o.head);
        for (int m = 0; m < 4; ++m) {
            ax(w_gate[m], o.w_gate[m]);
            ax(u_gate[m], o.u_gate[m]);
            ax(r_gate[m], o.r_gate[m]);
        }
        ax(ln_c_g, o.ln_c_g);
        ax(ln_c_b, o.ln_c_b);
        ax(ln_z_g, o.ln_z_g);
        ax(ln_z_b, o.ln_z_b);
        ax(spec_embedding, o.spec_embedding);
        loss += a * o.loss;
    }
};

// Mutable views pairing each trainable tensor with its gradient buffer; the
// [SPEC] row is included only for the spec variant.
struct ParamView {
    std::string name;
    float* w;
    std::vector<double>* g;
    size_t n;
};

inline std::vector<ParamView> param_views(DrafterWeights& w, DrafterGrads& g, Vec* spec_embedding) {
    static const char* gate_names[4] = {"f", "i", "o", "c"};
    std::vector<ParamView> v;
    v.push_back({"emb", w.emb.data.data(), &g.emb, w.emb.data.size()});
    for (int m = 0; m < 4; ++m) {
        v.push_back({std::string("w.") + gate_names[m], w.w_gate[m].data.data(), &g.w_gate[m],
                     w.w_gate[m].data.size()});
        if (w.with_spec())
            v.push_back({std::string("u.") + gate_names[m], w.u_gate[m].data.data(), &g.u_gate[m],
                         w.u_gate[m].data.size()});
        v.push_back({std::string("r.") + gate_names[m], w.r_gate[m].data.data(), &g.r_gate[m],
                     w.r_gate[m].data.size()});
    }
    v.push_back({"ln_c.g", w.ln_c_g.data(), &g.ln_c_g, w.ln_c_g.size()});
    v.push_back({"ln_c.b", w.ln_c_b.data(), &g.ln_c_b, w.ln_c_b.size()});
    v.push_back({"ln_z.g", w.ln_z_g.data(), &g.ln_z_g, w.ln_z_g.size()});
    v.push_back({"ln_z.b", w.ln_z_b.data(), &g.ln_z_b, w.ln_z_b.size()});
    v.push_back({"head", w.head.data.data(), &g.head, w.head.data.size()});
    if (w.with_spec() && spec_embedding)
        v.push_back({"spec_emb", spec_embedding->data(), &g.spec_embedding, spec_embedding->size()});
    return v;
}

namespace detail {

// Anchors run over k in [1, L-2]: each needs h_{k-1} and at least one
// lookahead token. Near the end the inner sum shrinks to the available terms.
inline std::vector<int> all_anchors(int L) {
    std::vector<int> a;
    for (int k = 1; k <= L - 2; ++k) a.push_back(k);
    return a;
}

inline std::vector<double> softmax_d(const Vec& logits) {
    double lse = log_sum_exp(logits);
    std::vector<double> p(logits.size());
    for (size_t i = 0; i < p.size(); ++i) p[i] = std::exp(static_cast<double>(logits[i]) - lse);
    return p;
}

// Backward for norm_act_traced: returns dL/dx, accumulates gain/bias grads.
inline std::vector<double> norm_act_backward(const NormActTrace& tr, const Vec& gain,
                                             const std::vector<double>& dout, std::vector<double>& dgain,
                                             std::vector<double>& dbias) {
    int n = static_cast<int>(tr.input.size());
    std::vector<double> da(n), dxhat(n);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    std::vector<double> xhat(n);
    for (int i = 0; i < n; ++i) {
        xhat[i] = (tr.input[i] - tr.mean) * tr.inv;
        da[i] = dout[i] * gelu_grad(tr.affine[i]);
        dgain[i] += da[i] * xhat[i];
        dbias[i] += da[i];
        dxhat[i] = da[i] * gain[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    std::vector<double> dx(n);
    for (int i = 0; i < n; ++i) dx[i] = tr.inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    return dx;
}

} // namespace detail

// Full loss over the given anchors (all anchors when the list is empty).
// For the spec variant the [SPEC] hiddens are recomputed from spec_embedding
// so the loss is an exact function of every trainable tensor.
inline double training_loss(const TargetModel& model, const TrainBatch& batch, const DrafterWeights& w,
                            const Vec& spec_embedding, int rollout_n,
                            std::span<const int> anchor_subset = {}) {
    int L = batch.length();
    if (L < 3) throw std::invalid_argument("training_loss: sequence too short");
    if (rollout_n < 1) throw std::invalid_argument("training_loss: rollout must be >= 1");
    std::vector<int> anchors = anchor_subset.empty()
                                   ? detail::all_anchors(L)
                                   : std::vector<int>(anchor_subset.begin(), anchor_subset.end());

    double total = 0.0;
    for (int k : anchors) {
        int nk = std::min(rollout_n, L - 1 - k);
        Vec h = batch.real_hidden.row_vec(k - 1);
        Vec hs;
        const Vec* hs_ptr = nullptr;
        if (w.with_spec()) {
            hs = spec_column_forward(model, batch, spec_embedding, k, nullptr);
            hs_ptr = &hs;
        }
        DrafterState state = DrafterState::initial(w.cfg.width);
        double inner = 0.0;
        for (int j = 1; j <= nk; ++j) {
            CellStepOut out = j == 1 ? cell_step(w, state, batch.seq[k], &h, hs_ptr)
                                     : cell_step(w, state, batch.seq[k + j - 1], nullptr, nullptr);
            inner += cross_entropy(out.logits, batch.seq[k + j]);
            state = std::move(out.state);
        }
        total += inner / nk;
        if (w.with_spec()) {
            Vec spec_logits = matvec(model.lm_head, hs);
            total += cross_entropy(spec_logits, batch.seq[k]);
        }
    }
    return total / anchors.size();
}

// Analytic gradients for the same loss; verified against finite differences.
inline DrafterGrads loss_gradients(const TargetModel& model, const TrainBatch& batch,
                                   const DrafterWeights& w, const Vec& spec_embedding, int rollout_n,
                                   std::span<const int> anchor_subset = {}) {
    const DrafterConfig& cfg = w.cfg;
    int L = batch.length();
    int d0 = model.cfg.hidden;
    if (L < 3) throw std::invalid_argument("loss_gradients: sequence too short");
    std::vector<int> anchors = anchor_subset.empty()
                                   ? detail::all_anchors(L)
                                   : std::vector<int>(anchor_subset.begin(), anchor_subset.end());
    double inv_n = 1.0 / anchors.size();

    DrafterGrads g = DrafterGrads::zeros_like(w, d0);
    std::vector<SpecColTrace> spec_traces(w.with_spec() ? anchors.size() : 0);
    std::vector<std::vector<double>> dspec_rows(w.with_spec() ? anchors.size() : 0,
                                                std::vector<double>(d0, 0.0));

    for (size_t ai = 0; ai < anchors.size(); ++ai) {
        int k = anchors[ai];
        int nk = std::min(rollout_n, L - 1 - k);
        Vec h = batch.real_hidden.row_vec(k - 1);
        Vec hs;
        const Vec* hs_ptr = nullptr;
        if (w.with_spec()) {
            hs = spec_column_forward(model, batch, spec_embedding, k, &spec_traces[ai]);
            hs_ptr = &hs;
        }
        // forward with traces
        std::vector<CellTrace> traces(nk);
        DrafterState state = DrafterState::initial(cfg.width);
        for (int j = 1; j <= nk; ++j) {
            CellStepOut out = j == 1 ? cell_step(w, state, batch.seq[k], &h, hs_ptr, &traces[j - 1])
                                     : cell_step(w, state, batch.seq[k + j - 1], nullptr, nullptr, &traces[j - 1]);
            g.loss += cross_entropy(out.logits, batch.seq[k + j]) * inv_n / nk;
            state = std::move(out.state);
        }
        // backward through the rollout
        std::vector<double> dhidden(cfg.width, 0.0), dz_ext(cfg.width, 0.0);
        for (int j = nk; j >= 1; --j) {
            const CellTrace& tr = traces[j - 1];
            // CE backward: dlogits = (softmax - onehot) * inv_n / nk
            std::vector<double> p = detail::softmax_d(tr.logits);
            double coef = inv_n / nk;
            p[batch.seq[k + j]] -= 1.0;
            // head: logits = head * hidden
            for (int r = 0; r < cfg.vocab_size; ++r) {
                double dl = p[r] * coef;
                if (dl == 0.0) continue;
                const float* hrow = tr.hidden.data();
                double* grow = g.head.data() + static_cast<size_t>(r) * cfg.width;
                for (int c = 0; c < cfg.width; ++c) grow[c] += dl * hrow[c];
            }
            for (int c = 0; c < cfg.width; ++c) {
                double s = 0.0;
                for (int r = 0; r < cfg.vocab_size; ++r) s += p[r] * w.head.at(r, c);
                dhidden[c] += s * coef;
            }
            // hidden = nz.out * go
            std::vector<double> dnz(cfg.width), dgo(cfg.width);
            for (int c = 0; c < cfg.width; ++c) {
                dnz[c] = dhidden[c] * tr.go[c];
                dgo[c] = dhidden[c] * tr.nz.out[c];
            }
            std::vector<double> dz = detail::norm_act_backward(tr.nz, w.ln_z_g, dnz, g.ln_z_g, g.ln_z_b);
            for (int c = 0; c < cfg.width; ++c) dz[c] += dz_ext[c];
            // z_out = z_in*gf + nc.out*gi
            std::vector<double> dgf(cfg.width), dnc(cfg.width), dgi(cfg.width);
            std::vector<double> dz_prev(cfg.width);
            for (int c = 0; c < cfg.width; ++c) {
                dz_prev[c] = dz[c] * tr.gf[c];
                dgf[c] = dz[c] * tr.z_in[c];
                dnc[c] = dz[c] * tr.gi[c];
                dgi[c] = dz[c] * tr.nc.out[c];
            }
            std::vector<double> ds_c = detail::norm_act_backward(tr.nc, w.ln_c_g, dnc, g.ln_c_g, g.ln_c_b);
            std::vector<double> ds[4];
            ds[kGateC] = std::move(ds_c);
            ds[kGateF].resize(cfg.width);
            ds[kGateI].resize(cfg.width);
            ds[kGateO].resize(cfg.width);
            for (int c = 0; c < cfg.width; ++c) {
                ds[kGateF][c] = dgf[c] * tr.gf[c] * (1.0 - tr.gf[c]);
                ds[kGateI][c] = dgi[c] * tr.gi[c] * (1.0 - tr.gi[c]);
                ds[kGateO][c] = dgo[c] * tr.go[c] * (1.0 - tr.go[c]);
            }
            std::vector<double> dprev_hidden(cfg.width, 0.0);
            double alpha = w.alpha;
            double* demb_row = g.emb.data() + static_cast<size_t>(tr.token) * cfg.width;
            for (int m = 0; m < 4; ++m) {
                const std::vector<double>& dsm = ds[m];
                if (tr.root) {
                    double* gw = g.w_gate[m].data();
                    for (int r = 0; r < cfg.width; ++r)
                        for (int c = 0; c < d0; ++c) gw[static_cast<size_t>(r) * d0 + c] += dsm[r] * h[c];
                    if (hs_ptr) {
                        double* gu = g.u_gate[m].data();
                        for (int r = 0; r < cfg.width; ++r)
                            for (int c = 0; c < d0; ++c) gu[static_cast<size_t>(r) * d0 + c] += dsm[r] * hs[c];
                        std::vector<double>& dhs = dspec_rows[ai];
                        for (int c = 0; c < d0; ++c) {
                            double s = 0.0;
                            for (int r = 0; r < cfg.width; ++r) s += dsm[r] * w.u_gate[m].at(r, c);
                            dhs[c] += s;
                        }
                    }
                } else {
                    double* gr = g.r_gate[m].data();
                    const Vec& carry = tr.carry_in;
                    for (int r = 0; r < cfg.width; ++r)
                        for (int c = 0; c < cfg.width; ++c)
                            gr[static_cast<size_t>(r) * cfg.width + c] += dsm[r] * carry[c];
                    for (int c = 0; c < cfg.width; ++c) {
                        double s = 0.0;
                        for (int r = 0; r < cfg.width; ++r) s += dsm[r] * w.r_gate[m].at(r, c);
                        dprev_hidden[c] += s;
                    }
                }
                for (int c = 0; c < cfg.width; ++c) demb_row[c] += alpha * dsm[c];
            }
            dhidden = std::move(dprev_hidden);
            dz_ext = std::move(dz_prev);
        }
        // [SPEC] CE through the frozen LM head
        if (w.with_spec()) {
            Vec spec_logits = matvec(model.lm_head, hs);
            g.loss += cross_entropy(spec_logits, batch.seq[k]) * inv_n;
            std::vector<double> p = detail::softmax_d(spec_logits);
            p[batch.seq[k]] -= 1.0;
            std::vector<double>& dhs = dspec_rows[ai];
            for (int c = 0; c < d0; ++c) {
                double s = 0.0;
                for (int r = 0; r < model.cfg.vocab_size; ++r) s += p[r] * model.lm_head.at(r, c);
                dhs[c] += s * inv_n;
            }
        }
    }

    // propagate the collected [SPEC] hidden gradients into the embedding row
    if (w.with_spec())
        for (size_t ai = 0; ai < anchors.size(); ++ai)
            spec_column_backward(model, batch, anchors[ai], spec_traces[ai], dspec_rows[ai],
                                 g.spec_embedding);
    return g;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
    double max_rel_err = 0.0;
    int coords_checked = 0;
    std::string worst_param;
};

// Central differences with h=1e-3 on the stored f32 values, loss in f64; the
// step divides by the actually-stored perturbed difference. The error of a
// coordinate is |a-f| / (max(|a|,|f|) + 0.1); the 0.1 floor is an absolute
// tolerance of 1e-4 at the 1e-3 threshold, matching the f32 noise the
// difference quotient carries for near-zero gradients.
inline GradCheckResult finite_difference_check(const TargetModel& model, const TrainBatch& batch,
                                               DrafterWeights& w, Vec& spec_embedding, int rollout_n,
                                               int coords, uint64_t seed) {
    DrafterGrads analytic = loss_gradients(model, batch, w, spec_embedding, rollout_n);
    auto views = param_views(w, analytic, &spec_embedding);
    size_t total = 0;
    for (const auto& v : views) total += v.n;

    Rng rng(seed);
    GradCheckResult res;
    const double h = 1e-3;
    for (int i = 0; i < coords; ++i) {
        size_t flat = rng.next_u64() % total;
        const ParamView* pv = nullptr;
        for (const auto& v : views) {
            if (flat < v.n) {
                pv = &v;
                break;
            }
            flat -= v.n;
        }
        float saved = pv->w[flat];
        pv->w[flat] = static_cast<float>(saved + h);
        float wp = pv->w[flat];
        double lp = training_loss(model, batch, w, spec_embedding, rollout_n);
        pv->w[flat] = static_cast<float>(saved - h);
        float wm = pv->w[flat];
        double lm = training_loss(model, batch, w, spec_embedding, rollout_n);
        pv->w[flat] = saved;

        double fd = (lp - lm) / (static_cast<double>(wp) - wm);
        double an = (*pv->g)[flat];
        res.coords_checked++;
        double rel = std::abs(an - fd) / (std::max(std::abs(an), std::abs(fd)) + 0.1);
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_param = pv->name + "[" + std::to_string(flat) + "]";
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop

struct TrainConfig {
    int sequence_length = 256;
    int chunk_size = 64;
    int gen_tokens = 256;
    int batch_size = 8;
    double lr = 1e-3;
    int iterations = 300;
    int rollout = 3;          // speculation steps per anchor in the loss
    int anchors_per_seq = 48; // 0 trains on every anchor of every sequence
    uint64_t seed = 1234;
    bool adam = true; // plain SGD otherwise
    int threads = 2;
    bool grad_check_gate = true;
    bool verbose = false;
};

class Optimizer {
public:
    Optimizer(bool adam, double lr) : adam_(adam), lr_(lr) {}

    // Each view pairs a weight pointer with its gradient buffer.
    void step(std::vector<ParamView>& views) {
        if (adam_ && m_.empty()) {
            for (const auto& v : views) {
                m_.emplace_back(v.n, 0.0);
                v_.emplace_back(v.n, 0.0);
            }
        }
        ++t_;
        for (size_t p = 0; p < views.size(); ++p) {
            float* w = views[p].w;
            const std::vector<double>& g = *views[p].g;
            if (!adam_) {
                for (size_t i = 0; i < views[p].n; ++i)
                    w[i] = static_cast<float>(w[i] - lr_ * g[i]);
            } else {
                double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
                for (size_t i = 0; i < views[p].n; ++i) {
                    m_[p][i] = b1 * m_[p][i] + (1.0 - b1) * g[i];
                    v_[p][i] = b2 * v_[p][i] + (1.0 - b2) * g[i] * g[i];
                    w[i] = static_cast<float>(w[i] - lr_ * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + eps));
                }
            }
        }
    }

private:
    bool adam_;
    double lr_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct TrainOutputs {
    DrafterWeights d_spec;
    DrafterWeights d_nospec;
    Vec spec_embedding;
    std::vector<double> loss_spec;
    std::vector<double> loss_nospec;
};

namespace detail {

// One optimization run over prepared batches for a single drafter variant.
inline std::vector<double> train_one(const TargetModel& model, const std::vector<TrainBatch>& batches,
                                     DrafterWeights& w, Vec& spec_row, const TrainConfig& cfg,
                                     Rng& rng) {
    std::vector<double> curve;
    Optimizer opt(cfg.adam, cfg.lr);
    std::vector<size_t> order(batches.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size(); // forces an initial shuffle

    DrafterGrads sum = DrafterGrads::zeros_like(w, model.cfg.hidden);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        std::vector<size_t> picked;
        std::vector<std::vector<int>> anchor_sets;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(static_cast<int>(i))]);
                cursor = 0;
            }
            size_t si = order[cursor++];
            picked.push_back(si);
            int L = batches[si].length();
            std::vector<int> anchors;
            if (cfg.anchors_per_seq > 0 && cfg.anchors_per_seq < L - 2) {
                std::vector<int> all = all_anchors(L);
                for (int i = 0; i < cfg.anchors_per_seq; ++i)
                    std::swap(all[i], all[i + rng.below(static_cast<int>(all.size()) - i)]);
                anchors.assign(all.begin(), all.begin() + cfg.anchors_per_seq);
                std::sort(anchors.begin(), anchors.end());
            }
            anchor_sets.push_back(std::move(anchors));
        }

        std::vector<DrafterGrads> grads(picked.size());
        int nthreads = std::max(1, cfg.threads);
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < nthreads; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < picked.size(); i = next.fetch_add(1))
                    grads[i] = loss_gradients(model, batches[picked[i]], w, spec_row, cfg.rollout,
                                              anchor_sets[i]);
            });
        for (auto& t : pool) t.join();

        // deterministic reduction in slot order
        sum = DrafterGrads::zeros_like(w, model.cfg.hidden);
        for (const auto& gi : grads) sum.add_scaled(gi, 1.0 / picked.size());
        if (!std::isfinite(sum.loss))
            throw std::runtime_error("training diverged: non-finite loss at iteration " +
                                     std::to_string(iter) + " (lr=" + std::to_string(cfg.lr) + ")");
        curve.push_back(sum.loss);

        auto wviews = param_views(w, sum, w.with_spec() ? &spec_row : nullptr);
        opt.step(wviews);
        if (cfg.verbose && (iter % 25 == 0 || iter + 1 == cfg.iterations))
            std::fprintf(stderr, "  iter %4d  loss %.5f\n", iter, sum.loss);
    }
    return curve;
}

} // namespace detail

// Trains the spec variant jointly with the [SPEC] embedding row, then the
// nospec variant separately. A small gradient spot-check gates the run.
inline TrainOutputs train(const TargetModel& model, const std::vector<std::vector<TokenId>>& corpus,
                          const TrainConfig& cfg, DrafterConfig drafter_cfg) {
    if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
    drafter_cfg.vocab_size = model.cfg.vocab_size;
    drafter_cfg.target_hidden = model.cfg.hidden;

    if (cfg.grad_check_gate) {
        ModelConfig tiny_cfg;
        tiny_cfg.vocab_size = 11;
        tiny_cfg.hidden = 4;
        tiny_cfg.layers = 2;
        tiny_cfg.heads = 2;
        TargetModel tiny = seed_model(99, tiny_cfg);
        std::vector<TokenId> seq = {1, 4, 2, 7, 3, 5, 0, 6};
        TrainBatch tb = build_training_batch(tiny, seq);
        DrafterConfig dc;
        dc.vocab_size = 11;
        dc.target_hidden = 4;
        dc.width = 8;
        dc.max_depth = 4;
        dc.variant = DrafterVariant::spec;
        DrafterWeights tw = seed_drafter(7, dc);
        Vec spec_row(tiny.spec_embedding().begin(), tiny.spec_embedding().end());
        GradCheckResult gc = finite_difference_check(tiny, tb, tw, spec_row, 2, 24, 5);
        if (gc.max_rel_err >= 1e-2)
            throw std::runtime_error("gradient check failed before training: max rel err " +
                                     std::to_string(gc.max_rel_err) + " at " + gc.worst_param);
    }

    std::vector<TrainBatch> batches;
    for (const auto& seq : corpus) {
        int L = std::min<int>(static_cast<int>(seq.size()), cfg.sequence_length);
        if (L < 8) continue;
        batches.push_back(build_training_batch(model, std::span<const TokenId>(seq.data(), L)));
    }
    if (batches.empty()) throw std::invalid_argument("train: corpus has no usable sequences");

    TrainOutputs out;
    Rng rng(cfg.seed);
    if (cfg.verbose) std::fprintf(stderr, "training spec variant (%zu sequences)\n", batches.size());
    drafter_cfg.variant = DrafterVariant::spec;
    out.d_spec = seed_drafter(cfg.seed + 1, drafter_cfg);
    out.spec_embedding.assign(model.spec_embedding().begin(), model.spec_embedding().end());
    out.loss_spec = detail::train_one(model, batches, out.d_spec, out.spec_embedding, cfg, rng);

    if (cfg.verbose) std::fprintf(stderr, "training nospec variant\n");
    drafter_cfg.variant = DrafterVariant::nospec;
    out.d_nospec = seed_drafter(cfg.seed + 2, drafter_cfg);
    Vec unused = out.spec_embedding;
    out.loss_nospec = detail::train_one(model, batches, out.d_nospec, unused, cfg, rng);
    return out;
}

} // namespace owl

// Recurrent drafter: conditions on the last-token hidden state (plus the
// [SPEC] hidden for the spec-trained variant), speculates tokens through an
// LSTM-style cell, and expands them best-first into a bounded tree.
//
// Step one projects the target hidden through W (and U for the [SPEC] path);
// later steps feed the previous cell output through dedicated recurrent
// projections R. The token embedding is always mixed in scaled by alpha.
#pragma once

#include <cstdint>
#include <queue>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "owl/numerics.hpp"
#include "owl/rng.hpp"
#include "owl/tensor_file.hpp"

namespace owl {

constexpr char kDrafterMagic[4] = {'S', 'P', 'D', 'R'};

inline double compute_alpha(int n, int d) {
    if (n < 1 || d < 1) throw std::invalid_argument("compute_alpha: n and d must be positive");
    double a0 = std::pow(2.0, -1.0 / (2.0 * n));
    return 2.0 * a0 / ((1.0 - a0 * a0) * d);
}

enum class DrafterVariant : uint32_t { nospec = 0, spec = 1 };

enum GateIndex { kGateF = 0, kGateI = 1, kGateO = 2, kGateC = 3 };

struct DrafterConfig {
    int vocab_size = 257;
    int target_hidden = 64; // d0 of the verifier
    int width = 256;        // d
    int max_depth = 8;      // n, fixes alpha
    DrafterVariant variant = DrafterVariant::spec;

    void validate() const {
        if (vocab_size < 2 || target_hidden < 1 || width < 1 || max_depth < 1)
            throw std::invalid_argument("bad drafter config");
    }
};

struct DrafterWeights {
    DrafterConfig cfg;
    double alpha = 0.0; // derived from (max_depth, width), never stored

    Mat emb;        // vocab x width
    Mat w_gate[4];  // width x target_hidden
    Mat u_gate[4];  // width x target_hidden, empty for the nospec variant
    Mat r_gate[4];  // width x width
    Vec ln_c_g, ln_c_b; // norm-activation site on the cell candidate
    Vec ln_z_g, ln_z_b; // norm-activation site on the cell state
    Mat head;       // vocab x width

    bool with_spec() const { return cfg.variant == DrafterVariant::spec; }
    void refresh_alpha() { alpha = compute_alpha(cfg.max_depth, cfg.width); }
};

inline DrafterWeights seed_drafter(uint64_t seed, const DrafterConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    DrafterWeights w;
    w.cfg = cfg;
    w.refresh_alpha();
    double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.target_hidden));
    double rec_std = 1.0 / std::sqrt(static_cast<double>(cfg.width));
    w.emb = detail::random_mat(rng, cfg.vocab_size, cfg.width, 0.5);
    for (auto& g : w.w_gate) g = detail::random_mat(rng, cfg.width, cfg.target_hidden, in_std);
    // the [SPEC] conditioning path starts at zero and grows only where it
    // lowers the loss; at init the spec variant behaves like the nospec one
    if (w.with_spec())
        for (auto& g : w.u_gate) g = Mat(cfg.width, cfg.target_hidden);
    for (auto& g : w.r_gate) g = detail::random_mat(rng, cfg.width, cfg.width, rec_std);
    w.ln_c_g.assign(cfg.width, 1.0f);
    w.ln_c_b.assign(cfg.width, 0.0f);
    w.ln_z_g.assign(cfg.width, 1.0f);
    w.ln_z_b.assign(cfg.width, 0.0f);
    w.head = detail::random_mat(rng, cfg.vocab_size, cfg.width, rec_std);
    return w;
}

// ---------------------------------------------------------------------------
// Traced LayerNorm+GeLU (the cell's f). The trace carries what the backward
// pass needs; the plain norm_act in numerics.hpp stays the reference.

struct NormActTrace {
    Vec input;
    double mean = 0.0;
    double inv = 0.0; // 1/sqrt(var+eps)
    Vec affine;       // gain*xhat+bias, pre-GeLU
    Vec out;
};

inline Vec norm_act_traced(const Vec& x, const Vec& gain, const Vec& bias, NormActTrace* tr) {
    int n = static_cast<int>(x.size());
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= n;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    Vec affine(n), out(n);
    for (int i = 0; i < n; ++i) {
        double a = (x[i] - mean) * inv * gain[i] + bias[i];
        affine[i] = static_cast<float>(a);
        out[i] = static_cast<float>(gelu(a));
    }
    if (tr) {
        tr->input = x;
        tr->mean = mean;
        tr->inv = inv;
        tr->affine = affine;
        tr->out = out;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cell step

// z: cell state, zero at the start of a drafting round. carry: previous cell
// output; empty means the next step is the round's first and conditions on
// the target hidden(s).
struct DrafterState {
    Vec z;
    Vec carry;

    static DrafterState initial(int width) { return DrafterState{Vec(width, 0.0f), {}}; }
    bool at_root() const { return carry.empty(); }
};

struct CellTrace {
    TokenId token = 0;
    bool root = true;
    Vec z_in, carry_in;
    Vec s[4];
    Vec gf, gi, go;
    NormActTrace nc, nz;
    Vec c_act, z_out, hidden, logits;
};

struct CellStepOut {
    DrafterState state;
    Vec hidden;
    Vec logits;
};

inline CellStepOut cell_step(const DrafterWeights& w, const DrafterState& st, TokenId token,
                             const Vec* h_last, const Vec* h_spec, CellTrace* tr = nullptr) {
    const DrafterConfig& cfg = w.cfg;
    if (token < 0 || token >= cfg.vocab_size) throw std::invalid_argument("cell_step: token out of range");
    if (static_cast<int>(st.z.size()) != cfg.width) throw std::invalid_argument("cell_step: bad state width");
    bool root = st.at_root();
    if (root && (!h_last || static_cast<int>(h_last->size()) != cfg.target_hidden))
        throw std::invalid_argument("cell_step: root step needs the target hidden");
    if (h_spec && static_cast<int>(h_spec->size()) != cfg.target_hidden)
        throw std::invalid_argument("cell_step: bad h_spec width");

    const float* e = w.emb.row(token);
    Vec s[4];
    for (int m = 0; m < 4; ++m) {
        Vec proj = root ? matvec(w.w_gate[m], *h_last) : matvec(w.r_gate[m], st.carry);
        if (root && h_spec && w.with_spec()) {
            Vec u = matvec(w.u_gate[m], *h_spec);
            for (int i = 0; i < cfg.width; ++i) proj[i] += u[i];
        }
        for (int i = 0; i < cfg.width; ++i)
            proj[i] = static_cast<float>(proj[i] + w.alpha * e[i]);
        s[m] = std::move(proj);
    }

    Vec gf(cfg.width), gi(cfg.width), go(cfg.width);
    for (int i = 0; i < cfg.width; ++i) {
        gf[i] = static_cast<float>(sigmoid(s[kGateF][i]));
        gi[i] = static_cast<float>(sigmoid(s[kGateI][i]));
        go[i] = static_cast<float>(sigmoid(s[kGateO][i]));
    }
    Vec na_c = norm_act_traced(s[kGateC], w.ln_c_g, w.ln_c_b, tr ? &tr->nc : nullptr);
    Vec z_out(cfg.width), c_act(cfg.width);
    for (int i = 0; i < cfg.width; ++i) {
        c_act[i] = na_c[i] * gi[i];
        z_out[i] = st.z[i] * gf[i] + c_act[i];
    }
    Vec na_z = norm_act_traced(z_out, w.ln_z_g, w.ln_z_b, tr ? &tr->nz : nullptr);
    Vec hidden(cfg.width);
    for (int i = 0; i < cfg.width; ++i) hidden[i] = na_z[i] * go[i];
    Vec logits = matvec(w.head, hidden);

    if (tr) {
        tr->token = token;
        tr->root = root;
        tr->z_in = st.z;
        tr->carry_in = st.carry;
        for (int m = 0; m < 4; ++m) tr->s[m] = s[m];
        tr->gf = gf;
        tr->gi = gi;
        tr->go = go;
        tr->c_act = c_act;
        tr->z_out = z_out;
        tr->hidden = hidden;
        tr->logits = logits;
    }
    return CellStepOut{DrafterState{std::move(z_out), hidden}, std::move(hidden), std::move(logits)};
}

// ---------------------------------------------------------------------------
// Draft tree

struct TreePolicy {
    int top_k = 10;
    int depth = 8;
    int size = 60;
};

struct DraftNode {
    TokenId token;
    int parent; // -1 attaches to the conditioning token
    int depth;  // 1 for children of the conditioning token
    double score;
    DrafterState state;
};

struct DraftTree {
    std::vector<DraftNode> nodes;
};

// Best-first expansion ordered by cumulative log-probability. Candidate order
// is deterministic: score descending, insertion sequence ascending.
inline DraftTree draft_tree(const DrafterWeights& w, TokenId t_next, const Vec& h_last,
                            const Vec* h_spec, const TreePolicy& policy) {
    if (policy.size < 1) throw std::invalid_argument("draft_tree: size must be >= 1");
    if (policy.top_k < 1 || policy.top_k > w.cfg.vocab_size)
        throw std::invalid_argument("draft_tree: top_k out of range");
    if (policy.depth < 1) throw std::invalid_argument("draft_tree: depth must be >= 1");

    struct Cand {
        double score;
        int64_t seq;
        int parent;
        TokenId token;
        int depth;
    };
    struct Worse {
        bool operator()(const Cand& a, const Cand& b) const {
            if (a.score != b.score) return a.score < b.score;
            return a.seq > b.seq;
        }
    };
    std::priority_queue<Cand, std::vector<Cand>, Worse> frontier;
    int64_t seq = 0;

    CellStepOut root = cell_step(w, DrafterState::initial(w.cfg.width), t_next, &h_last, h_spec);
    for (auto& [tok, lp] : logprob_topk(root.logits, policy.top_k))
        frontier.push(Cand{lp, seq++, -1, tok, 1});

    DraftTree tree;
    tree.nodes.reserve(policy.size);
    while (static_cast<int>(tree.nodes.size()) < policy.size && !frontier.empty()) {
        Cand c = frontier.top();
        frontier.pop();
        const DrafterState& parent_state = c.parent < 0 ? root.state : tree.nodes[c.parent].state;
        CellStepOut out = cell_step(w, parent_state, c.token, nullptr, nullptr);
        int idx = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back(DraftNode{c.token, c.parent, c.depth, c.score, std::move(out.state)});
        if (c.depth < policy.depth)
            for (auto& [tok, lp] : logprob_topk(out.logits, policy.top_k))
                frontier.push(Cand{c.score + lp, seq++, idx, tok, c.depth + 1});
    }
    return tree;
}

// ---------------------------------------------------------------------------
// Serialization

inline void save_drafter(const DrafterWeights& w, const std::string& path) {
    static const char* gate_names[4] = {"f", "i", "o", "c"};
    std::map<std::string, NamedTensor> t;
    t["emb"] = tensor_of(w.emb);
    t["head"] = tensor_of(w.head);
    for (int m = 0; m < 4; ++m) {
        t[std::string("w.") + gate_names[m]] = tensor_of(w.w_gate[m]);
        t[std::string("r.") + gate_names[m]] = tensor_of(w.r_gate[m]);
        if (w.with_spec()) t[std::string("u.") + gate_names[m]] = tensor_of(w.u_gate[m]);
    }
    t["ln_c.g"] = tensor_of(w.ln_c_g);
    t["ln_c.b"] = tensor_of(w.ln_c_b);
    t["ln_z.g"] = tensor_of(w.ln_z_g);
    t["ln_z.b"] = tensor_of(w.ln_z_b);
    write_tensor_file(path, kDrafterMagic,
                      {static_cast<uint32_t>(w.cfg.vocab_size), static_cast<uint32_t>(w.cfg.target_hidden),
                       static_cast<uint32_t>(w.cfg.width), static_cast<uint32_t>(w.cfg.max_depth),
                       static_cast<uint32_t>(w.cfg.variant)},
                      t);
}

inline DrafterWeights load_drafter(const std::string& path) {
    static const char* gate_names[4] = {"f", "i", "o", "c"};
    TensorFile tf = read_tensor_file(path, kDrafterMagic);
    DrafterConfig cfg;
    cfg.vocab_size = static_cast<int>(tf.fields[0]);
    cfg.target_hidden = static_cast<int>(tf.fields[1]);
    cfg.width = static_cast<int>(tf.fields[2]);
    cfg.max_depth = static_cast<int>(tf.fields[3]);
    if (tf.fields[4] > 1) throw std::runtime_error("malformed header: bad variant flag");
    cfg.variant = static_cast<DrafterVariant>(tf.fields[4]);
    cfg.validate();
    DrafterWeights w;
    w.cfg = cfg;
    w.refresh_alpha();
    w.emb = take_mat(tf, "emb", cfg.vocab_size, cfg.width);
    w.head = take_mat(tf, "head", cfg.vocab_size, cfg.width);
    for (int m = 0; m < 4; ++m) {
        w.w_gate[m] = take_mat(tf, std::string("w.") + gate_names[m], cfg.width, cfg.target_hidden);
        w.r_gate[m] = take_mat(tf, std::string("r.") + gate_names[m], cfg.width, cfg.width);
        if (w.with_spec())
            w.u_gate[m] = take_mat(tf, std::string("u.") + gate_names[m], cfg.width, cfg.target_hidden);
    }
    w.ln_c_g = take_vec(tf, "ln_c.g", cfg.width);
    w.ln_c_b = take_vec(tf, "ln_c.b", cfg.width);
    w.ln_z_g = take_vec(tf, "ln_z.g", cfg.width);
    w.ln_z_b = take_vec(tf, "ln_z.b", cfg.width);
    return w;
}

} // namespace owl

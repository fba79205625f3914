// Verification procedures over the target model. Tree verification places the
// pending token at the tree root, one query per node, and (when enabled) one
// [SPEC] query per node: [SPEC] i sees the committed context, the root-to-node
// path of node i, and itself, at position(node i)+1. Real queries never see
// any [SPEC] key, and no [SPEC] entry survives a verification call.
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "owl/drafter.hpp"
#include "owl/numerics.hpp"
#include "owl/target_model.hpp"

namespace owl {

struct PrefillResult {
    TokenId t_next;
    Vec h_last;
    std::optional<Vec> h_spec;
};

// [SPEC] is an input-side control token: generation argmax runs over the real
// vocabulary rows only, so the reserved id never enters the output stream.
inline TokenId greedy_argmax(const TargetModel& model, const float* logits) {
    return argmax({logits, static_cast<size_t>(model.cfg.vocab_size - 1)});
}

// Forward the prompt (plus one trailing [SPEC] when requested), take the
// greedy next token and the hiddens, then evict the [SPEC] cache entry.
inline PrefillResult prefill(const TargetModel& model, KvCache& cache,
                             std::span<const TokenId> prompt, bool with_spec = true) {
    if (prompt.empty()) throw std::invalid_argument("prefill: empty prompt");
    if (cache.len() != 0) throw std::invalid_argument("prefill: cache not empty");
    for (TokenId t : prompt)
        if (t == model.spec_token()) throw std::invalid_argument("prefill: prompt contains the reserved [SPEC] id");

    int n = static_cast<int>(prompt.size());
    std::vector<TokenId> tokens(prompt.begin(), prompt.end());
    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = i;
    if (with_spec) {
        tokens.push_back(model.spec_token());
        positions.push_back(n);
    }
    AttentionMask mask = AttentionMask::causal(0, static_cast<int>(tokens.size()));
    ForwardResult fr = forward(model, cache, tokens, positions, mask);

    PrefillResult r;
    r.t_next = greedy_argmax(model, fr.logits.row(n - 1));
    r.h_last = fr.hidden.row_vec(n - 1);
    if (with_spec) {
        r.h_spec = fr.hidden.row_vec(n);
        cache.rollback(n); // the [SPEC] entry must not influence future tokens
    }
    return r;
}

// ---------------------------------------------------------------------------
// Verification tree: node 0 is the pending token at depth 0; drafted nodes
// hang off it with depths starting at 1.

struct VerifyTree {
    std::vector<TokenId> tokens;
    std::vector<int> parent; // -1 for the root
    std::vector<int> depth;

    int size() const { return static_cast<int>(tokens.size()); }

    static VerifyTree single(TokenId pending) { return VerifyTree{{pending}, {-1}, {0}}; }

    static VerifyTree from_draft(TokenId pending, const DraftTree& d) {
        VerifyTree t = single(pending);
        for (const DraftNode& n : d.nodes) {
            t.tokens.push_back(n.token);
            t.parent.push_back(n.parent < 0 ? 0 : n.parent + 1);
            t.depth.push_back(n.depth);
        }
        t.validate();
        return t;
    }

    void validate() const {
        for (int i = 0; i < size(); ++i) {
            if (i == 0) {
                if (parent[0] != -1 || depth[0] != 0) throw std::invalid_argument("verify tree: bad root");
            } else if (parent[i] < 0 || parent[i] >= i || depth[i] != depth[parent[i]] + 1) {
                throw std::invalid_argument("verify tree: bad parent links");
            }
        }
    }

    std::vector<int> path_of(int node) const {
        std::vector<int> p;
        for (int c = node; c >= 0; c = parent[c]) p.push_back(c);
        std::reverse(p.begin(), p.end());
        return p;
    }
};

struct VerifierBatch {
    std::vector<TokenId> tokens;
    std::vector<int> positions;
    AttentionMask mask;
    int tree_size = 0;
    bool with_spec = false;
    int base_position = 0;

    int spec_query(int node) const { return tree_size + node; }
    int queries() const { return static_cast<int>(tokens.size()); }
};

// Tree tokens first, then one [SPEC] per node. The mask prefix is the
// committed context, which the engine keeps equal to base_position.
inline VerifierBatch prepare(const VerifyTree& tree, int base_position, TokenId spec_id,
                             bool with_spec = true) {
    if (tree.size() == 0) throw std::invalid_argument("prepare: empty tree");
    tree.validate();
    int s = tree.size();
    VerifierBatch b;
    b.tree_size = s;
    b.with_spec = with_spec;
    b.base_position = base_position;
    int queries = with_spec ? 2 * s : s;
    b.tokens.reserve(queries);
    b.positions.reserve(queries);
    b.mask.prefix_len.assign(queries, base_position);
    b.mask.extra.resize(queries);

    for (int i = 0; i < s; ++i) {
        b.tokens.push_back(tree.tokens[i]);
        b.positions.push_back(base_position + tree.depth[i]);
        for (int a : tree.path_of(i)) b.mask.extra[i].push_back(base_position + a);
    }
    if (with_spec) {
        for (int i = 0; i < s; ++i) {
            b.tokens.push_back(spec_id);
            b.positions.push_back(base_position + tree.depth[i] + 1);
            int q = s + i;
            for (int a : tree.path_of(i)) b.mask.extra[q].push_back(base_position + a);
            b.mask.extra[q].push_back(base_position + q); // itself
        }
    }
    return b;
}

struct VerifyResult {
    std::vector<TokenId> accepted; // drafted tokens accepted, in order
    TokenId bonus = 0;             // verifier argmax at the stopping point
    Vec h_last;
    std::optional<Vec> h_spec;
    std::vector<int> accepted_nodes; // tree node indices incl. the root
    int acceptance_length = 1;       // |accepted| + 1
    int queries = 0;
};

// Greedy walk from the root; each accepted child must equal the target argmax
// given the committed prefix. Accepted KV entries are compacted in place, all
// rejected and [SPEC] entries are evicted.
inline VerifyResult tree_verify(const TargetModel& model, KvCache& cache, const VerifyTree& tree,
                                const VerifierBatch& batch) {
    int s = tree.size();
    if (batch.tree_size != s || static_cast<int>(batch.tokens.size()) != (batch.with_spec ? 2 * s : s))
        throw std::invalid_argument("tree_verify: batch does not match tree");
    for (int i = 0; i < s; ++i)
        if (batch.tokens[i] != tree.tokens[i]) throw std::invalid_argument("tree_verify: batch does not match tree");
    int base = cache.len();

    ForwardResult fr = forward(model, cache, batch.tokens, batch.positions, batch.mask);

    std::vector<std::vector<int>> children(s);
    for (int i = 1; i < s; ++i) children[tree.parent[i]].push_back(i);

    VerifyResult r;
    r.queries = batch.queries();
    int cur = 0;
    r.accepted_nodes.push_back(0);
    while (true) {
        TokenId want = greedy_argmax(model, fr.logits.row(cur));
        int next = -1;
        for (int c : children[cur])
            if (tree.tokens[c] == want) {
                next = c;
                break;
            }
        if (next < 0) {
            r.bonus = want;
            break;
        }
        r.accepted.push_back(tree.tokens[next]);
        r.accepted_nodes.push_back(next);
        cur = next;
    }
    r.acceptance_length = static_cast<int>(r.accepted.size()) + 1;
    r.h_last = fr.hidden.row_vec(cur);
    if (batch.with_spec && !r.accepted.empty())
        r.h_spec = fr.hidden.row_vec(batch.spec_query(cur));

    cache.keep_tail(base, r.accepted_nodes);
    return r;
}

// Linear verification of pending + draft under a plain causal mask; no [SPEC]
// is appended on this branch.
inline VerifyResult non_tree_verify(const TargetModel& model, KvCache& cache, TokenId pending,
                                    std::span<const TokenId> draft) {
    int base = cache.len();
    std::vector<TokenId> tokens;
    tokens.push_back(pending);
    tokens.insert(tokens.end(), draft.begin(), draft.end());
    int n = static_cast<int>(tokens.size());
    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = base + i;
    ForwardResult fr = forward(model, cache, tokens, positions, AttentionMask::causal(base, n));

    VerifyResult r;
    r.queries = n;
    int cur = 0;
    while (true) {
        TokenId want = greedy_argmax(model, fr.logits.row(cur));
        if (cur == n - 1 || draft[cur] != want) {
            r.bonus = want;
            break;
        }
        r.accepted.push_back(want);
        ++cur;
    }
    r.acceptance_length = static_cast<int>(r.accepted.size()) + 1;
    r.h_last = fr.hidden.row_vec(cur);
    cache.rollback(base + 1 + static_cast<int>(r.accepted.size()));
    return r;
}

} // namespace owl

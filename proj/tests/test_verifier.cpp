#include <gtest/gtest.h>

#include "owl/engine.hpp"
#include "owl/rng.hpp"
#include "owl/verifier.hpp"

using namespace owl;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.vocab_size = 33;
    c.hidden = 16;
    c.layers = 2;
    c.heads = 2;
    return c;
}

std::vector<TokenId> random_prompt(Rng& rng, int n, int vocab) {
    std::vector<TokenId> t(n);
    for (auto& x : t) x = rng.below(vocab - 1);
    return t;
}

ForwardResult causal_forward(const TargetModel& m, KvCache& cache, std::span<const TokenId> toks) {
    std::vector<int> pos(toks.size());
    for (size_t i = 0; i < toks.size(); ++i) pos[i] = cache.len() + static_cast<int>(i);
    return forward(m, cache, toks, pos, AttentionMask::causal(cache.len(), static_cast<int>(toks.size())));
}

// random verification tree (root = pending at depth 0)
VerifyTree random_tree(Rng& rng, TokenId pending, int max_nodes, int vocab) {
    VerifyTree t = VerifyTree::single(pending);
    int extra = 1 + rng.below(max_nodes - 1);
    for (int i = 0; i < extra; ++i) {
        int parent = rng.below(t.size());
        t.tokens.push_back(rng.below(vocab - 1));
        t.parent.push_back(parent);
        t.depth.push_back(t.depth[parent] + 1);
    }
    return t;
}

} // namespace

TEST(Prefill, EvictsSpecAndMatchesVanillaGreedy) {
    TargetModel m = seed_model(3, tiny_cfg());
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<TokenId> prompt = random_prompt(rng, 6 + rng.below(10), m.cfg.vocab_size);
        KvCache cache(m.cfg);
        PrefillResult r = prefill(m, cache, prompt, true);
        EXPECT_EQ(cache.len(), static_cast<int>(prompt.size()));
        EXPECT_FALSE(cache.contains_token(m.spec_token()));

        KvCache plain(m.cfg);
        ForwardResult fr = causal_forward(m, plain, prompt);
        TokenId vanilla = greedy_argmax(m, fr.logits.row(static_cast<int>(prompt.size()) - 1));
        EXPECT_EQ(r.t_next, vanilla); // bit-exact: real tokens never attend [SPEC]
        ASSERT_TRUE(r.h_spec.has_value());
        EXPECT_NE(*r.h_spec, r.h_last);
    }
}

TEST(Prefill, RejectsSpecInPrompt) {
    TargetModel m = seed_model(3, tiny_cfg());
    KvCache cache(m.cfg);
    std::vector<TokenId> prompt = {1, m.spec_token(), 2};
    EXPECT_THROW(prefill(m, cache, prompt, true), std::invalid_argument);
}

TEST(Prepare, ThreeNodeTreeLayout) {
    // root t1 with children t2 and t2' (the two-branch example)
    VerifyTree t = VerifyTree::single(10);
    t.tokens.push_back(11);
    t.parent.push_back(0);
    t.depth.push_back(1);
    t.tokens.push_back(12);
    t.parent.push_back(0);
    t.depth.push_back(1);

    int base = 100; // committed context length
    VerifierBatch b = prepare(t, base, 32, true);
    EXPECT_EQ(b.queries(), 6);
    // positions: root at base, children base+1, each [SPEC] at node position + 1
    EXPECT_EQ(b.positions[0], 100);
    EXPECT_EQ(b.positions[1], 101);
    EXPECT_EQ(b.positions[2], 101);
    EXPECT_EQ(b.positions[3], 101);
    EXPECT_EQ(b.positions[4], 102);
    EXPECT_EQ(b.positions[5], 102);
    // [SPEC] 1 sees (context, t1, itself)
    EXPECT_EQ(b.mask.prefix_len[3], base);
    EXPECT_EQ(b.mask.extra[3], (std::vector<int>{100, 103}));
    // [SPEC] 2 sees (context, t1, t2, itself)
    EXPECT_EQ(b.mask.extra[4], (std::vector<int>{100, 101, 104}));
    // [SPEC] 3 sees (context, t1, t2', itself)
    EXPECT_EQ(b.mask.extra[5], (std::vector<int>{100, 102, 105}));
    // real queries never see any [SPEC] key
    for (int q = 0; q < 3; ++q)
        for (int k = 3; k < 6; ++k) EXPECT_FALSE(b.mask.sees(q, base + k));
}

TEST(Prepare, SingleNodeTree) {
    VerifyTree t = VerifyTree::single(5);
    VerifierBatch b = prepare(t, 40, 32, true);
    EXPECT_EQ(b.queries(), 2);
    EXPECT_EQ(b.positions[0], 40);
    EXPECT_EQ(b.positions[1], 41);
}

TEST(Prepare, EqualBudgetAccounting) {
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        VerifyTree t = random_tree(rng, 3, 12, 33);
        VerifierBatch with = prepare(t, 10, 32, true);
        VerifierBatch without = prepare(t, 10, 32, false);
        EXPECT_EQ(with.queries(), 2 * t.size());
        EXPECT_EQ(without.queries(), t.size());
    }
}

TEST(Prepare, SpecLogitsMatchSequentialExecution) {
    TargetModel m = seed_model(5, tiny_cfg());
    Rng rng(6);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<TokenId> prompt = random_prompt(rng, 5 + rng.below(8), m.cfg.vocab_size);
        KvCache cache(m.cfg);
        causal_forward(m, cache, prompt);
        int base = cache.len();
        VerifyTree tree = random_tree(rng, rng.below(m.cfg.vocab_size - 1), 15, m.cfg.vocab_size);
        VerifierBatch batch = prepare(tree, base, m.spec_token(), true);
        ForwardResult fr = forward(m, cache, batch.tokens, batch.positions, batch.mask);

        for (int node = 0; node < tree.size(); ++node) {
            // per-path re-execution: prompt + root..node path (+[SPEC])
            std::vector<TokenId> path_tokens = prompt;
            for (int idx : tree.path_of(node)) path_tokens.push_back(tree.tokens[idx]);
            std::vector<TokenId> with_spec = path_tokens;
            with_spec.push_back(m.spec_token());
            KvCache seq(m.cfg);
            ForwardResult sf = causal_forward(m, seq, with_spec);
            int node_row = static_cast<int>(path_tokens.size()) - 1;
            for (int c = 0; c < m.cfg.vocab_size; ++c) {
                EXPECT_NEAR(fr.logits.at(node, c), sf.logits.at(node_row, c), 1e-5);
                EXPECT_NEAR(fr.logits.at(batch.spec_query(node), c), sf.logits.at(node_row + 1, c), 1e-5);
            }
        }
        cache.rollback(base);
    }
}

TEST(TreeVerify, NothingAcceptedInWorstCase) {
    TargetModel m = seed_model(7, tiny_cfg());
    Rng rng(8);
    std::vector<TokenId> prompt = random_prompt(rng, 8, m.cfg.vocab_size);
    KvCache cache(m.cfg);
    PrefillResult pre = prefill(m, cache, prompt, true);

    // find the true next tokens and build a tree that avoids them
    KvCache probe(m.cfg);
    causal_forward(m, probe, prompt);
    ForwardResult nf = causal_forward(m, probe, std::vector<TokenId>{pre.t_next});
    TokenId truth = greedy_argmax(m, nf.logits.row(0));

    VerifyTree t = VerifyTree::single(pre.t_next);
    t.tokens.push_back(truth == 0 ? 1 : 0); // wrong child on purpose
    t.parent.push_back(0);
    t.depth.push_back(1);
    VerifierBatch b = prepare(t, cache.len(), m.spec_token(), true);
    VerifyResult r = tree_verify(m, cache, t, b);
    EXPECT_TRUE(r.accepted.empty());
    EXPECT_EQ(r.acceptance_length, 1);
    EXPECT_EQ(r.bonus, truth);
    EXPECT_FALSE(r.h_spec.has_value()); // nothing accepted -> no [SPEC] hidden
    EXPECT_EQ(cache.len(), static_cast<int>(prompt.size()) + 1);
    EXPECT_FALSE(cache.contains_token(m.spec_token()));
}

TEST(TreeVerify, FullGreedyPathGivesMaxAcceptance) {
    TargetModel m = seed_model(11, tiny_cfg());
    Rng rng(12);
    std::vector<TokenId> prompt = random_prompt(rng, 10, m.cfg.vocab_size);
    std::vector<TokenId> greedy = vanilla_greedy(m, prompt, 10);
    ASSERT_EQ(greedy.size(), 10u);

    KvCache cache(m.cfg);
    PrefillResult pre = prefill(m, cache, prompt, true);
    ASSERT_EQ(pre.t_next, greedy[0]);

    // chain of the next 8 true tokens as a single path
    VerifyTree t = VerifyTree::single(pre.t_next);
    for (int i = 1; i <= 8; ++i) {
        t.tokens.push_back(greedy[i]);
        t.parent.push_back(i - 1);
        t.depth.push_back(i);
    }
    VerifierBatch b = prepare(t, cache.len(), m.spec_token(), true);
    VerifyResult r = tree_verify(m, cache, t, b);
    EXPECT_EQ(r.acceptance_length, 9); // depth + 1
    EXPECT_EQ(r.bonus, greedy[9]);
    ASSERT_TRUE(r.h_spec.has_value());
    EXPECT_FALSE(cache.contains_token(m.spec_token()));
}

TEST(TreeVerify, CommittedStreamIsLossless) {
    TargetModel m = seed_model(13, tiny_cfg());
    Rng rng(14);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<TokenId> prompt = random_prompt(rng, 4 + rng.below(10), m.cfg.vocab_size);
        std::vector<TokenId> want = vanilla_greedy(m, prompt, 12);

        KvCache cache(m.cfg);
        PrefillResult pre = prefill(m, cache, prompt, true);
        std::vector<TokenId> out = {pre.t_next};
        while (static_cast<int>(out.size()) < 12) {
            VerifyTree t = random_tree(rng, out.back(), 10, m.cfg.vocab_size);
            VerifierBatch b = prepare(t, cache.len(), m.spec_token(), true);
            VerifyResult r = tree_verify(m, cache, t, b);
            for (TokenId a : r.accepted) out.push_back(a);
            out.push_back(r.bonus);
            EXPECT_FALSE(cache.contains_token(m.spec_token()));
        }
        out.resize(12);
        EXPECT_EQ(out, want);
    }
}

TEST(NonTreeVerify, EmptyDraftIsPlainGreedyStep) {
    TargetModel m = seed_model(15, tiny_cfg());
    Rng rng(16);
    std::vector<TokenId> prompt = random_prompt(rng, 9, m.cfg.vocab_size);
    std::vector<TokenId> greedy = vanilla_greedy(m, prompt, 2);

    KvCache cache(m.cfg);
    PrefillResult pre = prefill(m, cache, prompt, false);
    VerifyResult r = non_tree_verify(m, cache, pre.t_next, {});
    EXPECT_EQ(r.acceptance_length, 1);
    EXPECT_EQ(r.bonus, greedy[1]);
    EXPECT_EQ(r.queries, 1);
    EXPECT_FALSE(r.h_spec.has_value());
}

TEST(NonTreeVerify, SelfGreedyDraftFullyAccepted) {
    TargetModel m = seed_model(17, tiny_cfg());
    Rng rng(18);
    std::vector<TokenId> prompt = random_prompt(rng, 7, m.cfg.vocab_size);
    int mlen = 6;
    std::vector<TokenId> greedy = vanilla_greedy(m, prompt, mlen + 2);

    KvCache cache(m.cfg);
    PrefillResult pre = prefill(m, cache, prompt, false);
    std::vector<TokenId> draft(greedy.begin() + 1, greedy.begin() + 1 + mlen);
    VerifyResult r = non_tree_verify(m, cache, pre.t_next, draft);
    EXPECT_EQ(r.acceptance_length, mlen + 1);
    EXPECT_EQ(r.bonus, greedy[mlen + 1]);
    EXPECT_EQ(cache.len(), static_cast<int>(prompt.size()) + 1 + mlen);
}

TEST(NonTreeVerify, RandomDraftsMatchStepByStepOracle) {
    TargetModel m = seed_model(19, tiny_cfg());
    Rng rng(20);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<TokenId> prompt = random_prompt(rng, 5 + rng.below(8), m.cfg.vocab_size);
        std::vector<TokenId> draft = random_prompt(rng, rng.below(6), m.cfg.vocab_size);

        KvCache cache(m.cfg);
        PrefillResult pre = prefill(m, cache, prompt, false);
        VerifyResult r = non_tree_verify(m, cache, pre.t_next, draft);

        // token-by-token greedy simulation
        KvCache sim(m.cfg);
        causal_forward(m, sim, prompt);
        TokenId cur = pre.t_next;
        std::vector<TokenId> accepted;
        TokenId bonus = -1;
        for (size_t i = 0;; ++i) {
            ForwardResult fr = causal_forward(m, sim, std::vector<TokenId>{cur});
            TokenId truth = greedy_argmax(m, fr.logits.row(0));
            if (i < draft.size() && draft[i] == truth) {
                accepted.push_back(truth);
                cur = truth;
            } else {
                bonus = truth;
                break;
            }
        }
        EXPECT_EQ(r.accepted, accepted);
        EXPECT_EQ(r.bonus, bonus);
        EXPECT_EQ(r.acceptance_length, static_cast<int>(accepted.size()) + 1);
    }
}

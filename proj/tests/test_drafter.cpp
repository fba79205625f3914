#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "owl/drafter.hpp"
#include "owl/rng.hpp"
#include "oracles.hpp"

using namespace owl;

namespace {

DrafterConfig small_cfg(DrafterVariant v = DrafterVariant::spec) {
    DrafterConfig c;
    c.vocab_size = 17;
    c.target_hidden = 4;
    c.width = 8;
    c.max_depth = 4;
    c.variant = v;
    return c;
}

Vec random_vec(Rng& rng, int n, double s = 1.0) {
    Vec v(n);
    for (float& x : v) x = rng.normal_f(s);
    return v;
}

} // namespace

TEST(ComputeAlpha, MatchesHighPrecisionOracle) {
    EXPECT_NEAR(compute_alpha(1, 1), 2.828427, 1e-5);
    EXPECT_NEAR(compute_alpha(1, 1), static_cast<double>(oracle::alpha_ref(1, 1)), 1e-12);
    EXPECT_NEAR(compute_alpha(8, 64), 0.36054, 1e-4);
    EXPECT_NEAR(compute_alpha(8, 64), static_cast<double>(oracle::alpha_ref(8, 64)), 1e-12);
}

TEST(ComputeAlpha, HalvesWhenWidthDoubles) {
    for (int n : {1, 2, 8})
        for (int d : {1, 16, 64})
            EXPECT_NEAR(compute_alpha(n, 2 * d), compute_alpha(n, d) / 2.0, 1e-12);
}

TEST(ComputeAlpha, RejectsBadArgs) {
    EXPECT_THROW(compute_alpha(0, 4), std::invalid_argument);
    EXPECT_THROW(compute_alpha(4, 0), std::invalid_argument);
}

TEST(CellStep, ZeroWeightsGiveZeroOutputs) {
    DrafterConfig cfg = small_cfg();
    DrafterWeights w = seed_drafter(1, cfg);
    // zero everything
    auto zero = [](Mat& m) { std::fill(m.data.begin(), m.data.end(), 0.0f); };
    zero(w.emb);
    zero(w.head);
    for (int m = 0; m < 4; ++m) {
        zero(w.w_gate[m]);
        zero(w.u_gate[m]);
        zero(w.r_gate[m]);
    }
    std::fill(w.ln_c_b.begin(), w.ln_c_b.end(), 0.0f);
    std::fill(w.ln_z_b.begin(), w.ln_z_b.end(), 0.0f);
    Vec h(cfg.target_hidden, 0.4f);
    CellStepOut out = cell_step(w, DrafterState::initial(cfg.width), 3, &h, nullptr);
    for (float v : out.hidden) EXPECT_EQ(v, 0.0f);
    for (float v : out.state.z) EXPECT_EQ(v, 0.0f);
}

TEST(CellStep, Deterministic) {
    DrafterConfig cfg = small_cfg();
    DrafterWeights w = seed_drafter(2, cfg);
    Rng rng(3);
    Vec h = random_vec(rng, cfg.target_hidden);
    Vec hs = random_vec(rng, cfg.target_hidden);
    CellStepOut a = cell_step(w, DrafterState::initial(cfg.width), 5, &h, &hs);
    CellStepOut b = cell_step(w, DrafterState::initial(cfg.width), 5, &h, &hs);
    EXPECT_EQ(a.hidden, b.hidden);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.state.z, b.state.z);
}

TEST(CellStep, MatchesStraightLineOracle) {
    Rng rng(11);
    for (DrafterVariant variant : {DrafterVariant::spec, DrafterVariant::nospec}) {
        DrafterConfig cfg = small_cfg(variant);
        DrafterWeights w = seed_drafter(21, cfg);
        if (w.with_spec()) // exercise the [SPEC] path with nonzero projections
            for (auto& u : w.u_gate)
                for (float& v : u.data) v = rng.normal_f(0.3);
        Vec h = random_vec(rng, cfg.target_hidden);
        Vec hs = random_vec(rng, cfg.target_hidden);
        const Vec* hs_ptr = variant == DrafterVariant::spec ? &hs : nullptr;

        CellStepOut got1 = cell_step(w, DrafterState::initial(cfg.width), 7, &h, hs_ptr);
        auto [ref1, ref_logits1] = oracle::cell_step_ref(w, oracle::CellRef{std::vector<double>(cfg.width, 0.0), {}},
                                                         7, &h, hs_ptr);
        for (int i = 0; i < cfg.width; ++i) EXPECT_NEAR(got1.hidden[i], ref1.carry[i], 1e-5);
        for (int i = 0; i < cfg.vocab_size; ++i) EXPECT_NEAR(got1.logits[i], ref_logits1[i], 1e-4);

        // a recurrent step from the first step's state
        CellStepOut got2 = cell_step(w, got1.state, 9, nullptr, nullptr);
        auto [ref2, ref_logits2] = oracle::cell_step_ref(w, ref1, 9, nullptr, nullptr);
        for (int i = 0; i < cfg.width; ++i) EXPECT_NEAR(got2.hidden[i], ref2.carry[i], 1e-5);
        for (int i = 0; i < cfg.vocab_size; ++i) EXPECT_NEAR(got2.logits[i], ref_logits2[i], 1e-4);
    }
}

TEST(DraftTree, SizeOneIsArgmaxContinuation) {
    DrafterConfig cfg = small_cfg();
    DrafterWeights w = seed_drafter(4, cfg);
    Rng rng(5);
    Vec h = random_vec(rng, cfg.target_hidden);
    CellStepOut root = cell_step(w, DrafterState::initial(cfg.width), 2, &h, nullptr);
    TokenId best = argmax(root.logits);

    TreePolicy p{3, 4, 1};
    DraftTree t = draft_tree(w, 2, h, nullptr, p);
    ASSERT_EQ(t.nodes.size(), 1u);
    EXPECT_EQ(t.nodes[0].token, best);
    EXPECT_EQ(t.nodes[0].parent, -1);
    EXPECT_EQ(t.nodes[0].depth, 1);
}

TEST(DraftTree, PaperPolicyShape) {
    DrafterConfig cfg;
    cfg.vocab_size = 257;
    cfg.target_hidden = 16;
    cfg.width = 32;
    cfg.max_depth = 8;
    DrafterWeights w = seed_drafter(6, cfg);
    Rng rng(7);
    Vec h = random_vec(rng, cfg.target_hidden);
    Vec hs = random_vec(rng, cfg.target_hidden);
    TreePolicy p{10, 8, 60};
    DraftTree t = draft_tree(w, 100, h, &hs, p);
    EXPECT_EQ(t.nodes.size(), 60u);
    for (const auto& n : t.nodes) {
        EXPECT_GE(n.depth, 1);
        EXPECT_LE(n.depth, 8);
    }
}

TEST(DraftTree, MatchesExhaustiveEnumeration) {
    DrafterConfig cfg = small_cfg();
    cfg.vocab_size = 5;
    DrafterWeights w = seed_drafter(8, cfg);
    Rng rng(9);
    Vec h = random_vec(rng, cfg.target_hidden);
    TreePolicy p{2, 3, 6};
    DraftTree t = draft_tree(w, 1, h, nullptr, p);
    ASSERT_EQ(t.nodes.size(), 6u);

    // enumerate every reachable node under the topk/depth constraint,
    // carrying each node's state and child logits
    CellStepOut root = cell_step(w, DrafterState::initial(cfg.width), 1, &h, nullptr);
    struct Item {
        std::vector<TokenId> path;
        double score;
        DrafterState state;
        Vec logits;
    };
    std::vector<Item> queue;
    for (auto& [tok, lp] : logprob_topk(root.logits, p.top_k)) {
        CellStepOut o = cell_step(w, root.state, tok, nullptr, nullptr);
        queue.push_back(Item{{tok}, lp, o.state, o.logits});
    }
    std::vector<Item> reachable;
    while (!queue.empty()) {
        Item it = queue.back();
        queue.pop_back();
        if (static_cast<int>(it.path.size()) < p.depth)
            for (auto& [tok, lp] : logprob_topk(it.logits, p.top_k)) {
                CellStepOut o = cell_step(w, it.state, tok, nullptr, nullptr);
                std::vector<TokenId> path = it.path;
                path.push_back(tok);
                queue.push_back(Item{path, it.score + lp, o.state, o.logits});
            }
        reachable.push_back(std::move(it));
    }
    // greedy ancestry-closed selection of the best 6
    std::set<std::vector<TokenId>> selected;
    for (int pick = 0; pick < 6; ++pick) {
        const Item* best = nullptr;
        for (const Item& it : reachable) {
            if (selected.count(it.path)) continue;
            bool parent_ok = it.path.size() == 1;
            if (!parent_ok) {
                std::vector<TokenId> pp(it.path.begin(), it.path.end() - 1);
                parent_ok = selected.count(pp) > 0;
            }
            if (!parent_ok) continue;
            if (!best || it.score > best->score) best = &it;
        }
        ASSERT_NE(best, nullptr);
        selected.insert(best->path);
    }

    std::set<std::vector<TokenId>> got;
    for (size_t i = 0; i < t.nodes.size(); ++i) {
        std::vector<TokenId> path;
        for (int c = static_cast<int>(i); c >= 0; c = t.nodes[c].parent) path.push_back(t.nodes[c].token);
        std::reverse(path.begin(), path.end());
        got.insert(path);
    }
    EXPECT_EQ(got, selected);
}

TEST(DraftTree, DependsOnlyOnItsInputs) {
    DrafterConfig cfg = small_cfg();
    DrafterWeights w = seed_drafter(10, cfg);
    Rng rng(11);
    Vec h = random_vec(rng, cfg.target_hidden);
    Vec hs = random_vec(rng, cfg.target_hidden);
    TreePolicy p{3, 3, 10};
    DraftTree a = draft_tree(w, 4, h, &hs, p);
    DraftTree b = draft_tree(w, 4, h, &hs, p);
    ASSERT_EQ(a.nodes.size(), b.nodes.size());
    for (size_t i = 0; i < a.nodes.size(); ++i) {
        EXPECT_EQ(a.nodes[i].token, b.nodes[i].token);
        EXPECT_EQ(a.nodes[i].parent, b.nodes[i].parent);
        EXPECT_EQ(a.nodes[i].score, b.nodes[i].score);
    }
}

TEST(DraftTree, AncestryClosureAndScores) {
    DrafterConfig cfg = small_cfg();
    DrafterWeights w = seed_drafter(12, cfg);
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        Vec h = random_vec(rng, cfg.target_hidden);
        TreePolicy p{3, 4, 14};
        TokenId t0 = rng.below(cfg.vocab_size);
        DraftTree t = draft_tree(w, t0, h, nullptr, p);
        // every parent precedes its child and scores never increase along paths
        for (size_t i = 0; i < t.nodes.size(); ++i) {
            int parent = t.nodes[i].parent;
            EXPECT_LT(parent, static_cast<int>(i));
            if (parent >= 0) {
                EXPECT_LE(t.nodes[i].score, t.nodes[parent].score);
                EXPECT_EQ(t.nodes[i].depth, t.nodes[parent].depth + 1);
            }
        }
        // recompute each node's score by replaying its root-to-node path
        for (size_t i = 0; i < t.nodes.size(); ++i) {
            std::vector<TokenId> path;
            for (int c = static_cast<int>(i); c >= 0; c = t.nodes[c].parent) path.push_back(t.nodes[c].token);
            std::reverse(path.begin(), path.end());
            DrafterState st = DrafterState::initial(cfg.width);
            double score = 0.0;
            TokenId prev = t0;
            const Vec* hh = &h;
            for (TokenId tok : path) {
                CellStepOut o = st.at_root() ? cell_step(w, st, prev, hh, nullptr)
                                             : cell_step(w, st, prev, nullptr, nullptr);
                double lse = log_sum_exp(o.logits);
                score += static_cast<double>(o.logits[tok]) - lse;
                st = o.state;
                prev = tok;
            }
            EXPECT_NEAR(score, t.nodes[i].score, 1e-9);
        }
    }
}

TEST(DrafterFile, RoundTripBothVariants) {
    for (DrafterVariant v : {DrafterVariant::spec, DrafterVariant::nospec}) {
        DrafterConfig cfg = small_cfg(v);
        DrafterWeights a = seed_drafter(20, cfg);
        std::string p = (std::filesystem::temp_directory_path() / "owl_drafter_rt.spdr").string();
        save_drafter(a, p);
        DrafterWeights b = load_drafter(p);
        EXPECT_EQ(b.cfg.variant, v);
        EXPECT_EQ(b.cfg.max_depth, cfg.max_depth);
        EXPECT_DOUBLE_EQ(b.alpha, a.alpha);
        EXPECT_EQ(a.emb.data, b.emb.data);
        EXPECT_EQ(a.head.data, b.head.data);
        for (int m = 0; m < 4; ++m) {
            EXPECT_EQ(a.w_gate[m].data, b.w_gate[m].data);
            EXPECT_EQ(a.r_gate[m].data, b.r_gate[m].data);
            if (v == DrafterVariant::spec) EXPECT_EQ(a.u_gate[m].data, b.u_gate[m].data);
            else EXPECT_TRUE(b.u_gate[m].empty());
        }
        std::remove(p.c_str());
    }
}

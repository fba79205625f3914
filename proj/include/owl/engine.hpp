// Top-level generation loop: vanilla greedy, tree drafting (with or without
// [SPEC]), suffix-only linear drafting, and the hybrid router that switches
// between them on the suffix score. Whatever the route, committed output is
// bit-identical to vanilla greedy decoding of the target model.
#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "owl/drafter.hpp"
#include "owl/suffix_cache.hpp"
#include "owl/target_model.hpp"
#include "owl/verifier.hpp"

namespace owl {

enum class Mode { vanilla, owl, owl_nospec, suffix, hybrid };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::vanilla: return "vanilla";
        case Mode::owl: return "owl";
        case Mode::owl_nospec: return "owl_nospec";
        case Mode::suffix: return "suffix";
        case Mode::hybrid: return "hybrid";
    }
    return "?";
}

inline Mode mode_from_name(const std::string& s) {
    for (Mode m : {Mode::vanilla, Mode::owl, Mode::owl_nospec, Mode::suffix, Mode::hybrid})
        if (s == mode_name(m)) return m;
    throw std::invalid_argument("unknown mode: " + s);
}

struct EngineConfig {
    Mode mode = Mode::hybrid;
    double threshold_c = 9.0; // default: tree depth + 1
    TreePolicy tree;          // verifier-side budget; [SPEC] halves the node count
    bool spec_token = true;
    int max_new_tokens = 128;
    TokenId eos = -1; // <0 disables
    SuffixParams suffix;
};

struct StepMetrics {
    bool linear = false;
    int drafted = 0;
    int accepted = 0;
    int acceptance_length = 1;
    int queries = 0;
    double wall_ms = 0.0;
};

struct GenerateResult {
    std::vector<TokenId> output;    // generated tokens (prompt excluded)
    std::vector<StepMetrics> steps; // one per verification step
    int committed = 0;              // tokens committed by verification steps
};

struct DrafterSet {
    const DrafterWeights* spec = nullptr;
    const DrafterWeights* nospec = nullptr;
};

inline double mean_acceptance_length(const std::vector<StepMetrics>& steps) {
    if (steps.empty()) throw std::invalid_argument("mean_acceptance_length: no steps");
    double s = 0.0;
    for (const auto& m : steps) s += m.acceptance_length;
    return s / steps.size();
}

namespace detail {

inline void check_drafters(const TargetModel& model, Mode mode, bool spec_token, const DrafterSet& d) {
    bool need_spec = spec_token && (mode == Mode::owl || mode == Mode::hybrid);
    bool need_nospec = mode == Mode::owl || mode == Mode::owl_nospec || mode == Mode::hybrid;
    if (need_spec && !d.spec) throw std::invalid_argument("missing drafter for the selected mode: spec");
    if (need_nospec && !d.nospec) throw std::invalid_argument("missing drafter for the selected mode: nospec");
    for (const DrafterWeights* w : {d.spec, d.nospec})
        if (w && (w->cfg.vocab_size != model.cfg.vocab_size || w->cfg.target_hidden != model.cfg.hidden))
            throw std::invalid_argument("drafter weight file does not match the model config");
}

} // namespace detail

inline GenerateResult generate(const TargetModel& model, const DrafterSet& drafters,
                               std::span<const TokenId> prompt, const EngineConfig& cfg) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (cfg.max_new_tokens < 1) throw std::invalid_argument("generate: max_new_tokens must be >= 1");
    detail::check_drafters(model, cfg.mode, cfg.spec_token, drafters);

    const bool tree_mode = cfg.mode == Mode::owl || cfg.mode == Mode::owl_nospec || cfg.mode == Mode::hybrid;
    const bool use_spec = cfg.spec_token && (cfg.mode == Mode::owl || cfg.mode == Mode::hybrid);
    const bool use_suffix = cfg.mode == Mode::suffix || cfg.mode == Mode::hybrid;
    // Equal verifier budget: with [SPEC] every node costs two queries, so the
    // verification tree gets half the nodes.
    const int tree_nodes = use_spec ? std::max(1, cfg.tree.size / 2) : cfg.tree.size;
    TreePolicy drafter_policy = cfg.tree;
    drafter_policy.size = tree_nodes - 1; // root slot is the pending token

    KvCache cache(model.cfg);
    std::optional<SuffixCache> scache;
    if (use_suffix) scache = suffix_prefill_cache(prompt, cfg.suffix);

    PrefillResult pre = prefill(model, cache, prompt, use_spec);
    GenerateResult res;
    res.output.push_back(pre.t_next);
    Vec h_last = pre.h_last;
    std::optional<Vec> h_spec = pre.h_spec;
    bool last_was_linear = false;

    auto context_tail = [&](int window) {
        // committed stream = prompt + output minus the pending token
        std::vector<TokenId> tail;
        int gen = static_cast<int>(res.output.size()) - 1;
        int from_gen = std::min(window, gen);
        int from_prompt = std::min<int>(window - from_gen, static_cast<int>(prompt.size()));
        tail.insert(tail.end(), prompt.end() - from_prompt, prompt.end());
        tail.insert(tail.end(), res.output.begin() + (gen - from_gen), res.output.begin() + gen);
        return tail;
    };

    while (static_cast<int>(res.output.size()) < cfg.max_new_tokens &&
           !(cfg.eos >= 0 && res.output.back() == cfg.eos)) {
        TokenId pending = res.output.back();
        auto t0 = std::chrono::steady_clock::now();

        LinearDraft suffix_draft;
        if (use_suffix) {
            std::vector<TokenId> tail = context_tail(cfg.suffix.max_suffix_depth - 1);
            suffix_draft = suffix_linear(*scache, tail, pending);
        }

        bool take_linear;
        switch (cfg.mode) {
            case Mode::vanilla:
            case Mode::suffix: take_linear = true; break;
            case Mode::owl:
            case Mode::owl_nospec: take_linear = false; break;
            case Mode::hybrid: take_linear = suffix_draft.score > cfg.threshold_c; break;
            default: throw std::invalid_argument("generate: bad mode");
        }

        VerifyResult vr;
        int drafted;
        if (take_linear) {
            std::span<const TokenId> d = cfg.mode == Mode::vanilla ? std::span<const TokenId>{}
                                                                   : std::span<const TokenId>(suffix_draft.draft);
            drafted = static_cast<int>(d.size());
            vr = non_tree_verify(model, cache, pending, d);
            last_was_linear = cfg.mode != Mode::vanilla;
        } else {
            const DrafterWeights* dw = nullptr;
            const Vec* hs = nullptr;
            if (last_was_linear || !use_spec || !h_spec) {
                dw = drafters.nospec;
            } else {
                dw = drafters.spec;
                hs = &*h_spec;
            }
            last_was_linear = false;
            VerifyTree vt = drafter_policy.size >= 1
                                ? VerifyTree::from_draft(pending, draft_tree(*dw, pending, h_last, hs, drafter_policy))
                                : VerifyTree::single(pending);
            drafted = vt.size() - 1;
            VerifierBatch batch = prepare(vt, cache.len(), model.spec_token(), use_spec);
            vr = tree_verify(model, cache, vt, batch);
        }

        if (scache) {
            std::vector<TokenId> committed;
            committed.push_back(pending);
            committed.insert(committed.end(), vr.accepted.begin(), vr.accepted.end());
            suffix_extend(*scache, committed);
        }

        auto t1 = std::chrono::steady_clock::now();
        res.steps.push_back(StepMetrics{take_linear, drafted, static_cast<int>(vr.accepted.size()),
                                        vr.acceptance_length, vr.queries,
                                        std::chrono::duration<double, std::milli>(t1 - t0).count()});
        res.committed += vr.acceptance_length;

        bool hit_eos = false;
        for (TokenId t : vr.accepted) {
            res.output.push_back(t);
            if (cfg.eos >= 0 && t == cfg.eos) {
                hit_eos = true; // truncate the remainder of the step
                break;
            }
        }
        if (hit_eos) break;
        res.output.push_back(vr.bonus);
        h_last = vr.h_last;
        h_spec = vr.h_spec;
    }

    if (static_cast<int>(res.output.size()) > cfg.max_new_tokens) res.output.resize(cfg.max_new_tokens);
    return res;
}

// Plain greedy decoding; the oracle every speculative mode must reproduce.
inline std::vector<TokenId> vanilla_greedy(const TargetModel& model, std::span<const TokenId> prompt,
                                           int max_new_tokens, TokenId eos = -1) {
    EngineConfig cfg;
    cfg.mode = Mode::vanilla;
    cfg.spec_token = false;
    cfg.max_new_tokens = max_new_tokens;
    cfg.eos = eos;
    return generate(model, DrafterSet{}, prompt, cfg).output;
}

} // namespace owl

// Exact suffix statistics for non-tree drafting. Two scopes: the prompt
// (built once at prefill) and the committed generation stream (extended as
// tokens are accepted). The index is a bounded-depth n-gram map; queries must
// agree exactly with a linear scan of the underlying sequence.
#pragma once

#include <cstring>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "owl/numerics.hpp"

namespace owl {

struct SuffixParams {
    int max_spec_factor = 2;
    int max_suffix_depth = 64;
};

struct GramStats {
    int count = 0;                 // occurrences of the n-gram
    std::map<TokenId, int> cont;   // token following an occurrence -> count
};

class SuffixScope {
public:
    SuffixScope() = default;
    explicit SuffixScope(int max_depth) : depth_(max_depth) {}

    int size() const { return static_cast<int>(seq_.size()); }
    const std::vector<TokenId>& sequence() const { return seq_; }

    void append(std::span<const TokenId> tokens) {
        for (TokenId t : tokens) append_one(t);
    }

    // Occurrence count; the empty pattern matches at every token.
    int occurrences(std::span<const TokenId> pattern) const {
        if (pattern.empty()) return size();
        if (static_cast<int>(pattern.size()) > depth_) throw std::invalid_argument("pattern deeper than index");
        auto it = grams_.find(key_of(pattern));
        return it == grams_.end() ? 0 : it->second.count;
    }

    const std::map<TokenId, int>* continuations(std::span<const TokenId> pattern) const {
        if (pattern.empty()) return &histogram_;
        if (static_cast<int>(pattern.size()) > depth_) throw std::invalid_argument("pattern deeper than index");
        auto it = grams_.find(key_of(pattern));
        return it == grams_.end() ? nullptr : &it->second.cont;
    }

private:
    void append_one(TokenId t) {
        seq_.push_back(t);
        int j = size() - 1;
        // the new token closes n-grams ending at j and continues those ending at j-1
        int max_new = std::min(depth_, j + 1);
        for (int n = 1; n <= max_new; ++n) grams_[key_at(j - n + 1, n)].count++;
        int max_cont = std::min(depth_, j);
        for (int n = 1; n <= max_cont; ++n) grams_[key_at(j - n, n)].cont[t]++;
        histogram_[t]++;
    }

    std::string key_at(int start, int n) const {
        return std::string(reinterpret_cast<const char*>(seq_.data() + start), n * sizeof(TokenId));
    }
    static std::string key_of(std::span<const TokenId> pattern) {
        return std::string(reinterpret_cast<const char*>(pattern.data()), pattern.size() * sizeof(TokenId));
    }

    int depth_ = 64;
    std::vector<TokenId> seq_;
    std::unordered_map<std::string, GramStats> grams_;
    std::map<TokenId, int> histogram_;
};

struct SuffixCache {
    SuffixParams params;
    SuffixScope prefill;
    SuffixScope gen;
};

inline SuffixCache suffix_prefill_cache(std::span<const TokenId> prompt, const SuffixParams& params = {}) {
    if (prompt.empty()) throw std::invalid_argument("suffix_prefill_cache: empty prompt");
    SuffixCache c{params, SuffixScope(params.max_suffix_depth), SuffixScope(params.max_suffix_depth)};
    c.prefill.append(prompt);
    return c;
}

inline void suffix_extend(SuffixCache& cache, std::span<const TokenId> committed) {
    cache.gen.append(committed);
}

struct LinearDraft {
    std::vector<TokenId> draft;
    double score = 0.0;
    int match_length = 0;
};

// Longest suffix of context_tail+[t_next] (<= max_suffix_depth) found in either
// scope; longer match wins, ties go to the generation scope. The draft then
// grows greedily by the most frequent continuation (ties to the lower token
// id), capped at max_spec_factor * match_length; patterns longer than the
// index depth are queried through their trailing window. The score sums the
// per-step frequency ratios, an estimate of the accepted length.
inline LinearDraft suffix_linear(const SuffixCache& cache, std::span<const TokenId> context_tail,
                                 TokenId t_next) {
    const int depth = cache.params.max_suffix_depth;
    std::vector<TokenId> q;
    int keep = std::min<int>(static_cast<int>(context_tail.size()), depth - 1);
    q.insert(q.end(), context_tail.end() - keep, context_tail.end());
    q.push_back(t_next);

    const SuffixScope* scope = nullptr;
    int match_len = 0;
    for (int len = static_cast<int>(q.size()); len >= 1 && !scope; --len) {
        std::span<const TokenId> pat(q.data() + q.size() - len, static_cast<size_t>(len));
        if (cache.gen.occurrences(pat) > 0) {
            scope = &cache.gen;
            match_len = len;
        } else if (cache.prefill.occurrences(pat) > 0) {
            scope = &cache.prefill;
            match_len = len;
        }
    }
    if (!scope) return {};

    LinearDraft out;
    out.match_length = match_len;
    std::vector<TokenId> pattern(q.end() - match_len, q.end());
    int cap = cache.params.max_spec_factor * match_len;
    while (static_cast<int>(out.draft.size()) < cap) {
        int window = std::min<int>(static_cast<int>(pattern.size()), depth);
        std::span<const TokenId> pat(pattern.data() + pattern.size() - window, static_cast<size_t>(window));
        int total = scope->occurrences(pat);
        const auto* cont = scope->continuations(pat);
        if (total == 0 || !cont || cont->empty()) break;
        TokenId best = -1;
        int best_count = 0;
        for (const auto& [tok, cnt] : *cont) // ordered map: lower id wins ties
            if (cnt > best_count) {
                best = tok;
                best_count = cnt;
            }
        out.score += static_cast<double>(best_count) / total;
        out.draft.push_back(best);
        pattern.push_back(best);
    }
    return out;
}

} // namespace owl

// Training-corpus plumbing: a seeded Zipf-weighted bigram generator standing
// in for natural text, greedy continuation of fixed-size chunks by the frozen
// target model, and the one-sequence-per-line token file format.
#pragma once

#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "owl/engine.hpp"
#include "owl/numerics.hpp"
#include "owl/rng.hpp"

namespace owl {

// Pseudo-natural byte streams: a reduced alphabet with per-symbol successor
// ranks weighted 1/(rank+1). Deterministic under seed.
inline std::vector<std::vector<TokenId>> synthetic_seed_texts(uint64_t seed, int count, int length,
                                                              int vocab = 256) {
    if (count < 1 || length < 1 || vocab < 2) throw std::invalid_argument("synthetic_seed_texts: bad args");
    Rng rng(seed);
    int alphabet = std::min(48, vocab);
    std::vector<TokenId> symbols(vocab);
    for (int i = 0; i < vocab; ++i) symbols[i] = i;
    for (int i = vocab - 1; i > 0; --i) std::swap(symbols[i], symbols[rng.below(i + 1)]);
    symbols.resize(alphabet);

    // successor ranking per symbol + Zipf CDF shared by all rows
    std::vector<std::vector<int>> successor(alphabet);
    for (auto& row : successor) {
        row.resize(alphabet);
        for (int i = 0; i < alphabet; ++i) row[i] = i;
        for (int i = alphabet - 1; i > 0; --i) std::swap(row[i], row[rng.below(i + 1)]);
    }
    std::vector<double> cdf(alphabet);
    double z = 0.0;
    for (int r = 0; r < alphabet; ++r) z += 1.0 / (r + 1);
    double acc = 0.0;
    for (int r = 0; r < alphabet; ++r) {
        acc += 1.0 / (r + 1) / z;
        cdf[r] = acc;
    }

    std::vector<std::vector<TokenId>> texts(count);
    for (auto& text : texts) {
        int cur = rng.below(alphabet);
        text.reserve(length);
        for (int i = 0; i < length; ++i) {
            text.push_back(symbols[cur]);
            double u = rng.uniform();
            int rank = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            cur = successor[cur][std::min(rank, alphabet - 1)];
        }
    }
    return texts;
}

// For each seed text: take the first chunk tokens as prompt, greedily generate
// gen_tokens with the frozen model, keep prompt+continuation. Seeds shorter
// than the chunk are skipped with a warning.
inline std::vector<std::vector<TokenId>> generate_training_corpus(
    const TargetModel& model, const std::vector<std::vector<TokenId>>& seed_texts, int chunk_size,
    int gen_tokens) {
    if (seed_texts.empty()) throw std::invalid_argument("generate_training_corpus: no seed texts");
    std::vector<std::vector<TokenId>> corpus;
    for (size_t i = 0; i < seed_texts.size(); ++i) {
        if (static_cast<int>(seed_texts[i].size()) < chunk_size) {
            std::fprintf(stderr, "warning: seed text %zu shorter than chunk size %d, skipped\n", i, chunk_size);
            continue;
        }
        std::vector<TokenId> seq(seed_texts[i].begin(), seed_texts[i].begin() + chunk_size);
        std::vector<TokenId> cont = vanilla_greedy(model, seq, gen_tokens);
        seq.insert(seq.end(), cont.begin(), cont.end());
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

inline void save_corpus(const std::string& path, const std::vector<std::vector<TokenId>>& corpus) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    for (const auto& seq : corpus) {
        for (size_t i = 0; i < seq.size(); ++i) {
            if (i) f << ' ';
            f << seq[i];
        }
        f << '\n';
    }
}

inline std::vector<std::vector<TokenId>> load_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::vector<TokenId>> corpus;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::vector<TokenId> seq;
        long v;
        while (ss >> v) seq.push_back(static_cast<TokenId>(v));
        if (!seq.empty()) corpus.push_back(std::move(seq));
    }
    return corpus;
}

} // namespace owl

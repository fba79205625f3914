// Benchmark harness: JSONL dataset ingestion, per-example/mode runs with the
// vanilla oracle enforced, and the machine-readable run report.
#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "owl/engine.hpp"

namespace owl {

constexpr const char* kEngineFingerprint = "owl-engine 0.1.0";

struct BenchExample {
    std::string id;
    std::vector<TokenId> prompt;
    int max_new_tokens = 128;
};

inline std::vector<TokenId> bytes_to_tokens(const std::string& text) {
    std::vector<TokenId> t;
    t.reserve(text.size());
    for (unsigned char c : text) t.push_back(static_cast<TokenId>(c));
    return t;
}

inline std::string tokens_to_bytes(std::span<const TokenId> tokens) {
    std::string s;
    for (TokenId t : tokens)
        if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
    return s;
}

// One JSON object per line: {"id": ..., "prompt": ... | "prompt_tokens": [...],
// "max_new_tokens": ...}. Prompts given as text are byte-tokenized.
inline std::vector<BenchExample> load_dataset_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open dataset: " + path);
    std::vector<BenchExample> out;
    std::map<std::string, bool> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        BenchExample ex;
        ex.id = j.at("id").get<std::string>();
        if (seen.count(ex.id)) throw std::runtime_error("duplicate example id: " + ex.id);
        seen[ex.id] = true;
        if (j.contains("prompt_tokens"))
            ex.prompt = j.at("prompt_tokens").get<std::vector<TokenId>>();
        else
            ex.prompt = bytes_to_tokens(j.at("prompt").get<std::string>());
        if (ex.prompt.empty())
            throw std::runtime_error("empty prompt in example " + ex.id + " (line " + std::to_string(lineno) + ")");
        if (j.contains("max_new_tokens")) ex.max_new_tokens = j.at("max_new_tokens").get<int>();
        out.push_back(std::move(ex));
    }
    return out;
}

struct ModeCell {
    std::string id;
    std::string mode;
    double mean_acceptance_length = 0.0;
    int steps = 0;
    int committed = 0;
    double tokens_per_sec = 0.0; // informational only
    double linear_fraction = 0.0;
};

struct ModeAggregate {
    std::string mode;
    double mean_acceptance_length = 0.0; // weighted by step count
    int steps = 0;
    int committed = 0;
    std::map<int, int> histogram; // acceptance length -> step count
};

struct RunReport {
    std::vector<ModeCell> cells;
    std::vector<ModeAggregate> aggregates;
    nlohmann::json config_echo;
    std::string fingerprint = kEngineFingerprint;
};

inline nlohmann::json report_to_json(const RunReport& r) {
    nlohmann::json j;
    j["fingerprint"] = r.fingerprint;
    j["config"] = r.config_echo;
    j["examples"] = nlohmann::json::array();
    for (const auto& c : r.cells)
        j["examples"].push_back({{"id", c.id},
                                 {"mode", c.mode},
                                 {"mean_acceptance_length", c.mean_acceptance_length},
                                 {"steps", c.steps},
                                 {"committed_tokens", c.committed},
                                 {"tokens_per_sec", c.tokens_per_sec},
                                 {"linear_fraction", c.linear_fraction}});
    j["aggregates"] = nlohmann::json::array();
    for (const auto& a : r.aggregates) {
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& [bucket, count] : a.histogram)
            hist.push_back({{"bucket_min", bucket}, {"count", count}});
        j["aggregates"].push_back({{"mode", a.mode},
                                   {"mean_acceptance_length", a.mean_acceptance_length},
                                   {"steps", a.steps},
                                   {"committed_tokens", a.committed},
                                   {"histogram", hist}});
    }
    return j;
}

inline nlohmann::json engine_config_json(const EngineConfig& cfg) {
    return {{"threshold_c", cfg.threshold_c},
            {"tree_size", cfg.tree.size},
            {"top_k", cfg.tree.top_k},
            {"depth", cfg.tree.depth},
            {"spec_token", cfg.spec_token},
            {"max_new_tokens", cfg.max_new_tokens},
            {"eos", cfg.eos},
            {"max_spec_factor", cfg.suffix.max_spec_factor},
            {"max_suffix_depth", cfg.suffix.max_suffix_depth}};
}

// Runs every (example x mode) cell. Vanilla greedy is always executed per
// example as the losslessness oracle; any speculative output that differs
// aborts the run with the first divergence.
inline RunReport run_benchmark(const TargetModel& model, const DrafterSet& drafters,
                               const std::vector<BenchExample>& dataset, const std::vector<Mode>& modes,
                               const EngineConfig& base_cfg) {
    RunReport report;
    report.config_echo = engine_config_json(base_cfg);
    {
        nlohmann::json jm = nlohmann::json::array();
        for (Mode m : modes) jm.push_back(mode_name(m));
        report.config_echo["modes"] = jm;
        report.config_echo["examples"] = static_cast<int>(dataset.size());
    }
    std::map<std::string, ModeAggregate> agg;

    for (const auto& ex : dataset) {
        std::vector<TokenId> oracle = vanilla_greedy(model, ex.prompt, ex.max_new_tokens, base_cfg.eos);
        for (Mode m : modes) {
            EngineConfig cfg = base_cfg;
            cfg.mode = m;
            cfg.max_new_tokens = ex.max_new_tokens;
            auto t0 = std::chrono::steady_clock::now();
            GenerateResult g = generate(model, drafters, ex.prompt, cfg);
            auto t1 = std::chrono::steady_clock::now();
            if (m != Mode::vanilla && g.output != oracle) {
                size_t i = 0;
                while (i < g.output.size() && i < oracle.size() && g.output[i] == oracle[i]) ++i;
                throw std::runtime_error("losslessness violated: example " + ex.id + ", mode " +
                                         mode_name(m) + ", first divergence at generated index " +
                                         std::to_string(i) + " (got " +
                                         (i < g.output.size() ? std::to_string(g.output[i]) : "<end>") +
                                         ", want " + (i < oracle.size() ? std::to_string(oracle[i]) : "<end>") +
                                         ")");
            }
            ModeCell cell;
            cell.id = ex.id;
            cell.mode = mode_name(m);
            cell.steps = static_cast<int>(g.steps.size());
            cell.committed = g.committed;
            cell.mean_acceptance_length = g.steps.empty() ? 0.0 : mean_acceptance_length(g.steps);
            double secs = std::chrono::duration<double>(t1 - t0).count();
            cell.tokens_per_sec = secs > 0 ? g.output.size() / secs : 0.0;
            int linear = 0;
            ModeAggregate& a = agg[cell.mode];
            a.mode = cell.mode;
            for (const auto& s : g.steps) {
                if (s.linear) ++linear;
                a.histogram[s.acceptance_length]++;
            }
            cell.linear_fraction = g.steps.empty() ? 0.0 : static_cast<double>(linear) / g.steps.size();
            a.steps += cell.steps;
            a.committed += cell.committed;
            a.mean_acceptance_length += cell.mean_acceptance_length * cell.steps;
            report.cells.push_back(std::move(cell));
        }
    }
    for (auto& [name, a] : agg) {
        if (a.steps > 0) a.mean_acceptance_length /= a.steps;
        report.aggregates.push_back(a);
    }
    return report;
}

} // namespace owl

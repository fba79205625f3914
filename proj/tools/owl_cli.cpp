// Command-line front end: model/drafter lifecycle, corpus generation,
// training, generation, benchmarking and the correctness checks.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "owl/corpus.hpp"
#include "owl/drafter.hpp"
#include "owl/engine.hpp"
#include "owl/report.hpp"
#include "owl/target_model.hpp"
#include "owl/trainer.hpp"

namespace {

struct EngineFlags {
    std::string model_path;
    std::string drafter_spec_path;
    std::string drafter_nospec_path;
    std::string mode = "hybrid";
    int tree_size = 60;
    int top_k = 10;
    int depth = 8;
    std::string spec_token = "on";
    double threshold_c = -1.0; // default: depth + 1
    int max_spec_factor = 2;
    int max_suffix_depth = 64;
    int max_new_tokens = 128;
    int eos = -1;
};

void add_engine_flags(CLI::App* cmd, EngineFlags& f, bool need_model = true) {
    auto* m = cmd->add_option("--model", f.model_path, "target model weight file");
    if (need_model) m->required();
    cmd->add_option("--drafter-spec", f.drafter_spec_path, "drafter weights trained with [SPEC]");
    cmd->add_option("--drafter-nospec", f.drafter_nospec_path, "drafter weights trained without [SPEC]");
    cmd->add_option("--mode", f.mode, "vanilla|owl|owl_nospec|suffix|hybrid");
    cmd->add_option("--tree-size", f.tree_size, "verifier token budget per tree step");
    cmd->add_option("--top-k", f.top_k, "children per expanded node");
    cmd->add_option("--depth", f.depth, "maximum tree depth");
    cmd->add_option("--spec-token", f.spec_token, "on|off: append [SPEC] queries in tree steps");
    cmd->add_option("--threshold-c", f.threshold_c, "suffix-score routing threshold (default depth+1)");
    cmd->add_option("--max-spec-factor", f.max_spec_factor, "suffix draft length cap factor");
    cmd->add_option("--max-suffix-depth", f.max_suffix_depth, "suffix index depth");
    cmd->add_option("--max-new-tokens", f.max_new_tokens, "generation cap");
    cmd->add_option("--eos", f.eos, "eos token id (<0 disables)");
}

owl::EngineConfig engine_config(const EngineFlags& f) {
    owl::EngineConfig cfg;
    cfg.mode = owl::mode_from_name(f.mode);
    cfg.tree.size = f.tree_size;
    cfg.tree.top_k = f.top_k;
    cfg.tree.depth = f.depth;
    if (f.spec_token != "on" && f.spec_token != "off")
        throw CLI::ValidationError("--spec-token must be on or off");
    cfg.spec_token = f.spec_token == "on";
    cfg.threshold_c = f.threshold_c >= 0 ? f.threshold_c : f.depth + 1;
    cfg.suffix.max_spec_factor = f.max_spec_factor;
    cfg.suffix.max_suffix_depth = f.max_suffix_depth;
    cfg.max_new_tokens = f.max_new_tokens;
    cfg.eos = f.eos;
    return cfg;
}

struct LoadedDrafters {
    std::optional<owl::DrafterWeights> spec, nospec;
    owl::DrafterSet set() const {
        return owl::DrafterSet{spec ? &*spec : nullptr, nospec ? &*nospec : nullptr};
    }
};

LoadedDrafters load_drafters(const EngineFlags& f) {
    LoadedDrafters d;
    if (!f.drafter_spec_path.empty()) d.spec = owl::load_drafter(f.drafter_spec_path);
    if (!f.drafter_nospec_path.empty()) d.nospec = owl::load_drafter(f.drafter_nospec_path);
    return d;
}

std::vector<owl::Mode> parse_modes(const std::string& csv) {
    std::vector<owl::Mode> modes;
    std::string cur;
    std::istringstream ss(csv);
    while (std::getline(ss, cur, ','))
        if (!cur.empty()) modes.push_back(owl::mode_from_name(cur));
    if (modes.empty()) throw CLI::ValidationError("no modes given");
    return modes;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale speculative decoding engine"};
    app.require_subcommand(1);

    // --- seed-model -------------------------------------------------------
    struct {
        uint64_t seed = 42;
        std::string out;
        int vocab = 257, hidden = 64, layers = 2, heads = 2, max_positions = 65536;
    } seedm;
    auto* cmd_seed = app.add_subcommand("seed-model", "create and save a frozen target model");
    cmd_seed->add_option("--seed", seedm.seed, "init seed")->required();
    cmd_seed->add_option("--out", seedm.out, "output weight file")->required();
    cmd_seed->add_option("--vocab", seedm.vocab);
    cmd_seed->add_option("--hidden", seedm.hidden);
    cmd_seed->add_option("--layers", seedm.layers);
    cmd_seed->add_option("--heads", seedm.heads);
    cmd_seed->add_option("--max-positions", seedm.max_positions);

    // --- gen-corpus -------------------------------------------------------
    struct {
        std::string model, out;
        uint64_t seed = 7;
        int count = 64, chunk = 64, gen_tokens = 256, seed_len = 96;
    } genc;
    auto* cmd_corpus = app.add_subcommand("gen-corpus", "generate a training corpus with the frozen model");
    cmd_corpus->add_option("--model", genc.model)->required();
    cmd_corpus->add_option("--out", genc.out)->required();
    cmd_corpus->add_option("--seed", genc.seed, "seed-text generator seed");
    cmd_corpus->add_option("--count", genc.count, "number of sequences");
    cmd_corpus->add_option("--chunk", genc.chunk, "prompt chunk size");
    cmd_corpus->add_option("--gen-tokens", genc.gen_tokens, "greedy continuation length");
    cmd_corpus->add_option("--seed-len", genc.seed_len, "synthetic seed text length");

    // --- train --------------------------------------------------------------
    struct {
        std::string model, corpus, out_spec, out_nospec, out_model, loss_csv;
        owl::TrainConfig cfg;
        int width = 256, tree_depth = 8;
        std::string optimizer = "adam";
    } tr;
    auto* cmd_train = app.add_subcommand("train", "train both drafter variants and the [SPEC] embedding");
    cmd_train->add_option("--model", tr.model)->required();
    cmd_train->add_option("--corpus", tr.corpus)->required();
    cmd_train->add_option("--drafter-spec", tr.out_spec, "output path for the spec drafter")->required();
    cmd_train->add_option("--drafter-nospec", tr.out_nospec, "output path for the nospec drafter")->required();
    cmd_train->add_option("--out", tr.out_model, "output path for the model with the trained [SPEC] row")
        ->required();
    cmd_train->add_option("--loss-csv", tr.loss_csv, "write the loss curves as iter,loss CSV");
    cmd_train->add_option("--seed", tr.cfg.seed);
    cmd_train->add_option("--iterations", tr.cfg.iterations);
    cmd_train->add_option("--batch", tr.cfg.batch_size);
    cmd_train->add_option("--lr", tr.cfg.lr);
    cmd_train->add_option("--rollout", tr.cfg.rollout);
    cmd_train->add_option("--anchors", tr.cfg.anchors_per_seq, "anchors sampled per sequence (0 = all)");
    cmd_train->add_option("--sequence-length", tr.cfg.sequence_length);
    cmd_train->add_option("--threads", tr.cfg.threads);
    cmd_train->add_option("--width", tr.width, "drafter hidden size");
    cmd_train->add_option("--depth", tr.tree_depth, "max tree depth the drafter targets");
    cmd_train->add_option("--optimizer", tr.optimizer, "adam|sgd");

    // --- generate -----------------------------------------------------------
    EngineFlags gen_flags;
    struct {
        std::string prompt;
        std::string prompt_tokens;
        bool emit_tokens = false;
    } gen;
    auto* cmd_gen = app.add_subcommand("generate", "generate from a prompt and print step statistics");
    add_engine_flags(cmd_gen, gen_flags);
    cmd_gen->add_option("--prompt", gen.prompt, "utf-8 prompt (byte-tokenized)");
    cmd_gen->add_option("--prompt-tokens", gen.prompt_tokens, "space-separated token ids");
    cmd_gen->add_flag("--tokens", gen.emit_tokens, "print token ids instead of bytes");

    // --- bench ---------------------------------------------------------------
    EngineFlags bench_flags;
    struct {
        std::string dataset, out, modes = "vanilla,owl,hybrid";
    } bench;
    auto* cmd_bench = app.add_subcommand("bench", "run the benchmark matrix and write a JSON report");
    add_engine_flags(cmd_bench, bench_flags);
    cmd_bench->add_option("--dataset", bench.dataset, "JSONL dataset")->required();
    cmd_bench->add_option("--out", bench.out, "report output path")->required();
    cmd_bench->add_option("--modes", bench.modes, "comma-separated mode list");

    // --- verify-lossless -------------------------------------------------------
    EngineFlags vl_flags;
    struct {
        std::string dataset;
        uint64_t seed = 11;
        int count = 20, prompt_len = 48;
    } vl;
    auto* cmd_vl = app.add_subcommand("verify-lossless",
                                      "check speculative output equals vanilla greedy on every mode");
    add_engine_flags(cmd_vl, vl_flags);
    cmd_vl->add_option("--dataset", vl.dataset, "JSONL dataset (random prompts when omitted)");
    cmd_vl->add_option("--seed", vl.seed, "random prompt seed");
    cmd_vl->add_option("--count", vl.count, "number of random prompts");
    cmd_vl->add_option("--prompt-len", vl.prompt_len);

    // --- grad-check -------------------------------------------------------------
    struct {
        uint64_t seed = 3;
        int coords = 100;
    } gc;
    auto* cmd_gc = app.add_subcommand("grad-check", "analytic vs finite-difference gradients");
    cmd_gc->add_option("--seed", gc.seed);
    cmd_gc->add_option("--coords", gc.coords);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_seed) {
            owl::ModelConfig cfg;
            cfg.vocab_size = seedm.vocab;
            cfg.hidden = seedm.hidden;
            cfg.layers = seedm.layers;
            cfg.heads = seedm.heads;
            cfg.max_positions = seedm.max_positions;
            owl::TargetModel m = owl::seed_model(seedm.seed, cfg);
            owl::save_model(m, seedm.out);
            std::printf("wrote %s (vocab=%d hidden=%d layers=%d heads=%d)\n", seedm.out.c_str(),
                        cfg.vocab_size, cfg.hidden, cfg.layers, cfg.heads);
        } else if (*cmd_corpus) {
            owl::TargetModel m = owl::load_model(genc.model);
            auto seeds = owl::synthetic_seed_texts(genc.seed, genc.count, genc.seed_len,
                                                   m.cfg.vocab_size - 1);
            auto corpus = owl::generate_training_corpus(m, seeds, genc.chunk, genc.gen_tokens);
            owl::save_corpus(genc.out, corpus);
            std::printf("wrote %zu sequences to %s\n", corpus.size(), genc.out.c_str());
        } else if (*cmd_train) {
            owl::TargetModel m = owl::load_model(tr.model);
            auto corpus = owl::load_corpus(tr.corpus);
            tr.cfg.adam = tr.optimizer == "adam";
            tr.cfg.verbose = true;
            owl::DrafterConfig dc;
            dc.width = tr.width;
            dc.max_depth = tr.tree_depth;
            owl::TrainOutputs outs = owl::train(m, corpus, tr.cfg, dc);
            owl::save_drafter(outs.d_spec, tr.out_spec);
            owl::save_drafter(outs.d_nospec, tr.out_nospec);
            std::copy(outs.spec_embedding.begin(), outs.spec_embedding.end(),
                      m.spec_embedding().begin());
            owl::save_model(m, tr.out_model);
            if (!tr.loss_csv.empty()) {
                auto write_curve = [](const std::string& path, const std::vector<double>& curve) {
                    std::ofstream f(path, std::ios::trunc);
                    f << "iter,loss\n";
                    for (size_t i = 0; i < curve.size(); ++i) f << i << "," << curve[i] << "\n";
                };
                write_curve(tr.loss_csv, outs.loss_spec);
                write_curve(tr.loss_csv + ".nospec.csv", outs.loss_nospec);
            }
            std::printf("wrote %s, %s, %s (final spec loss %.4f, nospec loss %.4f)\n",
                        tr.out_spec.c_str(), tr.out_nospec.c_str(), tr.out_model.c_str(),
                        outs.loss_spec.back(), outs.loss_nospec.back());
        } else if (*cmd_gen) {
            owl::TargetModel m = owl::load_model(gen_flags.model_path);
            LoadedDrafters d = load_drafters(gen_flags);
            owl::EngineConfig cfg = engine_config(gen_flags);
            std::vector<owl::TokenId> prompt;
            if (!gen.prompt_tokens.empty()) {
                std::istringstream ss(gen.prompt_tokens);
                long v;
                while (ss >> v) prompt.push_back(static_cast<owl::TokenId>(v));
            } else {
                prompt = owl::bytes_to_tokens(gen.prompt);
            }
            owl::GenerateResult r = owl::generate(m, d.set(), prompt, cfg);
            if (gen.emit_tokens) {
                for (size_t i = 0; i < r.output.size(); ++i)
                    std::printf("%s%d", i ? " " : "", r.output[i]);
                std::printf("\n");
            } else {
                std::string text = owl::tokens_to_bytes(r.output);
                std::fwrite(text.data(), 1, text.size(), stdout);
                std::printf("\n");
            }
            if (!r.steps.empty())
                std::fprintf(stderr, "steps=%zu mean_acceptance_length=%.3f committed=%d\n",
                             r.steps.size(), owl::mean_acceptance_length(r.steps), r.committed);
        } else if (*cmd_bench) {
            owl::TargetModel m = owl::load_model(bench_flags.model_path);
            LoadedDrafters d = load_drafters(bench_flags);
            owl::EngineConfig cfg = engine_config(bench_flags);
            auto dataset = owl::load_dataset_jsonl(bench.dataset);
            auto modes = parse_modes(bench.modes);
            owl::RunReport report = owl::run_benchmark(m, d.set(), dataset, modes, cfg);
            nlohmann::json j = owl::report_to_json(report);
            std::ofstream f(bench.out, std::ios::trunc);
            f << j.dump(2) << "\n";
            for (const auto& a : report.aggregates)
                std::printf("%-10s mean_acceptance_length=%.3f steps=%d committed=%d\n", a.mode.c_str(),
                            a.mean_acceptance_length, a.steps, a.committed);
            std::printf("wrote %s\n", bench.out.c_str());
        } else if (*cmd_vl) {
            owl::TargetModel m = owl::load_model(vl_flags.model_path);
            LoadedDrafters d = load_drafters(vl_flags);
            owl::EngineConfig cfg = engine_config(vl_flags);
            std::vector<owl::BenchExample> dataset;
            if (!vl.dataset.empty()) {
                dataset = owl::load_dataset_jsonl(vl.dataset);
            } else {
                auto texts = owl::synthetic_seed_texts(vl.seed, vl.count, vl.prompt_len,
                                                       m.cfg.vocab_size - 1);
                for (size_t i = 0; i < texts.size(); ++i)
                    dataset.push_back({"rand-" + std::to_string(i), texts[i], cfg.max_new_tokens});
            }
            std::vector<owl::Mode> modes;
            for (owl::Mode md : {owl::Mode::owl, owl::Mode::owl_nospec, owl::Mode::suffix, owl::Mode::hybrid}) {
                bool have_spec = d.spec.has_value(), have_nospec = d.nospec.has_value();
                if ((md == owl::Mode::owl && have_spec && have_nospec) ||
                    (md == owl::Mode::owl_nospec && have_nospec) ||
                    (md == owl::Mode::hybrid && have_spec && have_nospec) || md == owl::Mode::suffix)
                    modes.push_back(md);
            }
            owl::run_benchmark(m, d.set(), dataset, modes, cfg); // throws on mismatch
            std::printf("lossless: %zu examples x %zu modes identical to vanilla greedy\n",
                        dataset.size(), modes.size());
        } else if (*cmd_gc) {
            owl::ModelConfig mc;
            mc.vocab_size = 11;
            mc.hidden = 4;
            mc.layers = 2;
            mc.heads = 2;
            owl::TargetModel m = owl::seed_model(gc.seed, mc);
            owl::Rng rng(gc.seed + 1);
            std::vector<owl::TokenId> seq;
            for (int i = 0; i < 10; ++i) seq.push_back(rng.below(10));
            owl::TrainBatch batch = owl::build_training_batch(m, seq);
            owl::DrafterConfig dc;
            dc.vocab_size = mc.vocab_size;
            dc.target_hidden = mc.hidden;
            dc.width = 8;
            dc.max_depth = 4;
            owl::DrafterWeights w = owl::seed_drafter(gc.seed + 2, dc);
            owl::Vec spec_row(m.spec_embedding().begin(), m.spec_embedding().end());
            owl::GradCheckResult r =
                owl::finite_difference_check(m, batch, w, spec_row, 3, gc.coords, gc.seed + 3);
            std::printf("checked %d coordinates, max relative error %.3e (%s)\n", r.coords_checked,
                        r.max_rel_err, r.worst_param.empty() ? "-" : r.worst_param.c_str());
            if (r.max_rel_err >= 1e-3) {
                std::fprintf(stderr, "FAIL: gradient mismatch\n");
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

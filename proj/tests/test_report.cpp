#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "owl/corpus.hpp"
#include "owl/report.hpp"

using namespace owl;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

struct Rig {
    TargetModel model;
    DrafterWeights dspec, dnospec;

    Rig() {
        ModelConfig mc;
        mc.vocab_size = 33;
        mc.hidden = 16;
        mc.layers = 2;
        mc.heads = 2;
        model = seed_model(51, mc);
        DrafterConfig dc;
        dc.vocab_size = mc.vocab_size;
        dc.target_hidden = mc.hidden;
        dc.width = 16;
        dc.max_depth = 4;
        dc.variant = DrafterVariant::spec;
        dspec = seed_drafter(52, dc);
        dc.variant = DrafterVariant::nospec;
        dnospec = seed_drafter(53, dc);
    }

    DrafterSet set() const { return DrafterSet{&dspec, &dnospec}; }

    EngineConfig cfg() const {
        EngineConfig c;
        c.tree = TreePolicy{4, 4, 12};
        c.threshold_c = 5.0;
        c.max_new_tokens = 24;
        return c;
    }
};

nlohmann::json strip_timing(nlohmann::json j) {
    for (auto& cell : j["examples"]) cell.erase("tokens_per_sec");
    return j;
}

} // namespace

TEST(Dataset, ParsesTextAndTokenPrompts) {
    std::string p = tmp_path("owl_ds.jsonl");
    {
        std::ofstream f(p, std::ios::trunc);
        f << R"({"id": "a", "prompt": "AB", "max_new_tokens": 7})" << "\n";
        f << "\n";
        f << R"({"id": "b", "prompt_tokens": [5, 6, 7]})" << "\n";
    }
    auto ds = load_dataset_jsonl(p);
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds[0].prompt, (std::vector<TokenId>{65, 66}));
    EXPECT_EQ(ds[0].max_new_tokens, 7);
    EXPECT_EQ(ds[1].prompt, (std::vector<TokenId>{5, 6, 7}));
    EXPECT_EQ(ds[1].max_new_tokens, 128);
    std::remove(p.c_str());
}

TEST(Dataset, RejectsDuplicateIdsAndEmptyPrompts) {
    std::string p = tmp_path("owl_ds_bad.jsonl");
    {
        std::ofstream f(p, std::ios::trunc);
        f << R"({"id": "a", "prompt": "x"})" << "\n";
        f << R"({"id": "a", "prompt": "y"})" << "\n";
    }
    EXPECT_THROW(load_dataset_jsonl(p), std::runtime_error);
    {
        std::ofstream f(p, std::ios::trunc);
        f << R"({"id": "a", "prompt": ""})" << "\n";
    }
    EXPECT_THROW(load_dataset_jsonl(p), std::runtime_error);
    std::remove(p.c_str());
}

TEST(Benchmark, CellsPerExampleAndMode) {
    Rig rig;
    std::vector<BenchExample> ds = {{"e1", {1, 2, 3, 4, 5}, 20}, {"e2", {9, 8, 7}, 20}};
    RunReport r = run_benchmark(rig.model, rig.set(), ds, {Mode::vanilla, Mode::owl}, rig.cfg());
    EXPECT_EQ(r.cells.size(), 4u);
    EXPECT_EQ(r.aggregates.size(), 2u);
    for (const auto& a : r.aggregates) {
        int hist_total = 0;
        for (auto& [bucket, count] : a.histogram) hist_total += count;
        EXPECT_EQ(hist_total, a.steps);
    }
    // aggregate mean is the step-weighted mean of the cells
    for (const auto& a : r.aggregates) {
        double sum = 0.0;
        int steps = 0;
        for (const auto& c : r.cells)
            if (c.mode == a.mode) {
                sum += c.mean_acceptance_length * c.steps;
                steps += c.steps;
            }
        EXPECT_NEAR(a.mean_acceptance_length, sum / steps, 1e-12);
    }
}

TEST(Benchmark, HybridTakesLinearOnRepetitiveInput) {
    TargetModel model = seed_model(42, ModelConfig{});
    DrafterConfig dc;
    dc.vocab_size = model.cfg.vocab_size;
    dc.target_hidden = model.cfg.hidden;
    dc.width = 32;
    dc.max_depth = 8;
    dc.variant = DrafterVariant::spec;
    DrafterWeights dspec = seed_drafter(1, dc);
    dc.variant = DrafterVariant::nospec;
    DrafterWeights dnospec = seed_drafter(2, dc);

    auto seeds = synthetic_seed_texts(7, 1, 64, model.cfg.vocab_size - 1);
    std::vector<BenchExample> ds = {{"rep", seeds[0], 160}};
    EngineConfig cfg;
    cfg.tree = TreePolicy{10, 8, 60};
    cfg.threshold_c = 9.0;
    RunReport r = run_benchmark(model, DrafterSet{&dspec, &dnospec}, ds, {Mode::hybrid}, cfg);
    ASSERT_EQ(r.cells.size(), 1u);
    EXPECT_GT(r.cells[0].linear_fraction, 0.0);
}

TEST(Benchmark, DeterministicModuloTiming) {
    Rig rig;
    std::vector<BenchExample> ds = {{"e1", {1, 2, 3, 4, 5}, 16}};
    RunReport a = run_benchmark(rig.model, rig.set(), ds, {Mode::vanilla, Mode::hybrid}, rig.cfg());
    RunReport b = run_benchmark(rig.model, rig.set(), ds, {Mode::vanilla, Mode::hybrid}, rig.cfg());
    EXPECT_EQ(strip_timing(report_to_json(a)).dump(), strip_timing(report_to_json(b)).dump());
}

TEST(Benchmark, ReportEmbedsConfig) {
    Rig rig;
    std::vector<BenchExample> ds = {{"e1", {1, 2, 3}, 8}};
    RunReport r = run_benchmark(rig.model, rig.set(), ds, {Mode::vanilla}, rig.cfg());
    nlohmann::json j = report_to_json(r);
    EXPECT_EQ(j["config"]["tree_size"], 12);
    EXPECT_EQ(j["config"]["max_suffix_depth"], 64);
    EXPECT_EQ(j["fingerprint"], kEngineFingerprint);
}

#ifdef OWL_CLI_PATH
TEST(Cli, SeedGenerateBenchSmoke) {
    std::string dir = tmp_path("owl_cli_smoke");
    std::filesystem::create_directories(dir);
    std::string model = dir + "/m.spdl";
    std::string cmd = std::string(OWL_CLI_PATH) + " seed-model --seed 5 --out " + model +
                      " --hidden 16 --layers 2 --heads 2 > /dev/null";
    ASSERT_EQ(std::system(cmd.c_str()), 0);

    cmd = std::string(OWL_CLI_PATH) + " generate --model " + model +
          " --mode vanilla --prompt \"abc\" --max-new-tokens 5 --tokens > " + dir + "/gen.txt";
    ASSERT_EQ(std::system(cmd.c_str()), 0);

    {
        std::ofstream f(dir + "/ds.jsonl", std::ios::trunc);
        f << R"({"id": "s", "prompt_tokens": [1,2,3,4], "max_new_tokens": 10})" << "\n";
    }
    cmd = std::string(OWL_CLI_PATH) + " bench --model " + model + " --dataset " + dir +
          "/ds.jsonl --modes vanilla,suffix --out " + dir + "/report.json > /dev/null";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    std::ifstream rf(dir + "/report.json");
    nlohmann::json j = nlohmann::json::parse(rf);
    EXPECT_EQ(j["examples"].size(), 2u);

    cmd = std::string(OWL_CLI_PATH) + " verify-lossless --model " + model +
          " --count 4 --prompt-len 16 --max-new-tokens 12 > /dev/null";
    EXPECT_EQ(std::system(cmd.c_str()), 0);
    cmd = std::string(OWL_CLI_PATH) + " grad-check --coords 20 > /dev/null";
    EXPECT_EQ(std::system(cmd.c_str()), 0);
    std::filesystem::remove_all(dir);
}
#endif

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "hoplab/io.hpp"
#include "hoplab/pipeline.hpp"
#include "hoplab/report.hpp"

using namespace hoplab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("hoplab_test_" + name);
    fs::remove_all(p);
    return p;
}

ExperimentConfig quick(const fs::path& out) {
    ExperimentConfig c = ExperimentConfig::smoke();
    c.output_dir = out.string();
    c.workers = 1;
    c.finalize();
    return c;
}

std::map<Stage, bool> skipped(const PipelineResult& r) {
    std::map<Stage, bool> m;
    for (const auto& s : r.stages) m[s.stage] = s.skipped;
    return m;
}

}  // namespace

TEST(Pipeline, ConfigJsonRoundTrip) {
    ExperimentConfig c = ExperimentConfig::smoke();
    c.probe.repeats = 2;
    c.filters = {FilterConfig::parse("gf50")};
    c.finalize();
    const auto j = c.to_json();
    const ExperimentConfig back = ExperimentConfig::from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(back.to_json().dump(), j.dump());
}

TEST(Pipeline, ConfigRejectsUnknownKeysAndBadValues) {
    auto j = nlohmann::json::parse(ExperimentConfig::smoke().to_json().dump());
    j["model"]["layerz"] = 3;
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
    auto t = nlohmann::json::parse(ExperimentConfig::smoke().to_json().dump());
    t["train"]["lr"] = "fast";
    EXPECT_THROW(ExperimentConfig::from_json(t), ConfigError);
    auto partial = nlohmann::json::object();
    partial["seed"] = 5;
    ExperimentConfig p = ExperimentConfig::from_json(partial);
    EXPECT_EQ(p.seed, 5u);
    EXPECT_EQ(p.model.layers, ExperimentConfig{}.model.layers);
    ExperimentConfig bad;
    bad.filters = {};
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Pipeline, FinalizeDerivesSeedsAndVocabulary) {
    ExperimentConfig a = ExperimentConfig::smoke();
    a.seed = 3;
    a.finalize();
    ExperimentConfig b = a;
    b.seed = 4;
    b.finalize();
    EXPECT_NE(a.graph.seed, b.graph.seed);
    EXPECT_NE(a.model.seed, a.train.seed);
    EXPECT_EQ(a.model.vocab_size, 4 + a.graph.relation_count + a.graph.entity_count);
}

TEST(Pipeline, EnvironmentOverrides) {
    ExperimentConfig c = ExperimentConfig::smoke();
    ::setenv("HOPLAB_OUTPUT_DIR", "/tmp/elsewhere", 1);
    ::setenv("HOPLAB_WORKERS", "3", 1);
    apply_environment(c);
    ::unsetenv("HOPLAB_OUTPUT_DIR");
    ::unsetenv("HOPLAB_WORKERS");
    EXPECT_EQ(c.output_dir, "/tmp/elsewhere");
    EXPECT_EQ(c.workers, 3);
    EXPECT_EQ(stage_from_string(to_string(Stage::similarity)), Stage::similarity);
    EXPECT_THROW(stage_from_string("polish"), ConfigError);
}

TEST(Pipeline, SmokeRunResumeAndDeterminism) {
    const auto a = temp_dir("pipe_a"), b = temp_dir("pipe_b");
    const PipelineResult first = run_pipeline(quick(a));
    ASSERT_EQ(first.stages.size(), 7u);
    for (const auto& s : first.stages) EXPECT_FALSE(s.skipped) << to_string(s.stage);
    const RunPaths pa(a);
    ASSERT_TRUE(fs::exists(pa.manifest()));
    EXPECT_TRUE(verify_manifest(pa.manifest()).empty());
    for (const auto& f : {pa.dataset(), pa.checkpoint(), pa.traces(), pa.similarity(), pa.back_patch(), pa.timing()})
        EXPECT_TRUE(fs::exists(f)) << f;

    // A second run has nothing to do.
    for (const auto& [stage, skip] : skipped(run_pipeline(quick(a)))) EXPECT_TRUE(skip) << to_string(stage);

    // Losing the report reruns only the report.
    fs::remove_all(pa.report_dir());
    const auto again = skipped(run_pipeline(quick(a)));
    EXPECT_TRUE(again.at(Stage::train));
    EXPECT_FALSE(again.at(Stage::report));
    EXPECT_TRUE(verify_manifest(pa.manifest()).empty());

    // A probe setting invalidates the probe and everything after it.
    ExperimentConfig changed = quick(a);
    changed.probe.repeats = 2;
    const auto redo = skipped(run_pipeline(changed));
    EXPECT_TRUE(redo.at(Stage::partition));
    EXPECT_FALSE(redo.at(Stage::probe));
    EXPECT_FALSE(redo.at(Stage::report));

    // Same config, fresh directory: byte-identical manifest.
    run_pipeline(quick(b));
    run_pipeline(quick(a));  // back to the default repeats
    EXPECT_EQ(read_file(pa.manifest()), read_file(RunPaths(b).manifest()));
}

TEST(Pipeline, OnlyStageNeedsItsInputs) {
    const auto dir = temp_dir("pipe_only");
    PipelineOptions opts;
    opts.only = Stage::probe;
    try {
        run_pipeline(quick(dir), opts);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), Stage::probe);
    }
}

TEST(Pipeline, PartitionGroupsEveryInstance) {
    const Dataset ds = generate_dataset(quick(temp_dir("pipe_part")).graph);
    std::vector<InstanceEvaluation> ev;
    for (std::size_t i = 0; i < ds.instances.size(); ++i) {
        const auto& inst = ds.instances[i];
        ev.push_back({inst.id, inst.hop_count, i % 2 == 0,
                      std::vector<bool>(static_cast<std::size_t>(inst.hop_count), i % 3 != 0)});
    }
    const auto parts = partition_instances(ds, ev);
    std::size_t total = 0;
    for (const auto& [o, insts] : parts) {
        total += insts.size();
        for (const auto& inst : insts) {
            const auto& e = *std::find_if(ev.begin(), ev.end(), [&](const auto& x) { return x.instance_id == inst.id; });
            EXPECT_EQ(categorize(e.multi_hop_correct, e.single_hop_correct), o);
        }
    }
    EXPECT_EQ(total, ds.instances.size());
}

// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the staged end-to-end run. Every stage reads
// persisted artifacts from the output directory and writes its own, so a run
// can resume at any stage boundary.
#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hoplab/errors.hpp"
#include "hoplab/filters.hpp"
#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"
#include "hoplab/probe.hpp"
#include "hoplab/simil.hpp"
#include "hoplab/stats.hpp"
#include "hoplab/train.hpp"

namespace hoplab {

struct InterventionConfig {
    int max_instances = 100;  // per partition and experiment
    bool knockout = true;
    bool back_patch = true;
    bool enrichment = true;
    bool enrichment_model_generated = false;
    bool enrichment_probe = false;  // rerun the patch probe on enriched prompts
};

struct ExperimentConfig {
    GraphConfig graph;
    ModelConfig model;
    TrainConfig train;
    ProbeSpec probe;
    std::vector<FilterConfig> filters{FilterConfig{}, FilterConfig{FilterKind::global, 90, 0},
                                      FilterConfig{FilterKind::local, 90, 0}};
    std::vector<HookKind> similarity_hooks{HookKind::attn_proj_out, HookKind::mlp_fc_in, HookKind::mlp_fc_out};
    NormalizeMode normalize = NormalizeMode::min_max;
    RateMode rate_mode = RateMode::instance_existence;
    InterventionConfig interventions;
    std::string output_dir = "runs/default";
    std::uint64_t seed = 1;
    int workers = 0;  // 0: one per core

    // Copies the master seed into every stochastic component and derives the
    // vocabulary size from the graph.
    void finalize();
    // Throws ConfigError.
    void validate() const;

    nlohmann::ordered_json to_json() const;
    // Missing keys keep their defaults; unknown keys are rejected. Throws ConfigError.
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);

    // |E| = 50, L = 4, 200 training steps.
    static ExperimentConfig smoke();
};

// Environment overrides: HOPLAB_OUTPUT_DIR and HOPLAB_WORKERS.
void apply_environment(ExperimentConfig& cfg);

enum class Stage { gen, train, partition, probe, similarity, interventions, report };
inline constexpr Stage kAllStages[] = {Stage::gen,        Stage::train,         Stage::partition, Stage::probe,
                                       Stage::similarity, Stage::interventions, Stage::report};
const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

// Wraps a failure inside a stage; keeps the exit code of the cause.
class StageError : public Error {
  public:
    StageError(Stage stage, const Error& cause);
    ExitCode exit_code() const noexcept override { return code_; }
    Stage stage() const noexcept { return stage_; }

  private:
    Stage stage_;
    ExitCode code_;
};

// Artifact locations inside the output directory.
struct RunPaths {
    std::filesystem::path root;
    explicit RunPaths(std::filesystem::path r) : root(std::move(r)) {}
    std::filesystem::path dataset() const { return root / "data" / "dataset.json"; }
    std::filesystem::path checkpoint() const { return root / "model" / "model.lrc"; }
    std::filesystem::path history() const { return root / "model" / "history.csv"; }
    std::filesystem::path train_summary() const { return root / "model" / "train_summary.json"; }
    std::filesystem::path evaluations() const { return root / "eval" / "evaluations.jsonl"; }
    std::filesystem::path partition() const { return root / "eval" / "partition.json"; }
    std::filesystem::path traces() const { return root / "probe" / "traces.jsonl"; }
    std::filesystem::path probe_controls() const { return root / "probe" / "controls.json"; }
    std::filesystem::path similarity() const { return root / "similarity" / "similarity.json"; }
    std::filesystem::path knockout() const { return root / "interventions" / "knockout.jsonl"; }
    std::filesystem::path back_patch() const { return root / "interventions" / "backpatch.jsonl"; }
    std::filesystem::path enrichment() const { return root / "interventions" / "enrichment.jsonl"; }
    std::filesystem::path shortcut() const { return root / "interventions" / "shortcut.json"; }
    std::filesystem::path report_dir() const { return root / "report"; }
    std::filesystem::path manifest() const { return report_dir() / "manifest.json"; }
    std::filesystem::path stamp(Stage s) const { return root / "stamps" / (std::string(to_string(s)) + ".json"); }
    std::filesystem::path config() const { return root / "config.json"; }
    std::filesystem::path timing() const { return root / "timing.json"; }
};

struct StageOutcome {
    Stage stage = Stage::gen;
    bool skipped = false;
    double seconds = 0.0;
};

struct PipelineOptions {
    bool resume = true;
    std::optional<Stage> only;  // run just this stage (inputs must exist)
    std::ostream* log = nullptr;
};

struct PipelineResult {
    std::vector<StageOutcome> stages;
    std::filesystem::path manifest;
    bool training_reached_target = false;
};

PipelineResult run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opts = {});

// Individual stages, also used by the command-line subcommands.
Dataset stage_gen(const ExperimentConfig& cfg, const RunPaths& paths);
TrainResult stage_train(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream* log = nullptr);
void stage_partition(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_probe(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_similarity(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_interventions(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_report(const ExperimentConfig& cfg, const RunPaths& paths);

// Instances of the dataset grouped by outcome, in dataset order.
std::map<Outcome, std::vector<MultiHopInstance>> partition_instances(const Dataset& ds,
                                                                     const std::vector<InstanceEvaluation>& evals);

}  // namespace hoplab

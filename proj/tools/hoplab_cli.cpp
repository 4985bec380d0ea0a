// SPDX-License-Identifier: Apache-2.0
//
// hoplab: command-line front end. Every subcommand reads the experiment
// configuration (defaults or --smoke, then --config, then --set overrides,
// then HOPLAB_OUTPUT_DIR / HOPLAB_WORKERS, then explicit flags) and works on
// the artifacts in the output directory.
#include <CLI11.hpp>

#include <iostream>
#include <set>
#include <sstream>

#include "hoplab/interventions.hpp"
#include "hoplab/io.hpp"
#include "hoplab/parallel.hpp"
#include "hoplab/pipeline.hpp"
#include "hoplab/report.hpp"

using namespace hoplab;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config_file;
    bool smoke = false;
    std::vector<std::string> sets;
    std::string out;
    int workers = -1;
    long long seed = -1;
};

void add_common(CLI::App* app, CommonArgs& a) {
    app->add_option("-c,--config", a.config_file, "JSON experiment config (base layer)");
    app->add_flag("--smoke", a.smoke, "start from the small smoke preset instead of the defaults");
    app->add_option("--set", a.sets, "override a config field, e.g. --set train.lr=3e-4 (value is JSON)");
    app->add_option("-o,--out", a.out, "output directory");
    app->add_option("-j,--workers", a.workers, "worker threads (0 = one per core)");
    app->add_option("--seed", a.seed, "master seed");
}

void set_path(nlohmann::json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;  // bare strings need no quotes
    }
    nlohmann::json* node = &root;
    std::istringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        if (!node->contains(path[i]) || !(*node)[path[i]].is_object()) throw ConfigError("unknown config section '" + path[i] + "'");
        node = &(*node)[path[i]];
    }
    if (!node->contains(path.back())) throw ConfigError("unknown config key '" + key + "'");
    (*node)[path.back()] = value;
}

ExperimentConfig resolve_config(const CommonArgs& a) {
    nlohmann::json j = nlohmann::json::parse((a.smoke ? ExperimentConfig::smoke() : ExperimentConfig{}).to_json().dump());
    if (!a.config_file.empty()) {
        nlohmann::json file;
        try {
            file = nlohmann::json::parse(read_file(a.config_file));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("config file " + a.config_file + " is not valid JSON: " + e.what());
        }
        if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
        // Validate the file on its own first so unknown keys are reported by name.
        ExperimentConfig::from_json(file);
        j.merge_patch(file);
    }
    for (const auto& s : a.sets) set_path(j, s);
    ExperimentConfig cfg = ExperimentConfig::from_json(j);
    apply_environment(cfg);
    if (!a.out.empty()) cfg.output_dir = a.out;
    if (a.workers >= 0) cfg.workers = a.workers;
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    cfg.finalize();
    cfg.validate();
    return cfg;
}

const MultiHopInstance& find_instance(const Dataset& ds, const std::string& id) {
    for (const auto& inst : ds.instances)
        if (inst.id == id) return inst;
    throw LookupError("no instance with id '" + id + "'");
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("not an integer list: '" + text + "'");
        }
    }
    return out;
}

std::pair<int, int> parse_window(const std::string& text, int L) {
    if (text == "all") return {0, L};
    if (text == "none") return {0, 0};
    if (text == "shallow") return {0, L / 2};
    if (text == "deep") return {L / 2, L};
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw ConfigError("layer window must be begin:end, all, none, shallow or deep");
    try {
        return {std::stoi(text.substr(0, colon)), std::stoi(text.substr(colon + 1))};
    } catch (const std::exception&) {
        throw ConfigError("bad layer window '" + text + "'");
    }
}

// Filters each position separately, as the pipeline does.
std::vector<GenerationRecord> filter_by_position(std::vector<GenerationRecord> records, const FilterConfig& f) {
    std::map<Position, std::vector<GenerationRecord>> by_pos;
    for (auto& r : records) by_pos[r.position].push_back(std::move(r));
    std::vector<GenerationRecord> out;
    for (auto& [p, recs] : by_pos) {
        auto fresh = reset_kept(std::move(recs));
        apply_filter(fresh, f);
        out.insert(out.end(), fresh.begin(), fresh.end());
    }
    std::stable_sort(out.begin(), out.end(), record_order_less);
    return out;
}

int infer_layers(const std::vector<GenerationRecord>& records) {
    int L = 0;
    for (const auto& r : records) L = std::max(L, r.layer + 1);
    return L;
}

void print_accuracy(const std::vector<InstanceEvaluation>& evals) {
    std::map<int, std::pair<long, long>> by_k;
    for (const auto& e : evals) {
        ++by_k[e.hop_count].first;
        by_k[e.hop_count].second += e.multi_hop_correct;
    }
    for (const auto& [k, c] : by_k)
        std::cout << k << "-hop: " << c.second << "/" << c.first << " correct ("
                  << format_sig6(static_cast<double>(c.second) / static_cast<double>(c.first)) << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hoplab: layer-wise probing of multi-hop recall in small transformers"};
    app.require_subcommand(1);
    CommonArgs common;

    auto* run = app.add_subcommand("run", "run the full pipeline, resuming from persisted artifacts");
    add_common(run, common);
    std::string only_stage;
    bool fresh = false;
    run->add_option("--stage", only_stage, "run only this stage");
    run->add_flag("--fresh", fresh, "ignore stamps and recompute every stage");

    auto* gen = app.add_subcommand("gen", "generate the knowledge graph and instance dataset");
    add_common(gen, common);
    auto* trn = app.add_subcommand("train", "train the model on the generated dataset");
    add_common(trn, common);
    auto* eval = app.add_subcommand("eval", "evaluate multi-hop and single-hop answers");
    add_common(eval, common);
    auto* part = app.add_subcommand("partition", "print the outcome partition");
    add_common(part, common);
    auto* probe = app.add_subcommand("probe", "run the patch probe over all instances");
    add_common(probe, common);

    auto* filt = app.add_subcommand("filter", "apply a filter to a trace file");
    add_common(filt, common);
    std::string filter_in, filter_out, filter_spec;
    filt->add_option("--traces", filter_in, "input traces (default: the run's probe traces)");
    filt->add_option("--filter", filter_spec, "raw, gf<k>, lf<k> or layer<l>")->required();
    filt->add_option("--write", filter_out, "output traces")->required();

    auto* stats = app.add_subcommand("stats", "emergence table for a trace file");
    add_common(stats, common);
    std::string stats_in, stats_filter = "raw", stats_csv;
    int stats_layers = 0;
    stats->add_option("--traces", stats_in, "input traces (default: the run's probe traces)");
    stats->add_option("--filter", stats_filter, "filter applied before counting");
    stats->add_option("--layers", stats_layers, "layer count (default: inferred from the records)");
    stats->add_option("--csv", stats_csv, "write the table here instead of stdout");

    auto* sim = app.add_subcommand("similarity", "hidden-state similarity groups and cross-layer matrices");
    add_common(sim, common);

    std::string instance_id;
    auto* knock = app.add_subcommand("knockout", "attention knockout on one instance");
    add_common(knock, common);
    std::string knock_sources = "all", knock_window = "all";
    knock->add_option("--instance", instance_id, "instance id")->required();
    knock->add_option("--sources", knock_sources, "comma-separated source positions, 'all' or 'subject'");
    knock->add_option("--window", knock_window, "begin:end, all, none, shallow or deep");

    auto* back = app.add_subcommand("backpatch", "back-patch one instance");
    add_common(back, common);
    std::string back_position = "last";
    int back_src = -1, back_dst = -1;
    back->add_option("--instance", instance_id, "instance id")->required();
    back->add_option("--position", back_position, "subject or last");
    back->add_option("--src", back_src, "source layer (omit both layers for a full sweep)");
    back->add_option("--dst", back_dst, "destination layer");

    auto* enrich = app.add_subcommand("enrich", "context enrichment on one instance");
    add_common(enrich, common);
    int revealed = 0;
    bool generated = false;
    enrich->add_option("--instance", instance_id, "instance id")->required();
    enrich->add_option("--revealed", revealed, "number of leading facts placed in the prompt");
    enrich->add_flag("--model-generated", generated, "let the model produce the revealed answers");

    auto* imp = app.add_subcommand("import-traces", "validate an external trace file and summarize it");
    std::string import_path, import_csv;
    int import_layers = 0;
    imp->add_option("path", import_path, "trace file (JSON Lines)")->required();
    imp->add_option("--layers", import_layers, "layer count (default: inferred from the records)");
    imp->add_option("--csv", import_csv, "write the raw emergence table here");

    auto* rep = app.add_subcommand("report", "render the report from persisted artifacts");
    add_common(rep, common);
    auto* verify = app.add_subcommand("verify", "recompute the checksums listed in a manifest");
    std::string manifest_path;
    verify->add_option("manifest", manifest_path, "manifest.json")->required();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the backward pass");
    int gc_layers = 2, gc_d = 16;
    double gc_tol = 1e-4;
    grad->add_option("--layers", gc_layers, "layers");
    grad->add_option("--d-model", gc_d, "model width");
    grad->add_option("--tolerance", gc_tol, "maximum relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
    }

    try {
        if (*grad) {
            GradCheckOptions o;
            o.tolerance = gc_tol;
            const auto report = check_model_gradients(gc_layers, gc_d, 7, o);
            for (const auto& b : report.blocks)
                std::cout << (b.passed ? "ok   " : "FAIL ") << b.name << "  max_rel " << format_sig6(b.max_rel_error)
                          << "  max_abs " << format_sig6(b.max_abs_error) << "\n";
            std::cout << "max relative error " << format_sig6(report.max_rel_error()) << "\n";
            return report.passed() ? 0 : static_cast<int>(ExitCode::numeric);
        }
        if (*imp) {
            const auto records = read_traces(import_path);
            std::set<std::string> ids;
            std::map<std::string, long> by_pos;
            for (const auto& r : records) {
                ids.insert(r.instance_id);
                ++by_pos[to_string(r.position)];
            }
            const int L = import_layers > 0 ? import_layers : infer_layers(records);
            std::cout << "records " << records.size() << "\ninstances " << ids.size() << "\nlayers " << L << "\n";
            for (const auto& [p, n] : by_pos) std::cout << "position " << p << " " << n << "\n";
            const std::string csv = emergence_table_csv(emergence_table(records, L));
            if (!import_csv.empty()) write_file(import_csv, csv);
            return 0;
        }
        if (*verify) {
            const auto bad = verify_manifest(manifest_path);
            for (const auto& b : bad) std::cout << "mismatch " << b << "\n";
            std::cout << (bad.empty() ? "manifest verified\n" : "manifest has mismatches\n");
            return bad.empty() ? 0 : static_cast<int>(ExitCode::data);
        }

        const ExperimentConfig cfg = resolve_config(common);
        const RunPaths paths(cfg.output_dir);

        if (*run) {
            PipelineOptions o;
            o.resume = !fresh;
            o.log = &std::cerr;
            if (!only_stage.empty()) o.only = stage_from_string(only_stage);
            const PipelineResult r = run_pipeline(cfg, o);
            for (const auto& s : r.stages)
                std::cout << to_string(s.stage) << (s.skipped ? " skipped" : " done") << " (" << format_sig6(s.seconds) << " s)\n";
            if (!r.manifest.empty()) std::cout << "manifest " << r.manifest.string() << "\n";
            if (!r.training_reached_target) std::cout << "note: training stopped before reaching its accuracy targets\n";
            return 0;
        }
        if (*gen) {
            const Dataset ds = stage_gen(cfg, paths);
            std::cout << "wrote " << paths.dataset().string() << " (" << ds.instances.size() << " instances)\n";
            return 0;
        }
        if (*trn) {
            const TrainResult r = stage_train(cfg, paths, &std::cerr);
            std::cout << "trained " << r.steps << " steps, targets " << (r.reached_target ? "reached" : "not reached") << "\n";
            return 0;
        }
        if (*eval || *part) {
            if (!fs::exists(paths.evaluations()) || *eval) stage_partition(cfg, paths);
            const auto evals = evaluations_from_jsonl(read_file(paths.evaluations()));
            if (*eval) {
                print_accuracy(evals);
            } else {
                const Partition p = partition_dataset(evals);
                for (Outcome o : kAllOutcomes) std::cout << to_string(o) << " " << p.at(o).size() << "\n";
                std::cout << "total " << evals.size() << "\n";
            }
            return 0;
        }
        if (*probe) {
            stage_probe(cfg, paths);
            std::cout << "wrote " << paths.traces().string() << "\n";
            return 0;
        }
        if (*filt) {
            auto records = read_traces(filter_in.empty() ? paths.traces() : fs::path(filter_in));
            FilterConfig f;
            try {
                f = FilterConfig::parse(filter_spec);
            } catch (const Error& e) {
                throw ConfigError(e.what());
            }
            records = filter_by_position(std::move(records), f);
            write_traces(records, filter_out);
            long kept = 0;
            for (const auto& r : records) kept += r.kept;
            std::cout << "kept " << kept << " of " << records.size() << " records\n";
            return 0;
        }
        if (*stats) {
            auto records = read_traces(stats_in.empty() ? paths.traces() : fs::path(stats_in));
            FilterConfig f;
            try {
                f = FilterConfig::parse(stats_filter);
            } catch (const Error& e) {
                throw ConfigError(e.what());
            }
            records = filter_by_position(std::move(records), f);
            const int L = stats_layers > 0 ? stats_layers : infer_layers(records);
            const std::string csv = emergence_table_csv(emergence_table(records, L, cfg.rate_mode));
            if (stats_csv.empty()) std::cout << csv;
            else write_file(stats_csv, csv);
            return 0;
        }
        if (*sim) {
            stage_similarity(cfg, paths);
            std::cout << "wrote " << paths.similarity().string() << "\n";
            return 0;
        }
        if (*rep) {
            stage_report(cfg, paths);
            std::cout << "wrote " << paths.manifest().string() << "\n";
            return 0;
        }
        if (*knock || *back || *enrich) {
            const Dataset ds = load_dataset(paths.dataset());
            const Model model = load_checkpoint(paths.checkpoint());
            const MultiHopInstance& inst = find_instance(ds, instance_id);
            const auto& v = inst.verbalization(0);
            const int L = model.config().layers;
            if (*knock) {
                std::vector<int> sources;
                if (knock_sources == "all") {
                    for (int p = 0; p < v.answer_pos; ++p) sources.push_back(p);
                } else if (knock_sources == "subject") {
                    sources = {v.subject_pos};
                } else {
                    sources = parse_int_list(knock_sources);
                }
                const auto [b, e] = parse_window(knock_window, L);
                std::cout << intervention_to_json_line(attention_knockout(model, ds.graph, inst, sources, b, e)) << "\n";
            } else if (*back) {
                Position pos;
                try {
                    pos = position_from_string(back_position);
                } catch (const Error& e) {
                    throw ConfigError(e.what());
                }
                if ((back_src < 0) != (back_dst < 0)) throw ConfigError("give both --src and --dst, or neither for a sweep");
                if (back_src < 0) {
                    for (const auto& r : back_patch_sweep(model, ds.graph, inst, pos)) std::cout << intervention_to_json_line(r) << "\n";
                } else {
                    std::cout << intervention_to_json_line(back_patch(model, ds.graph, inst, pos, back_src, back_dst)) << "\n";
                }
            } else {
                std::cout << enrichment_to_json_line(context_enrichment_probe(model, ds.graph, inst, revealed, generated)) << "\n";
            }
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::data);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::failure);
    }
    return 0;
}

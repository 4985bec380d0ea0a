// SPDX-License-Identifier: Apache-2.0
#include "hoplab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>

#include "hoplab/interventions.hpp"
#include "hoplab/io.hpp"
#include "hoplab/parallel.hpp"
#include "hoplab/report.hpp"
#include "hoplab/rng.hpp"

namespace hoplab {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

const char* to_string(NormalizeMode m) { return m == NormalizeMode::min_max ? "min_max" : "z_score"; }
const char* to_string(RateMode m) {
    return m == RateMode::instance_existence ? "instance_existence" : "record_frequency";
}

// Reads keys out of one JSON object and rejects whatever is left over.
class Section {
  public:
    Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key '" + path(key) + "' has the wrong type");
        }
    }

    const nlohmann::json* child(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + path(k) + "'");
    }

  private:
    const nlohmann::json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

template <typename T, typename Parse>
std::vector<T> parse_list(const nlohmann::json& j, const std::string& name, Parse parse) {
    if (!j.is_array()) throw ConfigError("config key '" + name + "' must be an array");
    std::vector<T> out;
    for (const auto& v : j) {
        if (!v.is_string()) throw ConfigError("config key '" + name + "' must hold strings");
        try {
            out.push_back(parse(v.get<std::string>()));
        } catch (const Error& e) {
            throw ConfigError("config key '" + name + "': " + e.what());
        }
    }
    return out;
}

}  // namespace

void ExperimentConfig::finalize() {
    graph.seed = derive_seed(seed, 1);
    model.seed = derive_seed(seed, 2);
    train.seed = derive_seed(seed, 3);
    model.vocab_size = Vocabulary(graph.entity_count, graph.relation_count).size();
    train.workers = workers;
    probe.workers = workers;
}

void ExperimentConfig::validate() const {
    graph.validate();
    model.validate();
    train.validate();
    probe.validate(model);
    if (model.vocab_size != Vocabulary(graph.entity_count, graph.relation_count).size())
        throw ConfigError("model vocab_size does not match the graph");
    if (filters.empty()) throw ConfigError("at least one filter is required");
    for (const auto& f : filters) f.validate();
    if (similarity_hooks.empty()) throw ConfigError("at least one similarity hook is required");
    for (HookKind h : similarity_hooks)
        if (h == HookKind::attn_weights) throw ConfigError("attn_weights is not a similarity hook");
    if (interventions.max_instances < 0) throw ConfigError("interventions.max_instances must be >= 0");
    if (workers < 0) throw ConfigError("workers must be >= 0");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ojson ExperimentConfig::to_json() const {
    ojson j;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    j["workers"] = workers;
    j["graph"] = {{"entity_count", graph.entity_count},
                  {"relation_count", graph.relation_count},
                  {"hop_counts", graph.hop_counts},
                  {"instances_per_hop", graph.instances_per_hop},
                  {"train_2hop_fraction", graph.train_2hop_fraction},
                  {"verbalization_variants", graph.verbalization_variants}};
    j["model"] = {{"layers", model.layers},   {"d_model", model.d_model},         {"heads", model.heads},
                  {"d_ff", model.d_ff},       {"max_seq_len", model.max_seq_len}, {"init_std", model.init_std},
                  {"ln_eps", model.ln_eps}};
    j["train"] = {{"max_steps", train.max_steps},
                  {"batch_size", train.batch_size},
                  {"lr", train.lr},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"adam_eps", train.adam_eps},
                  {"warmup_steps", train.warmup_steps},
                  {"grad_clip", train.grad_clip},
                  {"eval_every", train.eval_every},
                  {"atomic_target", train.atomic_target},
                  {"multi_hop_target", train.multi_hop_target},
                  {"train_variants", train.train_variants},
                  {"grad_shards", train.grad_shards},
                  {"pack_rows", train.pack_rows}};
    std::vector<std::string> positions;
    for (Position p : probe.positions) positions.emplace_back(hoplab::to_string(p));
    j["probe"] = {{"positions", positions},
                  {"layers", probe.layers},
                  {"repeats", probe.repeats},
                  {"max_new_tokens", probe.max_new_tokens},
                  {"source_variant", probe.source_variant},
                  {"target_layer", probe.target_layer}};
    std::vector<std::string> fl;
    for (const auto& f : filters) fl.push_back(f.label());
    j["filters"] = fl;
    std::vector<std::string> hooks;
    for (HookKind h : similarity_hooks) hooks.emplace_back(hoplab::to_string(h));
    j["similarity"] = {{"hooks", hooks}, {"normalize", to_string(normalize)}};
    j["rate_mode"] = to_string(rate_mode);
    j["interventions"] = {{"max_instances", interventions.max_instances},
                          {"knockout", interventions.knockout},
                          {"back_patch", interventions.back_patch},
                          {"enrichment", interventions.enrichment},
                          {"enrichment_model_generated", interventions.enrichment_model_generated},
                          {"enrichment_probe", interventions.enrichment_probe}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    Section top(j, "");
    top.get("seed", c.seed);
    top.get("output_dir", c.output_dir);
    top.get("workers", c.workers);
    if (const auto* g = top.child("graph")) {
        Section s(*g, "graph");
        s.get("entity_count", c.graph.entity_count);
        s.get("relation_count", c.graph.relation_count);
        s.get("hop_counts", c.graph.hop_counts);
        s.get("instances_per_hop", c.graph.instances_per_hop);
        s.get("train_2hop_fraction", c.graph.train_2hop_fraction);
        s.get("verbalization_variants", c.graph.verbalization_variants);
        s.finish();
    }
    if (const auto* m = top.child("model")) {
        Section s(*m, "model");
        s.get("layers", c.model.layers);
        s.get("d_model", c.model.d_model);
        s.get("heads", c.model.heads);
        s.get("d_ff", c.model.d_ff);
        s.get("max_seq_len", c.model.max_seq_len);
        s.get("init_std", c.model.init_std);
        s.get("ln_eps", c.model.ln_eps);
        s.finish();
    }
    if (const auto* t = top.child("train")) {
        Section s(*t, "train");
        s.get("max_steps", c.train.max_steps);
        s.get("batch_size", c.train.batch_size);
        s.get("lr", c.train.lr);
        s.get("beta1", c.train.beta1);
        s.get("beta2", c.train.beta2);
        s.get("adam_eps", c.train.adam_eps);
        s.get("warmup_steps", c.train.warmup_steps);
        s.get("grad_clip", c.train.grad_clip);
        s.get("eval_every", c.train.eval_every);
        s.get("atomic_target", c.train.atomic_target);
        s.get("multi_hop_target", c.train.multi_hop_target);
        s.get("train_variants", c.train.train_variants);
        s.get("grad_shards", c.train.grad_shards);
        s.get("pack_rows", c.train.pack_rows);
        s.finish();
    }
    if (const auto* p = top.child("probe")) {
        Section s(*p, "probe");
        if (const auto* pos = s.child("positions"))
            c.probe.positions = parse_list<Position>(*pos, "probe.positions", position_from_string);
        s.get("layers", c.probe.layers);
        s.get("repeats", c.probe.repeats);
        s.get("max_new_tokens", c.probe.max_new_tokens);
        s.get("source_variant", c.probe.source_variant);
        s.get("target_layer", c.probe.target_layer);
        s.finish();
    }
    if (const auto* f = top.child("filters"))
        c.filters = parse_list<FilterConfig>(*f, "filters", FilterConfig::parse);
    if (const auto* sim = top.child("similarity")) {
        Section s(*sim, "similarity");
        if (const auto* h = s.child("hooks"))
            c.similarity_hooks = parse_list<HookKind>(*h, "similarity.hooks", hook_kind_from_string);
        std::string norm = to_string(c.normalize);
        s.get("normalize", norm);
        if (norm == "min_max") c.normalize = NormalizeMode::min_max;
        else if (norm == "z_score") c.normalize = NormalizeMode::z_score;
        else throw ConfigError("similarity.normalize must be min_max or z_score");
        s.finish();
    }
    {
        std::string rate = to_string(c.rate_mode);
        top.get("rate_mode", rate);
        if (rate == "instance_existence") c.rate_mode = RateMode::instance_existence;
        else if (rate == "record_frequency") c.rate_mode = RateMode::record_frequency;
        else throw ConfigError("rate_mode must be instance_existence or record_frequency");
    }
    if (const auto* iv = top.child("interventions")) {
        Section s(*iv, "interventions");
        s.get("max_instances", c.interventions.max_instances);
        s.get("knockout", c.interventions.knockout);
        s.get("back_patch", c.interventions.back_patch);
        s.get("enrichment", c.interventions.enrichment);
        s.get("enrichment_model_generated", c.interventions.enrichment_model_generated);
        s.get("enrichment_probe", c.interventions.enrichment_probe);
        s.finish();
    }
    top.finish();
    c.finalize();
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

ExperimentConfig ExperimentConfig::smoke() {
    ExperimentConfig c;
    c.graph.entity_count = 50;
    c.graph.instances_per_hop = 40;
    c.model.layers = 4;
    c.model.d_model = 64;
    c.model.d_ff = 256;
    c.train.max_steps = 200;
    c.train.eval_every = 100;
    c.train.batch_size = 64;
    c.train.warmup_steps = 20;
    c.interventions.max_instances = 20;
    c.output_dir = "runs/smoke";
    c.finalize();
    return c;
}

void apply_environment(ExperimentConfig& cfg) {
    if (const char* dir = std::getenv("HOPLAB_OUTPUT_DIR"); dir != nullptr && *dir != '\0') cfg.output_dir = dir;
    if (const char* w = std::getenv("HOPLAB_WORKERS"); w != nullptr && *w != '\0') {
        char* end = nullptr;
        const long v = std::strtol(w, &end, 10);
        if (*end != '\0' || v < 0 || v > 4096) throw ConfigError(std::string("HOPLAB_WORKERS is not a worker count: ") + w);
        cfg.workers = static_cast<int>(v);
    }
    cfg.finalize();
}

// ---------------------------------------------------------------- stages

const char* to_string(Stage s) {
    switch (s) {
        case Stage::gen: return "gen";
        case Stage::train: return "train";
        case Stage::partition: return "partition";
        case Stage::probe: return "probe";
        case Stage::similarity: return "similarity";
        case Stage::interventions: return "interventions";
        case Stage::report: return "report";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    for (Stage st : kAllStages)
        if (s == to_string(st)) return st;
    throw ConfigError("unknown stage '" + s + "'");
}

StageError::StageError(Stage stage, const Error& cause)
    : Error(std::string("stage ") + to_string(stage) + " failed: " + cause.what()), stage_(stage), code_(cause.exit_code()) {}

std::map<Outcome, std::vector<MultiHopInstance>> partition_instances(const Dataset& ds,
                                                                     const std::vector<InstanceEvaluation>& evals) {
    std::map<std::string, Outcome> outcome_of;
    for (const auto& e : evals) outcome_of[e.instance_id] = categorize(e.multi_hop_correct, e.single_hop_correct);
    std::map<Outcome, std::vector<MultiHopInstance>> out;
    for (Outcome o : kAllOutcomes) out[o];
    for (const auto& inst : ds.instances) {
        const auto it = outcome_of.find(inst.id);
        if (it == outcome_of.end()) throw LookupError("no evaluation for instance '" + inst.id + "'");
        out[it->second].push_back(inst);
    }
    return out;
}

namespace {

std::string jsonl(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) {
        out += l;
        out += '\n';
    }
    return out;
}

std::vector<InstanceEvaluation> load_evaluations(const RunPaths& paths) {
    return evaluations_from_jsonl(read_file(paths.evaluations()));
}

std::vector<MultiHopInstance> first_n(const std::vector<MultiHopInstance>& v, int n) {
    return {v.begin(), v.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(v.size()))};
}

std::string history_csv(const TrainResult& r) {
    std::set<int> train_k, held_k;
    for (const auto& m : r.history) {
        for (const auto& [k, v] : m.train_accuracy) train_k.insert(k);
        for (const auto& [k, v] : m.held_out_accuracy) held_k.insert(k);
    }
    CsvTable t;
    t.header = {"step", "loss", "atomic_accuracy"};
    for (int k : train_k) t.header.push_back("train_" + std::to_string(k) + "hop_accuracy");
    for (int k : held_k) t.header.push_back("held_out_" + std::to_string(k) + "hop_accuracy");
    for (const auto& m : r.history) {
        std::vector<std::string> row{std::to_string(m.step), format_sig6(m.loss), format_sig6(m.atomic_accuracy)};
        for (int k : train_k) row.push_back(m.train_accuracy.count(k) ? format_sig6(m.train_accuracy.at(k)) : "");
        for (int k : held_k) row.push_back(m.held_out_accuracy.count(k) ? format_sig6(m.held_out_accuracy.at(k)) : "");
        t.rows.push_back(std::move(row));
    }
    return render_csv(t);
}

}  // namespace

Dataset stage_gen(const ExperimentConfig& cfg, const RunPaths& paths) {
    Dataset ds = generate_dataset(cfg.graph);
    save_dataset(ds, paths.dataset());
    return ds;
}

TrainResult stage_train(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream* log) {
    const Dataset ds = load_dataset(paths.dataset());
    const Corpus corpus = build_corpus(ds, cfg.train.train_variants);
    Model model(cfg.model);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train(model, corpus, cfg.train, [&](const TrainMetrics& m) {
        if (log == nullptr) return;
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        *log << "  step " << m.step << "  loss " << format_sig6(m.loss) << "  atomic " << format_sig6(m.atomic_accuracy);
        for (const auto& [k, v] : m.train_accuracy) *log << "  train" << k << " " << format_sig6(v);
        *log << "  (" << static_cast<long>(s) << " s)\n";
        log->flush();
    });
    save_checkpoint(model, CheckpointInfo{r.steps, cfg.seed}, paths.checkpoint());
    write_file(paths.history(), history_csv(r));
    ojson s;
    s["steps"] = r.steps;
    s["reached_target"] = r.reached_target;
    s["atomic_target"] = cfg.train.atomic_target;
    s["multi_hop_target"] = cfg.train.multi_hop_target;
    if (!r.history.empty()) {
        const auto& m = r.history.back();
        s["atomic_accuracy"] = m.atomic_accuracy;
        ojson tr = ojson::object(), ho = ojson::object();
        for (const auto& [k, v] : m.train_accuracy) tr[std::to_string(k)] = v;
        for (const auto& [k, v] : m.held_out_accuracy) ho[std::to_string(k)] = v;
        s["train_accuracy"] = tr;
        s["held_out_accuracy"] = ho;
    }
    write_file(paths.train_summary(), s.dump(2) + "\n");
    return r;
}

void stage_partition(const ExperimentConfig& cfg, const RunPaths& paths) {
    const Dataset ds = load_dataset(paths.dataset());
    const Model model = load_checkpoint(paths.checkpoint());
    const auto evals = evaluate_instances(model, ds.graph, ds.instances, resolve_workers(cfg.workers));
    write_file(paths.evaluations(), evaluations_to_jsonl(evals));

    const Partition part = partition_dataset(evals);
    std::map<std::string, int> hop_of;
    for (const auto& e : evals) hop_of[e.instance_id] = e.hop_count;
    ojson j;
    j["total"] = evals.size();
    ojson counts = ojson::object(), by_hop = ojson::object(), ids = ojson::object();
    for (Outcome o : kAllOutcomes) {
        const auto& members = part.at(o);
        counts[to_string(o)] = members.size();
        std::map<int, long> per_hop;
        for (int k : cfg.graph.hop_counts) per_hop[k] = 0;
        for (const auto& id : members) ++per_hop[hop_of.at(id)];
        ojson h = ojson::object();
        for (const auto& [k, n] : per_hop) h[std::to_string(k)] = n;
        by_hop[to_string(o)] = h;
        ids[to_string(o)] = members;
    }
    j["counts"] = counts;
    j["by_hop_count"] = by_hop;
    j["instance_ids"] = ids;
    write_file(paths.partition(), j.dump(2) + "\n");
}

namespace {

// Baselines for reading the probe: what the target prompt produces without
// a patch, what a zero vector produces, whether the deepest last-token patch
// agrees with the model's own answer, and a logit-lens readout per layer.
ojson probe_controls(const Model& model, const Dataset& ds, const std::vector<GenerationRecord>& records,
                     const ProbeSpec& spec) {
    const KnowledgeGraph& kg = ds.graph;
    const Vocabulary& vocab = kg.vocab();
    const int L = model.config().layers;
    ojson c;

    ojson unpatched = ojson::array();
    for (int rep = 0; rep < spec.repeats; ++rep) {
        const TargetPrompt tp = build_target_prompt(kg, rep);
        const TokenSeq gen = unpatched_target_generation(model, kg, rep, spec.max_new_tokens);
        ojson u;
        u["repeat"] = rep;
        u["filler_entity"] = tp.filler;
        u["gen_tokens"] = gen;
        u["gen_is_filler"] = !gen.empty() && gen.front() == vocab.entity_token(tp.filler);
        unpatched.push_back(u);
    }
    c["unpatched_target"] = unpatched;

    // Zero vector injected in place of a hidden state.
    const auto sample = first_n(ds.instances, 50);
    long zero_rows = 0, zero_decoded = 0;
    const std::vector<float> zero(static_cast<std::size_t>(model.config().d_model), 0.0f);
    for (const auto& inst : sample)
        for (Position p : spec.positions)
            for (int l = 0; l < L; ++l) {
                const GenerationRecord r = patchscope_vector(model, kg, inst, p, l, 0, zero, spec);
                ++zero_rows;
                if (!r.decoded_hops.empty()) ++zero_decoded;
            }
    c["zero_vector"] = {{"records", zero_rows},
                        {"decoding_fraction", zero_rows ? static_cast<double>(zero_decoded) / zero_rows : 0.0}};

    // Last-layer, last-token probe output versus the model's greedy answer.
    std::map<std::string, TokenId> probe_top;
    for (const auto& r : records)
        if (r.position == Position::last && r.layer == L - 1 && r.repeat == 0 && !r.gen_tokens.empty())
            probe_top[r.instance_id] = r.gen_tokens.front();
    std::vector<TokenSeq> prompts;
    for (const auto& inst : ds.instances) prompts.push_back(inst.verbalization(0).tokens);
    const auto traces = model.forward_batch(prompts);
    long agree = 0, compared = 0;
    for (std::size_t i = 0; i < ds.instances.size(); ++i) {
        const auto it = probe_top.find(ds.instances[i].id);
        if (it == probe_top.end()) continue;
        const auto& tr = traces[i];
        ++compared;
        if (argmax<float>(tr.logits_at(tr.seq_len - 1)) == it->second) ++agree;
    }
    c["last_layer_consistency"] = {{"instances", compared},
                                   {"agreement", compared ? static_cast<double>(agree) / compared : 0.0}};

    // Logit lens: top-1 token at each layer against the answer (last token)
    // and the first bridge entity (subject token).
    std::map<int, std::vector<long>> answer_hits, bridge_hits;
    std::map<int, long> n_by_k;
    std::vector<RunPlan> plans;
    for (const auto& inst : ds.instances) {
        RunPlan plan;
        const auto& v = inst.verbalization(0);
        for (int l = 0; l < L; ++l) {
            plan.captures.push_back({HookKind::resid_post, l, v.answer_pos});
            plan.captures.push_back({HookKind::resid_post, l, v.subject_pos});
        }
        plans.push_back(std::move(plan));
    }
    const auto lens_traces = model.forward_batch(prompts, plans);
    for (std::size_t i = 0; i < ds.instances.size(); ++i) {
        const auto& inst = ds.instances[i];
        const auto& v = inst.verbalization(0);
        auto& ah = answer_hits[inst.hop_count];
        auto& bh = bridge_hits[inst.hop_count];
        ah.resize(static_cast<std::size_t>(L), 0);
        bh.resize(static_cast<std::size_t>(L), 0);
        ++n_by_k[inst.hop_count];
        for (int l = 0; l < L; ++l) {
            const auto at_last = model.logit_lens(lens_traces[i], l, v.answer_pos);
            const auto at_subject = model.logit_lens(lens_traces[i], l, v.subject_pos);
            if (argmax<float>(at_last) == vocab.entity_token(inst.answer())) ++ah[static_cast<std::size_t>(l)];
            if (argmax<float>(at_subject) == vocab.entity_token(inst.chain[1])) ++bh[static_cast<std::size_t>(l)];
        }
    }
    ojson lens = ojson::array();
    for (const auto& [k, n] : n_by_k) {
        std::vector<double> a, b;
        for (int l = 0; l < L; ++l) {
            a.push_back(static_cast<double>(answer_hits[k][static_cast<std::size_t>(l)]) / static_cast<double>(n));
            b.push_back(static_cast<double>(bridge_hits[k][static_cast<std::size_t>(l)]) / static_cast<double>(n));
        }
        lens.push_back({{"hop_count", k}, {"instances", n}, {"answer_top1_at_last", a}, {"bridge_top1_at_subject", b}});
    }
    c["logit_lens"] = lens;
    return c;
}

}  // namespace

void stage_probe(const ExperimentConfig& cfg, const RunPaths& paths) {
    const Dataset ds = load_dataset(paths.dataset());
    const Model model = load_checkpoint(paths.checkpoint());
    ProbeSpec spec = cfg.probe;
    spec.workers = resolve_workers(cfg.workers);
    std::vector<GenerationRecord> records = run_probe(model, ds.graph, ds.instances, spec);
    score_records(model, ds.instances, records);
    write_traces(records, paths.traces());
    write_file(paths.probe_controls(), probe_controls(model, ds, records, spec).dump(2) + "\n");
}

namespace {

constexpr int kCrossLayerPerHopCount = 100;

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

ojson group_to_json(const GroupResult& g, Outcome partition) {
    ojson j;
    j["partition"] = to_string(partition);
    j["hook"] = to_string(g.hook);
    j["position"] = to_string(g.position);
    ojson groups = ojson::array();
    for (const auto& p : g.groups)
        groups.push_back({{"total_hops", p.total_hops},
                          {"hop_index", p.hop_index},
                          {"size", p.size},
                          {"mean_raw", p.mean_raw},
                          {"normalized", p.normalized},
                          {"degenerate", p.degenerate}});
    j["groups"] = groups;
    j["notices"] = g.notices;
    return j;
}

}  // namespace

void stage_similarity(const ExperimentConfig& cfg, const RunPaths& paths) {
    const Dataset ds = load_dataset(paths.dataset());
    const Model model = load_checkpoint(paths.checkpoint());
    const auto parts = partition_instances(ds, load_evaluations(paths));
    const int workers = resolve_workers(cfg.workers);
    const int L = model.config().layers;
    const std::vector<Position> positions{Position::subject, Position::last};

    ojson out;
    ojson groups = ojson::array();
    for (const auto& [outcome, members] : parts)
        for (HookKind hook : cfg.similarity_hooks)
            for (Position p : positions)
                groups.push_back(group_to_json(group_curves(model, ds.graph, members, hook, p, cfg.normalize, workers), outcome));
    out["groups"] = groups;

    // Cross-layer matrices pooled over a fixed prefix of each hop count.
    std::map<int, int> taken;
    std::vector<MultiHopInstance> pool;
    for (const auto& inst : ds.instances)
        if (taken[inst.hop_count]++ < kCrossLayerPerHopCount) pool.push_back(inst);
    ojson matrices = ojson::array();
    for (HookKind hook : cfg.similarity_hooks)
        for (Position p : positions) {
            std::vector<std::vector<double>> sum(static_cast<std::size_t>(L), std::vector<double>(static_cast<std::size_t>(L), 0.0));
            long n = 0;
            for (const auto& inst : pool)
                for (int i = 0; i < inst.hop_count; ++i) {
                    const auto m = cross_layer_matrix(model, ds.graph, inst, i, hook, p);
                    for (int a = 0; a < L; ++a)
                        for (int b = 0; b < L; ++b) sum[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] += m[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
                    ++n;
                }
            std::vector<double> diag, off;
            for (int a = 0; a < L; ++a)
                for (int b = 0; b < L; ++b) {
                    double& v = sum[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
                    if (n > 0) v /= static_cast<double>(n);
                    (a == b ? diag : off).push_back(v);
                }
            matrices.push_back({{"hook", to_string(hook)},
                                {"position", to_string(p)},
                                {"pairs", n},
                                {"matrix", sum},
                                {"diagonal_mean", mean_of(diag)},
                                {"off_diagonal_mean", mean_of(off)}});
        }
    out["cross_layer"] = matrices;
    write_file(paths.similarity(), out.dump() + "\n");

    // Hidden-state dumps of the first instance at the subject token.
    if (!ds.instances.empty()) {
        const auto& inst = ds.instances.front();
        const auto& v = inst.verbalization(0);
        for (HookKind hook : cfg.similarity_hooks)
            write_hsd1(capture_hidden(model, v.tokens, hook, v.subject_pos),
                       paths.root / "similarity" / "hidden" / (std::string(to_string(hook)) + ".hsd1"));
    }
}

namespace {

struct Window {
    const char* name;
    int begin;
    int end;
};

}  // namespace

void stage_interventions(const ExperimentConfig& cfg, const RunPaths& paths) {
    const Dataset ds = load_dataset(paths.dataset());
    const Model model = load_checkpoint(paths.checkpoint());
    const auto evals = load_evaluations(paths);
    const auto parts = partition_instances(ds, evals);
    const int L = model.config().layers;
    const int cap = cfg.interventions.max_instances;
    const int workers = resolve_workers(cfg.workers);
    const KnowledgeGraph& kg = ds.graph;

    std::vector<std::string> knock, back, enrich, enriched_traces;
    ojson notices = ojson::array();
    for (const auto& [outcome, members] : parts) {
        const auto subset = first_n(members, cap);
        const std::string part = to_string(outcome);

        if (cfg.interventions.knockout) {
            const Window windows[] = {{"none", 0, 0}, {"shallow", 0, L / 2}, {"deep", L / 2, L}, {"all", 0, L}};
            std::vector<std::vector<std::string>> lines(subset.size());
            parallel_for(subset.size(), workers, [&](std::size_t i) {
                const auto& inst = subset[i];
                const auto& v = inst.verbalization(0);
                std::vector<int> before_last;
                for (int p = 0; p < v.answer_pos; ++p) before_last.push_back(p);
                const std::pair<const char*, std::vector<int>> source_sets[] = {{"all_before_last", before_last},
                                                                                 {"subject", {v.subject_pos}}};
                for (const auto& [set_name, sources] : source_sets)
                    for (const auto& w : windows) {
                        InterventionResult r = attention_knockout(model, kg, inst, sources, w.begin, w.end);
                        r.descriptor["partition"] = part;
                        r.descriptor["source_set"] = set_name;
                        r.descriptor["window"] = w.name;
                        lines[i].push_back(intervention_to_json_line(r));
                    }
            });
            for (auto& l : lines) knock.insert(knock.end(), l.begin(), l.end());
        }

        if (cfg.interventions.back_patch && outcome == Outcome::incorrect) {
            std::vector<std::vector<std::string>> lines(subset.size());
            parallel_for(subset.size(), workers, [&](std::size_t i) {
                for (Position p : {Position::subject, Position::last})
                    for (auto& r : back_patch_sweep(model, kg, subset[i], p)) {
                        r.descriptor["partition"] = part;
                        lines[i].push_back(intervention_to_json_line(r));
                    }
            });
            for (auto& l : lines) back.insert(back.end(), l.begin(), l.end());
        }

        if (cfg.interventions.enrichment) {
            std::vector<bool> modes{false};
            if (cfg.interventions.enrichment_model_generated) modes.push_back(true);
            for (const auto& inst : subset)
                for (bool generated : modes)
                    for (int r = 0; r < inst.hop_count; ++r) {
                        try {
                            EnrichmentResult e = context_enrichment_probe(model, kg, inst, r, generated);
                            nlohmann::ordered_json line = nlohmann::ordered_json::parse(enrichment_to_json_line(e));
                            line["intervention"]["partition"] = part;
                            enrich.push_back(line.dump());
                            if (cfg.interventions.enrichment_probe && !generated && r > 0) {
                                ProbeSpec spec = cfg.probe;
                                spec.workers = 1;
                                for (const auto& rec : enriched_probe_records(model, kg, inst, r, spec)) {
                                    GenerationRecord copy = rec;
                                    copy.extras["revealed"] = r;
                                    copy.extras["partition"] = part;
                                    enriched_traces.push_back(record_to_json_line(copy));
                                }
                            }
                        } catch (const LengthError&) {
                            notices.push_back({{"instance_id", inst.id},
                                               {"revealed", r},
                                               {"model_generated", generated},
                                               {"notice", "enriched prompt exceeds max_seq_len; skipped"}});
                        }
                    }
        }
    }
    write_file(paths.knockout(), jsonl(knock));
    write_file(paths.back_patch(), jsonl(back));
    write_file(paths.enrichment(), jsonl(enrich));
    if (cfg.interventions.enrichment_probe)
        write_file(paths.root / "interventions" / "enriched_traces.jsonl", jsonl(enriched_traces));

    const ShortcutCensus census = shortcut_census(evals);
    ojson s;
    s["count"] = census.count;
    ojson by = ojson::object();
    for (int k : cfg.graph.hop_counts) by[std::to_string(k)] = census.by_hop_count.count(k) ? census.by_hop_count.at(k) : 0;
    s["by_hop_count"] = by;
    s["instance_ids"] = census.instance_ids;
    s["enrichment_notices"] = notices;
    write_file(paths.shortcut(), s.dump(2) + "\n");
}

// ---------------------------------------------------------------- report

namespace {

std::string fmt(double v) { return std::isfinite(v) ? format_sig6(v) : ""; }

std::vector<std::string> layer_ticks(int L) {
    std::vector<std::string> t;
    for (int l = 0; l < L; ++l) t.push_back(std::to_string(l));
    return t;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

CsvTable table_from_csv(std::string name, const std::string& text) {
    auto rows = parse_csv(text);
    CsvTable t;
    t.name = std::move(name);
    if (!rows.empty()) {
        t.header = rows.front();
        t.rows.assign(rows.begin() + 1, rows.end());
    }
    return t;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
    std::vector<nlohmann::json> out;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

// Filters each position's records separately, so a local filter ranks the
// records of one instance at one position against each other.
std::vector<GenerationRecord> filtered(const std::vector<GenerationRecord>& records, const FilterConfig& f) {
    std::map<Position, std::vector<GenerationRecord>> by_pos;
    for (const auto& r : records) by_pos[r.position].push_back(r);
    std::vector<GenerationRecord> out;
    for (auto& [p, recs] : by_pos) {
        auto fresh = reset_kept(std::move(recs));
        apply_filter(fresh, f);
        out.insert(out.end(), fresh.begin(), fresh.end());
    }
    std::stable_sort(out.begin(), out.end(), record_order_less);
    return out;
}

struct Rate {
    long n = 0;
    double base_prob = 0, after_prob = 0;
    long base_correct = 0, after_correct = 0, flips = 0;
    void add(const nlohmann::json& iv) {
        ++n;
        base_prob += iv.at("baseline_prob").get<double>();
        after_prob += iv.at("intervened_prob").get<double>();
        base_correct += iv.at("baseline_correct").get<bool>();
        after_correct += iv.at("intervened_correct").get<bool>();
        flips += iv.at("flipped").get<bool>();
    }
    double frac(double v) const { return n ? v / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); }
};

}  // namespace

void stage_report(const ExperimentConfig& cfg, const RunPaths& paths) {
    const Dataset ds = load_dataset(paths.dataset());
    const auto evals = load_evaluations(paths);
    const auto parts = partition_instances(ds, evals);
    const auto traces = read_traces(paths.traces());
    const int L = cfg.model.layers;
    ReportBundle b;
    ojson summary;

    // Partition sizes per hop count.
    {
        CsvTable t{"partition_sizes", {"category"}, {}};
        for (int k : cfg.graph.hop_counts) t.header.push_back(std::to_string(k) + "_hop");
        t.header.push_back("total");
        std::map<int, long> col_total;
        long grand = 0;
        ojson counts = ojson::object();
        for (const auto& [o, members] : parts) {
            std::vector<std::string> row{to_string(o)};
            std::map<int, long> per;
            for (const auto& inst : members) ++per[inst.hop_count];
            for (int k : cfg.graph.hop_counts) {
                row.push_back(std::to_string(per[k]));
                col_total[k] += per[k];
            }
            row.push_back(std::to_string(members.size()));
            grand += static_cast<long>(members.size());
            counts[to_string(o)] = members.size();
            t.rows.push_back(std::move(row));
        }
        std::vector<std::string> total{"Total"};
        for (int k : cfg.graph.hop_counts) total.push_back(std::to_string(col_total[k]));
        total.push_back(std::to_string(grand));
        t.rows.push_back(std::move(total));
        b.tables.push_back(std::move(t));
        summary["partition_sizes"] = counts;
        summary["dataset_size"] = ds.instances.size();
    }

    // Training.
    {
        const std::string hist = read_file(paths.history());
        CsvTable t = table_from_csv("training/history", hist);
        Chart c;
        c.name = "training/accuracy";
        c.title = "Training accuracy";
        c.x_label = "step";
        c.y_label = "accuracy";
        std::vector<ChartSeries> series(t.header.size() > 2 ? t.header.size() - 2 : 0);
        for (std::size_t col = 2; col < t.header.size(); ++col) series[col - 2].name = t.header[col];
        for (const auto& row : t.rows) {
            c.x_ticks.push_back(row[0]);
            for (std::size_t col = 2; col < row.size(); ++col)
                series[col - 2].values.push_back(row[col].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(row[col]));
        }
        c.series = std::move(series);
        b.tables.push_back(std::move(t));
        b.charts.push_back(std::move(c));
        summary["training"] = nlohmann::ordered_json::parse(read_file(paths.train_summary()));
    }

    // Emergence, inversion, and layer distributions per partition x filter.
    {
        std::map<Outcome, std::set<std::string>> ids;
        for (const auto& [o, members] : parts)
            for (const auto& inst : members) ids[o].insert(inst.id);
        CsvTable inv{"emergence/inversion",
                     {"partition", "filter", "hop_count", "bridge_at_subject", "answer_at_last", "margin", "inverted",
                      "instances_decoding_both", "instance_inversion_fraction"},
                     {}};
        ojson inv_summary = ojson::array();
        for (const auto& [o, members] : parts) {
            std::vector<GenerationRecord> recs;
            for (const auto& r : traces)
                if (ids[o].count(r.instance_id)) recs.push_back(r);
            const std::string part = lower(to_string(o));
            for (const auto& f : cfg.filters) {
                const auto kept = filtered(recs, f);
                const std::string stem = part + "_" + f.label();
                const auto table = emergence_table(kept, L, cfg.rate_mode);
                b.tables.push_back(table_from_csv("emergence/" + stem, emergence_table_csv(table)));

                for (int k : cfg.graph.hop_counts) {
                    const InstanceInversion ii = instance_inversion(kept, k);
                    std::vector<std::string> row{to_string(o), f.label(), std::to_string(k)};
                    ojson js{{"partition", to_string(o)}, {"filter", f.label()}, {"hop_count", k}};
                    try {
                        const InversionVerdict v = inversion_test(table, k);
                        row.insert(row.end(), {fmt(v.bridge_at_subject), fmt(v.answer_at_last), fmt(v.margin),
                                               v.inverted ? "true" : "false"});
                        js["inverted"] = v.inverted;
                        js["margin"] = v.margin;
                    } catch (const UndefinedStatisticError&) {
                        row.insert(row.end(), {"", "", "", "undefined"});
                        js["inverted"] = nullptr;
                    }
                    row.push_back(std::to_string(ii.n_instances));
                    row.push_back(fmt(ii.fraction()));
                    inv.rows.push_back(std::move(row));
                    inv_summary.push_back(js);
                }

                // Decoding rate bars: one tick per (k, entity), one series per position.
                Chart rate;
                rate.name = "emergence/decoding_rate_" + stem;
                rate.title = "Decoding rate, " + std::string(to_string(o)) + ", " + f.label();
                rate.kind = Chart::Kind::bar;
                rate.x_label = "hop count / entity";
                rate.y_label = "decoding rate";
                ChartSeries subj{"subject", {}}, last{"last", {}};
                for (int k : cfg.graph.hop_counts)
                    for (int j = 0; j <= k; ++j) {
                        rate.x_ticks.push_back(std::to_string(k) + ":e" + std::to_string(j));
                        const auto* s = find_cell(table, k, j, Position::subject);
                        const auto* l = find_cell(table, k, j, Position::last);
                        subj.values.push_back(s ? s->decoding_rate : std::numeric_limits<double>::quiet_NaN());
                        last.values.push_back(l ? l->decoding_rate : std::numeric_limits<double>::quiet_NaN());
                    }
                rate.series = {subj, last};
                b.charts.push_back(std::move(rate));

                for (Position p : {Position::subject, Position::last}) {
                    const auto curves = layer_distribution(kept, p, L);
                    CsvTable dt{"layers/" + stem + "_" + to_string(p),
                                {"hop_count", "hop_index", "layer", "decode_fraction", "n_instances"},
                                {}};
                    std::map<int, std::vector<ChartSeries>> by_k;
                    for (const auto& c : curves) {
                        for (int l = 0; l < L; ++l)
                            dt.rows.push_back({std::to_string(c.hop_count), std::to_string(c.hop_index), std::to_string(l),
                                               fmt(c.values[static_cast<std::size_t>(l)]), std::to_string(c.n_instances)});
                        by_k[c.hop_count].push_back({"e" + std::to_string(c.hop_index), c.values});
                    }
                    b.tables.push_back(std::move(dt));
                    for (auto& [k, series] : by_k) {
                        Chart c;
                        c.name = "layers/" + stem + "_" + to_string(p) + "_" + std::to_string(k) + "hop";
                        c.title = std::to_string(k) + "-hop, " + to_string(o) + ", " + f.label() + ", " + to_string(p) + " token";
                        c.x_label = "source layer";
                        c.y_label = "fraction of instances decoding";
                        c.x_ticks = layer_ticks(L);
                        c.series = std::move(series);
                        b.charts.push_back(std::move(c));
                    }
                }
            }
        }
        b.tables.push_back(std::move(inv));
        summary["inversion"] = inv_summary;
    }

    // Similarity.
    {
        const auto sim = nlohmann::json::parse(read_file(paths.similarity()));
        for (const auto& g : sim.at("groups")) {
            const std::string stem = lower(g.at("partition").get<std::string>()) + "_" + g.at("hook").get<std::string>() +
                                     "_" + g.at("position").get<std::string>();
            CsvTable t{"similarity/" + stem, {"total_hops", "hop_index", "size", "layer", "mean_cosine", "normalized", "degenerate"}, {}};
            Chart c;
            c.name = "similarity/" + stem;
            c.title = g.at("hook").get<std::string>() + " similarity, " + g.at("partition").get<std::string>() + ", " +
                      g.at("position").get<std::string>() + " token";
            c.x_label = "layer";
            c.y_label = "normalized cosine";
            c.x_ticks = layer_ticks(L);
            for (const auto& p : g.at("groups")) {
                const auto raw = p.at("mean_raw").get<std::vector<double>>();
                const auto norm = p.at("normalized").get<std::vector<double>>();
                for (std::size_t l = 0; l < raw.size(); ++l)
                    t.rows.push_back({std::to_string(p.at("total_hops").get<int>()), std::to_string(p.at("hop_index").get<int>()),
                                      std::to_string(p.at("size").get<long>()), std::to_string(l), fmt(raw[l]),
                                      l < norm.size() ? fmt(norm[l]) : "", p.at("degenerate").get<bool>() ? "true" : "false"});
                c.series.push_back({std::to_string(p.at("total_hops").get<int>()) + "-hop r" + std::to_string(p.at("hop_index").get<int>()), norm});
            }
            b.tables.push_back(std::move(t));
            if (!c.series.empty()) b.charts.push_back(std::move(c));
        }
        CsvTable summary_t{"similarity/cross_layer_summary", {"hook", "position", "pairs", "diagonal_mean", "off_diagonal_mean"}, {}};
        for (const auto& m : sim.at("cross_layer")) {
            const std::string stem = m.at("hook").get<std::string>() + "_" + m.at("position").get<std::string>();
            CsvTable t{"similarity/cross_layer_" + stem, {"layer"}, {}};
            for (int l = 0; l < L; ++l) t.header.push_back(std::to_string(l));
            const auto mat = m.at("matrix").get<std::vector<std::vector<double>>>();
            for (std::size_t a = 0; a < mat.size(); ++a) {
                std::vector<std::string> row{std::to_string(a)};
                for (double v : mat[a]) row.push_back(fmt(v));
                t.rows.push_back(std::move(row));
            }
            b.tables.push_back(std::move(t));
            auto num = [](const nlohmann::json& v) { return v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN(); };
            summary_t.rows.push_back({m.at("hook").get<std::string>(), m.at("position").get<std::string>(),
                                      std::to_string(m.at("pairs").get<long>()), fmt(num(m.at("diagonal_mean"))),
                                      fmt(num(m.at("off_diagonal_mean")))});
        }
        b.tables.push_back(std::move(summary_t));
    }

    // Interventions.
    {
        std::map<std::tuple<std::string, std::string, std::string>, Rate> knock;
        for (const auto& line : read_jsonl(paths.knockout())) {
            const auto& iv = line.at("intervention");
            knock[{iv.at("partition").get<std::string>(), iv.at("source_set").get<std::string>(), iv.at("window").get<std::string>()}].add(iv);
        }
        CsvTable kt{"interventions/knockout",
                    {"partition", "source_set", "window", "n", "baseline_prob", "intervened_prob", "baseline_accuracy",
                     "intervened_accuracy", "flip_rate"},
                    {}};
        for (const auto& [key, r] : knock)
            kt.rows.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), std::to_string(r.n), fmt(r.frac(r.base_prob)),
                               fmt(r.frac(r.after_prob)), fmt(r.frac(static_cast<double>(r.base_correct))),
                               fmt(r.frac(static_cast<double>(r.after_correct))), fmt(r.frac(static_cast<double>(r.flips)))});
        if (!knock.empty()) {
            Chart c;
            c.name = "interventions/knockout_correct";
            c.title = "Answer probability under attention knockout (Correct)";
            c.kind = Chart::Kind::bar;
            c.x_label = "window";
            c.y_label = "mean answer probability";
            for (const char* w : {"none", "shallow", "deep", "all"}) c.x_ticks.emplace_back(w);
            for (const char* set : {"all_before_last", "subject"}) {
                ChartSeries s{set, {}};
                for (const auto& w : c.x_ticks) {
                    const auto it = knock.find({"Correct", set, w});
                    s.values.push_back(it == knock.end() ? std::numeric_limits<double>::quiet_NaN() : it->second.frac(it->second.after_prob));
                }
                c.series.push_back(std::move(s));
            }
            b.charts.push_back(std::move(c));
        }
        b.tables.push_back(std::move(kt));

        std::map<std::tuple<std::string, int, int>, Rate> back;
        for (const auto& line : read_jsonl(paths.back_patch())) {
            const auto& iv = line.at("intervention");
            back[{iv.at("position").get<std::string>(), iv.at("layer_src").get<int>(), iv.at("layer_dst").get<int>()}].add(iv);
        }
        CsvTable bt{"interventions/backpatch",
                    {"position", "layer_src", "layer_dst", "n", "baseline_prob", "intervened_prob", "fixed_rate"},
                    {}};
        ojson best = ojson::object();
        for (const auto& [key, r] : back) {
            const double fixed = r.frac(static_cast<double>(r.after_correct - r.base_correct));
            bt.rows.push_back({std::get<0>(key), std::to_string(std::get<1>(key)), std::to_string(std::get<2>(key)), std::to_string(r.n),
                               fmt(r.frac(r.base_prob)), fmt(r.frac(r.after_prob)), fmt(fixed)});
            const std::string& pos = std::get<0>(key);
            if (!best.contains(pos) || best[pos]["fixed_rate"].get<double>() < fixed)
                best[pos] = {{"layer_src", std::get<1>(key)}, {"layer_dst", std::get<2>(key)}, {"fixed_rate", fixed}};
        }
        b.tables.push_back(std::move(bt));
        summary["back_patch_best"] = best;

        std::map<std::tuple<std::string, bool, int, int>, std::pair<long, long>> enrich;
        for (const auto& line : read_jsonl(paths.enrichment())) {
            const auto& iv = line.at("intervention");
            auto& cell = enrich[{iv.at("partition").get<std::string>(), iv.at("model_generated").get<bool>(),
                                 line.at("hop_count").get<int>(), iv.at("revealed").get<int>()}];
            ++cell.first;
            cell.second += iv.at("correct").get<bool>();
        }
        CsvTable et{"interventions/enrichment", {"partition", "facts", "hop_count", "revealed", "n", "accuracy"}, {}};
        for (const auto& [key, c] : enrich)
            et.rows.push_back({std::get<0>(key), std::get<1>(key) ? "model_generated" : "ground_truth", std::to_string(std::get<2>(key)),
                               std::to_string(std::get<3>(key)), std::to_string(c.first),
                               fmt(static_cast<double>(c.second) / static_cast<double>(c.first))});
        b.tables.push_back(std::move(et));

        const auto shortcut = nlohmann::json::parse(read_file(paths.shortcut()));
        CsvTable st{"interventions/shortcut", {"hop_count", "count"}, {}};
        for (const auto& [k, n] : shortcut.at("by_hop_count").items()) st.rows.push_back({k, std::to_string(n.get<long>())});
        st.rows.push_back({"total", std::to_string(shortcut.at("count").get<long>())});
        b.tables.push_back(std::move(st));
        summary["shortcut_count"] = shortcut.at("count");
        summary["enrichment_skipped"] = shortcut.at("enrichment_notices").size();
    }

    // Probe controls.
    {
        const auto c = nlohmann::json::parse(read_file(paths.probe_controls()));
        CsvTable t{"probe/controls", {"control", "value"}, {}};
        long filler = 0;
        for (const auto& u : c.at("unpatched_target")) filler += u.at("gen_is_filler").get<bool>();
        t.rows.push_back({"unpatched_generates_filler", std::to_string(filler) + "/" + std::to_string(c.at("unpatched_target").size())});
        t.rows.push_back({"zero_vector_decoding_fraction", fmt(c.at("zero_vector").at("decoding_fraction").get<double>())});
        t.rows.push_back({"last_layer_agreement", fmt(c.at("last_layer_consistency").at("agreement").get<double>())});
        b.tables.push_back(std::move(t));
        CsvTable lt{"probe/logit_lens", {"hop_count", "layer", "answer_top1_at_last", "bridge_top1_at_subject"}, {}};
        for (const auto& e : c.at("logit_lens")) {
            const auto a = e.at("answer_top1_at_last").get<std::vector<double>>();
            const auto br = e.at("bridge_top1_at_subject").get<std::vector<double>>();
            for (std::size_t l = 0; l < a.size(); ++l)
                lt.rows.push_back({std::to_string(e.at("hop_count").get<int>()), std::to_string(l), fmt(a[l]), fmt(br[l])});
        }
        b.tables.push_back(std::move(lt));
    }

    ojson meta;
    ojson config = cfg.to_json();
    config.erase("output_dir");
    config.erase("workers");
    meta["config"] = config;
    b.documents.emplace_back("summary.json", summary.dump(2) + "\n");

    std::error_code ec;
    fs::remove_all(paths.report_dir(), ec);
    const std::vector<std::string> upstream{"../data/dataset.json",           "../model/model.lrc",
                                            "../model/history.csv",           "../model/train_summary.json",
                                            "../eval/evaluations.jsonl",      "../eval/partition.json",
                                            "../probe/traces.jsonl",          "../probe/controls.json",
                                            "../similarity/similarity.json",  "../interventions/knockout.jsonl",
                                            "../interventions/backpatch.jsonl", "../interventions/enrichment.jsonl",
                                            "../interventions/shortcut.json"};
    render_report(b, paths.report_dir(), meta, upstream);
}

// ---------------------------------------------------------------- driver

namespace {

// The config slice each stage's output depends on.
ojson stage_config(const ExperimentConfig& cfg, Stage s) {
    const ojson all = cfg.to_json();
    ojson j;
    j["seed"] = cfg.seed;
    switch (s) {
        case Stage::gen: j["graph"] = all["graph"]; break;
        case Stage::train:
            j["model"] = all["model"];
            j["train"] = all["train"];
            break;
        case Stage::partition: break;
        case Stage::probe: j["probe"] = all["probe"]; break;
        case Stage::similarity: j["similarity"] = all["similarity"]; break;
        case Stage::interventions:
            j["interventions"] = all["interventions"];
            j["probe"] = all["probe"];
            break;
        case Stage::report:
            j = all;
            j.erase("output_dir");
            j.erase("workers");
            break;
    }
    return j;
}

std::vector<fs::path> stage_inputs(const RunPaths& p, Stage s) {
    switch (s) {
        case Stage::gen: return {};
        case Stage::train: return {p.dataset()};
        case Stage::partition:
        case Stage::probe: return {p.dataset(), p.checkpoint()};
        case Stage::similarity:
        case Stage::interventions: return {p.dataset(), p.checkpoint(), p.evaluations()};
        case Stage::report:
            return {p.dataset(),     p.checkpoint(),     p.history(),    p.train_summary(), p.evaluations(),
                    p.traces(),      p.probe_controls(), p.similarity(), p.knockout(),      p.back_patch(),
                    p.enrichment(),  p.shortcut()};
    }
    return {};
}

std::vector<fs::path> stage_outputs(const RunPaths& p, Stage s) {
    switch (s) {
        case Stage::gen: return {p.dataset()};
        case Stage::train: return {p.checkpoint(), p.history(), p.train_summary()};
        case Stage::partition: return {p.evaluations(), p.partition()};
        case Stage::probe: return {p.traces(), p.probe_controls()};
        case Stage::similarity: return {p.similarity()};
        case Stage::interventions: return {p.knockout(), p.back_patch(), p.enrichment(), p.shortcut()};
        case Stage::report: return {p.manifest()};
    }
    return {};
}

std::string stage_fingerprint(const ExperimentConfig& cfg, const RunPaths& paths, Stage s) {
    std::string text = stage_config(cfg, s).dump();
    for (const auto& in : stage_inputs(paths, s)) {
        text += '\n';
        text += sha256_hex(read_file(in));
    }
    return sha256_hex(text);
}

bool stage_is_current(const RunPaths& paths, Stage s, const std::string& fingerprint) {
    for (const auto& out : stage_outputs(paths, s))
        if (!fs::exists(out)) return false;
    if (!fs::exists(paths.stamp(s))) return false;
    try {
        const auto j = nlohmann::json::parse(read_file(paths.stamp(s)));
        return j.value("fingerprint", "") == fingerprint;
    } catch (const std::exception&) {
        return false;
    }
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& config, const PipelineOptions& opts) {
    ExperimentConfig cfg = config;
    cfg.finalize();
    cfg.validate();
    const RunPaths paths(cfg.output_dir);
    write_file(paths.config(), cfg.to_json().dump(2) + "\n");

    PipelineResult result;
    ojson timing = ojson::object();
    for (Stage s : kAllStages) {
        if (opts.only && *opts.only != s) continue;
        StageOutcome outcome;
        outcome.stage = s;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const std::string fp = stage_fingerprint(cfg, paths, s);
            if (opts.resume && stage_is_current(paths, s, fp)) {
                outcome.skipped = true;
            } else {
                if (opts.log) *opts.log << "[" << to_string(s) << "]\n";
                switch (s) {
                    case Stage::gen: stage_gen(cfg, paths); break;
                    case Stage::train: stage_train(cfg, paths, opts.log); break;
                    case Stage::partition: stage_partition(cfg, paths); break;
                    case Stage::probe: stage_probe(cfg, paths); break;
                    case Stage::similarity: stage_similarity(cfg, paths); break;
                    case Stage::interventions: stage_interventions(cfg, paths); break;
                    case Stage::report: stage_report(cfg, paths); break;
                }
                // The stamp keeps the cost of producing the artifacts, so a
                // resumed run can still report what a full run takes.
                const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                write_file(paths.stamp(s),
                           ojson{{"stage", to_string(s)}, {"fingerprint", fp}, {"seconds", took}}.dump(2) + "\n");
            }
        } catch (const StageError&) {
            throw;
        } catch (const Error& e) {
            throw StageError(s, e);
        } catch (const nlohmann::json::exception& e) {
            throw StageError(s, ParseError(e.what()));
        } catch (const std::exception& e) {
            throw StageError(s, Error(e.what()));
        }
        outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (opts.log && outcome.skipped) *opts.log << "[" << to_string(s) << "] up to date, skipped\n";
        timing[to_string(s)] = {{"seconds", outcome.seconds}, {"skipped", outcome.skipped}};
        write_file(paths.timing(), timing.dump(2) + "\n");
        result.stages.push_back(outcome);
    }
    if (fs::exists(paths.train_summary()))
        result.training_reached_target =
            nlohmann::json::parse(read_file(paths.train_summary())).value("reached_target", false);
    if (fs::exists(paths.manifest())) result.manifest = paths.manifest();
    return result;
}

}  // namespace hoplab

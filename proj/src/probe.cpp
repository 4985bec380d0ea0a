// SPDX-License-Identifier: Apache-2.0
#include "hoplab/probe.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"
#include "hoplab/parallel.hpp"
#include "hoplab/rng.hpp"

namespace hoplab {

namespace {
// Stream id for the filler ordering ("probe" in ASCII).
constexpr std::uint64_t kFillerStream = 0x70726f6265ULL;
}  // namespace

const char* to_string(Position p) { return p == Position::subject ? "subject" : "last"; }

Position position_from_string(const std::string& s) {
    if (s == "subject" || s == "subject_token") return Position::subject;
    if (s == "last" || s == "last_token") return Position::last;
    throw ConfigError("unknown position '" + s + "' (expected subject or last)");
}

int position_index(const Verbalization& v, Position p) {
    return p == Position::subject ? v.subject_pos : v.answer_pos;
}

void ProbeSpec::validate(const ModelConfig& cfg) const {
    if (repeats < 1) throw ConfigError("probe repeats must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("probe max_new_tokens must be >= 1");
    if (positions.empty()) throw ConfigError("probe needs at least one position");
    if (prompt_family != 0) throw ConfigError("unknown target prompt family " + std::to_string(prompt_family));
    if (source_variant < 0 || source_variant > 1) throw ConfigError("source_variant must be 0 or 1");
    for (int l : layers)
        if (l < 0 || l >= cfg.layers) throw ConfigError("probe layer " + std::to_string(l) + " outside [0, L)");
    if (target_layer >= cfg.layers) throw ConfigError("target_layer outside [0, L)");
    if (8 + max_new_tokens > cfg.max_seq_len) throw ConfigError("probe generation does not fit max_seq_len");
}

std::vector<int> ProbeSpec::resolved_layers(const ModelConfig& cfg) const {
    std::vector<int> out;
    if (layers.empty()) {
        out.resize(static_cast<std::size_t>(cfg.layers));
        std::iota(out.begin(), out.end(), 0);
    } else {
        std::set<int> s(layers.begin(), layers.end());
        out.assign(s.begin(), s.end());
    }
    return out;
}

bool record_order_less(const GenerationRecord& a, const GenerationRecord& b) {
    return std::tie(a.instance_id, a.position, a.layer, a.repeat) < std::tie(b.instance_id, b.position, b.layer, b.repeat);
}

namespace {

std::vector<int> filler_order(const KnowledgeGraph& kg) {
    std::vector<int> order(kg.entities().size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(kg.seed(), kFillerStream));
    rng.shuffle(order);
    return order;
}

TargetPrompt target_prompt_with(const KnowledgeGraph& kg, int filler) {
    const Vocabulary& v = kg.vocab();
    const TokenId e = v.entity_token(filler);
    const TokenId rid = v.relation_token(KnowledgeGraph::kIdentityRelation);
    TargetPrompt t;
    t.tokens = {Vocabulary::kQuery, e, rid, Vocabulary::kAnswer, e, Vocabulary::kQuery, Vocabulary::kPlaceholder, rid,
                Vocabulary::kAnswer};
    t.placeholder = static_cast<int>(t.tokens.size()) - 3;
    t.filler = filler;
    return t;
}

RunPlan injection_plan(const ProbeSpec& spec, int layer, int placeholder, const std::vector<float>& hidden) {
    RunPlan plan;
    const int inject = spec.target_layer < 0 ? layer : spec.target_layer;
    plan.patches.push_back({{HookKind::resid_pre, inject, placeholder}, hidden});
    return plan;
}

GenerationRecord make_record(const MultiHopInstance& inst, const Vocabulary& vocab, Position position, int layer,
                             int repeat, TokenSeq generated) {
    GenerationRecord r;
    r.instance_id = inst.id;
    r.hop_count = inst.hop_count;
    r.position = position;
    r.layer = layer;
    r.repeat = repeat;
    r.decoded_hops = decode_entities(generated, inst, vocab);
    r.gen_tokens = std::move(generated);
    return r;
}

}  // namespace

TargetPrompt build_target_prompt(const KnowledgeGraph& kg, int repeat) {
    if (repeat < 0) throw IndexError("negative repeat index");
    if (kg.relations().empty() || !kg.relations().front().is_identity)
        throw PreconditionError("target prompt needs the identity relation");
    const auto order = filler_order(kg);
    return target_prompt_with(kg, order[static_cast<std::size_t>(repeat) % order.size()]);
}

std::vector<int> decode_entities(const TokenSeq& generated, const MultiHopInstance& instance, const Vocabulary& vocab) {
    std::vector<int> hops;
    for (std::size_t j = 0; j < instance.chain.size(); ++j) {
        const TokenId t = vocab.entity_token(instance.chain[j]);
        if (std::find(generated.begin(), generated.end(), t) != generated.end()) hops.push_back(static_cast<int>(j));
    }
    return hops;
}

std::vector<int> decode_entities_text(const std::string& text, const std::vector<std::string>& surface_forms) {
    auto lower = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return s;
    };
    const std::string hay = lower(text);
    std::vector<int> hops;
    for (std::size_t j = 0; j < surface_forms.size(); ++j) {
        if (surface_forms[j].empty()) continue;
        if (hay.find(lower(surface_forms[j])) != std::string::npos) hops.push_back(static_cast<int>(j));
    }
    return hops;
}

GenerationRecord patchscope_vector(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                                   Position position, int layer, int repeat, const std::vector<float>& hidden,
                                   const ProbeSpec& spec) {
    if (layer < 0 || layer >= model.config().layers) throw PlanError("probe layer out of range");
    const TargetPrompt target = build_target_prompt(kg, repeat);
    const RunPlan plan = injection_plan(spec, layer, target.placeholder, hidden);
    TokenSeq gen = model.generate(target.tokens, spec.max_new_tokens, plan);
    return make_record(instance, kg.vocab(), position, layer, repeat, std::move(gen));
}

GenerationRecord patchscope_once(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                                 Position position, int layer, int repeat, const ProbeSpec& spec) {
    const Verbalization& v = instance.verbalization(spec.source_variant);
    const HookPoint point{HookKind::resid_post, layer, position_index(v, position)};
    RunPlan capture;
    capture.captures.push_back(point);
    const RunTrace trace = model.forward(v.tokens, capture);
    return patchscope_vector(model, kg, instance, position, layer, repeat, trace.at(point), spec);
}

TokenSeq unpatched_target_generation(const Model& model, const KnowledgeGraph& kg, int repeat, int max_new_tokens) {
    return model.generate(build_target_prompt(kg, repeat).tokens, max_new_tokens);
}

std::vector<GenerationRecord> run_probe(const Model& model, const KnowledgeGraph& kg,
                                        const std::vector<MultiHopInstance>& instances, const ProbeSpec& spec) {
    spec.validate(model.config());
    const std::vector<int> layers = spec.resolved_layers(model.config());
    std::vector<Position> positions = spec.positions;
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());

    const auto order = filler_order(kg);
    std::vector<TargetPrompt> targets;
    for (int r = 0; r < spec.repeats; ++r)
        targets.push_back(target_prompt_with(kg, order[static_cast<std::size_t>(r) % order.size()]));

    std::vector<std::vector<GenerationRecord>> per_instance(instances.size());
    parallel_for(instances.size(), spec.workers, [&](std::size_t i) {
        const MultiHopInstance& inst = instances[i];
        const Verbalization& v = inst.verbalization(spec.source_variant);
        RunPlan capture;
        for (Position p : positions)
            for (int l : layers) capture.captures.push_back({HookKind::resid_post, l, position_index(v, p)});
        const RunTrace source = model.forward(v.tokens, capture);

        std::vector<TokenSeq> prompts;
        std::vector<RunPlan> plans;
        for (Position p : positions)
            for (int l : layers)
                for (int r = 0; r < spec.repeats; ++r) {
                    const auto& t = targets[static_cast<std::size_t>(r)];
                    prompts.push_back(t.tokens);
                    plans.push_back(injection_plan(spec, l, t.placeholder,
                                                   source.at({HookKind::resid_post, l, position_index(v, p)})));
                }
        auto gens = model.generate_batch(prompts, spec.max_new_tokens, plans);

        auto& out = per_instance[i];
        std::size_t g = 0;
        for (Position p : positions)
            for (int l : layers)
                for (int r = 0; r < spec.repeats; ++r) out.push_back(make_record(inst, kg.vocab(), p, l, r, std::move(gens[g++])));
    });

    std::vector<GenerationRecord> records;
    for (auto& v : per_instance)
        for (auto& r : v) records.push_back(std::move(r));
    std::stable_sort(records.begin(), records.end(), record_order_less);
    return records;
}

// ---------------------------------------------------------------------------
// Trace files

std::string record_to_json_line(const GenerationRecord& r) {
    nlohmann::ordered_json j;
    j["instance_id"] = r.instance_id;
    j["hop_count"] = r.hop_count;
    j["position"] = to_string(r.position);
    j["layer"] = r.layer;
    j["repeat"] = r.repeat;
    if (r.gen_text) j["gen_text"] = *r.gen_text;
    if (!r.gen_text || !r.gen_tokens.empty()) j["gen_tokens"] = r.gen_tokens;
    j["decoded_hops"] = r.decoded_hops;
    if (r.similarity)
        j["similarity"] = *r.similarity;
    else
        j["similarity"] = nullptr;
    j["kept"] = r.kept;
    for (const auto& [k, v] : r.extras.items()) j[k] = v;
    return j.dump();
}

namespace {

const std::set<std::string> kKnownFields{"instance_id", "hop_count",    "position",   "layer", "repeat",
                                         "gen_tokens",  "gen_text",     "decoded_hops", "similarity", "kept"};

}  // namespace

GenerationRecord record_from_json_line(const std::string& line, long line_number) {
    const std::string where = "line " + std::to_string(line_number);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(where + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ParseError(where + ": record is not a JSON object");
    auto need = [&](const char* name) -> const nlohmann::json& {
        if (!j.contains(name)) throw ParseError(where + ": missing field '" + std::string(name) + "'");
        return j.at(name);
    };
    auto bad = [&](const char* name, const char* expect) {
        return ParseError(where + ": field '" + std::string(name) + "' must be " + expect);
    };
    auto integer = [&](const char* name, long lo) {
        const auto& v = need(name);
        if (!v.is_number_integer() || v.get<long>() < lo) throw bad(name, lo > 0 ? "a positive integer" : "a non-negative integer");
        return static_cast<int>(v.get<long>());
    };

    GenerationRecord r;
    const auto& id = need("instance_id");
    if (!id.is_string()) throw bad("instance_id", "a string");
    r.instance_id = id.get<std::string>();
    r.hop_count = integer("hop_count", 1);
    const auto& pos = need("position");
    if (!pos.is_string()) throw bad("position", "\"subject\" or \"last\"");
    try {
        r.position = position_from_string(pos.get<std::string>());
    } catch (const ConfigError&) {
        throw bad("position", "\"subject\" or \"last\"");
    }
    r.layer = integer("layer", 0);
    r.repeat = integer("repeat", 0);

    const bool has_tokens = j.contains("gen_tokens");
    const bool has_text = j.contains("gen_text");
    if (!has_tokens && !has_text) throw ParseError(where + ": missing field 'gen_tokens' or 'gen_text'");
    if (has_tokens) {
        const auto& t = j.at("gen_tokens");
        if (!t.is_array()) throw bad("gen_tokens", "an array of token ids");
        for (const auto& x : t) {
            if (!x.is_number_integer()) throw bad("gen_tokens", "an array of token ids");
            r.gen_tokens.push_back(x.get<TokenId>());
        }
    }
    if (has_text) {
        if (!j.at("gen_text").is_string()) throw bad("gen_text", "a string");
        r.gen_text = j.at("gen_text").get<std::string>();
    }

    const auto& hops = need("decoded_hops");
    if (!hops.is_array()) throw bad("decoded_hops", "an array of hop indices");
    for (const auto& x : hops) {
        if (!x.is_number_integer()) throw bad("decoded_hops", "an array of hop indices");
        const long h = x.get<long>();
        if (h < 0 || h > r.hop_count) throw bad("decoded_hops", "hop indices within [0, hop_count]");
        r.decoded_hops.push_back(static_cast<int>(h));
    }
    std::sort(r.decoded_hops.begin(), r.decoded_hops.end());
    r.decoded_hops.erase(std::unique(r.decoded_hops.begin(), r.decoded_hops.end()), r.decoded_hops.end());

    if (j.contains("similarity") && !j.at("similarity").is_null()) {
        if (!j.at("similarity").is_number()) throw bad("similarity", "a number or null");
        r.similarity = j.at("similarity").get<double>();
    }
    if (j.contains("kept")) {
        if (!j.at("kept").is_boolean()) throw bad("kept", "a boolean");
        r.kept = j.at("kept").get<bool>();
    }
    for (const auto& [k, v] : j.items())
        if (!kKnownFields.count(k)) r.extras[k] = v;
    return r;
}

std::vector<GenerationRecord> parse_traces(const std::string& text) {
    std::vector<GenerationRecord> out;
    std::istringstream in(text);
    std::string line;
    long n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        out.push_back(record_from_json_line(line, n));
    }
    return out;
}

void write_traces(const std::vector<GenerationRecord>& records, const std::filesystem::path& path) {
    std::string text;
    for (const auto& r : records) {
        text += record_to_json_line(r);
        text += '\n';
    }
    write_file(path, text);
}

std::vector<GenerationRecord> read_traces(const std::filesystem::path& path) { return parse_traces(read_file(path)); }

}  // namespace hoplab

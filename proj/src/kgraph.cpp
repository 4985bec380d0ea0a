// SPDX-License-Identifier: Apache-2.0
#include "hoplab/kgraph.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"
#include "hoplab/rng.hpp"

namespace hoplab {

using nlohmann::json;

TokenId Vocabulary::entity_token(int entity) const {
    if (entity < 0 || entity >= entity_count_) throw LookupError("unknown entity id " + std::to_string(entity));
    return kReservedCount + relation_count_ + entity;
}

TokenId Vocabulary::relation_token(int relation) const {
    if (relation < 0 || relation >= relation_count_)
        throw LookupError("unknown relation id " + std::to_string(relation));
    return kReservedCount + relation;
}

bool Vocabulary::is_entity_token(TokenId t) const {
    return t >= kReservedCount + relation_count_ && t < size();
}

int Vocabulary::entity_of_token(TokenId t) const {
    return is_entity_token(t) ? t - kReservedCount - relation_count_ : -1;
}

std::string Vocabulary::token_name(TokenId t) const {
    switch (t) {
        case kQuery: return "[Q]";
        case kQueryReversed: return "[Q2]";
        case kAnswer: return "[A]";
        case kPlaceholder: return "x";
        default: break;
    }
    if (t >= kReservedCount && t < kReservedCount + relation_count_) return "R" + std::to_string(t - kReservedCount);
    if (is_entity_token(t)) return "E" + std::to_string(entity_of_token(t));
    return "<" + std::to_string(t) + ">";
}

void GraphConfig::validate() const {
    if (entity_count < 2) throw ConfigError("entity_count must be >= 2");
    if (relation_count < 2) throw ConfigError("relation_count must be >= 2 (identity plus at least one relation)");
    if (hop_counts.empty()) throw ConfigError("hop_counts must not be empty");
    for (int k : hop_counts)
        if (k < 1) throw ConfigError("hop counts must be >= 1");
    if (instances_per_hop < 1) throw ConfigError("instances_per_hop must be >= 1");
    if (!(train_2hop_fraction >= 0.0 && train_2hop_fraction <= 1.0))
        throw ConfigError("train_2hop_fraction must lie in [0, 1]");
    if (verbalization_variants < 1 || verbalization_variants > 2)
        throw ConfigError("verbalization_variants must be 1 or 2");
}

KnowledgeGraph::KnowledgeGraph(std::vector<Entity> entities, std::vector<Relation> relations, std::uint64_t seed)
    : entities_(std::move(entities)),
      relations_(std::move(relations)),
      seed_(seed),
      vocab_(static_cast<int>(entities_.size()), static_cast<int>(relations_.size())) {}

const Entity& KnowledgeGraph::entity(int id) const {
    if (id < 0 || id >= static_cast<int>(entities_.size())) throw LookupError("unknown entity id " + std::to_string(id));
    return entities_[static_cast<std::size_t>(id)];
}

const Relation& KnowledgeGraph::relation(int id) const {
    if (id < 0 || id >= static_cast<int>(relations_.size()))
        throw LookupError("unknown relation id " + std::to_string(id));
    return relations_[static_cast<std::size_t>(id)];
}

const char* to_string(SplitTag tag) { return tag == SplitTag::train ? "train" : "held_out"; }

SplitTag split_tag_from_string(const std::string& s) {
    if (s == "train") return SplitTag::train;
    if (s == "held_out") return SplitTag::held_out;
    throw ParseError("unknown split tag '" + s + "'");
}

const Verbalization& MultiHopInstance::verbalization(int variant) const {
    if (variant < 0 || variant >= static_cast<int>(verbalizations.size()))
        throw IndexError("verbalization variant " + std::to_string(variant) + " out of range for " + id);
    return verbalizations[static_cast<std::size_t>(variant)];
}

KnowledgeGraph generate_graph(const GraphConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 0));
    std::vector<Entity> entities;
    entities.reserve(static_cast<std::size_t>(cfg.entity_count));
    const Vocabulary vocab(cfg.entity_count, cfg.relation_count);
    for (int e = 0; e < cfg.entity_count; ++e) entities.push_back({e, vocab.entity_token(e)});

    std::vector<Relation> relations;
    for (int r = 0; r < cfg.relation_count; ++r) {
        Relation rel;
        rel.id = r;
        rel.mapping.resize(static_cast<std::size_t>(cfg.entity_count));
        for (int e = 0; e < cfg.entity_count; ++e) rel.mapping[static_cast<std::size_t>(e)] = e;
        rel.is_identity = (r == KnowledgeGraph::kIdentityRelation);
        if (!rel.is_identity) rng.shuffle(rel.mapping);
        relations.push_back(std::move(rel));
    }
    return KnowledgeGraph(std::move(entities), std::move(relations), cfg.seed);
}

int apply_relation(const KnowledgeGraph& kg, int entity, int relation) {
    const Relation& r = kg.relation(relation);
    kg.entity(entity);
    return r.mapping[static_cast<std::size_t>(entity)];
}

std::vector<int> compose_chain(const KnowledgeGraph& kg, int subject, const std::vector<int>& relations) {
    if (relations.empty()) throw IndexError("compose_chain needs at least one relation");
    std::vector<int> chain{subject};
    kg.entity(subject);
    for (int r : relations) chain.push_back(apply_relation(kg, chain.back(), r));
    return chain;
}

Verbalization verbalize(const KnowledgeGraph& kg, const MultiHopInstance& instance, int variant) {
    const Vocabulary& v = kg.vocab();
    const int k = static_cast<int>(instance.relations.size());
    Verbalization out;
    if (variant == 0) {
        out.tokens.push_back(Vocabulary::kQuery);
        out.subject_pos = 1;
        out.tokens.push_back(v.entity_token(instance.subject));
        for (int r : instance.relations) out.tokens.push_back(v.relation_token(r));
    } else if (variant == 1) {
        out.tokens.push_back(Vocabulary::kQueryReversed);
        for (int i = k - 1; i >= 0; --i) out.tokens.push_back(v.relation_token(instance.relations[static_cast<std::size_t>(i)]));
        out.subject_pos = k + 1;
        out.tokens.push_back(v.entity_token(instance.subject));
    } else {
        throw IndexError("verbalization variant " + std::to_string(variant) + " out of range");
    }
    out.tokens.push_back(Vocabulary::kAnswer);
    out.answer_pos = static_cast<int>(out.tokens.size()) - 1;
    return out;
}

namespace {

std::string make_instance_id(int hop_count, int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "h%d-%05d", hop_count, index);
    return buf;
}

void attach_verbalizations(const KnowledgeGraph& kg, MultiHopInstance& inst, int variants) {
    inst.verbalizations.clear();
    for (int v = 0; v < variants; ++v) inst.verbalizations.push_back(verbalize(kg, inst, v));
}

}  // namespace

std::vector<MultiHopInstance> sample_instances(const KnowledgeGraph& kg, int hop_count, int n, std::uint64_t seed,
                                               const SamplingOptions& opts) {
    if (n < 1) throw SamplingError("sample size must be >= 1");
    if (hop_count < 1) throw SamplingError("hop_count must be >= 1");
    const auto entity_count = static_cast<long double>(kg.entities().size());
    const int usable_relations = static_cast<int>(kg.relations().size()) - 1;  // identity excluded
    if (usable_relations < 1) throw SamplingError("graph has no non-identity relation");
    long double total = entity_count;
    for (int i = 0; i < hop_count; ++i) total *= usable_relations;
    if (static_cast<long double>(n) > total)
        throw SamplingError("requested " + std::to_string(n) + " instances but only " +
                            std::to_string(static_cast<long long>(total)) + " distinct combinations exist");

    Rng rng(seed);
    Rng split_rng(derive_seed(seed, 1));

    // Combination c encodes (subject, relation digits) in mixed radix; non-identity
    // relation ids are 1..usable_relations.
    auto decode = [&](std::uint64_t c, int& subject, std::vector<int>& rels) {
        rels.assign(static_cast<std::size_t>(hop_count), 0);
        for (int i = hop_count - 1; i >= 0; --i) {
            rels[static_cast<std::size_t>(i)] = 1 + static_cast<int>(c % static_cast<std::uint64_t>(usable_relations));
            c /= static_cast<std::uint64_t>(usable_relations);
        }
        subject = static_cast<int>(c);
    };

    std::vector<std::uint64_t> picked;
    picked.reserve(static_cast<std::size_t>(n));
    const bool dense = total <= 4.0L * n && total <= 5e6L;
    if (dense) {
        std::vector<std::uint64_t> all(static_cast<std::size_t>(total));
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        // partial Fisher-Yates
        for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
            const std::size_t j = i + rng.uniform_index(all.size() - i);
            std::swap(all[i], all[j]);
            picked.push_back(all[i]);
        }
    } else {
        std::set<std::vector<int>> seen;
        while (static_cast<int>(picked.size()) < n) {
            std::vector<int> key;
            key.push_back(static_cast<int>(rng.uniform_index(kg.entities().size())));
            for (int i = 0; i < hop_count; ++i)
                key.push_back(1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(usable_relations))));
            if (!seen.insert(key).second) continue;
            std::uint64_t c = static_cast<std::uint64_t>(key[0]);
            for (int i = 0; i < hop_count; ++i)
                c = c * static_cast<std::uint64_t>(usable_relations) + static_cast<std::uint64_t>(key[static_cast<std::size_t>(i) + 1] - 1);
            picked.push_back(c);
        }
    }

    std::vector<MultiHopInstance> out;
    out.reserve(picked.size());
    for (std::size_t idx = 0; idx < picked.size(); ++idx) {
        MultiHopInstance inst;
        inst.id = make_instance_id(hop_count, static_cast<int>(idx));
        inst.hop_count = hop_count;
        decode(picked[idx], inst.subject, inst.relations);
        inst.chain = compose_chain(kg, inst.subject, inst.relations);
        if (hop_count == 1)
            inst.split = SplitTag::train;
        else if (hop_count == 2)
            inst.split = split_rng.bernoulli(opts.train_2hop_fraction) ? SplitTag::train : SplitTag::held_out;
        else
            inst.split = SplitTag::held_out;
        attach_verbalizations(kg, inst, opts.verbalization_variants);
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<MultiHopInstance> single_hop_instances(const KnowledgeGraph& kg, const MultiHopInstance& instance) {
    std::vector<MultiHopInstance> out;
    const int variants = std::max<int>(1, static_cast<int>(instance.verbalizations.size()));
    for (int i = 0; i < instance.hop_count; ++i) {
        MultiHopInstance s;
        s.id = instance.id + "/hop" + std::to_string(i);
        s.hop_count = 1;
        s.subject = instance.chain[static_cast<std::size_t>(i)];
        s.relations = {instance.relations[static_cast<std::size_t>(i)]};
        s.chain = {instance.chain[static_cast<std::size_t>(i)], instance.chain[static_cast<std::size_t>(i) + 1]};
        s.split = instance.split;
        s.hop_index = i;
        attach_verbalizations(kg, s, variants);
        out.push_back(std::move(s));
    }
    return out;
}

void validate_instance(const KnowledgeGraph& kg, const MultiHopInstance& inst) {
    if (inst.hop_count < 1 || static_cast<int>(inst.relations.size()) != inst.hop_count ||
        static_cast<int>(inst.chain.size()) != inst.hop_count + 1)
        throw LookupError("instance " + inst.id + " has inconsistent hop count");
    if (inst.chain.front() != inst.subject) throw LookupError("instance " + inst.id + ": chain does not start at subject");
    for (int i = 0; i < inst.hop_count; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (apply_relation(kg, inst.chain[ui], inst.relations[ui]) != inst.chain[ui + 1])
            throw LookupError("instance " + inst.id + ": hop " + std::to_string(i) + " does not follow the graph");
    }
    if (inst.verbalizations.empty()) throw LookupError("instance " + inst.id + " has no verbalization");
}

Dataset generate_dataset(const GraphConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.graph = generate_graph(cfg);
    SamplingOptions opts{cfg.train_2hop_fraction, cfg.verbalization_variants};
    for (int k : cfg.hop_counts) {
        auto part = sample_instances(ds.graph, k, cfg.instances_per_hop, derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(k)), opts);
        for (auto& inst : part) ds.instances.push_back(std::move(inst));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Serialization. One entity/relation/instance per line so parse errors can
// name a line.

namespace {

json config_to_json(const GraphConfig& c) {
    return json{{"entity_count", c.entity_count},
                {"relation_count", c.relation_count},
                {"hop_counts", c.hop_counts},
                {"instances_per_hop", c.instances_per_hop},
                {"train_2hop_fraction", c.train_2hop_fraction},
                {"verbalization_variants", c.verbalization_variants},
                {"seed", c.seed}};
}

template <typename T>
T field(const json& obj, const char* name, const std::string& where) {
    if (!obj.is_object() || !obj.contains(name)) throw ParseError(where + ": missing field '" + name + "'");
    try {
        return obj.at(name).get<T>();
    } catch (const json::exception& e) {
        throw ParseError(where + ": bad field '" + name + "': " + e.what());
    }
}

GraphConfig config_from_json(const json& j) {
    GraphConfig c;
    const std::string w = "config";
    c.entity_count = field<int>(j, "entity_count", w);
    c.relation_count = field<int>(j, "relation_count", w);
    c.hop_counts = field<std::vector<int>>(j, "hop_counts", w);
    c.instances_per_hop = field<int>(j, "instances_per_hop", w);
    c.train_2hop_fraction = field<double>(j, "train_2hop_fraction", w);
    c.verbalization_variants = field<int>(j, "verbalization_variants", w);
    c.seed = field<std::uint64_t>(j, "seed", w);
    return c;
}

std::size_t line_of_offset(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

}  // namespace

std::string dataset_to_json(const Dataset& ds) {
    std::ostringstream os;
    os << "{\n\"config\": " << config_to_json(ds.config).dump() << ",\n\"entities\": [";
    const auto& ents = ds.graph.entities();
    for (std::size_t i = 0; i < ents.size(); ++i)
        os << (i ? ",\n" : "\n") << json{{"id", ents[i].id}, {"token", ents[i].token}}.dump();
    os << "\n],\n\"relations\": [";
    const auto& rels = ds.graph.relations();
    for (std::size_t i = 0; i < rels.size(); ++i)
        os << (i ? ",\n" : "\n")
           << json{{"id", rels[i].id}, {"is_identity", rels[i].is_identity}, {"mapping", rels[i].mapping}}.dump();
    os << "\n],\n\"instances\": [";
    for (std::size_t i = 0; i < ds.instances.size(); ++i) {
        const auto& in = ds.instances[i];
        json j{{"id", in.id},
               {"k", in.hop_count},
               {"subject", in.subject},
               {"relations", in.relations},
               {"chain", in.chain},
               {"split_tag", to_string(in.split)},
               {"variants", in.verbalizations.size()}};
        os << (i ? ",\n" : "\n") << j.dump();
    }
    os << "\n]\n}\n";
    return os.str();
}

Dataset dataset_from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError("dataset: line " + std::to_string(line_of_offset(text, e.byte)) + ": " + e.what());
    }
    // Line numbers for element i of each array follow the writer's layout; they
    // are best-effort for hand-edited files.
    Dataset ds;
    ds.config = config_from_json(root.contains("config") ? root["config"] : json());
    try {
        ds.config.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("dataset config invalid: ") + e.what());
    }
    if (!root.contains("entities") || !root["entities"].is_array()) throw ParseError("dataset: missing 'entities' array");
    if (!root.contains("relations") || !root["relations"].is_array()) throw ParseError("dataset: missing 'relations' array");
    if (!root.contains("instances") || !root["instances"].is_array()) throw ParseError("dataset: missing 'instances' array");

    std::vector<Entity> entities;
    for (std::size_t i = 0; i < root["entities"].size(); ++i) {
        const std::string w = "entities[" + std::to_string(i) + "]";
        entities.push_back({field<int>(root["entities"][i], "id", w), field<TokenId>(root["entities"][i], "token", w)});
    }
    const int ne = static_cast<int>(entities.size());
    std::vector<Relation> relations;
    for (std::size_t i = 0; i < root["relations"].size(); ++i) {
        const std::string w = "relations[" + std::to_string(i) + "]";
        Relation r;
        r.id = field<int>(root["relations"][i], "id", w);
        r.is_identity = field<bool>(root["relations"][i], "is_identity", w);
        r.mapping = field<std::vector<int>>(root["relations"][i], "mapping", w);
        if (static_cast<int>(r.mapping.size()) != ne) throw ParseError(w + ": mapping length does not match entity count");
        std::vector<int> sorted = r.mapping;
        std::sort(sorted.begin(), sorted.end());
        for (int e = 0; e < ne; ++e)
            if (sorted[static_cast<std::size_t>(e)] != e) throw ParseError(w + ": mapping is not a permutation");
        relations.push_back(std::move(r));
    }
    if (ne != ds.config.entity_count || static_cast<int>(relations.size()) != ds.config.relation_count)
        throw ParseError("dataset: entity/relation counts disagree with config");
    const Vocabulary vocab(ne, static_cast<int>(relations.size()));
    for (int e = 0; e < ne; ++e)
        if (entities[static_cast<std::size_t>(e)].id != e || entities[static_cast<std::size_t>(e)].token != vocab.entity_token(e))
            throw ParseError("entities[" + std::to_string(e) + "]: id/token mapping is not the canonical bijection");
    for (int r = 0; r < static_cast<int>(relations.size()); ++r) {
        const auto& rel = relations[static_cast<std::size_t>(r)];
        if (rel.id != r || rel.is_identity != (r == KnowledgeGraph::kIdentityRelation))
            throw ParseError("relations[" + std::to_string(r) + "]: unexpected id or identity flag");
    }
    ds.graph = KnowledgeGraph(std::move(entities), std::move(relations), ds.config.seed);

    for (std::size_t i = 0; i < root["instances"].size(); ++i) {
        const json& j = root["instances"][i];
        const std::string w = "instances[" + std::to_string(i) + "]";
        MultiHopInstance in;
        in.id = field<std::string>(j, "id", w);
        in.hop_count = field<int>(j, "k", w);
        in.subject = field<int>(j, "subject", w);
        in.relations = field<std::vector<int>>(j, "relations", w);
        in.chain = field<std::vector<int>>(j, "chain", w);
        in.split = split_tag_from_string(field<std::string>(j, "split_tag", w));
        const int variants = field<int>(j, "variants", w);
        if (variants < 1 || variants > 2) throw ParseError(w + ": variant count out of range");
        try {
            for (int v = 0; v < variants; ++v) in.verbalizations.push_back(verbalize(ds.graph, in, v));
            validate_instance(ds.graph, in);
        } catch (const DataError& e) {
            throw ParseError(w + ": " + e.what());
        }
        ds.instances.push_back(std::move(in));
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) { write_file(path, dataset_to_json(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return dataset_from_json(read_file(path)); }

}  // namespace hoplab

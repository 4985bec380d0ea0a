// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hoplab {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Token layout: four reserved tokens, then one token per relation, then one
// token per entity.
class Vocabulary {
  public:
    static constexpr TokenId kQuery = 0;         // [Q]
    static constexpr TokenId kQueryReversed = 1;  // [Q2]
    static constexpr TokenId kAnswer = 2;         // [A]
    static constexpr TokenId kPlaceholder = 3;    // x
    static constexpr TokenId kReservedCount = 4;

    Vocabulary() = default;
    Vocabulary(int entity_count, int relation_count)
        : entity_count_(entity_count), relation_count_(relation_count) {}

    int size() const { return kReservedCount + relation_count_ + entity_count_; }
    int entity_count() const { return entity_count_; }
    int relation_count() const { return relation_count_; }

    TokenId entity_token(int entity) const;
    TokenId relation_token(int relation) const;
    bool is_entity_token(TokenId t) const;
    // -1 when the token is not an entity.
    int entity_of_token(TokenId t) const;

    std::string token_name(TokenId t) const;

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

  private:
    int entity_count_ = 0;
    int relation_count_ = 0;
};

struct Entity {
    int id = 0;
    TokenId token = 0;
    friend bool operator==(const Entity&, const Entity&) = default;
};

struct Relation {
    int id = 0;
    std::vector<int> mapping;  // permutation of entity ids
    bool is_identity = false;
    friend bool operator==(const Relation&, const Relation&) = default;
};

struct GraphConfig {
    int entity_count = 1000;
    int relation_count = 13;  // includes the identity relation
    std::vector<int> hop_counts{2, 3, 4};
    int instances_per_hop = 500;
    double train_2hop_fraction = 0.3;
    int verbalization_variants = 2;
    std::uint64_t seed = 1;

    // Throws ConfigError.
    void validate() const;
    friend bool operator==(const GraphConfig&, const GraphConfig&) = default;
};

class KnowledgeGraph {
  public:
    // Relation 0 is always the identity.
    static constexpr int kIdentityRelation = 0;

    KnowledgeGraph() = default;
    KnowledgeGraph(std::vector<Entity> entities, std::vector<Relation> relations, std::uint64_t seed);

    const std::vector<Entity>& entities() const { return entities_; }
    const std::vector<Relation>& relations() const { return relations_; }
    std::uint64_t seed() const { return seed_; }
    const Vocabulary& vocab() const { return vocab_; }

    const Entity& entity(int id) const;
    const Relation& relation(int id) const;

    friend bool operator==(const KnowledgeGraph&, const KnowledgeGraph&) = default;

  private:
    std::vector<Entity> entities_;
    std::vector<Relation> relations_;
    std::uint64_t seed_ = 0;
    Vocabulary vocab_;
};

enum class SplitTag { train, held_out };

const char* to_string(SplitTag tag);
SplitTag split_tag_from_string(const std::string& s);

struct Verbalization {
    TokenSeq tokens;        // ends with [A]
    int subject_pos = 0;    // position of e_0
    int answer_pos = 0;     // position of [A] (the last token)
    friend bool operator==(const Verbalization&, const Verbalization&) = default;
};

struct MultiHopInstance {
    std::string id;
    int hop_count = 0;
    int subject = 0;
    std::vector<int> relations;  // r_0 .. r_{k-1}
    std::vector<int> chain;      // e_0 .. e_k
    std::vector<Verbalization> verbalizations;
    SplitTag split = SplitTag::held_out;
    int hop_index = -1;  // for single-hop decompositions: index of the hop in the parent chain

    int answer() const { return chain.back(); }
    const Verbalization& verbalization(int variant = 0) const;
    friend bool operator==(const MultiHopInstance&, const MultiHopInstance&) = default;
};

struct Dataset {
    GraphConfig config;
    KnowledgeGraph graph;
    std::vector<MultiHopInstance> instances;
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

KnowledgeGraph generate_graph(const GraphConfig& cfg);

int apply_relation(const KnowledgeGraph& kg, int entity, int relation);

std::vector<int> compose_chain(const KnowledgeGraph& kg, int subject, const std::vector<int>& relations);

struct SamplingOptions {
    double train_2hop_fraction = 0.3;
    int verbalization_variants = 2;
};

std::vector<MultiHopInstance> sample_instances(const KnowledgeGraph& kg, int hop_count, int n,
                                               std::uint64_t seed, const SamplingOptions& opts = {});

// Variant 0: [Q] e0 r0 .. r_{k-1} [A]; variant 1: [Q2] r_{k-1} .. r0 e0 [A].
Verbalization verbalize(const KnowledgeGraph& kg, const MultiHopInstance& instance, int variant);

// The k one-hop facts (e_i, r_i, e_{i+1}) making up an instance.
std::vector<MultiHopInstance> single_hop_instances(const KnowledgeGraph& kg, const MultiHopInstance& instance);

// Throws LookupError when a chain does not follow the graph.
void validate_instance(const KnowledgeGraph& kg, const MultiHopInstance& instance);

Dataset generate_dataset(const GraphConfig& cfg);

std::string dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const std::string& text);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace hoplab

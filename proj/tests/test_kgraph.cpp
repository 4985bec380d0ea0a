// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"
#include "hoplab/kgraph.hpp"

using namespace hoplab;

namespace {

// Three entities; relation 1 maps 0->2, 1->0, 2->1.
KnowledgeGraph tiny_graph() {
    Vocabulary v(3, 2);
    std::vector<Entity> ents;
    for (int e = 0; e < 3; ++e) ents.push_back({e, v.entity_token(e)});
    std::vector<Relation> rels{{0, {0, 1, 2}, true}, {1, {2, 0, 1}, false}};
    return KnowledgeGraph(ents, rels, 0);
}

GraphConfig small_config() {
    GraphConfig c;
    c.entity_count = 30;
    c.relation_count = 5;
    c.instances_per_hop = 20;
    c.seed = 11;
    return c;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("hoplab_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST(Kgraph, SmallGraphStructure) {
    GraphConfig c;
    c.entity_count = 4;
    c.relation_count = 2;
    c.seed = 7;
    const KnowledgeGraph kg = generate_graph(c);
    ASSERT_EQ(kg.entities().size(), 4u);
    ASSERT_EQ(kg.relations().size(), 2u);
    int identities = 0;
    for (const auto& r : kg.relations()) identities += r.is_identity;
    EXPECT_EQ(identities, 1);
    EXPECT_TRUE(kg.relation(KnowledgeGraph::kIdentityRelation).is_identity);
}

TEST(Kgraph, IdentityRelationFixesEveryEntity) {
    const KnowledgeGraph kg = generate_graph(small_config());
    for (const auto& e : kg.entities()) EXPECT_EQ(apply_relation(kg, e.id, KnowledgeGraph::kIdentityRelation), e.id);
}

TEST(Kgraph, EntityTokenMappingIsBijective) {
    const KnowledgeGraph kg = generate_graph(small_config());
    std::set<TokenId> tokens;
    for (const auto& e : kg.entities()) {
        EXPECT_EQ(kg.vocab().entity_of_token(e.token), e.id);
        tokens.insert(e.token);
    }
    EXPECT_EQ(tokens.size(), kg.entities().size());
}

TEST(Kgraph, RelationsArePermutations) {
    const KnowledgeGraph kg = generate_graph(small_config());
    for (const auto& r : kg.relations()) {
        std::vector<int> hits(kg.entities().size(), 0);
        for (const auto& e : kg.entities()) ++hits[static_cast<std::size_t>(apply_relation(kg, e.id, r.id))];
        for (int h : hits) EXPECT_EQ(h, 1) << "relation " << r.id;
    }
}

TEST(Kgraph, GenerationIsByteStable) {
    const Dataset a = generate_dataset(small_config());
    const Dataset b = generate_dataset(small_config());
    EXPECT_EQ(dataset_to_json(a), dataset_to_json(b));
    GraphConfig other = small_config();
    other.seed = 12;
    EXPECT_NE(dataset_to_json(a), dataset_to_json(generate_dataset(other)));
}

TEST(Kgraph, ApplyRelationTableLookup) {
    const KnowledgeGraph kg = tiny_graph();
    EXPECT_EQ(apply_relation(kg, 1, 1), 0);
    EXPECT_EQ(apply_relation(kg, 2, 0), 2);
    EXPECT_THROW(apply_relation(kg, 3, 1), LookupError);
    EXPECT_THROW(apply_relation(kg, 0, 2), LookupError);
}

TEST(Kgraph, ComposeChain) {
    const KnowledgeGraph kg = tiny_graph();
    EXPECT_EQ(compose_chain(kg, 1, {0, 0}), (std::vector<int>{1, 1, 1}));
    // Applying the table twice from 0: 0 -> 2 -> 1.
    EXPECT_EQ(compose_chain(kg, 0, {1, 1}), (std::vector<int>{0, 2, 1}));
    EXPECT_THROW(compose_chain(kg, 0, {}), IndexError);
}

TEST(Kgraph, ComposeChainMatchesIteratedLookup) {
    const KnowledgeGraph kg = generate_graph(small_config());
    const std::vector<int> rels{3, 1, 4, 1, 2};
    for (const auto& e : kg.entities()) {
        std::vector<int> oracle{e.id};
        for (int r : rels) oracle.push_back(kg.relation(r).mapping[static_cast<std::size_t>(oracle.back())]);
        EXPECT_EQ(compose_chain(kg, e.id, rels), oracle);
    }
}

TEST(Kgraph, ExhaustiveOneHopSample) {
    const KnowledgeGraph kg = tiny_graph();
    const auto insts = sample_instances(kg, 1, 3 * 1, 5);
    std::set<std::pair<int, int>> facts;
    for (const auto& i : insts) {
        EXPECT_NE(i.relations[0], KnowledgeGraph::kIdentityRelation);
        facts.insert({i.subject, i.relations[0]});
    }
    EXPECT_EQ(facts.size(), 3u);
    EXPECT_THROW(sample_instances(kg, 1, 4, 5), SamplingError);
}

TEST(Kgraph, SampledChainsRevalidate) {
    const KnowledgeGraph kg = generate_graph(small_config());
    for (int k : {1, 2, 3, 4}) {
        const auto insts = sample_instances(kg, k, 25, 99);
        EXPECT_EQ(insts, sample_instances(kg, k, 25, 99));
        for (const auto& i : insts) {
            EXPECT_EQ(i.hop_count, k);
            EXPECT_EQ(i.chain, compose_chain(kg, i.subject, i.relations));
            EXPECT_NO_THROW(validate_instance(kg, i));
            for (int r : i.relations) EXPECT_NE(r, KnowledgeGraph::kIdentityRelation);
            if (k == 1) EXPECT_EQ(i.split, SplitTag::train);
            if (k > 2) EXPECT_EQ(i.split, SplitTag::held_out);
        }
    }
}

TEST(Kgraph, TrainSplitOnlyForTwoHop) {
    SamplingOptions all_train;
    all_train.train_2hop_fraction = 1.0;
    const KnowledgeGraph kg = generate_graph(small_config());
    for (const auto& i : sample_instances(kg, 2, 20, 3, all_train)) EXPECT_EQ(i.split, SplitTag::train);
    for (const auto& i : sample_instances(kg, 3, 20, 3, all_train)) EXPECT_EQ(i.split, SplitTag::held_out);
}

TEST(Kgraph, Verbalizations) {
    const KnowledgeGraph kg = generate_graph(small_config());
    const Vocabulary& v = kg.vocab();
    const auto one = sample_instances(kg, 1, 1, 1).front();
    const Verbalization v0 = verbalize(kg, one, 0);
    EXPECT_EQ(v0.tokens, (TokenSeq{Vocabulary::kQuery, v.entity_token(one.subject), v.relation_token(one.relations[0]),
                                   Vocabulary::kAnswer}));
    EXPECT_EQ(v0.subject_pos, 1);
    EXPECT_EQ(v0.answer_pos, 3);

    const auto four = sample_instances(kg, 4, 1, 1).front();
    EXPECT_EQ(verbalize(kg, four, 0).tokens.size(), 7u);
    const Verbalization v1 = verbalize(kg, four, 1);
    ASSERT_EQ(v1.tokens.size(), 7u);
    EXPECT_EQ(v1.tokens[0], Vocabulary::kQueryReversed);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(v1.tokens[static_cast<std::size_t>(1 + i)], v.relation_token(four.relations[static_cast<std::size_t>(3 - i)]));
    EXPECT_EQ(v1.subject_pos, 5);
    EXPECT_EQ(v1.tokens[5], v.entity_token(four.subject));
    EXPECT_EQ(v1.answer_pos, 6);
    EXPECT_THROW(verbalize(kg, four, 2), IndexError);
}

TEST(Kgraph, SingleHopDecomposition) {
    const KnowledgeGraph kg = generate_graph(small_config());
    for (const auto& inst : sample_instances(kg, 3, 10, 4)) {
        const auto singles = single_hop_instances(kg, inst);
        ASSERT_EQ(singles.size(), 3u);
        for (int i = 0; i < 3; ++i) {
            const auto& s = singles[static_cast<std::size_t>(i)];
            EXPECT_EQ(s.hop_count, 1);
            EXPECT_EQ(s.hop_index, i);
            EXPECT_EQ(s.subject, inst.chain[static_cast<std::size_t>(i)]);
            EXPECT_EQ(s.relations[0], inst.relations[static_cast<std::size_t>(i)]);
            EXPECT_EQ(s.answer(), inst.chain[static_cast<std::size_t>(i) + 1]);
        }
    }
    const auto one = sample_instances(kg, 1, 1, 4).front();
    const auto singles = single_hop_instances(kg, one);
    ASSERT_EQ(singles.size(), 1u);
    EXPECT_EQ(singles[0].chain, one.chain);
    EXPECT_EQ(singles[0].verbalizations, one.verbalizations);
}

TEST(Kgraph, DatasetRoundTrip) {
    const Dataset ds = generate_dataset(small_config());
    const auto dir = temp_dir("kgraph_rt");
    save_dataset(ds, dir / "d.json");
    const Dataset back = load_dataset(dir / "d.json");
    EXPECT_EQ(back, ds);
    save_dataset(back, dir / "e.json");
    EXPECT_EQ(read_file(dir / "d.json"), read_file(dir / "e.json"));
}

TEST(Kgraph, TruncatedDatasetIsAParseError) {
    const std::string text = dataset_to_json(generate_dataset(small_config()));
    EXPECT_THROW(dataset_from_json(text.substr(0, text.size() / 2)), ParseError);
}

TEST(Kgraph, TamperedChainIsRejected) {
    const Dataset ds = generate_dataset(small_config());
    std::string text = dataset_to_json(ds);
    auto j = nlohmann::json::parse(text);
    auto& chain = j["instances"][0]["chain"];
    chain[1] = (chain[1].get<int>() + 1) % ds.config.entity_count;
    EXPECT_THROW(dataset_from_json(j.dump()), DataError);
}

TEST(Kgraph, InvalidConfig) {
    GraphConfig c = small_config();
    c.entity_count = 0;
    EXPECT_THROW(generate_graph(c), ConfigError);
    c = small_config();
    c.train_2hop_fraction = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
}

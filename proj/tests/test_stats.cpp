// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "hoplab/rng.hpp"
#include "hoplab/stats.hpp"

using namespace hoplab;

namespace {

GenerationRecord rec(const std::string& id, int k, Position pos, int layer, std::vector<int> hops, bool kept = true) {
    GenerationRecord r;
    r.instance_id = id;
    r.hop_count = k;
    r.position = pos;
    r.layer = layer;
    r.gen_tokens = {1};
    r.decoded_hops = std::move(hops);
    r.kept = kept;
    return r;
}

int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo + 1))); }

std::vector<GenerationRecord> random_records(Rng& rng, int layers) {
    std::vector<GenerationRecord> rs;
    const int n_inst = pick(rng, 1, 6);
    for (int i = 0; i < n_inst; ++i) {
        const int k = pick(rng, 2, 3);
        const std::string id = "k" + std::to_string(k) + "-" + std::to_string(i);
        for (Position p : {Position::subject, Position::last})
            for (int l = 0; l < layers; ++l)
                for (int rep = 0; rep < 2; ++rep) {
                    std::vector<int> hops;
                    for (int j = 0; j <= k; ++j)
                        if (pick(rng, 0, 5) == 0) hops.push_back(j);
                    auto r = rec(id, k, p, l, hops, pick(rng, 0, 3) != 0);
                    r.repeat = rep;
                    rs.push_back(r);
                }
    }
    return rs;
}

bool in_cell(const GenerationRecord& r, const CellKey& key) {
    return r.kept && r.position == key.position && (key.hop_count == 0 || r.hop_count == key.hop_count);
}

bool decodes(const GenerationRecord& r, int j) {
    return std::find(r.decoded_hops.begin(), r.decoded_hops.end(), j) != r.decoded_hops.end();
}

// Straight double loop over instances and their records.
struct BruteCell {
    long total = 0;
    long decoders = 0;
    long records = 0;
    long decoding_records = 0;
    std::map<std::string, int> earliest;
};

BruteCell brute(const std::vector<GenerationRecord>& rs, const CellKey& key) {
    BruteCell out;
    std::set<std::string> ids;
    for (const auto& r : rs)
        if (in_cell(r, key)) ids.insert(r.instance_id);
    for (const auto& id : ids) {
        ++out.total;
        int best = -1;
        for (const auto& r : rs) {
            if (r.instance_id != id || !in_cell(r, key)) continue;
            ++out.records;
            if (!decodes(r, key.hop_index)) continue;
            ++out.decoding_records;
            if (best < 0 || r.layer < best) best = r.layer;
        }
        if (best >= 0) {
            ++out.decoders;
            out.earliest[id] = best;
        }
    }
    return out;
}

EmergenceStat cell(int k, int j, Position p, double earliest) {
    EmergenceStat s;
    s.hop_count = k;
    s.hop_index = j;
    s.position = p;
    s.decoding_rate = 0.5;
    s.mean_earliest_layer = earliest;
    s.n_decoded = 1;
    s.n_total = 2;
    return s;
}

}  // namespace

TEST(Stats, OutcomeTruthTable) {
    EXPECT_EQ(categorize(true, {true, true}), Outcome::correct);
    EXPECT_EQ(categorize(false, {true, true}), Outcome::incorrect);
    EXPECT_EQ(categorize(false, {true, false}), Outcome::missing);
    EXPECT_EQ(categorize(false, {false, false, false}), Outcome::missing);
    EXPECT_EQ(categorize(true, {false, true}), Outcome::shortcut);
    for (Outcome o : kAllOutcomes) EXPECT_EQ(outcome_from_string(to_string(o)), o);
}

TEST(Stats, PartitionKeepsInputOrderAndEveryCategory) {
    std::vector<InstanceEvaluation> ev{{"x", 2, true, {true, true}}, {"y", 2, false, {true, false}},
                                       {"z", 3, true, {true, true, true}}};
    const Partition p = partition_dataset(ev);
    EXPECT_EQ(p.size(), 4u);
    EXPECT_EQ(p.at(Outcome::correct), (std::vector<std::string>{"x", "z"}));
    EXPECT_EQ(p.at(Outcome::missing), (std::vector<std::string>{"y"}));
    EXPECT_TRUE(p.at(Outcome::shortcut).empty());
    EXPECT_EQ(evaluations_from_jsonl(evaluations_to_jsonl(ev)), ev);
}

TEST(Stats, EvaluationUsesGreedyAnswers) {
    GraphConfig g;
    g.entity_count = 10;
    g.relation_count = 3;
    g.instances_per_hop = 4;
    const Dataset ds = generate_dataset(g);
    ModelConfig c;
    c.layers = 2;
    c.d_model = 8;
    c.heads = 2;
    c.d_ff = 16;
    c.vocab_size = ds.graph.vocab().size();
    c.max_seq_len = 8;
    const Model m(c);
    const auto ev = evaluate_instances(m, ds.graph, ds.instances, 2);
    ASSERT_EQ(ev.size(), ds.instances.size());
    for (std::size_t i = 0; i < ev.size(); ++i) {
        const auto& inst = ds.instances[i];
        EXPECT_EQ(ev[i].instance_id, inst.id);
        ASSERT_EQ(ev[i].single_hop_correct.size(), static_cast<std::size_t>(inst.hop_count));
        const TokenSeq out = m.generate(inst.verbalization(0).tokens, 1);
        EXPECT_EQ(ev[i].multi_hop_correct, out[0] == ds.graph.vocab().entity_token(inst.answer()));
        EXPECT_EQ(ev[i], evaluate_instance(m, ds.graph, inst));
    }
}

TEST(Stats, WorkedDecodingRate) {
    // Instance a decodes hop 1 at layer 2; b never does; c has no kept record.
    const std::vector<GenerationRecord> rs{
        rec("a", 2, Position::last, 0, {0}), rec("a", 2, Position::last, 2, {1, 2}), rec("a", 2, Position::last, 3, {1}),
        rec("b", 2, Position::last, 0, {2}), rec("c", 2, Position::last, 0, {1}, false)};
    const CellKey key{2, 1, Position::last};
    EXPECT_DOUBLE_EQ(decoding_rate(rs, key), 0.5);
    EXPECT_DOUBLE_EQ(decoding_rate(rs, key, RateMode::record_frequency), 0.5);
    EXPECT_EQ(earliest_layers(rs, key), (std::map<std::string, int>{{"a", 2}}));
    EXPECT_DOUBLE_EQ(*earliest_layer(rs, key), 2.0);
    const EmergenceStat s = emergence_cell(rs, key, 12);
    EXPECT_EQ(s.n_total, 2);
    EXPECT_EQ(s.n_decoded, 1);
    EXPECT_DOUBLE_EQ(s.mean_earliest_imputed, (2.0 + 12.0) / 2.0);
    EXPECT_THROW(decoding_rate(rs, {2, 1, Position::subject}), UndefinedStatisticError);
    EXPECT_FALSE(earliest_layer(rs, {2, 0, Position::subject}).has_value());
}

TEST(Stats, RandomizedAgainstBruteForce) {
    Rng rng(31);
    const int layers = 4;
    for (int trial = 0; trial < 300; ++trial) {
        const auto rs = random_records(rng, layers);
        for (int k : {0, 2, 3})
            for (int j = 0; j <= 3; ++j)
                for (Position p : {Position::subject, Position::last}) {
                    const CellKey key{k, j, p};
                    const BruteCell b = brute(rs, key);
                    if (b.total == 0) {
                        EXPECT_THROW(decoding_rate(rs, key), UndefinedStatisticError);
                        continue;
                    }
                    EXPECT_DOUBLE_EQ(decoding_rate(rs, key), static_cast<double>(b.decoders) / b.total);
                    if (b.records > 0)
                        EXPECT_DOUBLE_EQ(decoding_rate(rs, key, RateMode::record_frequency),
                                         static_cast<double>(b.decoding_records) / b.records);
                    EXPECT_EQ(earliest_layers(rs, key), b.earliest);
                    const auto mean = earliest_layer(rs, key);
                    ASSERT_EQ(mean.has_value(), b.decoders > 0);
                    if (mean) {
                        double s = 0.0;
                        for (const auto& [id, l] : b.earliest) s += l;
                        EXPECT_NEAR(*mean, s / static_cast<double>(b.decoders), 1e-12);
                        // Decoders alone cannot sit later than the imputed mean.
                        EXPECT_LE(*mean, emergence_cell(rs, key, layers).mean_earliest_imputed + 1e-12);
                    }
                }
    }
}

TEST(Stats, LayerDistributionAgainstBruteForce) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto rs = random_records(rng, 5);
        for (const auto& curve : layer_distribution(rs, Position::last, 5)) {
            const CellKey key{curve.hop_count, curve.hop_index, Position::last};
            std::set<std::string> ids;
            for (const auto& r : rs)
                if (in_cell(r, key)) ids.insert(r.instance_id);
            ASSERT_EQ(curve.n_instances, static_cast<long>(ids.size()));
            ASSERT_EQ(curve.values.size(), 5u);
            for (int l = 0; l < 5; ++l) {
                std::set<std::string> hit;
                for (const auto& r : rs)
                    if (in_cell(r, key) && r.layer == l && decodes(r, key.hop_index)) hit.insert(r.instance_id);
                EXPECT_DOUBLE_EQ(curve.values[static_cast<std::size_t>(l)],
                                 static_cast<double>(hit.size()) / static_cast<double>(ids.size()));
            }
        }
    }
}

TEST(Stats, EmergenceTableOrderAndCsvRoundTrip) {
    Rng rng(9);
    const auto rs = random_records(rng, 3);
    const auto table = emergence_table(rs, 3);
    for (std::size_t i = 1; i < table.size(); ++i) {
        const auto& a = table[i - 1];
        const auto& b = table[i];
        EXPECT_LT(std::tie(a.hop_count, a.position, a.hop_index), std::tie(b.hop_count, b.position, b.hop_index));
    }
    const auto back = parse_emergence_csv(emergence_table_csv(table));
    ASSERT_EQ(back.size(), table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        EXPECT_EQ(back[i].hop_count, table[i].hop_count);
        EXPECT_EQ(back[i].n_total, table[i].n_total);
        EXPECT_NEAR(back[i].decoding_rate, table[i].decoding_rate, 1e-5);
        EXPECT_EQ(back[i].mean_earliest_layer.has_value(), table[i].mean_earliest_layer.has_value());
    }
    EXPECT_THROW(parse_emergence_csv("wrong,header\n"), ParseError);
}

TEST(Stats, InversionIsStrict) {
    EXPECT_TRUE(inversion_test(5.0, 4.9).inverted);
    EXPECT_FALSE(inversion_test(5.0, 5.0).inverted);
    EXPECT_NEAR(inversion_test(3.0, 4.5).margin, -1.5, 1e-12);
}

TEST(Stats, PublishedEarliestLayerTable) {
    // Earliest-layer means under the raw setting: first bridge entity at the
    // subject against the final entity at the last token.
    struct Case {
        const char* name;
        int k;
        double bridge_subject;
        double answer_last;
        bool inverted;
    };
    const Case cases[] = {
        {"Llama3 4-hop", 4, 5.61, 4.24, true},  {"Llama3 3-hop", 3, 4.08, 4.64, false},
        {"Llama3 2-hop", 2, 4.61, 10.11, false}, {"GPT-J 2-hop", 2, 4.35, 8.38, false},
        {"GPT-J 3-hop", 3, 3.60, 5.05, false},   {"GPT-J 4-hop", 4, 5.37, 9.47, false},
    };
    for (const auto& c : cases) {
        const std::vector<EmergenceStat> table{cell(c.k, 1, Position::subject, c.bridge_subject),
                                               cell(c.k, c.k, Position::last, c.answer_last)};
        const InversionVerdict v = inversion_test(table, c.k);
        EXPECT_EQ(v.inverted, c.inverted) << c.name;
        EXPECT_NEAR(v.margin, c.bridge_subject - c.answer_last, 1e-12) << c.name;
    }
    const std::vector<EmergenceStat> only_bridge{cell(4, 1, Position::subject, 5.61)};
    EXPECT_THROW(inversion_test(only_bridge, 4), UndefinedStatisticError);
}

TEST(Stats, InstanceInversionAgainstBruteForce) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const auto rs = random_records(rng, 6);
        for (int k : {2, 3}) {
            const auto bridge = brute(rs, {k, 1, Position::subject}).earliest;
            const auto answer = brute(rs, {k, k, Position::last}).earliest;
            long n = 0, inv = 0;
            for (const auto& [id, lb] : bridge) {
                if (!answer.count(id)) continue;
                ++n;
                inv += answer.at(id) < lb;
            }
            const auto got = instance_inversion(rs, k);
            EXPECT_EQ(got.n_instances, n);
            EXPECT_EQ(got.n_inverted, inv);
        }
    }
}

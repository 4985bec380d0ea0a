// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "hoplab/interventions.hpp"

using namespace hoplab;

namespace {

struct Fixture {
    Dataset ds;
    Model model;
};

Fixture make_fixture() {
    GraphConfig g;
    g.entity_count = 12;
    g.relation_count = 4;
    g.instances_per_hop = 4;
    g.seed = 13;
    Dataset ds = generate_dataset(g);
    ModelConfig c;
    c.layers = 4;
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    c.vocab_size = ds.graph.vocab().size();
    c.max_seq_len = 16;
    c.seed = 17;
    c.init_std = 0.25;
    return {ds, Model(c)};
}

const MultiHopInstance& first_with(const Dataset& ds, int k) {
    for (const auto& i : ds.instances)
        if (i.hop_count == k) return i;
    throw std::runtime_error("no instance");
}

double answer_prob(const Model& m, const TokenSeq& tokens, int pos, TokenId answer, const RunPlan& plan = {}) {
    const auto tr = m.forward(tokens, plan);
    const auto logits = tr.logits_at(pos);
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
    return std::exp(static_cast<double>(logits[static_cast<std::size_t>(answer)]) - mx) / z;
}

}  // namespace

TEST(Interventions, EmptyKnockoutIsANoOp) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 3);
    const auto none = attention_knockout(f.model, f.ds.graph, inst, {}, 0, 4);
    EXPECT_EQ(none.baseline_prob, none.intervened_prob);
    EXPECT_FALSE(none.flipped);
    const auto empty_window = attention_knockout(f.model, f.ds.graph, inst, {1, 2}, 2, 2);
    EXPECT_EQ(empty_window.baseline_prob, empty_window.intervened_prob);
    const TokenId ans = f.ds.graph.vocab().entity_token(inst.answer());
    EXPECT_NEAR(none.baseline_prob, answer_prob(f.model, inst.verbalization(0).tokens, inst.verbalization(0).answer_pos, ans),
                1e-6);
}

TEST(Interventions, KnockoutMatchesAManualPlan) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 2);
    const auto& v = inst.verbalization(0);
    const auto r = attention_knockout(f.model, f.ds.graph, inst, {0, 1}, 1, 3);
    RunPlan plan;
    plan.knockouts = {{1, 3, {0, 1}, v.answer_pos}};
    const TokenId ans = f.ds.graph.vocab().entity_token(inst.answer());
    EXPECT_NEAR(r.intervened_prob, answer_prob(f.model, v.tokens, v.answer_pos, ans, plan), 1e-6);
    EXPECT_EQ(r.descriptor["kind"], "knockout");
    EXPECT_EQ(r.flipped, r.baseline_correct != r.intervened_correct);
}

TEST(Interventions, KnockoutRejectsBadSources) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 2);
    const int n = static_cast<int>(inst.verbalization(0).tokens.size());
    EXPECT_THROW(attention_knockout(f.model, f.ds.graph, inst, {n}, 0, 4), PlanError);
    std::vector<int> all(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    EXPECT_THROW(attention_knockout(f.model, f.ds.graph, inst, all, 0, 1), DegenerateAttentionError);
}

TEST(Interventions, BackPatchSameLayerReproducesBaseline) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 3);
    for (Position p : {Position::subject, Position::last})
        for (int l = 0; l < 4; ++l) {
            const auto r = back_patch(f.model, f.ds.graph, inst, p, l, l);
            EXPECT_EQ(r.baseline_prob, r.intervened_prob);
        }
    EXPECT_THROW(back_patch(f.model, f.ds.graph, inst, Position::last, 1, 2), PlanError);
    EXPECT_THROW(back_patch(f.model, f.ds.graph, inst, Position::last, 4, 0), PlanError);
}

TEST(Interventions, BackPatchMatchesManualOverwrite) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 2);
    const auto& v = inst.verbalization(0);
    const int pos = position_index(v, Position::last);
    RunPlan cap;
    cap.captures = {{HookKind::resid_post, 3, pos}};
    const auto src = f.model.forward(v.tokens, cap).at({HookKind::resid_post, 3, pos});
    RunPlan patch;
    patch.patches = {{{HookKind::resid_post, 0, pos}, src}};
    const TokenId ans = f.ds.graph.vocab().entity_token(inst.answer());
    const auto r = back_patch(f.model, f.ds.graph, inst, Position::last, 3, 0);
    EXPECT_NEAR(r.intervened_prob, answer_prob(f.model, v.tokens, v.answer_pos, ans, patch), 1e-6);
}

TEST(Interventions, SweepCoversEveryPairAndAgreesWithSingleCalls) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 4);
    const auto sweep = back_patch_sweep(f.model, f.ds.graph, inst, Position::subject);
    ASSERT_EQ(sweep.size(), 10u);
    for (const auto& r : sweep) {
        const int src = r.descriptor["layer_src"];
        const int dst = r.descriptor["layer_dst"];
        EXPECT_LE(dst, src);
        const auto single = back_patch(f.model, f.ds.graph, inst, Position::subject, src, dst);
        EXPECT_NEAR(r.intervened_prob, single.intervened_prob, 1e-6);
        EXPECT_EQ(r.baseline_prob, single.baseline_prob);
    }
}

TEST(Interventions, ModelIsUntouched) {
    const auto f = make_fixture();
    const auto before = f.model.checksum();
    const auto& inst = first_with(f.ds, 3);
    attention_knockout(f.model, f.ds.graph, inst, {1}, 0, 4);
    back_patch_sweep(f.model, f.ds.graph, inst, Position::last);
    context_enrichment_probe(f.model, f.ds.graph, inst, 1, true);
    EXPECT_EQ(f.model.checksum(), before);
}

TEST(Interventions, ShortcutCensus) {
    const std::vector<InstanceEvaluation> ev{{"a", 2, true, {false, true}}, {"b", 3, true, {true, true, true}},
                                             {"c", 3, true, {true, false, true}}, {"d", 2, false, {false, false}}};
    const auto c = shortcut_census(ev);
    EXPECT_EQ(c.count, 2);
    EXPECT_EQ(c.by_hop_count, (std::map<int, long>{{2, 1}, {3, 1}}));
    EXPECT_EQ(c.instance_ids, (std::vector<std::string>{"a", "c"}));
}

TEST(Interventions, EnrichedPromptLayout) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 2);
    const Vocabulary& v = f.ds.graph.vocab();
    EXPECT_EQ(enriched_prompt(f.model, f.ds.graph, inst, 0), inst.verbalization(0).tokens);
    TokenSeq expect{Vocabulary::kQuery, v.entity_token(inst.chain[0]), v.relation_token(inst.relations[0]),
                    Vocabulary::kAnswer, v.entity_token(inst.chain[1])};
    const auto& q = inst.verbalization(0).tokens;
    expect.insert(expect.end(), q.begin(), q.end());
    EXPECT_EQ(enriched_prompt(f.model, f.ds.graph, inst, 1), expect);
    EXPECT_THROW(enriched_prompt(f.model, f.ds.graph, inst, 2), IndexError);
    EXPECT_THROW(enriched_prompt(f.model, f.ds.graph, first_with(f.ds, 4), 3), LengthError);

    const TokenSeq own = enriched_prompt(f.model, f.ds.graph, inst, 1, true);
    const TokenSeq fact(own.begin(), own.begin() + 4);
    EXPECT_EQ(own[4], f.model.generate(fact, 1).front());
}

TEST(Interventions, EnrichmentProbeReadsTheAnswer) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 3);
    const auto r = context_enrichment_probe(f.model, f.ds.graph, inst, 1);
    EXPECT_EQ(r.prompt, enriched_prompt(f.model, f.ds.graph, inst, 1));
    EXPECT_EQ(r.predicted, f.model.generate(r.prompt, 1).front());
    EXPECT_EQ(r.correct, r.predicted == f.ds.graph.vocab().entity_token(inst.answer()));
    const auto j = nlohmann::json::parse(enrichment_to_json_line(r));
    EXPECT_EQ(j["intervention"]["revealed"], 1);
}

TEST(Interventions, EnrichedProbeRecords) {
    const auto f = make_fixture();
    const auto& inst = first_with(f.ds, 2);
    ProbeSpec spec;
    spec.repeats = 1;
    spec.layers = {0, 2};
    const auto recs = enriched_probe_records(f.model, f.ds.graph, inst, 1, spec);
    EXPECT_EQ(recs.size(), 2u * 2u);
    for (const auto& r : recs) EXPECT_EQ(r.instance_id, inst.id);
}

// SPDX-License-Identifier: Apache-2.0
#include "hoplab/interventions.hpp"

#include <algorithm>

#include "hoplab/errors.hpp"
#include "hoplab/numkit.hpp"

namespace hoplab {

namespace {

struct Readout {
    double prob = 0.0;
    bool correct = false;
};

Readout read_answer(const RunTrace& tr, int position, TokenId answer) {
    const auto logits = tr.logits_at(position);
    const std::vector<float> p = softmax<float>(logits);
    return {p[static_cast<std::size_t>(answer)], argmax<float>(logits) == answer};
}

InterventionResult make_result(const MultiHopInstance& inst, nlohmann::ordered_json descriptor, Readout base,
                               Readout after) {
    InterventionResult r;
    r.instance_id = inst.id;
    r.hop_count = inst.hop_count;
    r.descriptor = std::move(descriptor);
    r.baseline_prob = base.prob;
    r.intervened_prob = after.prob;
    r.baseline_correct = base.correct;
    r.intervened_correct = after.correct;
    r.flipped = base.correct != after.correct;
    return r;
}

}  // namespace

InterventionResult attention_knockout(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                                      const std::vector<int>& sources, int layer_begin, int layer_end) {
    const Verbalization& v = instance.verbalization(0);
    const int last = v.answer_pos;
    for (int s : sources)
        if (s < 0 || s > last) throw PlanError("knockout source " + std::to_string(s) + " does not precede the last token");
    const TokenId answer = kg.vocab().entity_token(instance.answer());
    const Readout base = read_answer(model.forward(v.tokens), last, answer);
    RunPlan plan;
    plan.knockouts.push_back({layer_begin, layer_end, sources, last});
    const Readout after = read_answer(model.forward(v.tokens, plan), last, answer);
    nlohmann::ordered_json d;
    d["kind"] = "knockout";
    d["sources"] = sources;
    d["target"] = last;
    d["layer_begin"] = layer_begin;
    d["layer_end"] = layer_end;
    return make_result(instance, std::move(d), base, after);
}

namespace {

RunPlan back_patch_plan(const RunTrace& base, int position, int layer_src, int layer_dst) {
    RunPlan plan;
    plan.patches.push_back({{HookKind::resid_post, layer_dst, position}, base.at({HookKind::resid_post, layer_src, position})});
    return plan;
}

nlohmann::ordered_json back_patch_descriptor(Position position, int src, int dst) {
    nlohmann::ordered_json d;
    d["kind"] = "back_patch";
    d["position"] = to_string(position);
    d["layer_src"] = src;
    d["layer_dst"] = dst;
    return d;
}

}  // namespace

InterventionResult back_patch(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                              Position position, int layer_src, int layer_dst) {
    const int L = model.config().layers;
    if (layer_src < 0 || layer_src >= L || layer_dst < 0 || layer_dst >= L) throw PlanError("back-patch layer out of range");
    if (layer_dst > layer_src) throw PlanError("back-patch destination must not be deeper than its source");
    const Verbalization& v = instance.verbalization(0);
    const int pos = position_index(v, position);
    const TokenId answer = kg.vocab().entity_token(instance.answer());
    RunPlan capture;
    capture.captures.push_back({HookKind::resid_post, layer_src, pos});
    const RunTrace base = model.forward(v.tokens, capture);
    const Readout b = read_answer(base, v.answer_pos, answer);
    const Readout a = read_answer(model.forward(v.tokens, back_patch_plan(base, pos, layer_src, layer_dst)), v.answer_pos, answer);
    return make_result(instance, back_patch_descriptor(position, layer_src, layer_dst), b, a);
}

std::vector<InterventionResult> back_patch_sweep(const Model& model, const KnowledgeGraph& kg,
                                                 const MultiHopInstance& instance, Position position) {
    const int L = model.config().layers;
    const Verbalization& v = instance.verbalization(0);
    const int pos = position_index(v, position);
    const TokenId answer = kg.vocab().entity_token(instance.answer());
    RunPlan capture;
    for (int l = 0; l < L; ++l) capture.captures.push_back({HookKind::resid_post, l, pos});
    const RunTrace base = model.forward(v.tokens, capture);
    const Readout b = read_answer(base, v.answer_pos, answer);

    std::vector<TokenSeq> rows;
    std::vector<RunPlan> plans;
    std::vector<std::pair<int, int>> pairs;
    for (int src = 0; src < L; ++src)
        for (int dst = 0; dst <= src; ++dst) {
            rows.push_back(v.tokens);
            plans.push_back(back_patch_plan(base, pos, src, dst));
            pairs.emplace_back(src, dst);
        }
    const auto traces = model.forward_batch(rows, plans);
    std::vector<InterventionResult> out;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        out.push_back(make_result(instance, back_patch_descriptor(position, pairs[i].first, pairs[i].second), b,
                                  read_answer(traces[i], v.answer_pos, answer)));
    return out;
}

ShortcutCensus shortcut_census(const std::vector<InstanceEvaluation>& evaluations) {
    ShortcutCensus c;
    for (const auto& e : evaluations) {
        if (categorize(e.multi_hop_correct, e.single_hop_correct) != Outcome::shortcut) continue;
        ++c.count;
        ++c.by_hop_count[e.hop_count];
        c.instance_ids.push_back(e.instance_id);
    }
    return c;
}

TokenSeq enriched_prompt(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance, int revealed,
                         bool model_generated) {
    if (revealed < 0 || revealed >= instance.hop_count)
        throw IndexError("revealed hops " + std::to_string(revealed) + " outside [0, " + std::to_string(instance.hop_count) + ")");
    const Vocabulary& vocab = kg.vocab();
    TokenSeq prompt;
    int entity = instance.chain[0];
    for (int i = 0; i < revealed; ++i) {
        const TokenSeq fact{Vocabulary::kQuery, vocab.entity_token(entity), vocab.relation_token(instance.relations[static_cast<std::size_t>(i)]),
                            Vocabulary::kAnswer};
        TokenId next;
        if (model_generated) {
            if (static_cast<int>(fact.size()) >= model.config().max_seq_len) throw LengthError("fact does not fit max_seq_len");
            next = model.generate(fact, 1).front();
            // A non-entity answer ends the chain of revealed facts.
            if (!vocab.is_entity_token(next)) {
                prompt.insert(prompt.end(), fact.begin(), fact.end());
                prompt.push_back(next);
                break;
            }
            entity = vocab.entity_of_token(next);
        } else {
            entity = instance.chain[static_cast<std::size_t>(i) + 1];
            next = vocab.entity_token(entity);
        }
        prompt.insert(prompt.end(), fact.begin(), fact.end());
        prompt.push_back(next);
    }
    const auto& q = instance.verbalization(0).tokens;
    prompt.insert(prompt.end(), q.begin(), q.end());
    if (static_cast<int>(prompt.size()) > model.config().max_seq_len)
        throw LengthError("enriched prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                          std::to_string(model.config().max_seq_len));
    return prompt;
}

EnrichmentResult context_enrichment_probe(const Model& model, const KnowledgeGraph& kg,
                                          const MultiHopInstance& instance, int revealed, bool model_generated) {
    EnrichmentResult r;
    r.instance_id = instance.id;
    r.hop_count = instance.hop_count;
    r.revealed = revealed;
    r.model_generated = model_generated;
    r.prompt = enriched_prompt(model, kg, instance, revealed, model_generated);
    const RunTrace tr = model.forward(r.prompt);
    const auto logits = tr.logits_at(tr.seq_len - 1);
    const TokenId answer = kg.vocab().entity_token(instance.answer());
    r.predicted = static_cast<TokenId>(argmax<float>(logits));
    r.correct = r.predicted == answer;
    r.answer_prob = softmax<float>(logits)[static_cast<std::size_t>(answer)];
    return r;
}

std::vector<GenerationRecord> enriched_probe_records(const Model& model, const KnowledgeGraph& kg,
                                                     const MultiHopInstance& instance, int revealed,
                                                     const ProbeSpec& spec) {
    const TokenSeq prompt = enriched_prompt(model, kg, instance, revealed);
    const Verbalization& q = instance.verbalization(0);
    const int offset = static_cast<int>(prompt.size() - q.tokens.size());
    MultiHopInstance shifted = instance;
    shifted.verbalizations = {Verbalization{prompt, q.subject_pos + offset, q.answer_pos + offset}};
    ProbeSpec s = spec;
    s.source_variant = 0;
    return run_probe(model, kg, {shifted}, s);
}

std::string intervention_to_json_line(const InterventionResult& r) {
    nlohmann::ordered_json j;
    j["instance_id"] = r.instance_id;
    j["hop_count"] = r.hop_count;
    nlohmann::ordered_json iv = r.descriptor;
    iv["baseline_prob"] = r.baseline_prob;
    iv["intervened_prob"] = r.intervened_prob;
    iv["baseline_correct"] = r.baseline_correct;
    iv["intervened_correct"] = r.intervened_correct;
    iv["flipped"] = r.flipped;
    j["intervention"] = std::move(iv);
    return j.dump();
}

std::string enrichment_to_json_line(const EnrichmentResult& r) {
    nlohmann::ordered_json j;
    j["instance_id"] = r.instance_id;
    j["hop_count"] = r.hop_count;
    nlohmann::ordered_json iv;
    iv["kind"] = "context_enrichment";
    iv["revealed"] = r.revealed;
    iv["model_generated"] = r.model_generated;
    iv["prompt"] = r.prompt;
    iv["predicted"] = r.predicted;
    iv["correct"] = r.correct;
    iv["answer_prob"] = r.answer_prob;
    j["intervention"] = std::move(iv);
    return j.dump();
}

}  // namespace hoplab

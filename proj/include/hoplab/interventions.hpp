// SPDX-License-Identifier: Apache-2.0
//
// Causal experiments on the trained model: attention knockout, back-patching,
// the shortcut census and context enrichment.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"
#include "hoplab/probe.hpp"
#include "hoplab/stats.hpp"

namespace hoplab {

struct InterventionResult {
    std::string instance_id;
    int hop_count = 0;
    nlohmann::ordered_json descriptor;  // kind plus its parameters
    double baseline_prob = 0.0;         // answer-token probability at [A]
    double intervened_prob = 0.0;
    bool baseline_correct = false;      // greedy token equals the answer
    bool intervened_correct = false;
    bool flipped = false;               // correctness changed
};

// Blocks attention from `sources` into the last token over layers
// [layer_begin, layer_end). Throws DegenerateAttentionError when every edge
// into the last token is blocked.
InterventionResult attention_knockout(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                                      const std::vector<int>& sources, int layer_begin, int layer_end);

// Runs the query, takes resid_post at (position, layer_src) and writes it over
// resid_post at (position, layer_dst) of a second run. Requires
// layer_dst <= layer_src; equal layers reproduce the baseline.
InterventionResult back_patch(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                              Position position, int layer_src, int layer_dst);

// All (src, dst) pairs with dst <= src, one batched pass per instance.
std::vector<InterventionResult> back_patch_sweep(const Model& model, const KnowledgeGraph& kg,
                                                 const MultiHopInstance& instance, Position position);

struct ShortcutCensus {
    long count = 0;
    std::map<int, long> by_hop_count;
    std::vector<std::string> instance_ids;
};

ShortcutCensus shortcut_census(const std::vector<InstanceEvaluation>& evaluations);

struct EnrichmentResult {
    std::string instance_id;
    int hop_count = 0;
    int revealed = 0;
    bool model_generated = false;
    TokenSeq prompt;
    TokenId predicted = 0;
    bool correct = false;
    double answer_prob = 0.0;
};

// Prepends `[Q] e_i r_i [A] e_{i+1}` for i < revealed before the multi-hop
// query. With model_generated the revealed entities are the model's own greedy
// answers to those facts instead of the true ones. Throws IndexError for
// revealed outside [0, k) and LengthError when the prompt does not fit.
TokenSeq enriched_prompt(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance, int revealed,
                         bool model_generated = false);
EnrichmentResult context_enrichment_probe(const Model& model, const KnowledgeGraph& kg,
                                          const MultiHopInstance& instance, int revealed, bool model_generated = false);

// Patch-probe records computed on the enriched prompt: the source run is the
// enriched prompt, positions refer to the embedded multi-hop query.
std::vector<GenerationRecord> enriched_probe_records(const Model& model, const KnowledgeGraph& kg,
                                                     const MultiHopInstance& instance, int revealed,
                                                     const ProbeSpec& spec);

std::string intervention_to_json_line(const InterventionResult& r);
std::string enrichment_to_json_line(const EnrichmentResult& r);

}  // namespace hoplab

// SPDX-License-Identifier: Apache-2.0
//
// Hidden-state decoding by patching: read the residual stream of a query at
// one (position, layer), write it over the placeholder of an identity prompt,
// and see which entities of the hop chain the model then produces.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"

namespace hoplab {

enum class Position { subject, last };

const char* to_string(Position p);
// Accepts "subject"/"last" (also "subject_token"/"last_token").
Position position_from_string(const std::string& s);

// Token index of the selected position inside a verbalization.
int position_index(const Verbalization& v, Position p);

struct ProbeSpec {
    std::vector<Position> positions{Position::subject, Position::last};
    std::vector<int> layers;  // empty means every layer
    int repeats = 3;
    int prompt_family = 0;    // only the few-shot identity family exists
    int max_new_tokens = 1;
    int source_variant = 0;   // verbalization fed to the source run
    // -1 keeps injection at the source layer; otherwise every hidden state is
    // injected at this fixed layer of the target run.
    int target_layer = -1;
    int workers = 1;

    // Throws ConfigError.
    void validate(const ModelConfig& cfg) const;
    std::vector<int> resolved_layers(const ModelConfig& cfg) const;
};

struct GenerationRecord {
    std::string instance_id;
    int hop_count = 0;
    Position position = Position::last;
    int layer = 0;
    int repeat = 0;
    TokenSeq gen_tokens;
    std::optional<std::string> gen_text;  // imported traces from text models
    std::vector<int> decoded_hops;        // sorted, unique
    std::optional<double> similarity;
    bool kept = true;
    nlohmann::json extras = nlohmann::json::object();  // unknown trace fields

    friend bool operator==(const GenerationRecord&, const GenerationRecord&) = default;
};

// Canonical record order: instance id, position, layer, repeat.
bool record_order_less(const GenerationRecord& a, const GenerationRecord& b);

struct TargetPrompt {
    TokenSeq tokens;
    int placeholder = 0;
    int filler = 0;  // entity id used in the demonstration
};

// [Q] e_a r_id [A] e_a [Q] x r_id [A]; the filler e_a is picked from a fixed
// seeded ordering of the entities, so different repeats use different fillers.
TargetPrompt build_target_prompt(const KnowledgeGraph& kg, int repeat);

// Hop indices j with chain[j]'s token among the generated tokens.
std::vector<int> decode_entities(const TokenSeq& generated, const MultiHopInstance& instance, const Vocabulary& vocab);

// Text generations: case-insensitive substring search for each hop's surface
// form; surface_forms[j] belongs to chain[j].
std::vector<int> decode_entities_text(const std::string& text, const std::vector<std::string>& surface_forms);

GenerationRecord patchscope_once(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                                 Position position, int layer, int repeat, const ProbeSpec& spec = {});

// Same call with an explicit vector instead of a captured one (controls such
// as the zero vector).
GenerationRecord patchscope_vector(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance,
                                   Position position, int layer, int repeat, const std::vector<float>& hidden,
                                   const ProbeSpec& spec = {});

// Target prompt with nothing patched in.
TokenSeq unpatched_target_generation(const Model& model, const KnowledgeGraph& kg, int repeat, int max_new_tokens = 1);

// One record per (instance, position, layer, repeat) in canonical order.
std::vector<GenerationRecord> run_probe(const Model& model, const KnowledgeGraph& kg,
                                        const std::vector<MultiHopInstance>& instances, const ProbeSpec& spec);

// JSON Lines trace files. Reading validates the schema and keeps unknown
// fields in `extras`; errors name the line and the field.
std::string record_to_json_line(const GenerationRecord& r);
GenerationRecord record_from_json_line(const std::string& line, long line_number = 0);
void write_traces(const std::vector<GenerationRecord>& records, const std::filesystem::path& path);
std::vector<GenerationRecord> read_traces(const std::filesystem::path& path);
std::vector<GenerationRecord> parse_traces(const std::string& text);

}  // namespace hoplab

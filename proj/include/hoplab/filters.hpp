// SPDX-License-Identifier: Apache-2.0
//
// Post-processing of probe records. Filters only ever clear `kept` flags, and
// global/local filters rank the records that are still kept on entry, so a
// layer filter followed by a global filter equals a global filter over the
// layer survivors.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"
#include "hoplab/probe.hpp"

namespace hoplab {

enum class FilterKind { raw, global, local, layer };

const char* to_string(FilterKind kind);

struct FilterConfig {
    FilterKind kind = FilterKind::raw;
    int k = 0;          // percentage, global/local only
    int min_layer = 0;  // layer only

    // Throws ConfigError. "raw", "gf90", "lf90", "layer4" and the long forms
    // "global:90", "local:90", "layer:4" are accepted.
    static FilterConfig parse(const std::string& text);
    std::string label() const;
    void validate() const;
    friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

// Mean of the final-layer residual vectors of a plain forward pass. Results
// are memoized per token sequence; not thread-safe.
class SequenceEmbedder {
  public:
    explicit SequenceEmbedder(const Model& model) : model_(model) {}
    const std::vector<double>& embed(const TokenSeq& tokens);

  private:
    const Model& model_;
    std::map<TokenSeq, std::vector<double>> cache_;
};

// Cosine of the two embeddings; -1 for an empty generation, 0 when either
// embedding is the zero vector.
double similarity_score(SequenceEmbedder& embedder, const TokenSeq& generation, const TokenSeq& query);

// Fills `similarity` of every record against its instance's variant-0 query.
// Records whose instance is unknown raise LookupError.
void score_records(const Model& model, const std::vector<MultiHopInstance>& instances,
                   std::vector<GenerationRecord>& records, int query_variant = 0);

// Clear kept on floor(k * N / 100) of the N currently kept records, lowest
// similarity first; among equal scores the record earlier in canonical order
// goes first. Throws PreconditionError on an unscored kept record.
void global_filter(std::vector<GenerationRecord>& records, int k);

// Per instance id, keep ceil((100 - k) * n_i / 100) of the n_i currently kept
// records (at least one), highest similarity first, same tie rule.
void local_filter(std::vector<GenerationRecord>& records, int k);

// Clear kept on every record with layer < min_layer.
void layer_filter(std::vector<GenerationRecord>& records, int min_layer);

void apply_filter(std::vector<GenerationRecord>& records, const FilterConfig& cfg);

// Copy with every kept flag reset to true.
std::vector<GenerationRecord> reset_kept(std::vector<GenerationRecord> records);

}  // namespace hoplab

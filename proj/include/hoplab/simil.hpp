// SPDX-License-Identifier: Apache-2.0
//
// Same-layer (and cross-layer) cosine comparisons between the hidden states of
// a multi-hop query and those of its one-hop facts.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"
#include "hoplab/probe.hpp"

namespace hoplab {

using LayerVectors = std::vector<std::vector<float>>;  // [layer][d]

// One vector per layer at (hook, position), from a single forward pass.
// Throws PlanError for attn_weights or an out-of-range position.
LayerVectors capture_hidden(const Model& model, const TokenSeq& tokens, HookKind hook, int position);

// Cosine in double precision. A zero vector yields 0 and sets *degenerate.
double cosine(std::span<const float> a, std::span<const float> b, bool* degenerate = nullptr);

struct SimilarityProfile {
    HookKind hook = HookKind::mlp_fc_in;
    Position position = Position::subject;
    int hop_index = 0;   // i: the one-hop fact (e_i, r_i, e_{i+1})
    int total_hops = 0;  // k
    std::vector<double> raw;
    std::vector<double> normalized;
    bool degenerate = false;  // a zero vector or a constant curve was met
};

enum class NormalizeMode { min_max, z_score };

struct NormalizedCurve {
    std::vector<double> values;
    bool degenerate = false;  // constant input
};

// min_max: (v - min) / (max - min), a constant curve maps to 0.5.
// z_score: (v - mean) / stddev, a constant curve maps to 0.
NormalizedCurve normalize_curve(const std::vector<double>& curve, NormalizeMode mode = NormalizeMode::min_max);

// Curve over layers between two per-layer captures.
std::vector<double> same_layer_curve(const LayerVectors& a, const LayerVectors& b, bool* degenerate = nullptr);
// M[a][b] = cosine(first[a], second[b]).
std::vector<std::vector<double>> cross_layer(const LayerVectors& first, const LayerVectors& second);

// Token position in the one-hop query paired with `position` of the multi-hop
// query: its subject for Position::subject, its [A] token otherwise.
int paired_position(const Verbalization& single, Position position);

SimilarityProfile pair_similarity(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& multi,
                                  int hop_index, HookKind hook, Position position,
                                  NormalizeMode mode = NormalizeMode::min_max);

std::vector<std::vector<double>> cross_layer_matrix(const Model& model, const KnowledgeGraph& kg,
                                                    const MultiHopInstance& multi, int hop_index, HookKind hook,
                                                    Position position);

struct GroupProfile {
    int hop_index = 0;
    int total_hops = 0;
    long size = 0;
    std::vector<double> mean_raw;
    std::vector<double> normalized;
    bool degenerate = false;
};

struct GroupResult {
    HookKind hook = HookKind::mlp_fc_in;
    Position position = Position::subject;
    std::vector<GroupProfile> groups;  // ordered by (total_hops, hop_index)
    std::vector<std::string> notices;
};

// Mean raw curve per (hop index, total hops) group over the instances, then
// normalized. An empty instance list gives no groups and a notice.
GroupResult group_curves(const Model& model, const KnowledgeGraph& kg, const std::vector<MultiHopInstance>& instances,
                         HookKind hook, Position position, NormalizeMode mode = NormalizeMode::min_max,
                         int workers = 1);

// Hidden-state dump: "HSD1", u32 version (1), u32 layer count, u32 width,
// then layer-major little-endian f32 rows.
void write_hsd1(const LayerVectors& vectors, const std::filesystem::path& path);
std::string encode_hsd1(const LayerVectors& vectors);
// Throws ParseError on bad magic, version, ragged rows or size mismatch.
LayerVectors decode_hsd1(const std::string& bytes);
LayerVectors read_hsd1(const std::filesystem::path& path);

}  // namespace hoplab

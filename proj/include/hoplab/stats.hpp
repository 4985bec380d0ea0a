// SPDX-License-Identifier: Apache-2.0
//
// Outcome partitioning and decodability statistics over probe records. All
// record statistics look only at records with kept == true.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"
#include "hoplab/probe.hpp"

namespace hoplab {

enum class Outcome { correct, incorrect, missing, shortcut };

const char* to_string(Outcome o);  // "Correct", "Incorrect", "Missing", "Shortcut"
Outcome outcome_from_string(const std::string& s);
inline constexpr Outcome kAllOutcomes[] = {Outcome::correct, Outcome::incorrect, Outcome::missing, Outcome::shortcut};

struct InstanceEvaluation {
    std::string instance_id;
    int hop_count = 0;
    bool multi_hop_correct = false;
    std::vector<bool> single_hop_correct;
    friend bool operator==(const InstanceEvaluation&, const InstanceEvaluation&) = default;
};

// Greedy first token after [A] compared with the expected entity, for the
// multi-hop query (variant 0) and for each of its one-hop facts.
InstanceEvaluation evaluate_instance(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance);
std::vector<InstanceEvaluation> evaluate_instances(const Model& model, const KnowledgeGraph& kg,
                                                   const std::vector<MultiHopInstance>& instances, int workers = 1);

Outcome categorize(bool multi_hop_correct, const std::vector<bool>& single_hop_correct);

using Partition = std::map<Outcome, std::vector<std::string>>;  // every category present, ids in input order
Partition partition_dataset(const std::vector<InstanceEvaluation>& evaluations);

std::string evaluations_to_jsonl(const std::vector<InstanceEvaluation>& evals);
std::vector<InstanceEvaluation> evaluations_from_jsonl(const std::string& text);

// Which records a statistic looks at. hop_count == 0 matches every hop count.
struct CellKey {
    int hop_count = 0;
    int hop_index = 0;
    Position position = Position::last;
};

enum class RateMode {
    instance_existence,  // fraction of instances with a kept record decoding the hop
    record_frequency,    // fraction of kept records decoding the hop
};

struct EmergenceStat {
    int hop_count = 0;
    int hop_index = 0;
    Position position = Position::last;
    double decoding_rate = 0.0;
    std::optional<double> mean_earliest_layer;  // over decoding instances only
    double mean_earliest_imputed = 0.0;         // non-decoders count as num_layers
    long n_decoded = 0;
    long n_total = 0;  // instances with at least one kept record in the cell
    friend bool operator==(const EmergenceStat&, const EmergenceStat&) = default;
};

// Throws UndefinedStatisticError when no instance has a kept record in the cell.
double decoding_rate(const std::vector<GenerationRecord>& records, const CellKey& key,
                     RateMode mode = RateMode::instance_existence);

// Per instance, the smallest layer of a kept record decoding the hop.
std::map<std::string, int> earliest_layers(const std::vector<GenerationRecord>& records, const CellKey& key);

// Mean of earliest_layers; absent when no instance decodes the hop.
std::optional<double> earliest_layer(const std::vector<GenerationRecord>& records, const CellKey& key);

// Throws UndefinedStatisticError for an empty cell.
EmergenceStat emergence_cell(const std::vector<GenerationRecord>& records, const CellKey& key, int num_layers,
                             RateMode mode = RateMode::instance_existence);

// One stat per (hop count, hop index 0..k, position) present in the records,
// ordered by hop count, then position (subject, last), then hop index.
std::vector<EmergenceStat> emergence_table(const std::vector<GenerationRecord>& records, int num_layers,
                                           RateMode mode = RateMode::instance_existence);
const EmergenceStat* find_cell(const std::vector<EmergenceStat>& table, int hop_count, int hop_index, Position position);

std::string emergence_table_csv(const std::vector<EmergenceStat>& table);
// Parses the CSV written above. Throws ParseError.
std::vector<EmergenceStat> parse_emergence_csv(const std::string& text);

struct DistributionCurve {
    int hop_count = 0;
    int hop_index = 0;
    Position position = Position::last;
    long n_instances = 0;
    std::vector<double> values;  // per layer
};

// curve[l] = fraction of the cell's instances with a kept record at layer l
// decoding the hop. Curves for hop indices 0..k of every hop count present.
std::vector<DistributionCurve> layer_distribution(const std::vector<GenerationRecord>& records, Position position,
                                                  int num_layers);
DistributionCurve layer_distribution_cell(const std::vector<GenerationRecord>& records, const CellKey& key,
                                          int num_layers);

struct InversionVerdict {
    bool inverted = false;
    double margin = 0.0;  // subject value minus last value
    double bridge_at_subject = 0.0;
    double answer_at_last = 0.0;
};

// Compares the first bridge entity at the subject with the final entity at
// the last token; strict inequality.
InversionVerdict inversion_test(double bridge_at_subject, double answer_at_last);
// Throws UndefinedStatisticError when either cell is missing or has no decoders.
InversionVerdict inversion_test(const std::vector<EmergenceStat>& table, int hop_count);

struct InstanceInversion {
    long n_instances = 0;  // instances decoding both entities
    long n_inverted = 0;
    double fraction() const { return n_instances == 0 ? 0.0 : static_cast<double>(n_inverted) / static_cast<double>(n_instances); }
};

// Per instance: answer-at-last earliest layer strictly below bridge-at-subject.
InstanceInversion instance_inversion(const std::vector<GenerationRecord>& records, int hop_count);

}  // namespace hoplab

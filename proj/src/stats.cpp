// SPDX-License-Identifier: Apache-2.0
#include "hoplab/stats.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"
#include "hoplab/parallel.hpp"

namespace hoplab {

const char* to_string(Outcome o) {
    switch (o) {
        case Outcome::correct: return "Correct";
        case Outcome::incorrect: return "Incorrect";
        case Outcome::missing: return "Missing";
        case Outcome::shortcut: return "Shortcut";
    }
    return "?";
}

Outcome outcome_from_string(const std::string& s) {
    for (Outcome o : kAllOutcomes)
        if (s == to_string(o)) return o;
    throw ParseError("unknown outcome category '" + s + "'");
}

namespace {

// Greedy next token for a batch of prompts.
std::vector<TokenId> next_tokens(const Model& model, const std::vector<TokenSeq>& prompts) {
    std::vector<TokenId> out;
    out.reserve(prompts.size());
    constexpr std::size_t kChunk = 512;
    for (std::size_t begin = 0; begin < prompts.size(); begin += kChunk) {
        const std::size_t end = std::min(prompts.size(), begin + kChunk);
        const auto traces = model.forward_batch(std::span<const TokenSeq>(prompts.data() + begin, end - begin));
        for (const auto& tr : traces) out.push_back(static_cast<TokenId>(argmax<float>(tr.logits_at(tr.seq_len - 1))));
    }
    return out;
}

}  // namespace

InstanceEvaluation evaluate_instance(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& instance) {
    return evaluate_instances(model, kg, {instance}, 1).front();
}

std::vector<InstanceEvaluation> evaluate_instances(const Model& model, const KnowledgeGraph& kg,
                                                   const std::vector<MultiHopInstance>& instances, int workers) {
    const Vocabulary& vocab = kg.vocab();
    constexpr std::size_t kPerTask = 128;
    const std::size_t tasks = (instances.size() + kPerTask - 1) / kPerTask;
    std::vector<InstanceEvaluation> out(instances.size());
    parallel_for(tasks, workers, [&](std::size_t t) {
        const std::size_t begin = t * kPerTask, end = std::min(instances.size(), begin + kPerTask);
        std::vector<TokenSeq> prompts;
        std::vector<TokenId> answers;
        for (std::size_t i = begin; i < end; ++i) {
            prompts.push_back(instances[i].verbalization(0).tokens);
            answers.push_back(vocab.entity_token(instances[i].answer()));
            for (const auto& single : single_hop_instances(kg, instances[i])) {
                prompts.push_back(verbalize(kg, single, 0).tokens);
                answers.push_back(vocab.entity_token(single.answer()));
            }
        }
        const auto got = next_tokens(model, prompts);
        std::size_t q = 0;
        for (std::size_t i = begin; i < end; ++i) {
            InstanceEvaluation& e = out[i];
            e.instance_id = instances[i].id;
            e.hop_count = instances[i].hop_count;
            e.multi_hop_correct = got[q] == answers[q];
            ++q;
            for (int h = 0; h < instances[i].hop_count; ++h, ++q) e.single_hop_correct.push_back(got[q] == answers[q]);
        }
    });
    return out;
}

Outcome categorize(bool multi_hop_correct, const std::vector<bool>& single_hop_correct) {
    const bool all_singles = std::all_of(single_hop_correct.begin(), single_hop_correct.end(), [](bool b) { return b; });
    if (multi_hop_correct) return all_singles ? Outcome::correct : Outcome::shortcut;
    return all_singles ? Outcome::incorrect : Outcome::missing;
}

Partition partition_dataset(const std::vector<InstanceEvaluation>& evaluations) {
    Partition p;
    for (Outcome o : kAllOutcomes) p[o];
    for (const auto& e : evaluations) p[categorize(e.multi_hop_correct, e.single_hop_correct)].push_back(e.instance_id);
    return p;
}

std::string evaluations_to_jsonl(const std::vector<InstanceEvaluation>& evals) {
    std::string out;
    for (const auto& e : evals) {
        nlohmann::ordered_json j;
        j["instance_id"] = e.instance_id;
        j["hop_count"] = e.hop_count;
        j["multi_hop_correct"] = e.multi_hop_correct;
        j["single_hop_correct"] = e.single_hop_correct;
        j["category"] = to_string(categorize(e.multi_hop_correct, e.single_hop_correct));
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<InstanceEvaluation> evaluations_from_jsonl(const std::string& text) {
    std::vector<InstanceEvaluation> out;
    std::istringstream in(text);
    std::string line;
    long n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            InstanceEvaluation e;
            e.instance_id = j.at("instance_id").get<std::string>();
            e.hop_count = j.at("hop_count").get<int>();
            e.multi_hop_correct = j.at("multi_hop_correct").get<bool>();
            e.single_hop_correct = j.at("single_hop_correct").get<std::vector<bool>>();
            if (static_cast<int>(e.single_hop_correct.size()) != e.hop_count)
                throw ParseError("single_hop_correct length differs from hop_count");
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError("evaluations line " + std::to_string(n) + ": " + ex.what());
        } catch (const ParseError& ex) {
            throw ParseError("evaluations line " + std::to_string(n) + ": " + ex.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Record statistics

namespace {

bool in_cell(const GenerationRecord& r, const CellKey& key) {
    return r.kept && r.position == key.position && (key.hop_count == 0 || r.hop_count == key.hop_count);
}

bool decodes(const GenerationRecord& r, int hop) {
    return std::find(r.decoded_hops.begin(), r.decoded_hops.end(), hop) != r.decoded_hops.end();
}

std::set<std::string> cell_instances(const std::vector<GenerationRecord>& records, const CellKey& key) {
    std::set<std::string> ids;
    for (const auto& r : records)
        if (in_cell(r, key)) ids.insert(r.instance_id);
    return ids;
}

}  // namespace

double decoding_rate(const std::vector<GenerationRecord>& records, const CellKey& key, RateMode mode) {
    if (mode == RateMode::record_frequency) {
        long total = 0, hit = 0;
        for (const auto& r : records) {
            if (!in_cell(r, key)) continue;
            ++total;
            if (decodes(r, key.hop_index)) ++hit;
        }
        if (total == 0) throw UndefinedStatisticError("decoding rate over an empty record set");
        return static_cast<double>(hit) / static_cast<double>(total);
    }
    const auto all = cell_instances(records, key);
    if (all.empty()) throw UndefinedStatisticError("decoding rate over an empty instance set");
    const auto hit = earliest_layers(records, key);
    return static_cast<double>(hit.size()) / static_cast<double>(all.size());
}

std::map<std::string, int> earliest_layers(const std::vector<GenerationRecord>& records, const CellKey& key) {
    std::map<std::string, int> out;
    for (const auto& r : records) {
        if (!in_cell(r, key) || !decodes(r, key.hop_index)) continue;
        auto [it, inserted] = out.emplace(r.instance_id, r.layer);
        if (!inserted) it->second = std::min(it->second, r.layer);
    }
    return out;
}

std::optional<double> earliest_layer(const std::vector<GenerationRecord>& records, const CellKey& key) {
    const auto e = earliest_layers(records, key);
    if (e.empty()) return std::nullopt;
    double sum = 0.0;
    for (const auto& [id, l] : e) sum += l;
    return sum / static_cast<double>(e.size());
}

EmergenceStat emergence_cell(const std::vector<GenerationRecord>& records, const CellKey& key, int num_layers,
                             RateMode mode) {
    EmergenceStat s;
    s.hop_count = key.hop_count;
    s.hop_index = key.hop_index;
    s.position = key.position;
    const auto all = cell_instances(records, key);
    if (all.empty()) throw UndefinedStatisticError("emergence statistic over an empty instance set");
    const auto e = earliest_layers(records, key);
    s.n_total = static_cast<long>(all.size());
    s.n_decoded = static_cast<long>(e.size());
    s.decoding_rate = decoding_rate(records, key, mode);
    double sum = 0.0;
    for (const auto& [id, l] : e) sum += l;
    if (!e.empty()) s.mean_earliest_layer = sum / static_cast<double>(e.size());
    s.mean_earliest_imputed =
        (sum + static_cast<double>(s.n_total - s.n_decoded) * num_layers) / static_cast<double>(s.n_total);
    return s;
}

std::vector<EmergenceStat> emergence_table(const std::vector<GenerationRecord>& records, int num_layers, RateMode mode) {
    std::set<std::pair<int, Position>> present;
    for (const auto& r : records)
        if (r.kept) present.insert({r.hop_count, r.position});
    std::vector<EmergenceStat> table;
    for (const auto& [k, pos] : present)
        for (int j = 0; j <= k; ++j) table.push_back(emergence_cell(records, {k, j, pos}, num_layers, mode));
    return table;
}

const EmergenceStat* find_cell(const std::vector<EmergenceStat>& table, int hop_count, int hop_index, Position position) {
    for (const auto& s : table)
        if (s.hop_count == hop_count && s.hop_index == hop_index && s.position == position) return &s;
    return nullptr;
}

namespace {
constexpr const char* kEmergenceHeader =
    "hop_count,hop_index,position,decoding_rate,mean_earliest_layer,mean_earliest_imputed,n_decoded,n_total";
}

std::string emergence_table_csv(const std::vector<EmergenceStat>& table) {
    std::string out = kEmergenceHeader;
    out += '\n';
    for (const auto& s : table) {
        out += std::to_string(s.hop_count) + ',' + std::to_string(s.hop_index) + ',' + to_string(s.position) + ',' +
               format_sig6(s.decoding_rate) + ',' + (s.mean_earliest_layer ? format_sig6(*s.mean_earliest_layer) : "") +
               ',' + format_sig6(s.mean_earliest_imputed) + ',' + std::to_string(s.n_decoded) + ',' +
               std::to_string(s.n_total) + '\n';
    }
    return out;
}

std::vector<EmergenceStat> parse_emergence_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kEmergenceHeader) throw ParseError("emergence CSV: unexpected header");
    std::vector<EmergenceStat> out;
    long n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 8) throw ParseError("emergence CSV line " + std::to_string(n) + ": expected 8 fields");
        try {
            EmergenceStat s;
            s.hop_count = std::stoi(f[0]);
            s.hop_index = std::stoi(f[1]);
            s.position = position_from_string(f[2]);
            s.decoding_rate = std::stod(f[3]);
            if (!f[4].empty()) s.mean_earliest_layer = std::stod(f[4]);
            s.mean_earliest_imputed = std::stod(f[5]);
            s.n_decoded = std::stol(f[6]);
            s.n_total = std::stol(f[7]);
            out.push_back(s);
        } catch (const std::exception& e) {
            throw ParseError("emergence CSV line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

DistributionCurve layer_distribution_cell(const std::vector<GenerationRecord>& records, const CellKey& key,
                                          int num_layers) {
    DistributionCurve c;
    c.hop_count = key.hop_count;
    c.hop_index = key.hop_index;
    c.position = key.position;
    c.values.assign(static_cast<std::size_t>(num_layers), 0.0);
    const auto all = cell_instances(records, key);
    c.n_instances = static_cast<long>(all.size());
    if (all.empty()) return c;
    std::set<std::pair<int, std::string>> hits;  // (layer, instance)
    for (const auto& r : records)
        if (in_cell(r, key) && decodes(r, key.hop_index) && r.layer >= 0 && r.layer < num_layers)
            hits.insert({r.layer, r.instance_id});
    for (const auto& [layer, id] : hits) c.values[static_cast<std::size_t>(layer)] += 1.0;
    for (double& v : c.values) v /= static_cast<double>(all.size());
    return c;
}

std::vector<DistributionCurve> layer_distribution(const std::vector<GenerationRecord>& records, Position position,
                                                  int num_layers) {
    std::set<int> hop_counts;
    for (const auto& r : records)
        if (r.kept && r.position == position) hop_counts.insert(r.hop_count);
    std::vector<DistributionCurve> out;
    for (int k : hop_counts)
        for (int j = 0; j <= k; ++j) out.push_back(layer_distribution_cell(records, {k, j, position}, num_layers));
    return out;
}

InversionVerdict inversion_test(double bridge_at_subject, double answer_at_last) {
    InversionVerdict v;
    v.bridge_at_subject = bridge_at_subject;
    v.answer_at_last = answer_at_last;
    v.inverted = answer_at_last < bridge_at_subject;
    v.margin = bridge_at_subject - answer_at_last;
    return v;
}

InversionVerdict inversion_test(const std::vector<EmergenceStat>& table, int hop_count) {
    const EmergenceStat* bridge = find_cell(table, hop_count, 1, Position::subject);
    const EmergenceStat* answer = find_cell(table, hop_count, hop_count, Position::last);
    const std::string k = std::to_string(hop_count);
    if (bridge == nullptr || !bridge->mean_earliest_layer)
        throw UndefinedStatisticError(k + "-hop: first bridge entity at the subject is never decoded");
    if (answer == nullptr || !answer->mean_earliest_layer)
        throw UndefinedStatisticError(k + "-hop: final entity at the last token is never decoded");
    return inversion_test(*bridge->mean_earliest_layer, *answer->mean_earliest_layer);
}

InstanceInversion instance_inversion(const std::vector<GenerationRecord>& records, int hop_count) {
    const auto bridge = earliest_layers(records, {hop_count, 1, Position::subject});
    const auto answer = earliest_layers(records, {hop_count, hop_count, Position::last});
    InstanceInversion out;
    for (const auto& [id, lb] : bridge) {
        auto it = answer.find(id);
        if (it == answer.end()) continue;
        ++out.n_instances;
        if (it->second < lb) ++out.n_inverted;
    }
    return out;
}

}  // namespace hoplab

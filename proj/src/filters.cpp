// SPDX-License-Identifier: Apache-2.0
#include "hoplab/filters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "hoplab/errors.hpp"

namespace hoplab {

const char* to_string(FilterKind kind) {
    switch (kind) {
        case FilterKind::raw: return "raw";
        case FilterKind::global: return "global";
        case FilterKind::local: return "local";
        case FilterKind::layer: return "layer";
    }
    return "?";
}

namespace {

int parse_int(const std::string& s, const std::string& whole) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("bad filter spec '" + whole + "'");
    return std::stoi(s);
}

}  // namespace

FilterConfig FilterConfig::parse(const std::string& text) {
    FilterConfig c;
    if (text == "raw") return c;
    const auto colon = text.find(':');
    std::string kind, num;
    if (colon != std::string::npos) {
        kind = text.substr(0, colon);
        num = text.substr(colon + 1);
    } else if (text.rfind("gf", 0) == 0 || text.rfind("lf", 0) == 0) {
        kind = text[0] == 'g' ? "global" : "local";
        num = text.substr(2);
    } else if (text.rfind("layer", 0) == 0) {
        kind = "layer";
        num = text.substr(5);
    } else {
        throw ConfigError("bad filter spec '" + text + "'");
    }
    if (kind == "global") {
        c.kind = FilterKind::global;
        c.k = parse_int(num, text);
    } else if (kind == "local") {
        c.kind = FilterKind::local;
        c.k = parse_int(num, text);
    } else if (kind == "layer") {
        c.kind = FilterKind::layer;
        c.min_layer = parse_int(num, text);
    } else {
        throw ConfigError("bad filter spec '" + text + "'");
    }
    c.validate();
    return c;
}

std::string FilterConfig::label() const {
    switch (kind) {
        case FilterKind::raw: return "raw";
        case FilterKind::global: return "gf" + std::to_string(k);
        case FilterKind::local: return "lf" + std::to_string(k);
        case FilterKind::layer: return "layer" + std::to_string(min_layer);
    }
    return "?";
}

void FilterConfig::validate() const {
    if ((kind == FilterKind::global || kind == FilterKind::local) && (k < 0 || k > 100))
        throw ConfigError("filter percentage must lie in [0, 100]");
    if (kind == FilterKind::layer && min_layer < 0) throw ConfigError("min_layer must be >= 0");
}

const std::vector<double>& SequenceEmbedder::embed(const TokenSeq& tokens) {
    auto it = cache_.find(tokens);
    if (it != cache_.end()) return it->second;
    const int last = model_.config().layers - 1;
    RunPlan plan;
    for (int p = 0; p < static_cast<int>(tokens.size()); ++p) plan.captures.push_back({HookKind::resid_post, last, p});
    const RunTrace tr = model_.forward(tokens, plan);
    std::vector<double> mean(static_cast<std::size_t>(model_.config().d_model), 0.0);
    for (int p = 0; p < static_cast<int>(tokens.size()); ++p) {
        const auto& h = tr.at({HookKind::resid_post, last, p});
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += h[i];
    }
    for (double& x : mean) x /= static_cast<double>(tokens.size());
    return cache_.emplace(tokens, std::move(mean)).first->second;
}

double similarity_score(SequenceEmbedder& embedder, const TokenSeq& generation, const TokenSeq& query) {
    if (generation.empty()) return -1.0;
    const auto& a = embedder.embed(generation);
    const auto& b = embedder.embed(query);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

void score_records(const Model& model, const std::vector<MultiHopInstance>& instances,
                   std::vector<GenerationRecord>& records, int query_variant) {
    std::unordered_map<std::string, const MultiHopInstance*> by_id;
    for (const auto& inst : instances) by_id.emplace(inst.id, &inst);
    SequenceEmbedder embedder(model);
    for (auto& r : records) {
        auto it = by_id.find(r.instance_id);
        if (it == by_id.end()) throw LookupError("record refers to unknown instance '" + r.instance_id + "'");
        r.similarity = similarity_score(embedder, r.gen_tokens, it->second->verbalization(query_variant).tokens);
    }
}

namespace {

// Indices of kept records ordered by drop priority: lowest similarity first,
// then canonical record order.
std::vector<std::size_t> drop_order(const std::vector<GenerationRecord>& records, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out = idx;
    for (std::size_t i : out)
        if (!records[i].similarity || std::isnan(*records[i].similarity))
            throw PreconditionError("record for '" + records[i].instance_id + "' has no similarity score");
    std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
        const double sa = *records[a].similarity, sb = *records[b].similarity;
        if (sa != sb) return sa < sb;
        return record_order_less(records[a], records[b]);
    });
    return out;
}

std::vector<std::size_t> kept_indices(const std::vector<GenerationRecord>& records) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].kept) idx.push_back(i);
    return idx;
}

void check_k(int k) {
    if (k < 0 || k > 100) throw ConfigError("filter percentage must lie in [0, 100]");
}

}  // namespace

void global_filter(std::vector<GenerationRecord>& records, int k) {
    check_k(k);
    const auto order = drop_order(records, kept_indices(records));
    const std::size_t n_drop = static_cast<std::size_t>(k) * order.size() / 100;
    for (std::size_t i = 0; i < n_drop; ++i) records[order[i]].kept = false;
}

void local_filter(std::vector<GenerationRecord>& records, int k) {
    check_k(k);
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i : kept_indices(records)) groups[records[i].instance_id].push_back(i);
    for (const auto& [id, idx] : groups) {
        const auto order = drop_order(records, idx);
        const std::size_t n = order.size();
        const std::size_t keep = std::max<std::size_t>(1, (static_cast<std::size_t>(100 - k) * n + 99) / 100);
        for (std::size_t i = 0; i + keep < n; ++i) records[order[i]].kept = false;
    }
}

void layer_filter(std::vector<GenerationRecord>& records, int min_layer) {
    for (auto& r : records)
        if (r.layer < min_layer) r.kept = false;
}

void apply_filter(std::vector<GenerationRecord>& records, const FilterConfig& cfg) {
    cfg.validate();
    switch (cfg.kind) {
        case FilterKind::raw: break;
        case FilterKind::global: global_filter(records, cfg.k); break;
        case FilterKind::local: local_filter(records, cfg.k); break;
        case FilterKind::layer: layer_filter(records, cfg.min_layer); break;
    }
}

std::vector<GenerationRecord> reset_kept(std::vector<GenerationRecord> records) {
    for (auto& r : records) r.kept = true;
    return records;
}

}  // namespace hoplab

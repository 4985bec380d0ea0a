// SPDX-License-Identifier: Apache-2.0
#include "hoplab/simil.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"
#include "hoplab/parallel.hpp"

namespace hoplab {

static_assert(std::endian::native == std::endian::little, "HSD1 files are written in host byte order");

LayerVectors capture_hidden(const Model& model, const TokenSeq& tokens, HookKind hook, int position) {
    if (hook == HookKind::attn_weights) throw PlanError("attention weights are not a hidden state");
    RunPlan plan;
    const int L = model.config().layers;
    for (int l = 0; l < L; ++l) plan.captures.push_back({hook, l, position});
    RunTrace tr = model.forward(tokens, plan);
    LayerVectors out;
    out.reserve(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) out.push_back(std::move(tr.captured.at({hook, l, position})));
    return out;
}

double cosine(std::span<const float> a, std::span<const float> b, bool* degenerate) {
    if (a.size() != b.size()) throw ShapeError("cosine of vectors with different lengths");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        if (degenerate != nullptr) *degenerate = true;
        return 0.0;
    }
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

NormalizedCurve normalize_curve(const std::vector<double>& curve, NormalizeMode mode) {
    NormalizedCurve out;
    if (curve.empty()) return out;
    if (mode == NormalizeMode::min_max) {
        const auto [lo, hi] = std::minmax_element(curve.begin(), curve.end());
        const double span = *hi - *lo;
        if (span == 0.0) {
            out.values.assign(curve.size(), 0.5);
            out.degenerate = true;
            return out;
        }
        for (double v : curve) out.values.push_back(std::clamp((v - *lo) / span, 0.0, 1.0));
        return out;
    }
    double mean = 0.0;
    for (double v : curve) mean += v;
    mean /= static_cast<double>(curve.size());
    double var = 0.0;
    for (double v : curve) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(curve.size()));
    if (sd == 0.0) {
        out.values.assign(curve.size(), 0.0);
        out.degenerate = true;
        return out;
    }
    for (double v : curve) out.values.push_back((v - mean) / sd);
    return out;
}

std::vector<double> same_layer_curve(const LayerVectors& a, const LayerVectors& b, bool* degenerate) {
    if (a.size() != b.size()) throw ShapeError("captures cover different layer counts");
    std::vector<double> out;
    out.reserve(a.size());
    for (std::size_t l = 0; l < a.size(); ++l) out.push_back(cosine(a[l], b[l], degenerate));
    return out;
}

std::vector<std::vector<double>> cross_layer(const LayerVectors& first, const LayerVectors& second) {
    std::vector<std::vector<double>> m(first.size(), std::vector<double>(second.size()));
    for (std::size_t a = 0; a < first.size(); ++a)
        for (std::size_t b = 0; b < second.size(); ++b) m[a][b] = cosine(first[a], second[b]);
    return m;
}

int paired_position(const Verbalization& single, Position position) { return position_index(single, position); }

namespace {

struct PairCaptures {
    LayerVectors multi, single;
};

PairCaptures capture_pair(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& multi, int hop_index,
                          HookKind hook, Position position) {
    if (hop_index < 0 || hop_index >= multi.hop_count)
        throw IndexError("hop index " + std::to_string(hop_index) + " outside [0, " + std::to_string(multi.hop_count) + ")");
    const auto singles = single_hop_instances(kg, multi);
    const Verbalization& mv = multi.verbalization(0);
    const Verbalization sv = verbalize(kg, singles[static_cast<std::size_t>(hop_index)], 0);
    return {capture_hidden(model, mv.tokens, hook, position_index(mv, position)),
            capture_hidden(model, sv.tokens, hook, paired_position(sv, position))};
}

}  // namespace

SimilarityProfile pair_similarity(const Model& model, const KnowledgeGraph& kg, const MultiHopInstance& multi,
                                  int hop_index, HookKind hook, Position position, NormalizeMode mode) {
    const PairCaptures c = capture_pair(model, kg, multi, hop_index, hook, position);
    SimilarityProfile p;
    p.hook = hook;
    p.position = position;
    p.hop_index = hop_index;
    p.total_hops = multi.hop_count;
    p.raw = same_layer_curve(c.multi, c.single, &p.degenerate);
    const NormalizedCurve n = normalize_curve(p.raw, mode);
    p.normalized = n.values;
    p.degenerate = p.degenerate || n.degenerate;
    return p;
}

std::vector<std::vector<double>> cross_layer_matrix(const Model& model, const KnowledgeGraph& kg,
                                                    const MultiHopInstance& multi, int hop_index, HookKind hook,
                                                    Position position) {
    const PairCaptures c = capture_pair(model, kg, multi, hop_index, hook, position);
    return cross_layer(c.multi, c.single);
}

GroupResult group_curves(const Model& model, const KnowledgeGraph& kg, const std::vector<MultiHopInstance>& instances,
                         HookKind hook, Position position, NormalizeMode mode, int workers) {
    GroupResult res;
    res.hook = hook;
    res.position = position;
    if (instances.empty()) {
        res.notices.push_back("no instances; similarity groups omitted");
        return res;
    }
    struct Curves {
        std::vector<std::vector<double>> per_hop;
        bool degenerate = false;
    };
    std::vector<Curves> curves(instances.size());
    parallel_for(instances.size(), workers, [&](std::size_t i) {
        const MultiHopInstance& inst = instances[i];
        const Verbalization& mv = inst.verbalization(0);
        const LayerVectors mh = capture_hidden(model, mv.tokens, hook, position_index(mv, position));
        for (const auto& single : single_hop_instances(kg, inst)) {
            const Verbalization sv = verbalize(kg, single, 0);
            const LayerVectors sh = capture_hidden(model, sv.tokens, hook, paired_position(sv, position));
            curves[i].per_hop.push_back(same_layer_curve(mh, sh, &curves[i].degenerate));
        }
    });

    std::map<std::pair<int, int>, GroupProfile> groups;  // (k, i)
    for (std::size_t n = 0; n < instances.size(); ++n) {
        const int k = instances[n].hop_count;
        for (int i = 0; i < k; ++i) {
            GroupProfile& g = groups[{k, i}];
            const auto& c = curves[n].per_hop[static_cast<std::size_t>(i)];
            if (g.size == 0) {
                g.hop_index = i;
                g.total_hops = k;
                g.mean_raw.assign(c.size(), 0.0);
            }
            for (std::size_t l = 0; l < c.size(); ++l) g.mean_raw[l] += c[l];
            g.degenerate = g.degenerate || curves[n].degenerate;
            ++g.size;
        }
    }
    for (auto& [key, g] : groups) {
        for (double& v : g.mean_raw) v /= static_cast<double>(g.size);
        const NormalizedCurve nc = normalize_curve(g.mean_raw, mode);
        g.normalized = nc.values;
        g.degenerate = g.degenerate || nc.degenerate;
        res.groups.push_back(std::move(g));
    }
    return res;
}

// ---------------------------------------------------------------------------
// HSD1

namespace {

template <typename U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t offset) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + offset, sizeof v);
    return v;
}

}  // namespace

std::string encode_hsd1(const LayerVectors& vectors) {
    const std::size_t width = vectors.empty() ? 0 : vectors.front().size();
    for (const auto& row : vectors)
        if (row.size() != width) throw ShapeError("hidden-state rows differ in width");
    std::string out = "HSD1";
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(vectors.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(width));
    for (const auto& row : vectors) out.append(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
    return out;
}

LayerVectors decode_hsd1(const std::string& bytes) {
    if (bytes.size() < 16 || bytes.compare(0, 4, "HSD1") != 0) throw ParseError("not an HSD1 file (bad magic)");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != 1) throw ParseError("unsupported HSD1 version " + std::to_string(version));
    const std::uint64_t layers = get_u32(bytes, 8);
    const std::uint64_t width = get_u32(bytes, 12);
    const std::uint64_t expected = 16 + layers * width * sizeof(float);
    if (bytes.size() != expected)
        throw ParseError("HSD1 size mismatch: header promises " + std::to_string(expected) + " bytes, file has " +
                         std::to_string(bytes.size()));
    LayerVectors out(layers, std::vector<float>(width));
    for (std::uint64_t l = 0; l < layers; ++l)
        std::memcpy(out[l].data(), bytes.data() + 16 + l * width * sizeof(float), width * sizeof(float));
    return out;
}

void write_hsd1(const LayerVectors& vectors, const std::filesystem::path& path) { write_file(path, encode_hsd1(vectors)); }

LayerVectors read_hsd1(const std::filesystem::path& path) { return decode_hsd1(read_file(path)); }

}  // namespace hoplab

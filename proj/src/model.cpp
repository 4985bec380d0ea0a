// SPDX-License-Identifier: Apache-2.0
#include "hoplab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "hoplab/errors.hpp"
#include "hoplab/rng.hpp"

namespace hoplab {

using nlohmann::json;

// Scratch buffers share one base alignment so vectorized elementwise kernels
// split each buffer the same way on every thread.
template <typename T>
using Buf = std::vector<T, Eigen::aligned_allocator<T>>;

// ---------------------------------------------------------------------------
// Config, hooks, plans, traces

void ModelConfig::validate() const {
    if (layers < 2) throw ConfigError("model needs at least 2 layers");
    if (d_model < 2) throw ConfigError("d_model must be >= 2");
    if (heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (d_ff < 1) throw ConfigError("d_ff must be positive");
    if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be positive");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

std::string ModelConfig::to_json() const {
    return json{{"layers", layers},       {"d_model", d_model},         {"heads", heads},
                {"d_ff", d_ff},           {"vocab_size", vocab_size},   {"max_seq_len", max_seq_len},
                {"seed", seed},           {"init_std", init_std},       {"ln_eps", ln_eps}}
        .dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        c.layers = j.at("layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.heads = j.at("heads").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.init_std = j.value("init_std", c.init_std);
        c.ln_eps = j.value("ln_eps", c.ln_eps);
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    return c;
}

const char* to_string(HookKind kind) {
    switch (kind) {
        case HookKind::resid_pre: return "resid_pre";
        case HookKind::attn_proj_out: return "attn_proj_out";
        case HookKind::mlp_fc_in: return "mlp_fc_in";
        case HookKind::mlp_fc_in_pre: return "mlp_fc_in_pre";
        case HookKind::mlp_fc_out: return "mlp_fc_out";
        case HookKind::resid_post: return "resid_post";
        case HookKind::attn_weights: return "attn_weights";
    }
    return "?";
}

HookKind hook_kind_from_string(const std::string& name) {
    for (auto k : {HookKind::resid_pre, HookKind::attn_proj_out, HookKind::mlp_fc_in, HookKind::mlp_fc_in_pre,
                   HookKind::mlp_fc_out, HookKind::resid_post, HookKind::attn_weights})
        if (name == to_string(k)) return k;
    throw PlanError("unknown hook point '" + name + "'");
}

template <typename T>
void BasicRunPlan<T>::validate(const ModelConfig& cfg, int seq_len) const {
    auto check_point = [&](const HookPoint& p, const char* what) {
        if (p.layer < 0 || p.layer >= cfg.layers)
            throw PlanError(std::string(what) + " layer " + std::to_string(p.layer) + " out of range");
        if (p.position < 0 || p.position >= seq_len)
            throw PlanError(std::string(what) + " position " + std::to_string(p.position) + " out of range");
    };
    for (const auto& c : captures) check_point(c, "capture");
    std::set<HookPoint> seen;
    for (const auto& p : patches) {
        check_point(p.point, "patch");
        if (p.point.kind != HookKind::resid_pre && p.point.kind != HookKind::resid_post)
            throw PlanError("patches are limited to resid_pre/resid_post");
        if (static_cast<int>(p.vector.size()) != cfg.d_model) throw PlanError("patch vector length differs from d_model");
        if (!seen.insert(p.point).second) throw PlanError("more than one patch at the same hook point");
    }
    for (const auto& k : knockouts) {
        if (k.layer_begin < 0 || k.layer_end > cfg.layers || k.layer_begin > k.layer_end)
            throw PlanError("knockout layer window out of range");
        if (k.target < 0 || k.target >= seq_len) throw PlanError("knockout target position out of range");
        for (int s : k.sources)
            if (s < 0 || s >= seq_len) throw PlanError("knockout source position out of range");
    }
}

template <typename T>
std::span<const T> BasicRunTrace<T>::logits_at(int position) const {
    if (position < 0 || position >= seq_len) throw PlanError("logits position out of range");
    return std::span<const T>(logits).subspan(static_cast<std::size_t>(position) * static_cast<std::size_t>(vocab),
                                              static_cast<std::size_t>(vocab));
}

template <typename T>
const std::vector<T>& BasicRunTrace<T>::at(const HookPoint& point) const {
    auto it = captured.find(point);
    if (it == captured.end())
        throw PlanError(std::string("hook ") + to_string(point.kind) + " at layer " + std::to_string(point.layer) +
                        ", position " + std::to_string(point.position) + " was not captured");
    return it->second;
}

template <typename T>
int argmax(std::span<const T> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
ParamSet<T> ParamSet<T>::zeros(const ModelConfig& cfg) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    ParamSet p;
    p.token_embedding = BasicTensor<T>({v, d});
    p.position_embedding = BasicTensor<T>({static_cast<std::size_t>(cfg.max_seq_len), d});
    for (int l = 0; l < cfg.layers; ++l) {
        LayerParams<T> lp;
        lp.ln1_gain = BasicTensor<T>({d});
        lp.ln1_bias = BasicTensor<T>({d});
        lp.w_qkv = BasicTensor<T>({d, 3 * d});
        lp.b_qkv = BasicTensor<T>({3 * d});
        lp.w_out = BasicTensor<T>({d, d});
        lp.b_out = BasicTensor<T>({d});
        lp.ln2_gain = BasicTensor<T>({d});
        lp.ln2_bias = BasicTensor<T>({d});
        lp.w_fc = BasicTensor<T>({d, ff});
        lp.b_fc = BasicTensor<T>({ff});
        lp.w_proj = BasicTensor<T>({ff, d});
        lp.b_proj = BasicTensor<T>({d});
        p.layers.push_back(std::move(lp));
    }
    p.lnf_gain = BasicTensor<T>({d});
    p.lnf_bias = BasicTensor<T>({d});
    p.w_unembed = BasicTensor<T>({d, v});
    p.b_unembed = BasicTensor<T>({v});
    return p;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> ParamSet<T>::blocks() {
    std::vector<std::pair<std::string, BasicTensor<T>*>> out;
    out.emplace_back("token_embedding", &token_embedding);
    out.emplace_back("position_embedding", &position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& lp = layers[l];
        out.emplace_back(p + "ln1.gain", &lp.ln1_gain);
        out.emplace_back(p + "ln1.bias", &lp.ln1_bias);
        out.emplace_back(p + "attn.w_qkv", &lp.w_qkv);
        out.emplace_back(p + "attn.b_qkv", &lp.b_qkv);
        out.emplace_back(p + "attn.w_out", &lp.w_out);
        out.emplace_back(p + "attn.b_out", &lp.b_out);
        out.emplace_back(p + "ln2.gain", &lp.ln2_gain);
        out.emplace_back(p + "ln2.bias", &lp.ln2_bias);
        out.emplace_back(p + "mlp.w_fc", &lp.w_fc);
        out.emplace_back(p + "mlp.b_fc", &lp.b_fc);
        out.emplace_back(p + "mlp.w_proj", &lp.w_proj);
        out.emplace_back(p + "mlp.b_proj", &lp.b_proj);
    }
    out.emplace_back("lnf.gain", &lnf_gain);
    out.emplace_back("lnf.bias", &lnf_bias);
    out.emplace_back("unembed.w", &w_unembed);
    out.emplace_back("unembed.b", &b_unembed);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> ParamSet<T>::blocks() const {
    auto mut = const_cast<ParamSet*>(this)->blocks();
    std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
    return out;
}

namespace {

template <typename T>
void fill_normal(BasicTensor<T>& t, Rng& rng, double std) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * std);
}

}  // namespace

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    params_ = ParamSet<T>::zeros(cfg_);
    Rng rng(derive_seed(cfg_.seed, 7));
    const double s = cfg_.init_std;
    const double s_resid = s / std::sqrt(2.0 * cfg_.layers);
    fill_normal(params_.token_embedding, rng, s);
    fill_normal(params_.position_embedding, rng, s);
    for (auto& lp : params_.layers) {
        lp.ln1_gain.fill(T{1});
        lp.ln2_gain.fill(T{1});
        fill_normal(lp.w_qkv, rng, s);
        fill_normal(lp.w_out, rng, s_resid);
        fill_normal(lp.w_fc, rng, s);
        fill_normal(lp.w_proj, rng, s_resid);
    }
    params_.lnf_gain.fill(T{1});
    fill_normal(params_.w_unembed, rng, s);
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    auto expected = ParamSet<T>::zeros(cfg_);
    auto want = expected.blocks();
    auto have = params_.blocks();
    if (want.size() != have.size()) throw ShapeError("parameter block count does not match config");
    for (std::size_t i = 0; i < want.size(); ++i)
        if (want[i].second->shape() != have[i].second->shape())
            throw ShapeError("parameter block " + want[i].first + " has the wrong shape");
}

template <typename T>
std::uint64_t Transformer<T>::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : params_.blocks()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t->data());
        for (std::size_t i = 0; i < t->size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct Transformer<T>::Workspace {
    struct Layer {
        Buf<T> resid_in, ln1_hat, ln1_out, qkv, probs, attn, a, u, ln2_hat, ln2_out, f, t, g;
        std::vector<double> ln1_rstd, ln2_rstd;
    };
    int rows = 0;
    int seq_len = 0;
    std::vector<Layer> layers;
    Buf<T> resid, m, lnf_hat, lnf_out, logits;
    std::vector<double> lnf_rstd;
};

namespace {

template <typename T>
void add_bias(Buf<T>& x, const BasicTensor<T>& bias, std::size_t rows) {
    const std::size_t w = bias.size();
    const T* b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x.data() + r * w;
        for (std::size_t i = 0; i < w; ++i) row[i] += b[i];
    }
}

template <typename T>
void column_sum_into(const Buf<T>& x, std::size_t rows, BasicTensor<T>& out) {
    const std::size_t w = out.size();
    std::vector<double> acc(w, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.data() + r * w;
        for (std::size_t i = 0; i < w; ++i) acc[i] += row[i];
    }
    for (std::size_t i = 0; i < w; ++i) out[i] = static_cast<T>(acc[i]);
}

template <typename T>
void layer_norm_rows(const Buf<T>& x, std::size_t rows, std::size_t width, const BasicTensor<T>& gain,
                     const BasicTensor<T>& bias, double eps, Buf<T>& hat, Buf<T>& out,
                     std::vector<double>& rstd) {
    hat.resize(rows * width);
    out.resize(rows * width);
    rstd.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::span<const T> xr(x.data() + r * width, width);
        std::span<T> hr(hat.data() + r * width, width);
        const NormStats st = layer_norm<T>(xr, {}, {}, eps, hr);
        rstd[r] = st.rstd;
        T* o = out.data() + r * width;
        for (std::size_t i = 0; i < width; ++i) o[i] = hr[i] * gain[i] + bias[i];
    }
}

constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;

template <typename T>
void gelu_forward(const Buf<T>& f, Buf<T>& t, Buf<T>& g) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(f.size());
    t.resize(f.size());
    g.resize(f.size());
    Eigen::Map<const Arr> fa(f.data(), n);
    Eigen::Map<Arr> ta(t.data(), n);
    Eigen::Map<Arr> ga(g.data(), n);
    ta = (T(kGeluC) * (fa + T(kGeluA) * fa.cube())).tanh();
    ga = T(0.5) * fa * (T(1) + ta);
}

}  // namespace

template <typename T>
void Transformer<T>::run(const TokenId* tokens, int rows, int seq_len, std::span<const int> row_lengths,
                         std::span<const BasicRunPlan<T>> plans, bool keep_cache, Workspace& ws,
                         std::vector<BasicRunTrace<T>>* traces) const {
    const auto S = static_cast<std::size_t>(seq_len);
    const auto B = static_cast<std::size_t>(rows);
    const std::size_t N = B * S;
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto H = static_cast<std::size_t>(cfg_.heads);
    const auto dh = static_cast<std::size_t>(cfg_.head_dim());
    const auto ff = static_cast<std::size_t>(cfg_.d_ff);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    const auto L = static_cast<std::size_t>(cfg_.layers);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    const bool have_plans = !plans.empty();

    ws.rows = rows;
    ws.seq_len = seq_len;
    ws.layers.resize(keep_cache ? L : 1);
    ws.resid.assign(N * d, T{0});
    ws.m.resize(N * d);

    for (std::size_t n = 0; n < N; ++n) {
        const TokenId tok = tokens[n];
        if (tok < 0 || static_cast<std::size_t>(tok) >= V) throw IndexError("token id " + std::to_string(tok) + " out of vocabulary");
        const T* te = params_.token_embedding.data() + static_cast<std::size_t>(tok) * d;
        const T* pe = params_.position_embedding.data() + (n % S) * d;
        T* r = ws.resid.data() + n * d;
        for (std::size_t i = 0; i < d; ++i) r[i] = te[i] + pe[i];
    }

    auto vec_at = [&](const Buf<T>& buf, std::size_t width, std::size_t b, int pos) {
        const T* p = buf.data() + (b * S + static_cast<std::size_t>(pos)) * width;
        return std::vector<T>(p, p + width);
    };
    auto apply_patches = [&](HookKind kind, int layer) {
        if (!have_plans) return;
        for (std::size_t b = 0; b < B; ++b)
            for (const auto& p : plans[b].patches)
                if (p.point.kind == kind && p.point.layer == layer)
                    std::copy(p.vector.begin(), p.vector.end(),
                              ws.resid.begin() + static_cast<std::ptrdiff_t>((b * S + static_cast<std::size_t>(p.point.position)) * d));
    };
    auto capture = [&](HookKind kind, int layer, const Buf<T>& buf, std::size_t width) {
        if (!have_plans || traces == nullptr) return;
        for (std::size_t b = 0; b < B; ++b)
            for (const auto& c : plans[b].captures)
                if (c.kind == kind && c.layer == layer) (*traces)[b].captured[c] = vec_at(buf, width, b, c.position);
    };

    Buf<T> mask;  // S x S additive knockout mask for one row
    Buf<T> kt(dh * S), vv(S * dh);
    for (std::size_t l = 0; l < L; ++l) {
        auto& c = ws.layers[keep_cache ? l : 0];
        const auto& P = params_.layers[l];
        const int li = static_cast<int>(l);

        apply_patches(HookKind::resid_pre, li);
        capture(HookKind::resid_pre, li, ws.resid, d);
        c.resid_in = ws.resid;

        layer_norm_rows(c.resid_in, N, d, P.ln1_gain, P.ln1_bias, cfg_.ln_eps, c.ln1_hat, c.ln1_out, c.ln1_rstd);
        c.qkv.resize(N * 3 * d);
        gemm(c.ln1_out.data(), false, P.w_qkv.data(), false, c.qkv.data(), N, d, 3 * d, false);
        add_bias(c.qkv, P.b_qkv, N);

        c.probs.assign(B * H * S * S, T{0});
        c.attn.assign(N * d, T{0});
        for (std::size_t b = 0; b < B; ++b) {
            bool have_mask = false;
            if (have_plans) {
                for (const auto& k : plans[b].knockouts) {
                    if (li < k.layer_begin || li >= k.layer_end) continue;
                    if (!have_mask) mask.assign(S * S, T{0});
                    have_mask = true;
                    for (int s : k.sources) mask[static_cast<std::size_t>(k.target) * S + static_cast<std::size_t>(s)] = kMasked<T>;
                }
            }
            for (std::size_t h = 0; h < H; ++h) {
                // K^T (dh x S) and V (S x dh) for this row/head
                for (std::size_t j = 0; j < S; ++j) {
                    const T* base = c.qkv.data() + (b * S + j) * 3 * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        kt[e * S + j] = base[d + e];
                        vv[j * dh + e] = base[2 * d + e];
                    }
                }
                for (std::size_t i = 0; i < S; ++i) {
                    const T* q = c.qkv.data() + (b * S + i) * 3 * d + h * dh;
                    T* prow = c.probs.data() + ((b * H + h) * S + i) * S;
                    const std::size_t cnt = i + 1;
                    for (std::size_t e = 0; e < dh; ++e) {
                        const T qe = q[e] * scale;
                        const T* kr = kt.data() + e * S;
                        for (std::size_t j = 0; j < cnt; ++j) prow[j] += qe * kr[j];
                    }
                    std::span<const T> mrow;
                    if (have_mask) mrow = std::span<const T>(mask.data() + i * S, cnt);
                    softmax_inplace<T>(std::span<T>(prow, cnt), mrow);
                    T* out = c.attn.data() + (b * S + i) * d + h * dh;
                    for (std::size_t j = 0; j < cnt; ++j) {
                        const T pj = prow[j];
                        const T* vr = vv.data() + j * dh;
                        for (std::size_t e = 0; e < dh; ++e) out[e] += pj * vr[e];
                    }
                }
            }
        }
        if (have_plans && traces != nullptr) {
            for (std::size_t b = 0; b < B; ++b)
                for (const auto& cp : plans[b].captures) {
                    if (cp.kind != HookKind::attn_weights || cp.layer != li) continue;
                    const auto len = static_cast<std::size_t>(row_lengths[b]);
                    std::vector<T> w(H * len);
                    for (std::size_t h = 0; h < H; ++h)
                        for (std::size_t j = 0; j < len; ++j)
                            w[h * len + j] = c.probs[((b * H + h) * S + static_cast<std::size_t>(cp.position)) * S + j];
                    (*traces)[b].captured[cp] = std::move(w);
                }
        }

        c.a.resize(N * d);
        gemm(c.attn.data(), false, P.w_out.data(), false, c.a.data(), N, d, d, false);
        add_bias(c.a, P.b_out, N);
        capture(HookKind::attn_proj_out, li, c.a, d);

        c.u.resize(N * d);
        for (std::size_t i = 0; i < N * d; ++i) c.u[i] = c.resid_in[i] + c.a[i];
        capture(HookKind::mlp_fc_in_pre, li, c.u, d);
        layer_norm_rows(c.u, N, d, P.ln2_gain, P.ln2_bias, cfg_.ln_eps, c.ln2_hat, c.ln2_out, c.ln2_rstd);
        capture(HookKind::mlp_fc_in, li, c.ln2_out, d);

        c.f.resize(N * ff);
        gemm(c.ln2_out.data(), false, P.w_fc.data(), false, c.f.data(), N, d, ff, false);
        add_bias(c.f, P.b_fc, N);
        gelu_forward(c.f, c.t, c.g);
        gemm(c.g.data(), false, P.w_proj.data(), false, ws.m.data(), N, ff, d, false);
        add_bias(ws.m, P.b_proj, N);
        capture(HookKind::mlp_fc_out, li, ws.m, d);

        for (std::size_t i = 0; i < N * d; ++i) ws.resid[i] = c.u[i] + ws.m[i];
        apply_patches(HookKind::resid_post, li);
        capture(HookKind::resid_post, li, ws.resid, d);
    }

    layer_norm_rows(ws.resid, N, d, params_.lnf_gain, params_.lnf_bias, cfg_.ln_eps, ws.lnf_hat, ws.lnf_out,
                    ws.lnf_rstd);
    ws.logits.resize(N * V);
    gemm(ws.lnf_out.data(), false, params_.w_unembed.data(), false, ws.logits.data(), N, d, V, false);
    add_bias(ws.logits, params_.b_unembed, N);

    if (traces != nullptr) {
        for (std::size_t b = 0; b < B; ++b) {
            auto& tr = (*traces)[b];
            tr.seq_len = row_lengths[b];
            tr.vocab = static_cast<int>(V);
            const auto len = static_cast<std::size_t>(row_lengths[b]);
            tr.logits.assign(ws.logits.begin() + static_cast<std::ptrdiff_t>(b * S * V),
                             ws.logits.begin() + static_cast<std::ptrdiff_t>((b * S + len) * V));
        }
    }
}

template <typename T>
std::vector<BasicRunTrace<T>> Transformer<T>::forward_batch(std::span<const TokenSeq> rows,
                                                            std::span<const BasicRunPlan<T>> plans) const {
    if (rows.empty()) return {};
    if (!plans.empty() && plans.size() != rows.size()) throw PlanError("one plan per row required");
    int max_len = 0;
    std::vector<int> lengths;
    for (const auto& r : rows) {
        if (r.empty()) throw LengthError("empty token sequence");
        if (static_cast<int>(r.size()) > cfg_.max_seq_len)
            throw LengthError("sequence of length " + std::to_string(r.size()) + " exceeds max_seq_len " +
                              std::to_string(cfg_.max_seq_len));
        lengths.push_back(static_cast<int>(r.size()));
        max_len = std::max(max_len, static_cast<int>(r.size()));
    }
    for (std::size_t b = 0; b < plans.size(); ++b) plans[b].validate(cfg_, lengths[b]);

    // Rows shorter than max_len are right-padded; causal masking keeps the
    // padding invisible to real positions.
    std::vector<TokenId> flat(rows.size() * static_cast<std::size_t>(max_len), Vocabulary::kQuery);
    for (std::size_t b = 0; b < rows.size(); ++b)
        std::copy(rows[b].begin(), rows[b].end(), flat.begin() + static_cast<std::ptrdiff_t>(b * static_cast<std::size_t>(max_len)));
    std::vector<BasicRunTrace<T>> traces(rows.size());
    Workspace ws;
    run(flat.data(), static_cast<int>(rows.size()), max_len, lengths, plans, false, ws, &traces);
    return traces;
}

template <typename T>
BasicRunTrace<T> Transformer<T>::forward(std::span<const TokenId> tokens, const BasicRunPlan<T>& plan) const {
    const TokenSeq row(tokens.begin(), tokens.end());
    auto traces = forward_batch(std::span<const TokenSeq>(&row, 1), std::span<const BasicRunPlan<T>>(&plan, 1));
    return std::move(traces.front());
}

template <typename T>
std::vector<TokenSeq> Transformer<T>::generate_batch(std::span<const TokenSeq> prompts, int max_new,
                                                     std::span<const BasicRunPlan<T>> plans) const {
    std::vector<TokenSeq> seqs(prompts.begin(), prompts.end());
    std::vector<TokenSeq> out(prompts.size());
    for (const auto& p : seqs) {
        if (p.empty()) throw LengthError("generation needs a non-empty prompt");
        if (static_cast<int>(p.size()) + max_new > cfg_.max_seq_len)
            throw LengthError("prompt length " + std::to_string(p.size()) + " + " + std::to_string(max_new) +
                              " new tokens exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    for (int step = 0; step < max_new; ++step) {
        auto traces = forward_batch(seqs, plans);
        for (std::size_t b = 0; b < seqs.size(); ++b) {
            const auto& tr = traces[b];
            const TokenId next = argmax<T>(tr.logits_at(tr.seq_len - 1));
            seqs[b].push_back(next);
            out[b].push_back(next);
        }
    }
    return out;
}

template <typename T>
TokenSeq Transformer<T>::generate(std::span<const TokenId> prompt, int max_new, const BasicRunPlan<T>& plan) const {
    const TokenSeq row(prompt.begin(), prompt.end());
    if (plan.empty()) return generate_batch(std::span<const TokenSeq>(&row, 1), max_new).front();
    return generate_batch(std::span<const TokenSeq>(&row, 1), max_new, std::span<const BasicRunPlan<T>>(&plan, 1))
        .front();
}

template <typename T>
std::vector<T> Transformer<T>::logit_lens(const BasicRunTrace<T>& trace, int layer, int position) const {
    const auto& h = trace.at({HookKind::resid_post, layer, position});
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    std::vector<T> normed(d);
    layer_norm<T>(h, params_.lnf_gain.values(), params_.lnf_bias.values(), cfg_.ln_eps, normed);
    std::vector<T> logits(V);
    gemm(normed.data(), false, params_.w_unembed.data(), false, logits.data(), 1, d, V, false);
    for (std::size_t i = 0; i < V; ++i) logits[i] += params_.b_unembed[i];
    softmax_inplace<T>(logits);
    return logits;
}

namespace {

void check_batch(const TokenBatch& batch, const ModelConfig& cfg) {
    const auto n = static_cast<std::size_t>(batch.rows) * static_cast<std::size_t>(batch.seq_len);
    if (batch.rows < 1 || batch.seq_len < 1 || batch.tokens.size() != n || batch.targets.size() != n)
        throw ShapeError("token batch dimensions are inconsistent");
    if (batch.seq_len > cfg.max_seq_len) throw LengthError("batch sequence length exceeds max_seq_len");
}

}  // namespace

template <typename T>
double Transformer<T>::loss(const TokenBatch& batch) const {
    check_batch(batch, cfg_);
    Workspace ws;
    std::vector<int> lengths(static_cast<std::size_t>(batch.rows), batch.seq_len);
    run(batch.tokens.data(), batch.rows, batch.seq_len, lengths, {}, false, ws, nullptr);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < batch.targets.size(); ++n) {
        if (batch.targets[n] < 0) continue;
        total += cross_entropy_loss<T>(std::span<const T>(ws.logits.data() + n * V, V), batch.targets[n]);
        ++count;
    }
    if (count == 0) throw ShapeError("batch has no loss targets");
    return total / static_cast<double>(count);
}

template <typename T>
double Transformer<T>::loss_and_grad(const TokenBatch& batch, ParamSet<T>& grads) const {
    check_batch(batch, cfg_);
    // Training calls this in a tight loop; keeping the buffers alive avoids
    // re-faulting ~100 MB of fresh pages on every step.
    thread_local Workspace ws;
    std::vector<int> lengths(static_cast<std::size_t>(batch.rows), batch.seq_len);
    run(batch.tokens.data(), batch.rows, batch.seq_len, lengths, {}, true, ws, nullptr);

    const auto S = static_cast<std::size_t>(batch.seq_len);
    const auto B = static_cast<std::size_t>(batch.rows);
    const std::size_t N = B * S;
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto H = static_cast<std::size_t>(cfg_.heads);
    const auto dh = static_cast<std::size_t>(cfg_.head_dim());
    const auto ff = static_cast<std::size_t>(cfg_.d_ff);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    if (grads.layers.size() != params_.layers.size()) grads = ParamSet<T>::zeros(cfg_);

    std::size_t count = 0;
    for (TokenId t : batch.targets)
        if (t >= 0) ++count;
    if (count == 0) throw ShapeError("batch has no loss targets");
    const double inv_count = 1.0 / static_cast<double>(count);

    // Cross-entropy and its gradient w.r.t. logits, in place.
    Buf<T>& dlogits = ws.logits;
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        T* row = dlogits.data() + n * V;
        const TokenId tgt = batch.targets[n];
        if (tgt < 0) {
            std::fill(row, row + V, T{0});
            continue;
        }
        if (static_cast<std::size_t>(tgt) >= V) throw IndexError("target token out of vocabulary");
        T mx = row[0];
        for (std::size_t i = 1; i < V; ++i) mx = std::max(mx, row[i]);
        const double target_logit = static_cast<double>(row[static_cast<std::size_t>(tgt)]) - static_cast<double>(mx);
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        Eigen::Map<Arr> ra(row, static_cast<Eigen::Index>(V));
        ra = (ra - mx).exp();
        double sum = 0.0;
        for (std::size_t i = 0; i < V; ++i) sum += row[i];
        total += std::log(sum) - target_logit;
        const T k = static_cast<T>(inv_count / sum);
        for (std::size_t i = 0; i < V; ++i) row[i] *= k;
        row[static_cast<std::size_t>(tgt)] -= static_cast<T>(inv_count);
    }
    const double loss_value = total * inv_count;

    gemm(ws.lnf_out.data(), true, dlogits.data(), false, grads.w_unembed.data(), d, N, V, false);
    column_sum_into(dlogits, N, grads.b_unembed);
    Buf<T> dnorm(N * d);
    gemm(dlogits.data(), false, params_.w_unembed.data(), true, dnorm.data(), N, V, d, false);

    Buf<T> dresid(N * d, T{0});
    grads.lnf_gain.fill(T{0});
    grads.lnf_bias.fill(T{0});
    for (std::size_t n = 0; n < N; ++n)
        layer_norm_backward<T>(std::span<const T>(dnorm.data() + n * d, d), std::span<const T>(ws.lnf_hat.data() + n * d, d),
                               params_.lnf_gain.values(), ws.lnf_rstd[n], std::span<T>(dresid.data() + n * d, d),
                               grads.lnf_gain.values(), grads.lnf_bias.values());

    Buf<T> dg(N * ff), dln(N * d), du(N * d), dattn(N * d), dqkv(N * 3 * d);
    Buf<T> kk(S * dh), vt(dh * S), dp(S);
    for (std::size_t li = params_.layers.size(); li-- > 0;) {
        const auto& c = ws.layers[li];
        const auto& P = params_.layers[li];
        auto& G = grads.layers[li];

        // MLP
        gemm(c.g.data(), true, dresid.data(), false, G.w_proj.data(), ff, N, d, false);
        column_sum_into(dresid, N, G.b_proj);
        gemm(dresid.data(), false, P.w_proj.data(), true, dg.data(), N, d, ff, false);
        {
            using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
            const auto n = static_cast<Eigen::Index>(N * ff);
            Eigen::Map<const Arr> fa(c.f.data(), n), ta(c.t.data(), n);
            Eigen::Map<Arr> ga(dg.data(), n);
            ga *= T(0.5) * (T(1) + ta) +
                  T(0.5) * fa * (T(1) - ta * ta) * T(kGeluC) * (T(1) + T(3.0 * kGeluA) * fa * fa);
        }
        gemm(c.ln2_out.data(), true, dg.data(), false, G.w_fc.data(), d, N, ff, false);
        column_sum_into(dg, N, G.b_fc);
        gemm(dg.data(), false, P.w_fc.data(), true, dln.data(), N, ff, d, false);
        du = dresid;
        G.ln2_gain.fill(T{0});
        G.ln2_bias.fill(T{0});
        for (std::size_t n = 0; n < N; ++n)
            layer_norm_backward<T>(std::span<const T>(dln.data() + n * d, d), std::span<const T>(c.ln2_hat.data() + n * d, d),
                                   P.ln2_gain.values(), c.ln2_rstd[n], std::span<T>(du.data() + n * d, d),
                                   G.ln2_gain.values(), G.ln2_bias.values());

        // attention output projection (da = du)
        gemm(c.attn.data(), true, du.data(), false, G.w_out.data(), d, N, d, false);
        column_sum_into(du, N, G.b_out);
        gemm(du.data(), false, P.w_out.data(), true, dattn.data(), N, d, d, false);

        std::fill(dqkv.begin(), dqkv.end(), T{0});
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t j = 0; j < S; ++j) {
                    const T* base = c.qkv.data() + (b * S + j) * 3 * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        kk[j * dh + e] = base[d + e];
                        vt[e * S + j] = base[2 * d + e];
                    }
                }
                for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t cnt = i + 1;
                    const T* prow = c.probs.data() + ((b * H + h) * S + i) * S;
                    const T* dout = dattn.data() + (b * S + i) * d + h * dh;
                    std::fill(dp.begin(), dp.begin() + static_cast<std::ptrdiff_t>(cnt), T{0});
                    for (std::size_t e = 0; e < dh; ++e) {
                        const T de = dout[e];
                        const T* vr = vt.data() + e * S;
                        for (std::size_t j = 0; j < cnt; ++j) dp[j] += de * vr[j];
                    }
                    double dot = 0.0;
                    for (std::size_t j = 0; j < cnt; ++j) dot += static_cast<double>(prow[j]) * dp[j];
                    T* dq = dqkv.data() + (b * S + i) * 3 * d + h * dh;
                    const T* q = c.qkv.data() + (b * S + i) * 3 * d + h * dh;
                    for (std::size_t j = 0; j < cnt; ++j) {
                        const T pj = prow[j];
                        if (pj == T{0}) continue;
                        const T ds = pj * (dp[j] - static_cast<T>(dot)) * scale;
                        T* dk = dqkv.data() + (b * S + j) * 3 * d + d + h * dh;
                        T* dv = dqkv.data() + (b * S + j) * 3 * d + 2 * d + h * dh;
                        const T* kr = kk.data() + j * dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dq[e] += ds * kr[e];
                            dk[e] += ds * q[e];
                            dv[e] += pj * dout[e];
                        }
                    }
                }
            }
        }
        gemm(c.ln1_out.data(), true, dqkv.data(), false, G.w_qkv.data(), d, N, 3 * d, false);
        column_sum_into(dqkv, N, G.b_qkv);
        gemm(dqkv.data(), false, P.w_qkv.data(), true, dln.data(), N, 3 * d, d, false);
        dresid = du;
        G.ln1_gain.fill(T{0});
        G.ln1_bias.fill(T{0});
        for (std::size_t n = 0; n < N; ++n)
            layer_norm_backward<T>(std::span<const T>(dln.data() + n * d, d), std::span<const T>(c.ln1_hat.data() + n * d, d),
                                   P.ln1_gain.values(), c.ln1_rstd[n], std::span<T>(dresid.data() + n * d, d),
                                   G.ln1_gain.values(), G.ln1_bias.values());
    }

    grads.token_embedding.fill(T{0});
    grads.position_embedding.fill(T{0});
    for (std::size_t n = 0; n < N; ++n) {
        const T* g = dresid.data() + n * d;
        T* te = grads.token_embedding.data() + static_cast<std::size_t>(batch.tokens[n]) * d;
        T* pe = grads.position_embedding.data() + (n % S) * d;
        for (std::size_t i = 0; i < d; ++i) {
            te[i] += g[i];
            pe[i] += g[i];
        }
    }
    return loss_value;
}

template struct BasicRunPlan<float>;
template struct BasicRunPlan<double>;
template struct BasicRunTrace<float>;
template struct BasicRunTrace<double>;
template struct ParamSet<float>;
template struct ParamSet<double>;
template class Transformer<float>;
template class Transformer<double>;
template int argmax<float>(std::span<const float>);
template int argmax<double>(std::span<const double>);

}  // namespace hoplab

// SPDX-License-Identifier: Apache-2.0
//
// Instrumented decoder-only transformer.
//
// Each block follows the sequential residual update
//
//   a = W_o attn(LN1(h_prev))            (causal, multi-head)
//   m = W_proj gelu(W_fc LN2(a + h_prev))
//   h = h_prev + a + m
//
// and every intermediate can be captured through a RunPlan. The same plan
// can overwrite residual-stream vectors (patching) and mask attention edges
// (knockout). The backward pass is written out by hand for this fixed
// architecture.
#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hoplab/kgraph.hpp"
#include "hoplab/numkit.hpp"

namespace hoplab {

struct ModelConfig {
    int layers = 12;
    int d_model = 128;
    int heads = 4;
    int d_ff = 512;
    int vocab_size = 0;
    int max_seq_len = 16;
    std::uint64_t seed = 1;
    double init_std = 0.1;
    double ln_eps = 1e-5;

    int head_dim() const { return d_model / heads; }
    // Throws ConfigError.
    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class HookKind : std::uint8_t {
    resid_pre,      // residual stream entering the block (h_prev)
    attn_proj_out,  // a
    mlp_fc_in,      // LN2(a + h_prev), the key side of the MLP
    mlp_fc_in_pre,  // a + h_prev before normalization
    mlp_fc_out,     // m
    resid_post,     // h
    attn_weights,   // heads x seq_len attention row of the position (capture only)
};

const char* to_string(HookKind kind);
HookKind hook_kind_from_string(const std::string& name);

struct HookPoint {
    HookKind kind = HookKind::resid_post;
    int layer = 0;
    int position = 0;
    friend auto operator<=>(const HookPoint&, const HookPoint&) = default;
};

template <typename T>
struct BasicPatch {
    HookPoint point;  // resid_pre or resid_post only
    std::vector<T> vector;
};

// Adds -inf to the pre-softmax logits of edges source -> target for all heads
// in layers [layer_begin, layer_end).
struct Knockout {
    int layer_begin = 0;
    int layer_end = 0;
    std::vector<int> sources;
    int target = 0;
};

template <typename T>
struct BasicRunPlan {
    std::vector<HookPoint> captures;
    std::vector<BasicPatch<T>> patches;
    std::vector<Knockout> knockouts;

    bool empty() const { return captures.empty() && patches.empty() && knockouts.empty(); }
    // Throws PlanError for out-of-range layers/positions, bad vector lengths,
    // duplicate patches or patches outside the residual stream.
    void validate(const ModelConfig& cfg, int seq_len) const;
};

template <typename T>
struct BasicRunTrace {
    int seq_len = 0;
    int vocab = 0;
    std::map<HookPoint, std::vector<T>> captured;
    std::vector<T> logits;  // seq_len x vocab

    std::span<const T> logits_at(int position) const;
    // Throws PlanError when the point was not captured.
    const std::vector<T>& at(const HookPoint& point) const;
};

using RunPlan = BasicRunPlan<float>;
using RunTrace = BasicRunTrace<float>;
using Patch = BasicPatch<float>;

template <typename T>
struct LayerParams {
    BasicTensor<T> ln1_gain, ln1_bias;
    BasicTensor<T> w_qkv, b_qkv;  // d x 3d, 3d
    BasicTensor<T> w_out, b_out;  // d x d, d
    BasicTensor<T> ln2_gain, ln2_bias;
    BasicTensor<T> w_fc, b_fc;      // d x ff, ff
    BasicTensor<T> w_proj, b_proj;  // ff x d, d
};

template <typename T>
struct ParamSet {
    BasicTensor<T> token_embedding;     // vocab x d
    BasicTensor<T> position_embedding;  // max_seq_len x d
    std::vector<LayerParams<T>> layers;
    BasicTensor<T> lnf_gain, lnf_bias;
    BasicTensor<T> w_unembed, b_unembed;  // d x vocab, vocab

    static ParamSet zeros(const ModelConfig& cfg);
    // Fixed block order; names are used by checkpoints and gradient reports.
    std::vector<std::pair<std::string, BasicTensor<T>*>> blocks();
    std::vector<std::pair<std::string, const BasicTensor<T>*>> blocks() const;
};

// Rows of equal length. targets[i] is the token expected after tokens[i];
// negative targets are excluded from the loss.
struct TokenBatch {
    int rows = 0;
    int seq_len = 0;
    std::vector<TokenId> tokens;
    std::vector<TokenId> targets;
};

template <typename T>
class Transformer {
  public:
    // Random initialization from cfg.seed.
    explicit Transformer(const ModelConfig& cfg);
    Transformer(const ModelConfig& cfg, ParamSet<T> params);

    const ModelConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    BasicRunTrace<T> forward(std::span<const TokenId> tokens, const BasicRunPlan<T>& plan = {}) const;

    // Rows may differ in length; each plan applies to its own row. An empty
    // plans span means no plan for any row.
    std::vector<BasicRunTrace<T>> forward_batch(std::span<const TokenSeq> rows,
                                                std::span<const BasicRunPlan<T>> plans = {}) const;

    // Greedy decoding, ties broken by the lowest token id. The plan is applied
    // at its absolute positions on every decode step.
    TokenSeq generate(std::span<const TokenId> prompt, int max_new, const BasicRunPlan<T>& plan = {}) const;
    std::vector<TokenSeq> generate_batch(std::span<const TokenSeq> prompts, int max_new,
                                         std::span<const BasicRunPlan<T>> plans = {}) const;

    // Final LayerNorm + unembedding applied to a captured resid_post vector.
    std::vector<T> logit_lens(const BasicRunTrace<T>& trace, int layer, int position) const;

    double loss(const TokenBatch& batch) const;
    // Mean next-token cross-entropy; grads is overwritten.
    double loss_and_grad(const TokenBatch& batch, ParamSet<T>& grads) const;

    // FNV-1a over the raw parameter bytes in block order.
    std::uint64_t checksum() const;

  private:
    struct Workspace;
    void run(const TokenId* tokens, int rows, int seq_len, std::span<const int> row_lengths,
             std::span<const BasicRunPlan<T>> plans, bool keep_cache, Workspace& ws,
             std::vector<BasicRunTrace<T>>* traces) const;

    ModelConfig cfg_;
    ParamSet<T> params_;
};

using Model = Transformer<float>;

// Index of the largest element; the lowest index wins ties.
template <typename T>
int argmax(std::span<const T> values);

// Checkpoint file: "LRC1", u32 version, u64 JSON length, JSON header
// ({"model": config, "step": n, "seed": s}), then per tensor u16 name length,
// name, u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u64 extents, payload.
// All integers little-endian.
struct CheckpointInfo {
    long step = 0;
    std::uint64_t seed = 0;
};

template <typename T>
void save_checkpoint(const Transformer<T>& model, const CheckpointInfo& info, const std::filesystem::path& path);

// Throws CheckpointError on magic/version mismatch, truncation, or a tensor
// layout that disagrees with the stored config.
Model load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace hoplab

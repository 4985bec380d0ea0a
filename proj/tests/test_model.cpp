// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "hoplab/io.hpp"
#include "hoplab/model.hpp"

using namespace hoplab;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.layers = 3;
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    c.vocab_size = 13;
    c.max_seq_len = 8;
    c.seed = 5;
    c.init_std = 0.3;
    return c;
}

const TokenSeq kPrompt{0, 4, 7, 9, 2};

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("hoplab_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::vector<HookPoint> every_point(const ModelConfig& c, int seq_len, HookKind kind) {
    std::vector<HookPoint> pts;
    for (int l = 0; l < c.layers; ++l)
        for (int p = 0; p < seq_len; ++p) pts.push_back({kind, l, p});
    return pts;
}

}  // namespace

TEST(Model, ResidualStreamDecomposes) {
    const Transformer<double> m(tiny_config());
    const int n = static_cast<int>(kPrompt.size());
    BasicRunPlan<double> plan;
    for (HookKind k : {HookKind::resid_pre, HookKind::attn_proj_out, HookKind::mlp_fc_in_pre, HookKind::mlp_fc_out,
                       HookKind::resid_post}) {
        const auto pts = every_point(m.config(), n, k);
        plan.captures.insert(plan.captures.end(), pts.begin(), pts.end());
    }
    const auto tr = m.forward(kPrompt, plan);
    for (int l = 0; l < m.config().layers; ++l) {
        for (int p = 0; p < n; ++p) {
            const auto& pre = tr.at({HookKind::resid_pre, l, p});
            const auto& a = tr.at({HookKind::attn_proj_out, l, p});
            const auto& mid = tr.at({HookKind::mlp_fc_in_pre, l, p});
            const auto& mlp = tr.at({HookKind::mlp_fc_out, l, p});
            const auto& post = tr.at({HookKind::resid_post, l, p});
            for (std::size_t i = 0; i < post.size(); ++i) {
                EXPECT_NEAR(post[i], pre[i] + a[i] + mlp[i], 1e-12);
                EXPECT_NEAR(mid[i], pre[i] + a[i], 1e-12);
            }
            if (l + 1 < m.config().layers) EXPECT_EQ(tr.at({HookKind::resid_pre, l + 1, p}), post);
        }
    }
}

TEST(Model, MlpKeyIsNormalizedMidStream) {
    const Model m(tiny_config());
    RunPlan plan;
    plan.captures = {{HookKind::mlp_fc_in, 1, 2}, {HookKind::mlp_fc_in_pre, 1, 2}};
    const auto tr = m.forward(kPrompt, plan);
    const auto& pre = tr.at({HookKind::mlp_fc_in_pre, 1, 2});
    std::vector<float> expect(pre.size());
    const auto& lp = m.params().layers[1];
    layer_norm<float>(pre, lp.ln2_gain.values(), lp.ln2_bias.values(), m.config().ln_eps, expect);
    const auto& got = tr.at({HookKind::mlp_fc_in, 1, 2});
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-5);
}

TEST(Model, Causality) {
    const Model m(tiny_config());
    const auto base = m.forward(kPrompt);
    TokenSeq changed = kPrompt;
    changed[3] = 11;
    const auto other = m.forward(changed);
    for (int p = 0; p < 3; ++p) {
        const auto a = base.logits_at(p), b = other.logits_at(p);
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << "position " << p;
    }
    const auto a = base.logits_at(3), b = other.logits_at(3);
    EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Model, EmptyPlanIsBitIdenticalAndBatchRowsAgree) {
    const Model m(tiny_config());
    const auto plain = m.forward(kPrompt);
    EXPECT_EQ(m.forward(kPrompt, RunPlan{}).logits, plain.logits);
    const std::vector<TokenSeq> rows{kPrompt, TokenSeq{1, 5, 6}, kPrompt};
    const auto batch = m.forward_batch(rows);
    ASSERT_EQ(batch.size(), 3u);
    // The GEMM kernel rounds by row position, so batch rows match a lone
    // forward pass to float precision rather than bit for bit.
    auto near = [](const std::vector<float>& a, const std::vector<float>& b) {
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
    };
    near(batch[0].logits, plain.logits);
    near(batch[2].logits, plain.logits);
    near(batch[1].logits, m.forward(rows[1]).logits);
    // A repeated batch is reproduced exactly.
    const auto again = m.forward_batch(rows);
    for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(again[b].logits, batch[b].logits);
}

TEST(Model, SelfPatchIsANoOp) {
    const Model m(tiny_config());
    RunPlan cap;
    cap.captures = {{HookKind::resid_post, 1, 2}, {HookKind::resid_pre, 2, 4}};
    const auto tr = m.forward(kPrompt, cap);
    RunPlan patch;
    patch.patches = {{{HookKind::resid_post, 1, 2}, tr.at({HookKind::resid_post, 1, 2})},
                     {{HookKind::resid_pre, 2, 4}, tr.at({HookKind::resid_pre, 2, 4})}};
    EXPECT_EQ(m.forward(kPrompt, patch).logits, tr.logits);
}

TEST(Model, PatchChangesDownstreamOnly) {
    const Model m(tiny_config());
    const auto base = m.forward(kPrompt);
    RunPlan patch;
    patch.patches = {{{HookKind::resid_post, 0, 3}, std::vector<float>(16, 0.5f)}};
    const auto tr = m.forward(kPrompt, patch);
    for (int p = 0; p < 3; ++p) {
        const auto a = base.logits_at(p), b = tr.logits_at(p);
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    }
    const auto a = base.logits_at(3), b = tr.logits_at(3);
    EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Model, KnockoutZeroesAttentionEdges) {
    const Model m(tiny_config());
    const int n = static_cast<int>(kPrompt.size());
    RunPlan plan;
    plan.knockouts = {{0, 2, {1, 2}, n - 1}};
    for (int l = 0; l < 3; ++l) plan.captures.push_back({HookKind::attn_weights, l, n - 1});
    const auto tr = m.forward(kPrompt, plan);
    const int heads = m.config().heads;
    for (int l = 0; l < 3; ++l) {
        const auto& w = tr.at({HookKind::attn_weights, l, n - 1});
        ASSERT_EQ(w.size(), static_cast<std::size_t>(heads * n));
        for (int h = 0; h < heads; ++h) {
            double row = 0.0;
            for (int j = 0; j < n; ++j) row += w[static_cast<std::size_t>(h * n + j)];
            EXPECT_NEAR(row, 1.0, 1e-5);
            for (int s : {1, 2}) {
                const float v = w[static_cast<std::size_t>(h * n + s)];
                if (l < 2) EXPECT_EQ(v, 0.0f);
                else EXPECT_GT(v, 0.0f);
            }
        }
    }
    // Other rows keep their edges.
    RunPlan other = plan;
    other.captures = {{HookKind::attn_weights, 0, 3}};
    const auto w3 = m.forward(kPrompt, other).at({HookKind::attn_weights, 0, 3});
    EXPECT_GT(w3[1], 0.0f);
}

TEST(Model, PlanValidation) {
    const Model m(tiny_config());
    RunPlan bad_layer;
    bad_layer.captures = {{HookKind::resid_post, 3, 0}};
    EXPECT_THROW(m.forward(kPrompt, bad_layer), PlanError);
    RunPlan bad_pos;
    bad_pos.captures = {{HookKind::resid_post, 0, 5}};
    EXPECT_THROW(m.forward(kPrompt, bad_pos), PlanError);
    RunPlan bad_len;
    bad_len.patches = {{{HookKind::resid_post, 0, 0}, std::vector<float>(3)}};
    EXPECT_THROW(m.forward(kPrompt, bad_len), PlanError);
    RunPlan not_residual;
    not_residual.patches = {{{HookKind::mlp_fc_out, 0, 0}, std::vector<float>(16)}};
    EXPECT_THROW(m.forward(kPrompt, not_residual), PlanError);
    RunPlan dup;
    dup.patches = {{{HookKind::resid_post, 0, 0}, std::vector<float>(16)},
                   {{HookKind::resid_post, 0, 0}, std::vector<float>(16)}};
    EXPECT_THROW(m.forward(kPrompt, dup), PlanError);
    const auto tr = m.forward(kPrompt);
    EXPECT_THROW(tr.at({HookKind::resid_post, 0, 0}), PlanError);
}

TEST(Model, GreedyGenerationFollowsArgmax) {
    const Model m(tiny_config());
    const TokenSeq prompt{0, 4, 7};
    const TokenSeq out = m.generate(prompt, 3);
    ASSERT_EQ(out.size(), 3u);
    TokenSeq running = prompt;
    for (TokenId t : out) {
        const auto tr = m.forward(running);
        EXPECT_EQ(t, argmax<float>(tr.logits_at(static_cast<int>(running.size()) - 1)));
        running.push_back(t);
    }
    EXPECT_EQ(m.generate(prompt, 3), out);
    const std::vector<TokenSeq> prompts{prompt, TokenSeq{1, 2}};
    const auto batch = m.generate_batch(prompts, 3);
    EXPECT_EQ(batch[0], out);
    EXPECT_EQ(batch[1], m.generate(prompts[1], 3));
}

TEST(Model, ArgmaxPrefersLowestIndex) {
    EXPECT_EQ(argmax<float>(std::vector<float>{1.0f, 3.0f, 3.0f}), 1);
    EXPECT_EQ(argmax<double>(std::vector<double>{-2.0}), 0);
}

TEST(Model, LogitLensOfLastLayerIsTheOutput) {
    const Model m(tiny_config());
    const int last = m.config().layers - 1;
    RunPlan plan;
    plan.captures = every_point(m.config(), 5, HookKind::resid_post);
    const auto tr = m.forward(kPrompt, plan);
    for (int p = 0; p < 5; ++p) {
        const auto lens = m.logit_lens(tr, last, p);
        const auto out = softmax<float>(tr.logits_at(p));
        ASSERT_EQ(lens.size(), out.size());
        for (std::size_t i = 0; i < lens.size(); ++i) EXPECT_NEAR(lens[i], out[i], 1e-6);
        const auto probs = m.logit_lens(tr, 0, p);
        double s = 0.0;
        for (float v : probs) s += v;
        EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Model, LossMatchesPerPositionCrossEntropy) {
    const Transformer<double> m(tiny_config());
    TokenBatch b;
    b.rows = 1;
    b.seq_len = 5;
    b.tokens = kPrompt;
    b.targets = {4, 7, -1, 2, 3};
    const auto tr = m.forward(kPrompt);
    double s = 0.0;
    int n = 0;
    for (int p = 0; p < 5; ++p) {
        if (b.targets[static_cast<std::size_t>(p)] < 0) continue;
        s += cross_entropy_loss<double>(tr.logits_at(p), b.targets[static_cast<std::size_t>(p)]);
        ++n;
    }
    EXPECT_NEAR(m.loss(b), s / n, 1e-12);
    ParamSet<double> g = ParamSet<double>::zeros(m.config());
    EXPECT_NEAR(m.loss_and_grad(b, g), s / n, 1e-12);
}

TEST(Model, CheckpointRoundTrip) {
    const Model m(tiny_config());
    const auto dir = temp_dir("model_ckpt");
    save_checkpoint(m, CheckpointInfo{1234, 99}, dir / "m.lrc");
    CheckpointInfo info;
    const Model back = load_checkpoint(dir / "m.lrc", &info);
    EXPECT_EQ(info.step, 1234);
    EXPECT_EQ(info.seed, 99u);
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(back.checksum(), m.checksum());
    EXPECT_EQ(back.forward(kPrompt).logits, m.forward(kPrompt).logits);
}

TEST(Model, CheckpointSizeFollowsTheLayout) {
    const Model m(tiny_config());
    const auto dir = temp_dir("model_ckpt_size");
    save_checkpoint(m, CheckpointInfo{}, dir / "m.lrc");
    const std::string bytes = read_file(dir / "m.lrc");
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(bytes.substr(0, 4), "LRC1");
    std::uint64_t json_len = 0;
    for (int i = 7; i >= 0; --i) json_len = (json_len << 8) | static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)]);
    std::size_t expected = 16 + json_len;
    for (const auto& [name, t] : m.params().blocks())
        expected += 2 + name.size() + 1 + 1 + 8 * t->rank() + 4 * t->size();
    EXPECT_EQ(bytes.size(), expected);
}

TEST(Model, CorruptCheckpointsAreRejected) {
    const Model m(tiny_config());
    const auto dir = temp_dir("model_ckpt_bad");
    save_checkpoint(m, CheckpointInfo{}, dir / "m.lrc");
    std::string bytes = read_file(dir / "m.lrc");
    std::string magic = bytes;
    magic[0] = 'X';
    write_file(dir / "magic.lrc", magic);
    EXPECT_THROW(load_checkpoint(dir / "magic.lrc"), CheckpointError);
    write_file(dir / "short.lrc", bytes.substr(0, bytes.size() - 7));
    EXPECT_THROW(load_checkpoint(dir / "short.lrc"), CheckpointError);
    EXPECT_THROW(load_checkpoint(dir / "absent.lrc"), Error);
}

TEST(Model, ConfigValidation) {
    ModelConfig c = tiny_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
    EXPECT_EQ(hook_kind_from_string(to_string(HookKind::mlp_fc_in)), HookKind::mlp_fc_in);
}

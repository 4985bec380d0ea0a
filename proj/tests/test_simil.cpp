// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "hoplab/io.hpp"
#include "hoplab/simil.hpp"

using namespace hoplab;

namespace {

struct Fixture {
    Dataset ds;
    Model model;
};

Fixture make_fixture() {
    GraphConfig g;
    g.entity_count = 12;
    g.relation_count = 4;
    g.instances_per_hop = 5;
    g.seed = 2;
    Dataset ds = generate_dataset(g);
    ModelConfig c;
    c.layers = 3;
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    c.vocab_size = ds.graph.vocab().size();
    c.max_seq_len = 8;
    c.seed = 6;
    c.init_std = 0.2;
    return {ds, Model(c)};
}

// Plain dot-product cosine in long double, independent of the library routine.
double ref_cosine(const std::vector<float>& a, const std::vector<float>& b) {
    long double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<long double>(a[i]) * b[i];
        aa += static_cast<long double>(a[i]) * a[i];
        bb += static_cast<long double>(b[i]) * b[i];
    }
    return static_cast<double>(ab / std::sqrt(aa * bb));
}

}  // namespace

TEST(Simil, CosineCases) {
    const std::vector<float> a{1, 2, 3}, neg{-1, -2, -3}, orth{2, -1, 0}, zero{0, 0, 0};
    EXPECT_NEAR(cosine(a, a), 1.0, 1e-12);
    EXPECT_NEAR(cosine(a, neg), -1.0, 1e-12);
    EXPECT_NEAR(cosine(a, orth), 0.0, 1e-12);
    bool degenerate = false;
    EXPECT_EQ(cosine(a, zero, &degenerate), 0.0);
    EXPECT_TRUE(degenerate);
    EXPECT_THROW(cosine(a, std::vector<float>{1, 2}), ShapeError);
}

TEST(Simil, NormalizeCurves) {
    const auto mm = normalize_curve({1, 2, 3});
    EXPECT_EQ(mm.values, (std::vector<double>{0.0, 0.5, 1.0}));
    EXPECT_FALSE(mm.degenerate);
    const auto flat = normalize_curve({0.3, 0.3});
    EXPECT_EQ(flat.values, (std::vector<double>{0.5, 0.5}));
    EXPECT_TRUE(flat.degenerate);
    const auto z = normalize_curve({1, 3}, NormalizeMode::z_score);
    EXPECT_NEAR(z.values[0], -1.0, 1e-12);
    EXPECT_NEAR(z.values[1], 1.0, 1e-12);
    EXPECT_EQ(normalize_curve({4, 4, 4}, NormalizeMode::z_score).values, (std::vector<double>{0, 0, 0}));
}

TEST(Simil, CaptureMatchesForwardPass) {
    const auto f = make_fixture();
    const TokenSeq q = f.ds.instances[0].verbalization(0).tokens;
    const auto lv = capture_hidden(f.model, q, HookKind::mlp_fc_in, 1);
    ASSERT_EQ(lv.size(), 3u);
    RunPlan plan;
    for (int l = 0; l < 3; ++l) plan.captures.push_back({HookKind::mlp_fc_in, l, 1});
    const auto tr = f.model.forward(q, plan);
    for (int l = 0; l < 3; ++l) EXPECT_EQ(lv[static_cast<std::size_t>(l)], tr.at({HookKind::mlp_fc_in, l, 1}));
    EXPECT_THROW(capture_hidden(f.model, q, HookKind::attn_weights, 1), PlanError);
}

TEST(Simil, SelfCurveIsOneAndCrossDiagonalMatches) {
    const auto f = make_fixture();
    const auto& inst = f.ds.instances[0];
    const auto a = capture_hidden(f.model, inst.verbalization(0).tokens, HookKind::resid_post, 1);
    for (double v : same_layer_curve(a, a)) EXPECT_NEAR(v, 1.0, 1e-9);

    const auto singles = single_hop_instances(f.ds.graph, inst);
    const auto b = capture_hidden(f.model, singles[0].verbalization(0).tokens, HookKind::resid_post, 1);
    const auto curve = same_layer_curve(a, b);
    const auto m = cross_layer(a, b);
    ASSERT_EQ(m.size(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(m[l][l], curve[l]);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(m[l][k], ref_cosine(a[l], b[k]), 1e-6);
    }
}

TEST(Simil, PairSimilarityUsesPairedPositions) {
    const auto f = make_fixture();
    for (const auto& inst : f.ds.instances) {
        if (inst.hop_count != 3) continue;
        const auto singles = single_hop_instances(f.ds.graph, inst);
        for (Position pos : {Position::subject, Position::last}) {
            for (int i = 0; i < 3; ++i) {
                const auto& single = singles[static_cast<std::size_t>(i)].verbalization(0);
                EXPECT_EQ(paired_position(single, pos), pos == Position::subject ? 1 : 3);
                const auto p = pair_similarity(f.model, f.ds.graph, inst, i, HookKind::mlp_fc_out, pos);
                const auto mv = capture_hidden(f.model, inst.verbalization(0).tokens, HookKind::mlp_fc_out,
                                               position_index(inst.verbalization(0), pos));
                const auto sv = capture_hidden(f.model, single.tokens, HookKind::mlp_fc_out, paired_position(single, pos));
                ASSERT_EQ(p.raw.size(), 3u);
                for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(p.raw[l], ref_cosine(mv[l], sv[l]), 1e-6);
                EXPECT_EQ(p.normalized, normalize_curve(p.raw).values);
            }
            EXPECT_THROW(pair_similarity(f.model, f.ds.graph, inst, 3, HookKind::mlp_fc_out, pos), IndexError);
        }
        break;
    }
}

TEST(Simil, GroupCurvesAverageRawProfiles) {
    const auto f = make_fixture();
    std::vector<MultiHopInstance> twos;
    for (const auto& i : f.ds.instances)
        if (i.hop_count == 2) twos.push_back(i);
    const auto g = group_curves(f.model, f.ds.graph, twos, HookKind::mlp_fc_in, Position::last, NormalizeMode::min_max, 2);
    ASSERT_EQ(g.groups.size(), 2u);
    for (const auto& grp : g.groups) {
        EXPECT_EQ(grp.total_hops, 2);
        EXPECT_EQ(grp.size, static_cast<long>(twos.size()));
        std::vector<double> mean(3, 0.0);
        for (const auto& inst : twos) {
            const auto p = pair_similarity(f.model, f.ds.graph, inst, grp.hop_index, HookKind::mlp_fc_in, Position::last);
            for (std::size_t l = 0; l < 3; ++l) mean[l] += p.raw[l] / static_cast<double>(twos.size());
        }
        for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(grp.mean_raw[l], mean[l], 1e-12);
    }
    const auto empty = group_curves(f.model, f.ds.graph, {}, HookKind::mlp_fc_in, Position::last);
    EXPECT_TRUE(empty.groups.empty());
    EXPECT_FALSE(empty.notices.empty());
}

TEST(Simil, Hsd1RoundTrip) {
    const LayerVectors v{{1.5f, -2.0f, 0.25f}, {0.0f, 3.0f, -1.0f}};
    const std::string bytes = encode_hsd1(v);
    EXPECT_EQ(bytes.size(), 16u + 2 * 3 * 4);
    EXPECT_EQ(bytes.substr(0, 4), "HSD1");
    EXPECT_EQ(decode_hsd1(bytes), v);
    // Little-endian f32 of 1.5 is 00 00 c0 3f.
    EXPECT_EQ(static_cast<unsigned char>(bytes[19]), 0x3f);
    EXPECT_EQ(static_cast<unsigned char>(bytes[18]), 0xc0);

    const auto dir = std::filesystem::temp_directory_path() / "hoplab_test_hsd1";
    std::filesystem::remove_all(dir);
    write_hsd1(v, dir / "h.hsd1");
    EXPECT_EQ(read_hsd1(dir / "h.hsd1"), v);
}

TEST(Simil, Hsd1Rejections) {
    const LayerVectors v{{1.0f, 2.0f}};
    std::string bytes = encode_hsd1(v);
    std::string magic = bytes;
    magic[0] = 'Z';
    EXPECT_THROW(decode_hsd1(magic), ParseError);
    std::string version = bytes;
    version[4] = 2;
    EXPECT_THROW(decode_hsd1(version), ParseError);
    EXPECT_THROW(decode_hsd1(bytes.substr(0, bytes.size() - 1)), ParseError);
    EXPECT_THROW(decode_hsd1("HS"), ParseError);
    EXPECT_THROW(encode_hsd1({{1.0f}, {1.0f, 2.0f}}), ShapeError);
}

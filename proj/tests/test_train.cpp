// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "hoplab/train.hpp"

using namespace hoplab;

namespace {

Dataset tiny_dataset() {
    GraphConfig g;
    g.entity_count = 12;
    g.relation_count = 4;
    g.instances_per_hop = 10;
    g.train_2hop_fraction = 0.5;
    g.seed = 3;
    return generate_dataset(g);
}

ModelConfig model_for(const Dataset& ds) {
    ModelConfig c;
    c.layers = 2;
    c.d_model = 16;
    c.heads = 2;
    c.d_ff = 32;
    c.vocab_size = ds.graph.vocab().size();
    c.max_seq_len = 8;
    c.seed = 9;
    return c;
}

TrainConfig short_run() {
    TrainConfig t;
    t.max_steps = 6;
    t.eval_every = 3;
    t.batch_size = 16;
    t.warmup_steps = 2;
    t.grad_shards = 4;
    t.seed = 21;
    return t;
}

}  // namespace

TEST(Train, CorpusCoversEveryAtomicFact) {
    const Dataset ds = tiny_dataset();
    const Corpus c = build_corpus(ds, 1);
    const auto& kg = ds.graph;
    ASSERT_EQ(c.atomic.size(), kg.entities().size() * kg.relations().size());
    for (const auto& q : c.atomic) {
        ASSERT_EQ(q.prompt.size(), 4u);
        const int e = kg.vocab().entity_of_token(q.prompt[1]);
        const int r = q.prompt[2] - kg.vocab().relation_token(0);
        EXPECT_EQ(kg.vocab().entity_of_token(q.answer), apply_relation(kg, e, r));
    }
    std::size_t train2 = 0;
    for (const auto& i : ds.instances) train2 += i.split == SplitTag::train;
    EXPECT_EQ(c.segments.size(), c.atomic.size() + train2);
    EXPECT_FALSE(c.held_out.empty());
    EXPECT_EQ(c.held_out.count(1), 0u);
    // Two verbalizations double every segment.
    EXPECT_EQ(build_corpus(ds, 2).segments.size(), 2 * c.segments.size());
}

TEST(Train, UnpackedStreamHoldsOneFactPerRow) {
    const std::vector<TokenSeq> segs{{0, 10, 5, 2, 11}, {0, 12, 6, 7, 2, 13}, {0, 9, 4, 2, 10}};
    BatchStream s(segs, 8, 1, false);
    const TokenBatch b = s.next(5);
    EXPECT_EQ(b.rows, 5);
    EXPECT_EQ(b.seq_len, 6);
    for (int r = 0; r < b.rows; ++r) {
        const auto row = std::span(b.tokens).subspan(static_cast<std::size_t>(r * b.seq_len), 6);
        const auto tgt = std::span(b.targets).subspan(static_cast<std::size_t>(r * b.seq_len), 6);
        bool found = false;
        for (const auto& seg : segs) {
            if (!std::equal(seg.begin(), seg.end(), row.begin())) continue;
            found = true;
            for (std::size_t i = 0; i + 1 < seg.size(); ++i) EXPECT_EQ(tgt[i], seg[i + 1]);
            for (std::size_t i = seg.size() - 1; i < 6; ++i) EXPECT_LT(tgt[i], 0);
        }
        EXPECT_TRUE(found) << "row " << r;
    }
}

TEST(Train, PackedStreamFillsRows) {
    const std::vector<TokenSeq> segs{{0, 10, 5, 2}, {0, 12, 6, 2}, {0, 9, 4, 2}};
    BatchStream s(segs, 8, 1, true);
    const TokenBatch b = s.next(3);
    EXPECT_EQ(b.seq_len, 8);
    for (int r = 0; r < 3; ++r) {
        std::size_t queries = 0;
        for (int i = 0; i < 8; ++i) queries += b.tokens[static_cast<std::size_t>(r * 8 + i)] == 0;
        EXPECT_EQ(queries, 2u);
    }
}

TEST(Train, StreamIsDeterministicAndCyclesAllSegments) {
    std::vector<TokenSeq> segs;
    for (int i = 0; i < 10; ++i) segs.push_back({0, static_cast<TokenId>(10 + i), 2, 5});
    BatchStream a(segs, 8, 4, false), b(segs, 8, 4, false);
    const TokenBatch x = a.next(10);
    EXPECT_EQ(x.tokens, b.next(10).tokens);
    std::set<TokenId> seen;
    for (int r = 0; r < 10; ++r) seen.insert(x.tokens[static_cast<std::size_t>(r * x.seq_len + 1)]);
    EXPECT_EQ(seen.size(), 10u);
    EXPECT_THROW(BatchStream({}, 8, 1), ConfigError);
    EXPECT_THROW(BatchStream({TokenSeq(9, 0)}, 8, 1), LengthError);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
    const Dataset ds = tiny_dataset();
    const Corpus c = build_corpus(ds, 1);
    Model m(model_for(ds));
    const auto before = m.checksum();
    TrainConfig t = short_run();
    t.lr = 0.0;
    const TrainResult r = train(m, c, t);
    EXPECT_EQ(m.checksum(), before);
    EXPECT_EQ(r.steps, 6);
    ASSERT_EQ(r.history.size(), 2u);
    EXPECT_EQ(r.history[0].step, 3);
}

TEST(Train, LossDecreasesOnAFixedBatch) {
    const Dataset ds = tiny_dataset();
    const Corpus c = build_corpus(ds, 1);
    Model m(model_for(ds));
    BatchStream s(c.segments, 8, 2, false);
    const TokenBatch b = s.next(32);
    const double start = m.loss(b);
    TrainConfig t = short_run();
    t.max_steps = 60;
    t.eval_every = 60;
    t.lr = 3e-3;
    train(m, c, t);
    EXPECT_LT(m.loss(b), start);
}

TEST(Train, ResultIndependentOfWorkerCount) {
    const Dataset ds = tiny_dataset();
    const Corpus c = build_corpus(ds, 1);
    Model one(model_for(ds)), four(model_for(ds)), again(model_for(ds));
    TrainConfig t = short_run();
    t.workers = 1;
    const auto r1 = train(one, c, t);
    train(again, c, t);
    t.workers = 4;
    const auto r4 = train(four, c, t);
    EXPECT_EQ(one.checksum(), again.checksum());
    EXPECT_EQ(one.checksum(), four.checksum());
    ASSERT_EQ(r1.history.size(), r4.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) EXPECT_EQ(r1.history[i].loss, r4.history[i].loss);
}

TEST(Train, EvaluationReportsEveryBucket) {
    const Dataset ds = tiny_dataset();
    const Corpus c = build_corpus(ds, 1);
    Model m(model_for(ds));
    std::vector<TrainMetrics> seen;
    train(m, c, short_run(), [&](const TrainMetrics& x) { seen.push_back(x); });
    ASSERT_EQ(seen.size(), 2u);
    for (const auto& x : seen) {
        EXPECT_GE(x.atomic_accuracy, 0.0);
        EXPECT_LE(x.atomic_accuracy, 1.0);
        EXPECT_EQ(x.held_out_accuracy.size(), c.held_out.size());
        EXPECT_TRUE(std::isfinite(x.loss));
    }
    EXPECT_NEAR(seen.back().atomic_accuracy, greedy_accuracy(m, c.atomic), 1e-12);
}

TEST(Train, ConfigValidation) {
    TrainConfig t;
    t.batch_size = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = TrainConfig{};
    t.grad_shards = 0;
    EXPECT_THROW(t.validate(), ConfigError);
}

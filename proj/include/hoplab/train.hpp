// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "hoplab/kgraph.hpp"
#include "hoplab/model.hpp"
#include "hoplab/numkit.hpp"
#include "hoplab/rng.hpp"

namespace hoplab {

struct TrainConfig {
    long max_steps = 50000;
    int batch_size = 256;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    long warmup_steps = 200;
    double grad_clip = 1.0;  // global norm; <= 0 disables
    long eval_every = 500;
    double atomic_target = 0.99;
    double multi_hop_target = 0.90;  // train-split multi-hop accuracy
    int train_variants = 1;          // verbalization variants seen in training
    std::uint64_t seed = 1;
    // Each batch is split into this many row shards whose gradients are
    // combined in shard order. The shard count fixes the arithmetic, so the
    // worker count changes speed but never the result.
    int grad_shards = 8;
    int workers = 1;
    // false: one fact per row, so every fact sits at the same absolute
    // positions; true: concatenate facts up to max_seq_len per row.
    bool pack_rows = false;

    void validate() const;
};

// A prompt ending in [A] and the expected answer token.
struct Query {
    TokenSeq prompt;
    TokenId answer = 0;
};

struct Corpus {
    // Complete facts (prompt + answer); packed into training rows.
    std::vector<TokenSeq> segments;
    std::vector<Query> atomic;                       // every (e, r) pair, variant 0
    std::map<int, std::vector<Query>> train_multi;   // hop count -> train-split queries
    std::map<int, std::vector<Query>> held_out;      // hop count -> held-out queries
};

Corpus build_corpus(const Dataset& ds, int train_variants);

struct TrainMetrics {
    long step = 0;
    double loss = 0.0;  // mean training loss since the previous report
    double atomic_accuracy = 0.0;
    std::map<int, double> train_accuracy;
    std::map<int, double> held_out_accuracy;
};

struct TrainResult {
    std::vector<TrainMetrics> history;
    long steps = 0;
    bool reached_target = false;
};

// Draws shuffled segments into rows. Packed rows hold as many whole segments
// as fit in max_seq_len; unpacked rows hold one segment each and are as long
// as the longest segment. Deterministic given the seed.
class BatchStream {
  public:
    BatchStream(const std::vector<TokenSeq>& segments, int max_seq_len, std::uint64_t seed, bool pack = true);
    TokenBatch next(int rows);

  private:
    const std::vector<TokenSeq>& segments_;
    int max_seq_len_;
    int row_len_;
    bool pack_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// Fraction of queries whose greedy next token equals the answer.
double greedy_accuracy(const Model& model, const std::vector<Query>& queries, int chunk = 512);

// Next-token cross-entropy over full rows with Adam. Stops at max_steps or
// once the accuracy targets are met at an evaluation point. Throws
// TrainingError on a non-finite loss.
TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::function<void(const TrainMetrics&)>& on_eval = {});

// Finite-difference check of the transformer backward pass on a small 64-bit
// model (vocab 11, seq 6, batch 3) with random tokens and one masked target.
GradCheckReport check_model_gradients(int layers = 2, int d_model = 16, std::uint64_t seed = 7,
                                      const GradCheckOptions& opts = {});

}  // namespace hoplab

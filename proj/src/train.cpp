// SPDX-License-Identifier: Apache-2.0
#include "hoplab/train.hpp"

#include <algorithm>
#include <cmath>

#include "hoplab/errors.hpp"
#include "hoplab/parallel.hpp"

namespace hoplab {

void TrainConfig::validate() const {
    if (max_steps < 1) throw ConfigError("max_steps must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (eval_every < 1) throw ConfigError("eval_every must be positive");
    if (train_variants < 1 || train_variants > 2) throw ConfigError("train_variants must be 1 or 2");
    if (grad_shards < 1 || grad_shards > batch_size) throw ConfigError("grad_shards must lie in [1, batch_size]");
}

namespace {

Query make_query(const MultiHopInstance& inst, int variant, const Vocabulary& vocab) {
    return {inst.verbalization(variant).tokens, vocab.entity_token(inst.answer())};
}

}  // namespace

Corpus build_corpus(const Dataset& ds, int train_variants) {
    const KnowledgeGraph& kg = ds.graph;
    const Vocabulary& vocab = kg.vocab();
    Corpus c;
    const int variants = std::min(train_variants, ds.config.verbalization_variants);
    for (const auto& e : kg.entities()) {
        for (const auto& r : kg.relations()) {
            MultiHopInstance atom;
            atom.hop_count = 1;
            atom.subject = e.id;
            atom.relations = {r.id};
            atom.chain = {e.id, r.mapping[static_cast<std::size_t>(e.id)]};
            for (int v = 0; v < variants; ++v) {
                atom.verbalizations.push_back(verbalize(kg, atom, v));
                TokenSeq seg = atom.verbalizations.back().tokens;
                seg.push_back(vocab.entity_token(atom.answer()));
                c.segments.push_back(std::move(seg));
            }
            c.atomic.push_back(make_query(atom, 0, vocab));
        }
    }
    for (const auto& inst : ds.instances) {
        if (inst.split == SplitTag::train) {
            for (int v = 0; v < std::min<int>(variants, static_cast<int>(inst.verbalizations.size())); ++v) {
                TokenSeq seg = inst.verbalization(v).tokens;
                seg.push_back(vocab.entity_token(inst.answer()));
                c.segments.push_back(std::move(seg));
            }
            c.train_multi[inst.hop_count].push_back(make_query(inst, 0, vocab));
        } else {
            c.held_out[inst.hop_count].push_back(make_query(inst, 0, vocab));
        }
    }
    return c;
}

BatchStream::BatchStream(const std::vector<TokenSeq>& segments, int max_seq_len, std::uint64_t seed, bool pack)
    : segments_(segments), max_seq_len_(max_seq_len), row_len_(max_seq_len), pack_(pack), rng_(seed) {
    if (segments_.empty()) throw ConfigError("training corpus is empty");
    std::size_t longest = 0;
    for (const auto& s : segments_) {
        if (static_cast<int>(s.size()) > max_seq_len_)
            throw LengthError("training segment longer than max_seq_len");
        longest = std::max(longest, s.size());
    }
    if (!pack_) row_len_ = static_cast<int>(longest);
    order_.resize(segments_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
}

TokenBatch BatchStream::next(int rows) {
    TokenBatch b;
    b.rows = rows;
    b.seq_len = row_len_;
    const auto S = static_cast<std::size_t>(row_len_);
    b.tokens.assign(static_cast<std::size_t>(rows) * S, Vocabulary::kQuery);
    b.targets.assign(b.tokens.size(), -1);
    for (int r = 0; r < rows; ++r) {
        std::size_t len = 0;
        TokenId* row = b.tokens.data() + static_cast<std::size_t>(r) * S;
        while (true) {
            if (cursor_ == order_.size()) {
                rng_.shuffle(order_);
                cursor_ = 0;
            }
            const TokenSeq& seg = segments_[order_[cursor_]];
            if (len + seg.size() > S) break;
            std::copy(seg.begin(), seg.end(), row + len);
            len += seg.size();
            ++cursor_;
            if (!pack_) break;
        }
        TokenId* tgt = b.targets.data() + static_cast<std::size_t>(r) * S;
        for (std::size_t t = 0; t + 1 < len; ++t) tgt[t] = row[t + 1];
    }
    return b;
}

double greedy_accuracy(const Model& model, const std::vector<Query>& queries, int chunk) {
    if (queries.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < queries.size(); start += static_cast<std::size_t>(chunk)) {
        const std::size_t end = std::min(queries.size(), start + static_cast<std::size_t>(chunk));
        std::vector<TokenSeq> rows;
        for (std::size_t i = start; i < end; ++i) rows.push_back(queries[i].prompt);
        const auto traces = model.forward_batch(rows);
        for (std::size_t i = start; i < end; ++i) {
            const auto& tr = traces[i - start];
            if (argmax<float>(tr.logits_at(tr.seq_len - 1)) == queries[i].answer) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(queries.size());
}

namespace {

TrainMetrics evaluate(const Model& model, const Corpus& corpus, long step, double loss) {
    TrainMetrics m;
    m.step = step;
    m.loss = loss;
    m.atomic_accuracy = greedy_accuracy(model, corpus.atomic);
    for (const auto& [k, qs] : corpus.train_multi) m.train_accuracy[k] = greedy_accuracy(model, qs);
    for (const auto& [k, qs] : corpus.held_out) m.held_out_accuracy[k] = greedy_accuracy(model, qs);
    return m;
}

TokenBatch slice_rows(const TokenBatch& b, int begin, int end) {
    TokenBatch s;
    s.rows = end - begin;
    s.seq_len = b.seq_len;
    const auto S = static_cast<std::ptrdiff_t>(b.seq_len);
    s.tokens.assign(b.tokens.begin() + begin * S, b.tokens.begin() + end * S);
    s.targets.assign(b.targets.begin() + begin * S, b.targets.begin() + end * S);
    return s;
}

// Loss and gradient of the whole batch as the target-count weighted sum of
// per-shard results, accumulated in shard order.
double sharded_loss_and_grad(const Model& model, const TokenBatch& batch, int shards, int workers,
                             std::vector<ParamSet<float>>& shard_grads, ParamSet<float>& grads) {
    if (shards == 1) return model.loss_and_grad(batch, grads);
    std::vector<TokenBatch> parts;
    std::vector<double> counts;
    double total = 0.0;
    for (int s = 0; s < shards; ++s) {
        const int begin = batch.rows * s / shards, end = batch.rows * (s + 1) / shards;
        parts.push_back(slice_rows(batch, begin, end));
        counts.push_back(static_cast<double>(std::count_if(parts.back().targets.begin(), parts.back().targets.end(),
                                                           [](TokenId t) { return t >= 0; })));
        total += counts.back();
    }
    if (total == 0.0) throw ShapeError("batch has no loss targets");
    if (shard_grads.size() != parts.size()) shard_grads.assign(parts.size(), ParamSet<float>::zeros(model.config()));
    std::vector<double> losses(parts.size(), 0.0);
    parallel_for(parts.size(), workers, [&](std::size_t s) {
        if (counts[s] > 0.0) losses[s] = model.loss_and_grad(parts[s], shard_grads[s]);
    });
    auto out = grads.blocks();
    for (auto& [n, g] : out) g->fill(0.0f);
    double loss = 0.0;
    for (std::size_t s = 0; s < parts.size(); ++s) {
        if (counts[s] == 0.0) continue;
        const double w = counts[s] / total;
        loss += w * losses[s];
        const auto src = shard_grads[s].blocks();
        const auto wf = static_cast<float>(w);
        for (std::size_t b = 0; b < out.size(); ++b) {
            float* dst = out[b].second->data();
            const float* from = src[b].second->data();
            for (std::size_t i = 0, n = out[b].second->size(); i < n; ++i) dst[i] += wf * from[i];
        }
    }
    return loss;
}

bool targets_met(const TrainMetrics& m, const TrainConfig& cfg) {
    if (m.atomic_accuracy < cfg.atomic_target) return false;
    for (const auto& [k, acc] : m.train_accuracy)
        if (acc < cfg.multi_hop_target) return false;
    return true;
}

}  // namespace

TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::function<void(const TrainMetrics&)>& on_eval) {
    cfg.validate();
    BatchStream stream(corpus.segments, model.config().max_seq_len, cfg.seed, cfg.pack_rows);
    auto grads = ParamSet<float>::zeros(model.config());
    std::vector<Tensor*> pvec;
    std::vector<const Tensor*> gvec;
    for (auto& [n, t] : model.params().blocks()) pvec.push_back(t);
    for (auto& [n, t] : grads.blocks()) gvec.push_back(t);
    AdamState<float> adam(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps}, pvec);

    std::vector<ParamSet<float>> shard_grads;
    TrainResult result;
    double loss_acc = 0.0;
    long loss_n = 0;
    for (long step = 1; step <= cfg.max_steps; ++step) {
        const TokenBatch batch = stream.next(cfg.batch_size);
        const double loss = sharded_loss_and_grad(model, batch, cfg.grad_shards, cfg.workers, shard_grads, grads);
        if (!std::isfinite(loss)) throw TrainingError("non-finite training loss at step " + std::to_string(step), step);
        loss_acc += loss;
        ++loss_n;

        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const Tensor* g : gvec)
                for (float v : g->values()) sq += static_cast<double>(v) * v;
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) throw TrainingError("non-finite gradient at step " + std::to_string(step), step);
            if (norm > cfg.grad_clip) {
                const auto k = static_cast<float>(cfg.grad_clip / norm);
                for (auto& [n, g] : grads.blocks())
                    for (float& v : g->values()) v *= k;
            }
        }
        const double warm = cfg.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps)) : 1.0;
        adam_step<float>(pvec, gvec, adam, warm);

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            TrainMetrics m = evaluate(model, corpus, step, loss_acc / static_cast<double>(loss_n));
            loss_acc = 0.0;
            loss_n = 0;
            result.history.push_back(m);
            if (on_eval) on_eval(m);
            result.steps = step;
            if (targets_met(m, cfg)) {
                result.reached_target = true;
                break;
            }
        }
        result.steps = step;
    }
    return result;
}

GradCheckReport check_model_gradients(int layers, int d_model, std::uint64_t seed, const GradCheckOptions& opts) {
    ModelConfig mc;
    mc.layers = layers;
    mc.d_model = d_model;
    mc.heads = 2;
    mc.d_ff = 4 * d_model;
    mc.vocab_size = 11;
    mc.max_seq_len = 8;
    mc.seed = seed;
    mc.init_std = 0.3;  // large enough that every block carries signal
    Transformer<double> model(mc);

    Rng rng(derive_seed(seed, 17));
    TokenBatch batch;
    batch.rows = 3;
    batch.seq_len = 6;
    for (int i = 0; i < batch.rows * batch.seq_len; ++i) {
        batch.tokens.push_back(static_cast<TokenId>(rng.uniform_index(11)));
        batch.targets.push_back(static_cast<TokenId>(rng.uniform_index(11)));
    }
    batch.targets[4] = -1;

    auto grads = ParamSet<double>::zeros(mc);
    model.loss_and_grad(batch, grads);
    std::vector<ParamBlockRef> refs;
    auto pblocks = model.params().blocks();
    auto gblocks = grads.blocks();
    for (std::size_t i = 0; i < pblocks.size(); ++i) refs.push_back({pblocks[i].first, pblocks[i].second, gblocks[i].second});
    return grad_check(refs, [&] { return model.loss(batch); }, opts);
}

}  // namespace hoplab

#pragma once

// Instruction-tuning loop: seeded per-epoch shuffles, round-robin batch
// mixing across datasets, one adaptive-moment step per batch on the
// joint loss, and checkpointing hooks.

#include <string>
#include <vector>

#include "stit/checkpoint.hpp"
#include "stit/pipeline.hpp"

namespace stit {

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainConfig {
    int epochs = 100;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double grad_clip = 0.0;
    uint64_t seed = 1;
    int checkpoint_every = 0;  // epochs; 0 = only on demand

    void validate() const {
        if (epochs < 1) throw DataError("train config: epochs must be >= 1");
        if (batch_size < 1) throw DataError("train config: batch size must be >= 1");
    }
};

template <class T>
class Trainer {
public:
    Trainer(ModelBundle<T>& bundle, std::vector<std::vector<CorpusEntry>> corpora,
            const TrainConfig& cfg)
        : bundle_(bundle), corpora_(std::move(corpora)), cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
        OptimizerConfig oc;
        oc.learning_rate = cfg_.learning_rate;
        oc.beta1 = cfg_.beta1;
        oc.beta2 = cfg_.beta2;
        oc.weight_decay = cfg_.weight_decay;
        oc.grad_clip = cfg_.grad_clip;
        optimizer_ = AdamOptimizer<T>(oc);
        size_t total = 0;
        for (const auto& c : corpora_) total += c.size();
        if (total == 0) throw DataError("trainer: no training records");
    }

    AdamOptimizer<T>& optimizer() { return optimizer_; }
    Rng& rng() { return rng_; }
    int64_t steps_done() const { return steps_done_; }
    void set_steps_done(int64_t s) { steps_done_ = s; }

    // one pass over all corpora; returns the averaged loss breakdown
    LossBreakdown train_epoch(int epoch_index = 0) {
        // per-dataset shuffled queues
        std::vector<std::vector<size_t>> order(corpora_.size());
        for (size_t d = 0; d < corpora_.size(); ++d) {
            order[d].resize(corpora_[d].size());
            for (size_t i = 0; i < order[d].size(); ++i) order[d][i] = i;
            rng_.shuffle(order[d]);
        }
        std::vector<size_t> cursor(corpora_.size(), 0);

        LossBreakdown sum;
        size_t batches = 0;
        size_t exhausted = 0;
        size_t d = 0;
        while (exhausted < corpora_.size()) {
            const size_t ds = d % corpora_.size();
            ++d;
            if (cursor[ds] >= order[ds].size()) continue;
            std::vector<const CorpusEntry*> batch;
            while (cursor[ds] < order[ds].size() && int(batch.size()) < cfg_.batch_size)
                batch.push_back(&corpora_[ds][order[ds][cursor[ds]++]]);
            if (cursor[ds] >= order[ds].size()) ++exhausted;
            if (batch.empty()) continue;

            auto result = compute_losses(bundle_, batch);
            if (!std::isfinite(result.breakdown.total))
                throw NumericError("non-finite loss in epoch " + std::to_string(epoch_index) +
                                   ", batch " + std::to_string(batches) + " (dataset " +
                                   batch.front()->rec.dataset + ")");
            backward(result.total);
            optimizer_.step(bundle_.params);
            ++steps_done_;
            sum.l_llm += result.breakdown.l_llm;
            sum.l_r += result.breakdown.l_r;
            sum.l_c += result.breakdown.l_c;
            sum.total += result.breakdown.total;
            ++batches;
        }
        if (batches) {
            sum.l_llm /= double(batches);
            sum.l_r /= double(batches);
            sum.l_c /= double(batches);
            sum.total /= double(batches);
        }
        return sum;
    }

    // full run; per-epoch averages in return order
    std::vector<LossBreakdown> run(const std::string& checkpoint_dir = "",
                                   const nlohmann::json& configs = {}) {
        std::vector<LossBreakdown> history;
        for (int e = 0; e < cfg_.epochs; ++e) {
            history.push_back(train_epoch(e));
            if (!checkpoint_dir.empty() && cfg_.checkpoint_every > 0 &&
                (e + 1) % cfg_.checkpoint_every == 0)
                save(checkpoint_dir + "/epoch" + std::to_string(e + 1) + ".stit", configs);
        }
        return history;
    }

    void save(const std::string& path, const nlohmann::json& configs = {}) {
        static_assert(std::is_same_v<T, float>, "checkpoints are float32");
        CheckpointExtras extras;
        extras.configs = configs;
        extras.tokenizer = bundle_.tokenizer.to_json();
        extras.rng_state = rng_.state();
        extras.step_counter = steps_done_;
        save_checkpoint(path, bundle_.params, optimizer_, extras);
    }

    void restore_rng(const std::array<uint64_t, 4>& state) { rng_.set_state(state); }

private:
    ModelBundle<T>& bundle_;
    std::vector<std::vector<CorpusEntry>> corpora_;
    TrainConfig cfg_;
    Rng rng_;
    AdamOptimizer<T> optimizer_;
    int64_t steps_done_ = 0;
};

}  // namespace stit

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capslab/checkpoint.hpp"
#include "capslab/dataset.hpp"

namespace capslab {

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0, train_acc = 0, valid_acc = 0;
    double seconds = 0;
};

struct TrainOptions {
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    std::uint64_t seed = 7;
    double lr = 1e-3;
    std::size_t valid_eval_cap = 0;  // 0 = evaluate the full validation set per epoch
    std::function<void(const EpochMetrics&)> on_epoch;
};

// Seeded parameter initialization; a fixed draw order makes runs repeatable.
Params init_params(const ModelConfig& cfg, std::uint64_t seed);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochMetrics> metrics;
};

// Adam over the capsule loss. Single-threaded and deterministic for a fixed
// seed; throws on divergence (NaN loss) naming epoch and batch.
TrainResult train(const ModelConfig& cfg, const Dataset& train_set, const Dataset& valid_set,
                  const TrainOptions& opts);

struct EvalResult {
    double accuracy = 0;
    std::vector<std::size_t> per_class_correct, per_class_total;
    std::vector<int> predictions;

    double class_accuracy(std::size_t c) const {
        return per_class_total[c] ? static_cast<double>(per_class_correct[c]) / per_class_total[c]
                                  : 0.0;
    }
};

// Masked (or dense, with the default mask) classification accuracy.
EvalResult evaluate(const ModelConfig& cfg, const Params& params, const Dataset& ds,
                    const UnitMask& mask = {}, std::size_t batch_size = 64,
                    std::size_t workers = 1);

// Runs fn(task_index) for every task; tasks are distributed round-robin over
// workers so outputs can be merged in task order.
void parallel_tasks(std::size_t n_tasks, std::size_t workers,
                    const std::function<void(std::size_t)>& fn);

}  // namespace capslab

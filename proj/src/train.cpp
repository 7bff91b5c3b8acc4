#include "capslab/train.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>
#include <thread>

namespace capslab {

namespace {

void fill_kaiming_uniform(Tensor& t, std::size_t fan_in, std::mt19937_64& rng) {
    const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-limit, limit);
    for (auto& v : t.data) v = dist(rng);
}

}  // namespace

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Params p = Params::zeros(cfg);
    fill_kaiming_uniform(p.conv_w, cfg.in_c * cfg.conv_k * cfg.conv_k, rng);
    fill_kaiming_uniform(p.pc_w, cfg.conv_out * cfg.pc_k * cfg.pc_k, rng);
    std::normal_distribution<float> wdist(0.0f, 0.01f);
    for (auto& v : p.W.data) v = wdist(rng);
    std::size_t prev = cfg.num_classes * cfg.cc_dim;
    for (std::size_t l = 0; l < p.dec_w.size(); ++l) {
        fill_kaiming_uniform(p.dec_w[l], prev, rng);
        prev = p.dec_w[l].shape[0];
    }
    return p;
}

TrainResult train(const ModelConfig& cfg, const Dataset& train_set, const Dataset& valid_set,
                  const TrainOptions& opts) {
    cfg.validate();
    if (opts.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");

    TrainResult res;
    res.checkpoint = Checkpoint(cfg);
    res.checkpoint.seed = opts.seed;
    Params& params = res.checkpoint.params;
    params = init_params(cfg, opts.seed);
    Adam& opt = res.checkpoint.opt;
    opt.lr = opts.lr;

    BatchIterator batches(train_set.size(), opts.batch_size, opts.seed);
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0;
        std::size_t correct = 0, seen = 0, batch_no = 0;
        for (const auto& idx : batches.next_epoch()) {
            Tensor xs = train_set.gather(idx);
            std::vector<int> labels;
            labels.reserve(idx.size());
            for (std::size_t i : idx) labels.push_back(train_set.labels[i]);

            BatchTrace<float> tr = forward_batch(cfg, params, xs, {}, true, &labels);
            Params grads = Params::zeros(cfg);
            const double loss = loss_backward(cfg, params, tr, labels, grads);
            if (!std::isfinite(loss))
                throw std::runtime_error("train: loss diverged (NaN/Inf) at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_no));
            opt.step(params, grads);

            loss_sum += loss * static_cast<double>(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) correct += tr.pred[i] == labels[i];
            seen += idx.size();
            ++batch_no;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_sum / static_cast<double>(seen);
        m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        if (valid_set.size() > 0) {
            const Dataset* vs = &valid_set;
            Dataset capped;
            if (opts.valid_eval_cap > 0 && opts.valid_eval_cap < valid_set.size()) {
                std::vector<std::size_t> idx(opts.valid_eval_cap);
                for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
                capped = valid_set.subset(idx, valid_set.split_tag);
                vs = &capped;
            }
            m.valid_acc = evaluate(cfg, params, *vs).accuracy;
        }
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.checkpoint.epoch = static_cast<std::uint32_t>(epoch + 1);
        res.metrics.push_back(m);
        if (opts.on_epoch) opts.on_epoch(m);
    }
    return res;
}

void parallel_tasks(std::size_t n_tasks, std::size_t workers,
                    const std::function<void(std::size_t)>& fn) {
    if (workers <= 1) {
        for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n_tasks; i += workers) fn(i);
        });
    for (auto& t : pool) t.join();
}

EvalResult evaluate(const ModelConfig& cfg, const Params& params, const Dataset& ds,
                    const UnitMask& mask, std::size_t batch_size, std::size_t workers) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    const std::size_t n_batches = (ds.size() + batch_size - 1) / batch_size;
    EvalResult res;
    res.per_class_correct.assign(cfg.num_classes, 0);
    res.per_class_total.assign(cfg.num_classes, 0);
    res.predictions.assign(ds.size(), -1);

    parallel_tasks(n_batches, workers, [&](std::size_t b) {
        const std::size_t lo = b * batch_size, hi = std::min(ds.size(), lo + batch_size);
        std::vector<std::size_t> idx(hi - lo);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = lo + i;
        Tensor xs = ds.gather(idx);
        BatchTrace<float> tr = forward_batch(cfg, params, xs, mask);
        for (std::size_t i = 0; i < idx.size(); ++i) res.predictions[lo + i] = tr.pred[i];
    });

    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int y = ds.labels[i];
        ++res.per_class_total[static_cast<std::size_t>(y)];
        if (res.predictions[i] == y) {
            ++correct;
            ++res.per_class_correct[static_cast<std::size_t>(y)];
        }
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
    return res;
}

}  // namespace capslab

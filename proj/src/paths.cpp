#include "capslab/paths.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "capslab/train.hpp"

namespace capslab {

namespace {

// Indices 0..n-1 ordered by non-increasing score, ties by lower index.
std::vector<std::size_t> order_desc(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });
    return idx;
}

// Forward score of each PC type for one sample: max final-iteration coupling
// coefficient over the type's positions and all classes.
std::vector<double> type_scores_forward(const ModelConfig& cfg, const BatchTrace<float>& tr,
                                        std::size_t s) {
    const std::size_t sp = cfg.pc_spatial(), m = cfg.num_classes;
    std::vector<double> scores(cfg.pc_types, 0.0);
    for (std::size_t t = 0; t < cfg.pc_types; ++t)
        for (std::size_t pos = 0; pos < sp; ++pos)
            for (std::size_t j = 0; j < m; ++j)
                scores[t] = std::max(scores[t], static_cast<double>(tr.e_at(s, t * sp + pos, j)));
    return scores;
}

// Backward score: restricted to the predicted class's coefficient column.
std::vector<double> type_scores_backward(const ModelConfig& cfg, const BatchTrace<float>& tr,
                                         std::size_t s) {
    const std::size_t sp = cfg.pc_spatial();
    const auto j = static_cast<std::size_t>(tr.pred[s]);
    std::vector<double> scores(cfg.pc_types, 0.0);
    for (std::size_t t = 0; t < cfg.pc_types; ++t)
        for (std::size_t pos = 0; pos < sp; ++pos)
            scores[t] = std::max(scores[t], static_cast<double>(tr.e_at(s, t * sp + pos, j)));
    return scores;
}

PathSpec build_path(const std::string& direction, const std::vector<double>& scores,
                    double threshold, std::size_t k_pc,
                    const std::vector<std::size_t>& conv_keep) {
    PathSpec path;
    path.direction = direction;
    path.conv_keep = conv_keep;
    std::vector<std::size_t> order = order_desc(scores);
    std::size_t above = 0;
    for (double s : scores) above += s > threshold;
    path.starved = above == 0;
    const std::size_t take = path.starved ? std::min(k_pc, scores.size())
                                          : std::min(k_pc, above);
    for (std::size_t i = 0; i < take; ++i) {
        path.pc_keep.push_back(order[i]);
        path.coeffs.push_back(scores[order[i]]);
    }
    return path;
}

}  // namespace

UnitRanking gap_rank_conv(const ModelConfig& cfg, const BatchTrace<float>& tr,
                          std::size_t sample) {
    require(sample < tr.n, "gap_rank_conv: sample out of range");
    const std::size_t f = cfg.conv_out, p = cfg.conv_h() * cfg.conv_w_();
    std::vector<double> scores(f);
    for (std::size_t fi = 0; fi < f; ++fi) {
        const float* ch = tr.conv_act.ptr() + (sample * f + fi) * p;
        double sum = 0;
        for (std::size_t i = 0; i < p; ++i) sum += ch[i];
        scores[fi] = sum / static_cast<double>(p);
    }
    UnitRanking r;
    r.layer = "conv";
    r.units = order_desc(scores);
    for (std::size_t u : r.units) r.scores.push_back(scores[u]);
    return r;
}

UnitMask PathSpec::to_mask() const {
    UnitMask m;
    if (!conv_keep.empty()) m.conv_keep = conv_keep;
    if (!pc_keep.empty()) m.pc_type_keep = pc_keep;
    return m;
}

nlohmann::ordered_json PathSpec::to_json() const {
    nlohmann::ordered_json j;
    j["direction"] = direction;
    j["class"] = cls;
    j["conv_keep"] = conv_keep;
    j["pc_keep"] = pc_keep;
    j["coefficients"] = coeffs;
    j["starved"] = starved;
    return j;
}

PathSpec PathSpec::from_json(const nlohmann::json& j) {
    PathSpec p;
    p.direction = j.at("direction").get<std::string>();
    p.cls = j.value("class", -1);
    p.conv_keep = j.at("conv_keep").get<std::vector<std::size_t>>();
    p.pc_keep = j.at("pc_keep").get<std::vector<std::size_t>>();
    p.coeffs = j.value("coefficients", std::vector<double>{});
    p.starved = j.value("starved", false);
    return p;
}

PathSpec forward_path(const ModelConfig& cfg, const BatchTrace<float>& tr, std::size_t sample,
                      double threshold, std::size_t k_pc, std::size_t k_conv) {
    require(sample < tr.n, "forward_path: sample out of range");
    require(k_pc >= 1, "forward_path: k_pc must be >= 1");
    UnitRanking gap = gap_rank_conv(cfg, tr, sample);
    std::vector<std::size_t> conv(gap.units.begin(),
                                  gap.units.begin() + std::min(k_conv, gap.units.size()));
    return build_path("forward", type_scores_forward(cfg, tr, sample), threshold, k_pc, conv);
}

PathSpec backward_path(const ModelConfig& cfg, const BatchTrace<float>& tr, std::size_t sample,
                       std::size_t k_pc, std::size_t k_conv) {
    require(sample < tr.n, "backward_path: sample out of range");
    UnitRanking gap = gap_rank_conv(cfg, tr, sample);
    std::vector<std::size_t> conv(gap.units.begin(),
                                  gap.units.begin() + std::min(k_conv, gap.units.size()));
    // Class-aware: only the predicted class's column matters, so no threshold.
    PathSpec p = build_path("backward", type_scores_backward(cfg, tr, sample), -1.0, k_pc, conv);
    p.starved = false;
    return p;
}

UnitRanking rank_units_dataset(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                               const std::string& layer, std::size_t workers) {
    require(layer == "conv" || layer == "pc", "rank_units: layer must be conv or pc");
    require(ds.size() > 0, "rank_units: empty dataset");
    const std::size_t n_units = layer == "conv" ? cfg.conv_out : cfg.pc_types;
    const std::size_t batch = 64;
    const std::size_t n_batches = (ds.size() + batch - 1) / batch;
    std::vector<std::vector<double>> partial(n_batches);

    parallel_tasks(n_batches, workers, [&](std::size_t b) {
        const std::size_t lo = b * batch, hi = std::min(ds.size(), lo + batch);
        std::vector<std::size_t> idx(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        BatchTrace<float> tr = forward_batch(cfg, p, ds.gather(idx));
        std::vector<double> sums(n_units, 0.0);
        for (std::size_t s = 0; s < idx.size(); ++s) {
            if (layer == "conv") {
                const std::size_t px = cfg.conv_h() * cfg.conv_w_();
                for (std::size_t f = 0; f < n_units; ++f) {
                    const float* ch = tr.conv_act.ptr() + (s * cfg.conv_out + f) * px;
                    double acc = 0;
                    for (std::size_t i = 0; i < px; ++i) acc += ch[i];
                    sums[f] += acc / static_cast<double>(px);
                }
            } else {
                const std::vector<double> sc = type_scores_forward(cfg, tr, s);
                for (std::size_t t = 0; t < n_units; ++t) sums[t] += sc[t];
            }
        }
        partial[b] = std::move(sums);
    });

    std::vector<double> scores(n_units, 0.0);
    for (const auto& part : partial)
        for (std::size_t u = 0; u < n_units; ++u) scores[u] += part[u];
    for (double& s : scores) s /= static_cast<double>(ds.size());

    UnitRanking r;
    r.layer = layer;
    r.units = order_desc(scores);
    for (std::size_t u : r.units) r.scores.push_back(scores[u]);
    return r;
}

TopkCurve select_topk_cv(const ModelConfig& cfg, const Params& p, const Dataset& valid,
                         const std::string& layer, const std::vector<std::size_t>& k_grid,
                         std::size_t workers) {
    require(!k_grid.empty(), "select_topk_cv: empty k grid");
    require(valid.size() > 0, "select_topk_cv: empty validation set");
    TopkCurve curve;
    curve.layer = layer;
    curve.ranking = rank_units_dataset(cfg, p, valid, layer, workers);

    for (std::size_t k : k_grid) {
        require(k >= 1 && k <= curve.ranking.units.size(), "select_topk_cv: k out of range");
        std::vector<std::size_t> keep(curve.ranking.units.begin(),
                                      curve.ranking.units.begin() + k);
        UnitMask mask;
        if (layer == "conv")
            mask.conv_keep = keep;
        else
            mask.pc_type_keep = keep;
        curve.k.push_back(k);
        curve.accuracy.push_back(evaluate(cfg, p, valid, mask, 64, workers).accuracy);
    }

    double best = curve.accuracy[0];
    std::size_t best_i = 0;
    for (std::size_t i = 1; i < curve.k.size(); ++i)
        if (curve.accuracy[i] > best) {  // strict: smallest k wins ties
            best = curve.accuracy[i];
            best_i = i;
        }
    curve.k_star = curve.k[best_i];
    return curve;
}

PathSpec class_path(const ModelConfig& cfg, const Params& p, const Dataset& ds, int cls,
                    const std::string& direction, std::size_t k_pc, std::size_t k_conv,
                    double threshold, std::size_t workers) {
    require(direction == "forward" || direction == "backward", "class_path: bad direction");
    EvalResult ev = evaluate(cfg, p, ds, {}, 64, workers);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.labels[i] == cls && ev.predictions[i] == cls) idx.push_back(i);
    if (idx.empty())
        throw std::runtime_error("class_path: no correctly-classified examples of class " +
                                 std::to_string(cls));

    // Mean-rank aggregation over the class's examples.
    std::vector<double> conv_rank_sum(cfg.conv_out, 0.0), pc_rank_sum(cfg.pc_types, 0.0);
    std::vector<double> pc_score_sum(cfg.pc_types, 0.0);
    std::size_t starved_count = 0;

    const std::size_t batch = 64;
    const std::size_t n_batches = (idx.size() + batch - 1) / batch;
    std::vector<std::vector<double>> pc_r(n_batches), cv_r(n_batches), pc_s(n_batches);
    std::vector<std::size_t> starve(n_batches, 0);
    parallel_tasks(n_batches, workers, [&](std::size_t b) {
        const std::size_t lo = b * batch, hi = std::min(idx.size(), lo + batch);
        std::vector<std::size_t> part(idx.begin() + lo, idx.begin() + hi);
        BatchTrace<float> tr = forward_batch(cfg, p, ds.gather(part));
        cv_r[b].assign(cfg.conv_out, 0.0);
        pc_r[b].assign(cfg.pc_types, 0.0);
        pc_s[b].assign(cfg.pc_types, 0.0);
        for (std::size_t s = 0; s < part.size(); ++s) {
            UnitRanking gap = gap_rank_conv(cfg, tr, s);
            for (std::size_t r = 0; r < gap.units.size(); ++r)
                cv_r[b][gap.units[r]] += static_cast<double>(r);
            const std::vector<double> sc = direction == "forward"
                                               ? type_scores_forward(cfg, tr, s)
                                               : type_scores_backward(cfg, tr, s);
            std::vector<std::size_t> order = order_desc(sc);
            for (std::size_t r = 0; r < order.size(); ++r)
                pc_r[b][order[r]] += static_cast<double>(r);
            for (std::size_t t = 0; t < cfg.pc_types; ++t) pc_s[b][t] += sc[t];
            if (direction == "forward") {
                bool any = false;
                for (double v : sc) any = any || v > threshold;
                starve[b] += !any;
            }
        }
    });
    for (std::size_t b = 0; b < n_batches; ++b) {
        for (std::size_t f = 0; f < cfg.conv_out; ++f) conv_rank_sum[f] += cv_r[b][f];
        for (std::size_t t = 0; t < cfg.pc_types; ++t) {
            pc_rank_sum[t] += pc_r[b][t];
            pc_score_sum[t] += pc_s[b][t];
        }
        starved_count += starve[b];
    }

    // Lower mean rank = more relevant; order_desc wants larger-is-better.
    std::vector<double> conv_key(cfg.conv_out), pc_key(cfg.pc_types);
    for (std::size_t f = 0; f < cfg.conv_out; ++f) conv_key[f] = -conv_rank_sum[f];
    for (std::size_t t = 0; t < cfg.pc_types; ++t) pc_key[t] = -pc_rank_sum[t];
    std::vector<std::size_t> conv_order = order_desc(conv_key), pc_order = order_desc(pc_key);

    PathSpec path;
    path.direction = direction;
    path.cls = cls;
    path.conv_keep.assign(conv_order.begin(),
                          conv_order.begin() + std::min(k_conv, conv_order.size()));
    const std::size_t take = std::min(k_pc, pc_order.size());
    for (std::size_t i = 0; i < take; ++i) {
        path.pc_keep.push_back(pc_order[i]);
        path.coeffs.push_back(pc_score_sum[pc_order[i]] / static_cast<double>(idx.size()));
    }
    path.starved = direction == "forward" && starved_count == idx.size();
    return path;
}

PathSpec dataset_path(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                      const std::string& direction, std::size_t k_pc, std::size_t k_conv,
                      double threshold, std::size_t workers) {
    require(direction == "forward" || direction == "backward", "dataset_path: bad direction");
    require(ds.size() > 0, "dataset_path: empty dataset");
    require(k_pc >= 1, "dataset_path: k_pc must be >= 1");
    const std::size_t batch = 64;
    const std::size_t n_batches = (ds.size() + batch - 1) / batch;
    std::vector<std::vector<double>> conv_part(n_batches), pc_part(n_batches);
    std::vector<std::size_t> starve(n_batches, 0);
    parallel_tasks(n_batches, workers, [&](std::size_t b) {
        const std::size_t lo = b * batch, hi = std::min(ds.size(), lo + batch);
        std::vector<std::size_t> idx(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        BatchTrace<float> tr = forward_batch(cfg, p, ds.gather(idx));
        conv_part[b].assign(cfg.conv_out, 0.0);
        pc_part[b].assign(cfg.pc_types, 0.0);
        const std::size_t px = cfg.conv_h() * cfg.conv_w_();
        for (std::size_t s = 0; s < idx.size(); ++s) {
            for (std::size_t f = 0; f < cfg.conv_out; ++f) {
                const float* ch = tr.conv_act.ptr() + (s * cfg.conv_out + f) * px;
                double acc = 0;
                for (std::size_t i = 0; i < px; ++i) acc += ch[i];
                conv_part[b][f] += acc / static_cast<double>(px);
            }
            const std::vector<double> sc = direction == "forward"
                                               ? type_scores_forward(cfg, tr, s)
                                               : type_scores_backward(cfg, tr, s);
            bool any = false;
            for (std::size_t t = 0; t < cfg.pc_types; ++t) {
                pc_part[b][t] += sc[t];
                any = any || sc[t] > threshold;
            }
            starve[b] += !any;
        }
    });
    std::vector<double> conv_score(cfg.conv_out, 0.0), pc_score(cfg.pc_types, 0.0);
    std::size_t starved_examples = 0;
    for (std::size_t b = 0; b < n_batches; ++b) {
        for (std::size_t f = 0; f < cfg.conv_out; ++f) conv_score[f] += conv_part[b][f];
        for (std::size_t t = 0; t < cfg.pc_types; ++t) pc_score[t] += pc_part[b][t];
        starved_examples += starve[b];
    }
    for (double& v : conv_score) v /= static_cast<double>(ds.size());
    for (double& v : pc_score) v /= static_cast<double>(ds.size());

    PathSpec path;
    path.direction = direction;
    std::vector<std::size_t> conv_order = order_desc(conv_score);
    path.conv_keep.assign(conv_order.begin(),
                          conv_order.begin() + std::min(k_conv, conv_order.size()));
    std::vector<std::size_t> pc_order = order_desc(pc_score);
    const std::size_t take = std::min(k_pc, pc_order.size());
    for (std::size_t i = 0; i < take; ++i) {
        path.pc_keep.push_back(pc_order[i]);
        path.coeffs.push_back(pc_score[pc_order[i]]);
    }
    path.starved = direction == "forward" && starved_examples == ds.size();
    return path;
}

double path_accuracy(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                     const std::string& direction, std::size_t k_pc, std::size_t k_conv,
                     double threshold, std::size_t workers) {
    PathSpec path = dataset_path(cfg, p, ds, direction, k_pc, k_conv, threshold, workers);
    return evaluate(cfg, p, ds, path.to_mask(), 64, workers).accuracy;
}

std::pair<int, Tensor> sparse_inference(const ModelConfig& cfg, const Params& p, const Tensor& x,
                                        const PathSpec& path) {
    UnitMask mask = path.to_mask();
    mask.validate(cfg);
    BatchTrace<float> tr = forward_one(cfg, p, x, mask, true);
    const std::size_t px = cfg.input_pixels();
    Tensor recon({cfg.in_c, cfg.in_h, cfg.in_w},
                 std::vector<float>(tr.recon.ptr(), tr.recon.ptr() + px));
    return {tr.pred[0], std::move(recon)};
}

OverlapReport unit_overlap(const std::vector<std::vector<std::size_t>>& sets) {
    require(!sets.empty(), "unit_overlap: no sets");
    const std::size_t c = sets.size(), k = sets[0].size();
    for (const auto& s : sets)
        if (s.size() != k)
            throw std::invalid_argument("unit_overlap: sets must have equal size (k)");

    OverlapReport rep;
    rep.k = k;
    rep.shared.assign(c, std::vector<std::size_t>(c, 0));
    rep.exclusive.assign(c, 0);
    auto contains = [](const std::vector<std::size_t>& s, std::size_t u) {
        return std::find(s.begin(), s.end(), u) != s.end();
    };
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = 0; b < c; ++b) {
            if (a == b) {
                rep.shared[a][b] = k;
                continue;
            }
            for (std::size_t u : sets[a]) rep.shared[a][b] += contains(sets[b], u);
        }
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t u : sets[a]) {
            bool elsewhere = false;
            for (std::size_t b = 0; b < c && !elsewhere; ++b)
                elsewhere = b != a && contains(sets[b], u);
            rep.exclusive[a] += !elsewhere;
        }
    return rep;
}

}  // namespace capslab

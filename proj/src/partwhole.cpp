#include "capslab/partwhole.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "capslab/train.hpp"

namespace capslab {

namespace {

std::vector<std::size_t> order_desc(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });
    return idx;
}

// Backward (predicted-class column) score per unit of the chosen universe.
std::vector<double> backward_scores(const ModelConfig& cfg, const BatchTrace<float>& tr,
                                    std::size_t s, const std::string& universe) {
    const auto j = static_cast<std::size_t>(tr.pred[s]);
    if (universe == "pc_unit") {
        std::vector<double> sc(cfg.n_pc());
        for (std::size_t i = 0; i < cfg.n_pc(); ++i) sc[i] = tr.e_at(s, i, j);
        return sc;
    }
    const std::size_t sp = cfg.pc_spatial();
    std::vector<double> sc(cfg.pc_types, 0.0);
    for (std::size_t t = 0; t < cfg.pc_types; ++t)
        for (std::size_t pos = 0; pos < sp; ++pos)
            sc[t] = std::max(sc[t], static_cast<double>(tr.e_at(s, t * sp + pos, j)));
    return sc;
}

GrayImage gray_of(const DTensor& m) { return to_gray(m.ptr(), m.shape[0], m.shape[1]); }

}  // namespace

Heatmap unit_saliency(const ModelConfig& cfg, const Params& p, const Tensor& x,
                      const std::string& layer, std::size_t unit) {
    UnitMask mask;
    if (layer == "pc_unit") {
        require(unit < cfg.n_pc(), "unit_saliency: PC capsule index out of range");
        mask.pc_unit_keep = std::vector<std::size_t>{unit};
    } else if (layer == "pc_type") {
        require(unit < cfg.pc_types, "unit_saliency: PC type index out of range");
        mask.pc_type_keep = std::vector<std::size_t>{unit};
    } else if (layer == "cc") {
        // Full network; the heatmap is conditioned on the predicted class.
    } else {
        throw std::invalid_argument("unit_saliency: unknown layer " + layer);
    }
    Heatmap h;
    h.layer = layer;
    h.unit = unit;
    h.values = saliency_map(cfg, p, x, mask, &h.dead);
    return h;
}

void normalize_per_unit(std::vector<Heatmap*>& group) {
    require(!group.empty(), "normalize_per_unit: empty group");
    double lo = group[0]->values[0], hi = lo;
    for (const Heatmap* h : group)
        for (double v : h->values.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    for (Heatmap* h : group) {
        if (hi > lo) {
            for (double& v : h->values.data) v = (v - lo) / (hi - lo);
        } else {
            h->values.fill(0.0);  // constant group
        }
        h->normalized = true;
        h->norm_lo = lo;
        h->norm_hi = hi;
    }
}

BinaryMask binarize(const Heatmap& h_cc, double threshold) {
    require(h_cc.normalized, "binarize: heatmap must be normalized");
    BinaryMask m;
    m.h = h_cc.values.shape[0];
    m.w = h_cc.values.shape[1];
    m.threshold = threshold;
    m.bits.resize(h_cc.values.size());
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = h_cc.values[i] >= threshold;
    return m;
}

double rma(const Heatmap& h_pc, const BinaryMask& mask, bool* zero_mass) {
    require(h_pc.values.size() == mask.bits.size(), "rma: shape mismatch");
    require(!mask.empty(), "rma: empty mask");
    if (zero_mass) *zero_mass = false;
    double inside = 0, total = 0;
    for (std::size_t i = 0; i < mask.bits.size(); ++i) {
        const double v = h_pc.values[i];
        require(v >= 0, "rma: heatmap must be nonnegative");
        total += v;
        if (mask.bits[i]) inside += v;
    }
    if (total == 0) {
        if (zero_mass) *zero_mass = true;
        return 0.0;
    }
    return inside / total;
}

Heatmap aggregate_heatmaps(const std::vector<const Heatmap*>& maps) {
    require(!maps.empty(), "aggregate_heatmaps: no maps");
    Heatmap out = *maps[0];
    for (std::size_t i = 1; i < maps.size(); ++i) {
        require(maps[i]->values.shape == out.values.shape,
                "aggregate_heatmaps: shape mismatch");
        for (std::size_t j = 0; j < out.values.size(); ++j)
            out.values[j] = std::max(out.values[j], maps[i]->values[j]);
    }
    return out;
}

RmaResult rma_study(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                    const RmaOptions& opts) {
    require(opts.unit_universe == "pc_unit" || opts.unit_universe == "pc_type",
            "rma_study: unit universe must be pc_unit or pc_type");
    require(!opts.thresholds.empty(), "rma_study: no thresholds");
    const std::size_t m = cfg.num_classes;
    const std::size_t universe = opts.unit_universe == "pc_unit" ? cfg.n_pc() : cfg.pc_types;
    const std::string pc_layer = opts.unit_universe;

    // Correctly-classified examples, up to per_class of each class.
    EvalResult ev = evaluate(cfg, p, ds, {}, 64, opts.workers);
    std::vector<std::size_t> examples;
    std::vector<std::size_t> n_of_class(m, 0);
    for (std::size_t c = 0; c < m; ++c)
        for (std::size_t i = 0; i < ds.size() && n_of_class[c] < opts.per_class; ++i)
            if (ds.labels[i] == static_cast<int>(c) && ev.predictions[i] == static_cast<int>(c)) {
                examples.push_back(i);
                ++n_of_class[c];
            }
    require(!examples.empty(), "rma_study: no correctly-classified examples");

    // Per-class backward-path top-k over the chosen universe (mean rank).
    std::vector<std::vector<double>> rank_sum(m, std::vector<double>(universe, 0.0));
    {
        const std::size_t batch = 64;
        const std::size_t n_batches = (examples.size() + batch - 1) / batch;
        std::vector<std::vector<std::vector<double>>> partial(n_batches);
        parallel_tasks(n_batches, opts.workers, [&](std::size_t b) {
            const std::size_t lo = b * batch, hi = std::min(examples.size(), lo + batch);
            std::vector<std::size_t> part(examples.begin() + lo, examples.begin() + hi);
            BatchTrace<float> tr = forward_batch(cfg, p, ds.gather(part));
            partial[b].assign(m, std::vector<double>(universe, 0.0));
            for (std::size_t s = 0; s < part.size(); ++s) {
                const auto c = static_cast<std::size_t>(tr.pred[s]);
                std::vector<std::size_t> order =
                    order_desc(backward_scores(cfg, tr, s, opts.unit_universe));
                for (std::size_t r = 0; r < order.size(); ++r)
                    partial[b][c][order[r]] += static_cast<double>(r);
            }
        });
        for (const auto& part : partial)
            for (std::size_t c = 0; c < m; ++c)
                for (std::size_t u = 0; u < universe; ++u) rank_sum[c][u] += part[c][u];
    }
    const std::size_t k_used = std::min(opts.k, universe);
    std::vector<std::vector<std::size_t>> sets(m);
    for (std::size_t c = 0; c < m; ++c) {
        std::vector<double> key(universe);
        for (std::size_t u = 0; u < universe; ++u) key[u] = -rank_sum[c][u];
        std::vector<std::size_t> order = order_desc(key);
        sets[c].assign(order.begin(), order.begin() + k_used);
    }

    // Saliency maps: one CC map per example, one PC map per (example, unit).
    const std::size_t n_ex = examples.size();
    std::vector<Heatmap> cc(n_ex);
    std::vector<std::vector<Heatmap>> pc(n_ex);
    parallel_tasks(n_ex, opts.workers, [&](std::size_t e) {
        const Tensor x = ds.image(examples[e]);
        const auto c = static_cast<std::size_t>(ds.labels[examples[e]]);
        cc[e] = unit_saliency(cfg, p, x, "cc", c);
        pc[e].reserve(k_used);
        for (std::size_t u : sets[c]) pc[e].push_back(unit_saliency(cfg, p, x, pc_layer, u));
    });

    // Per-unit normalization: PC maps grouped by unit id, CC maps by class.
    std::map<std::size_t, std::vector<Heatmap*>> pc_groups;
    std::map<std::size_t, std::vector<Heatmap*>> cc_groups;
    for (std::size_t e = 0; e < n_ex; ++e) {
        cc_groups[static_cast<std::size_t>(ds.labels[examples[e]])].push_back(&cc[e]);
        for (Heatmap& h : pc[e]) pc_groups[h.unit].push_back(&h);
    }
    for (auto& [u, g] : pc_groups) normalize_per_unit(g);
    for (auto& [c, g] : cc_groups) normalize_per_unit(g);

    RmaResult res;
    res.k_used = k_used;
    res.unit_universe = opts.unit_universe;
    res.n_examples = n_ex;

    auto push_row = [](std::vector<RmaRow>& rows, double thr, const std::vector<double>& scores,
                       std::size_t excluded, std::size_t zero_mass) {
        RmaRow row;
        row.threshold = thr;
        row.pairs = scores.size();
        row.excluded = excluded;
        row.zero_mass = zero_mass;
        if (!scores.empty()) {
            double sum = 0;
            for (double s : scores) sum += s;
            row.mean = sum / static_cast<double>(scores.size());
            double var = 0;
            for (double s : scores) var += (s - row.mean) * (s - row.mean);
            row.stddev = std::sqrt(var / static_cast<double>(scores.size()));
        }
        rows.push_back(row);
    };

    const bool want_iso = opts.mode == "isolated" || opts.mode == "both";
    const bool want_agg = opts.mode == "aggregated" || opts.mode == "both";
    std::vector<Heatmap> composite(n_ex);
    if (want_agg)
        for (std::size_t e = 0; e < n_ex; ++e) {
            std::vector<const Heatmap*> ptrs;
            for (const Heatmap& h : pc[e]) ptrs.push_back(&h);
            composite[e] = aggregate_heatmaps(ptrs);
        }

    for (double thr : opts.thresholds) {
        std::vector<double> iso_scores, agg_scores;
        std::size_t iso_excl = 0, agg_excl = 0, iso_zero = 0, agg_zero = 0;
        for (std::size_t e = 0; e < n_ex; ++e) {
            BinaryMask mask = binarize(cc[e], thr);
            if (mask.empty()) {
                if (want_iso) iso_excl += pc[e].size();
                if (want_agg) ++agg_excl;
                continue;
            }
            if (want_iso)
                for (const Heatmap& h : pc[e]) {
                    bool zm = false;
                    iso_scores.push_back(rma(h, mask, &zm));
                    iso_zero += zm;
                }
            if (want_agg) {
                bool zm = false;
                agg_scores.push_back(rma(composite[e], mask, &zm));
                agg_zero += zm;
            }
        }
        if (want_iso) push_row(res.isolated, thr, iso_scores, iso_excl, iso_zero);
        if (want_agg) push_row(res.aggregated, thr, agg_scores, agg_excl, agg_zero);
    }

    // Qualitative sheet: first example of each class; panels input | CC |
    // binarized CC | PC composite | overlap.
    std::vector<GrayImage> tiles;
    const double sheet_thr = opts.thresholds[0];
    for (std::size_t c = 0; c < m; ++c) {
        std::size_t e = 0;
        bool found = false;
        for (std::size_t i = 0; i < n_ex; ++i)
            if (static_cast<std::size_t>(ds.labels[examples[i]]) == c) {
                e = i;
                found = true;
                break;
            }
        if (!found) continue;
        const Tensor x = ds.image(examples[e]);
        DTensor input({cfg.in_h, cfg.in_w});
        for (std::size_t i = 0; i < input.size(); ++i) input[i] = x[i];
        BinaryMask mask = binarize(cc[e], sheet_thr);
        DTensor maskmap({cfg.in_h, cfg.in_w});
        for (std::size_t i = 0; i < maskmap.size(); ++i) maskmap[i] = mask.bits[i] ? 1.0 : 0.0;
        const Heatmap& comp = want_agg ? composite[e] : aggregate_heatmaps([&] {
            std::vector<const Heatmap*> ptrs;
            for (const Heatmap& h : pc[e]) ptrs.push_back(&h);
            return ptrs;
        }());
        DTensor overlap({cfg.in_h, cfg.in_w});
        for (std::size_t i = 0; i < overlap.size(); ++i)
            overlap[i] = mask.bits[i] ? comp.values[i] : 0.0;
        tiles.push_back(gray_of(input));
        tiles.push_back(gray_of(cc[e].values));
        tiles.push_back(gray_of(maskmap));
        tiles.push_back(gray_of(comp.values));
        tiles.push_back(gray_of(overlap));
    }
    res.sheet = make_sheet(tiles, 5);
    return res;
}

}  // namespace capslab

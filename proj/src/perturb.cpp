#include "capslab/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "capslab/train.hpp"

namespace capslab {

namespace {

// Flattened 64-bit activation row of `layer` for one sample of a batch trace.
void extract_row(const ModelConfig& cfg, const BatchTrace<float>& tr, std::size_t s,
                 const std::string& layer, double* out, std::size_t dim) {
    const float* src = nullptr;
    if (layer == "conv") {
        src = tr.conv_act.ptr() + s * dim;
    } else if (layer == "pc") {
        src = tr.u.ptr() + s * dim;
    } else if (layer == "v") {
        src = tr.v().ptr() + s * dim;
    } else {
        throw std::invalid_argument("collect_activations: unknown layer " + layer);
    }
    for (std::size_t i = 0; i < dim; ++i) out[i] = src[i];
}

std::size_t layer_dim(const ModelConfig& cfg, const std::string& layer) {
    if (layer == "conv") return cfg.conv_out * cfg.conv_h() * cfg.conv_w_();
    if (layer == "pc") return cfg.n_pc() * cfg.pc_dim;
    if (layer == "v") return cfg.num_classes * cfg.cc_dim;
    throw std::invalid_argument("collect_activations: unknown layer " + layer);
}

}  // namespace

ActivationStats collect_activations(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                                    const std::string& layer, std::size_t per_class_cap,
                                    std::size_t workers) {
    ds.validate();
    ActivationStats st;
    st.layer = layer;
    st.dim = layer_dim(cfg, layer);

    std::vector<std::vector<std::size_t>> by_class(cfg.num_classes);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        by_class[c] = ds.indices_of_class(static_cast<int>(c));
        if (by_class[c].empty())
            throw std::runtime_error("collect_activations: no examples of class " +
                                     std::to_string(c));
        if (per_class_cap > 0 && by_class[c].size() > per_class_cap)
            by_class[c].resize(per_class_cap);
    }

    st.a.reserve(cfg.num_classes);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        const auto& idx = by_class[c];
        DTensor mat({idx.size(), st.dim});
        const std::size_t batch = 64;
        const std::size_t n_batches = (idx.size() + batch - 1) / batch;
        parallel_tasks(n_batches, workers, [&](std::size_t b) {
            const std::size_t lo = b * batch, hi = std::min(idx.size(), lo + batch);
            std::vector<std::size_t> part(idx.begin() + lo, idx.begin() + hi);
            BatchTrace<float> tr = forward_batch(cfg, p, ds.gather(part));
            for (std::size_t s = 0; s < part.size(); ++s)
                extract_row(cfg, tr, s, layer, mat.ptr() + (lo + s) * st.dim, st.dim);
        });
        st.a.push_back(std::move(mat));
    }

    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        const DTensor& mat = st.a[c];
        const std::size_t rows = mat.shape[0];
        DTensor eta({4, st.dim});
        Interval itv{mat[0], mat[0]};
        for (std::size_t j = 0; j < st.dim; ++j) {
            double mn = mat.at2(0, j), mx = mn, sum = 0, sum2 = 0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double v = mat.at2(r, j);
                mn = std::min(mn, v);
                mx = std::max(mx, v);
                sum += v;
                sum2 += v * v;
            }
            const double mean = sum / static_cast<double>(rows);
            // Population std; variance clamped at 0 against rounding.
            const double var = std::max(0.0, sum2 / static_cast<double>(rows) - mean * mean);
            eta.at2(0, j) = mn;
            eta.at2(1, j) = mx;
            eta.at2(2, j) = mean;
            eta.at2(3, j) = std::sqrt(var);
            itv.lo = std::min(itv.lo, mn);
            itv.hi = std::max(itv.hi, mx);
        }
        st.eta.push_back(std::move(eta));
        st.class_interval.push_back(itv);
    }
    st.alpha = estimate_alpha(st);
    return st;
}

Interval estimate_alpha(const ActivationStats& stats) {
    require(!stats.a.empty(), "estimate_alpha: empty stats");
    // Flat scan over all stored matrices; independent of the eta summaries.
    Interval itv{stats.a[0][0], stats.a[0][0]};
    for (const DTensor& mat : stats.a)
        for (double v : mat.data) {
            itv.lo = std::min(itv.lo, v);
            itv.hi = std::max(itv.hi, v);
        }
    return itv;
}

std::vector<double> sweep_values(const Interval& itv, std::size_t steps) {
    require(steps >= 2, "sweep_values: steps must be >= 2");
    if (itv.lo == itv.hi) return {itv.lo};  // degenerate interval
    std::vector<double> v(steps);
    for (std::size_t t = 0; t < steps; ++t)
        v[t] = itv.lo + static_cast<double>(t) * (itv.hi - itv.lo) /
                            static_cast<double>(steps - 1);
    return v;
}

PerturbationSweep perturb_sweep(const ModelConfig& cfg, const Params& p, const Tensor& base_row,
                                int cls, std::size_t dim, const std::vector<double>& values) {
    require(base_row.size() == cfg.num_classes * cfg.cc_dim, "perturb_sweep: bad base row");
    require(dim < cfg.cc_dim, "perturb_sweep: dimension out of range");
    require(!values.empty(), "perturb_sweep: empty value grid");

    PerturbationSweep sw;
    sw.cls = cls;
    sw.dim = dim;
    sw.values = values;
    sw.base_row = base_row;
    sw.degenerate = values.size() == 1;

    const std::size_t width = base_row.size();
    const std::size_t coord = static_cast<std::size_t>(cls) * cfg.cc_dim + dim;
    sw.rows = Tensor({values.size(), width});
    for (std::size_t t = 0; t < values.size(); ++t) {
        std::copy(base_row.data.begin(), base_row.data.end(), sw.rows.ptr() + t * width);
        sw.rows.at2(t, coord) = static_cast<float>(values[t]);
    }
    sw.recons = decode_vector(cfg, p, sw.rows);

    Tensor imgs({values.size(), cfg.in_c, cfg.in_h, cfg.in_w}, sw.recons.data);
    BatchTrace<float> tr = forward_batch(cfg, p, imgs);
    sw.relabels = tr.pred;
    return sw;
}

PerturbResult run_perturb(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                          const PerturbOptions& opts) {
    require(opts.mode == "alpha" || opts.mode == "heuristic" || opts.mode == "class",
            "perturb: mode must be alpha, heuristic or class");
    const std::size_t m = cfg.num_classes, d = cfg.cc_dim, px = cfg.input_pixels();

    ActivationStats stats = collect_activations(cfg, p, ds, "v", 0, opts.workers);
    PerturbResult res;
    res.mode = opts.mode;
    res.alpha = stats.alpha;
    res.class_intervals = stats.class_interval;

    // Correctly-classified seed examples, up to per_class of each class.
    EvalResult ev = evaluate(cfg, p, ds, {}, 64, opts.workers);
    std::vector<std::size_t> seeds;
    res.seeds_per_class.assign(m, 0);
    for (std::size_t c = 0; c < m; ++c)
        for (std::size_t i = 0; i < ds.size() && res.seeds_per_class[c] < opts.per_class; ++i)
            if (ds.labels[i] == static_cast<int>(c) && ev.predictions[i] == static_cast<int>(c)) {
                seeds.push_back(i);
                ++res.seeds_per_class[c];
            }
    require(!seeds.empty(), "perturb: no correctly-classified seed examples");
    res.n_seeds = seeds.size();

    std::vector<std::vector<double>> grid_per_class(m);
    if (opts.mode == "alpha") {
        res.values = sweep_values(res.alpha, opts.steps);
    } else if (opts.mode == "heuristic") {
        for (double v = opts.heur_lo; v <= opts.heur_hi + 1e-12; v += opts.heur_step)
            res.values.push_back(v);
    } else {
        for (std::size_t c = 0; c < m; ++c)
            grid_per_class[c] = sweep_values(res.class_intervals[c], opts.steps);
    }
    const std::size_t steps =
        opts.mode == "class" ? opts.steps : res.values.size();

    // Per-seed masked base rows.
    Tensor base_rows({seeds.size(), m * d});
    {
        const std::size_t batch = 64;
        const std::size_t n_batches = (seeds.size() + batch - 1) / batch;
        parallel_tasks(n_batches, opts.workers, [&](std::size_t b) {
            const std::size_t lo = b * batch, hi = std::min(seeds.size(), lo + batch);
            std::vector<std::size_t> part(seeds.begin() + lo, seeds.begin() + hi);
            BatchTrace<float> tr = forward_batch(cfg, p, ds.gather(part));
            Tensor rows = build_decoder_input(cfg, tr.v(), tr.pred);
            std::copy(rows.data.begin(), rows.data.end(), base_rows.ptr() + lo * m * d);
        });
    }

    res.table = DTensor({d, steps});
    std::vector<std::vector<std::size_t>> hits(seeds.size());  // per seed: flat [d*steps] 0/1
    std::vector<char> base_hit(seeds.size(), 0);

    parallel_tasks(seeds.size(), opts.workers, [&](std::size_t si) {
        const int cls = ds.labels[seeds[si]];
        const std::vector<double>& values =
            opts.mode == "class" ? grid_per_class[static_cast<std::size_t>(cls)] : res.values;
        Tensor base({m * d}, std::vector<float>(base_rows.ptr() + si * m * d,
                                                base_rows.ptr() + (si + 1) * m * d));
        hits[si].assign(d * steps, 0);

        // Baseline: unperturbed reconstruction re-classified.
        Tensor brow({std::size_t(1), m * d}, base.data);
        Tensor brecon = decode_vector(cfg, p, brow);
        Tensor bimg({1, cfg.in_c, cfg.in_h, cfg.in_w}, brecon.data);
        base_hit[si] = forward_batch(cfg, p, bimg).pred[0] == cls;

        for (std::size_t dim = 0; dim < d; ++dim) {
            PerturbationSweep sw = perturb_sweep(cfg, p, base, cls, dim, values);
            for (std::size_t t = 0; t < sw.values.size() && t < steps; ++t)
                hits[si][dim * steps + t] = sw.relabels[t] == cls;
        }
    });

    std::size_t base_correct = 0;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        base_correct += base_hit[si];
        for (std::size_t i = 0; i < d * steps; ++i) res.table[i] += hits[si][i];
    }
    for (double& v : res.table.data) v /= static_cast<double>(seeds.size());
    res.baseline_acc = static_cast<double>(base_correct) / static_cast<double>(seeds.size());

    // One qualitative sheet per class: first seed, rows = dims, cols = steps.
    for (std::size_t c = 0; c < m; ++c) {
        std::size_t si = 0;
        bool found = false;
        for (std::size_t i = 0; i < seeds.size(); ++i)
            if (ds.labels[seeds[i]] == static_cast<int>(c)) {
                si = i;
                found = true;
                break;
            }
        if (!found) continue;
        const std::vector<double>& values =
            opts.mode == "class" ? grid_per_class[c] : res.values;
        Tensor base({m * d}, std::vector<float>(base_rows.ptr() + si * m * d,
                                                base_rows.ptr() + (si + 1) * m * d));
        std::vector<GrayImage> tiles;
        for (std::size_t dim = 0; dim < d; ++dim) {
            PerturbationSweep sw = perturb_sweep(cfg, p, base, static_cast<int>(c), dim, values);
            for (std::size_t t = 0; t < sw.values.size(); ++t)
                tiles.push_back(to_gray(sw.recons.ptr() + t * px, cfg.in_h, cfg.in_w));
        }
        res.sheets.push_back(make_sheet(tiles, values.size()));
    }
    return res;
}

}  // namespace capslab

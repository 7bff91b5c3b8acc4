#pragma once

#include <string>
#include <vector>

#include "capslab/capsnet.hpp"
#include "capslab/dataset.hpp"
#include "capslab/image_io.hpp"

// Perturbation analysis of the class-capsule vectors: estimate the empirical
// activation interval from per-class statistics, sweep each coordinate of the
// active class vector over it, reconstruct, and re-classify.
namespace capslab {

struct Interval {
    double lo = 0, hi = 0;
    bool contains(const Interval& o) const { return lo <= o.lo && o.hi <= hi; }
};

// Column-wise activation statistics of one layer, collected per class at
// 64-bit precision.
struct ActivationStats {
    std::string layer;                 // "conv" | "pc" | "v"
    std::size_t dim = 0;               // flattened activation width
    std::vector<DTensor> a;            // per class: [examples, dim]
    std::vector<DTensor> eta;          // per class: [4, dim] rows = min,max,mean,std
    std::vector<Interval> class_interval;
    Interval alpha;

    std::size_t total_rows() const {
        std::size_t n = 0;
        for (const auto& m : a) n += m.shape[0];
        return n;
    }
};

// Flattened activations of `layer` for every example, grouped by label.
// per_class_cap > 0 limits rows per class (the conv layer is wide); workers
// parallelize the forward passes with a deterministic merge.
ActivationStats collect_activations(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                                    const std::string& layer, std::size_t per_class_cap = 0,
                                    std::size_t workers = 1);

// Global [min, max] envelope; class_interval entries are the per-class ones.
Interval estimate_alpha(const ActivationStats& stats);

// steps uniformly spaced values over [lo, hi], endpoints included. A
// degenerate interval (lo == hi) collapses to a single value.
std::vector<double> sweep_values(const Interval& itv, std::size_t steps);

// One coordinate of one class vector swept across `values`.
struct PerturbationSweep {
    int cls = 0;
    std::size_t dim = 0;
    std::vector<double> values;
    Tensor base_row;   // [M*D] decoder input, non-target blocks zeroed
    Tensor rows;       // [steps, M*D] perturbed decoder inputs
    Tensor recons;     // [steps, pixels]
    std::vector<int> relabels;  // classification of each reconstruction
    bool degenerate = false;
};

// base_row: [M*D] masked decoder input whose class block is cls. Each output
// row differs from base_row in exactly coordinate cls*D+dim.
PerturbationSweep perturb_sweep(const ModelConfig& cfg, const Params& p, const Tensor& base_row,
                                int cls, std::size_t dim, const std::vector<double>& values);

struct PerturbOptions {
    std::string mode = "alpha";  // alpha | heuristic | class
    std::size_t per_class = 100;  // correctly-classified seed examples per class
    std::size_t steps = 12;
    double heur_lo = -0.25, heur_hi = 0.25, heur_step = 0.05;
    std::size_t workers = 1;
};

struct PerturbResult {
    std::string mode;
    Interval alpha;
    std::vector<Interval> class_intervals;
    std::vector<double> values;    // global sweep grid (alpha/heuristic modes)
    DTensor table;                 // [cc_dim, steps] mean re-classification accuracy
    double baseline_acc = 0;       // unperturbed reconstructions re-classified
    std::size_t n_seeds = 0;
    std::vector<std::size_t> seeds_per_class;
    // One sheet per class from its first seed example: rows = dimensions,
    // columns = sweep steps.
    std::vector<GrayImage> sheets;
};

// Full experiment: α estimation on the v layer, per-dimension sweeps over the
// chosen interval mode, re-classification of every reconstruction.
PerturbResult run_perturb(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                          const PerturbOptions& opts);

}  // namespace capslab

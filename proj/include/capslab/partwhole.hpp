#pragma once

#include <string>
#include <vector>

#include "capslab/capsnet.hpp"
#include "capslab/dataset.hpp"
#include "capslab/image_io.hpp"

// Part-whole overlap: gradient saliency heatmaps of relevant units, binarized
// class-capsule responses, and the Relevance Mass Accuracy score in isolated
// and aggregated modes.
namespace capslab {

struct Heatmap {
    DTensor values;     // [H,W], 64-bit
    std::string layer;  // "pc_unit" | "pc_type" | "cc"
    std::size_t unit = 0;
    bool dead = false;       // masked forward produced all-zero class vectors
    bool normalized = false;
    double norm_lo = 0, norm_hi = 0;  // range used by normalization
};

struct BinaryMask {
    std::size_t h = 0, w = 0;
    std::vector<char> bits;
    double threshold = 0;

    std::size_t count() const {
        std::size_t n = 0;
        for (char b : bits) n += b != 0;
        return n;
    }
    bool empty() const { return count() == 0; }
};

// |d ||v_yhat|| / dx| reduced over input channels by max, computed under the
// given keep-mask. A dead unit (zero class vectors) yields a flagged zero map.
template <class T>
TensorT<double> saliency_map(const ModelConfig& cfg, const ParamsT<T>& p, const TensorT<T>& x,
                             const UnitMask& mask, bool* dead = nullptr) {
    BatchTrace<T> tr = forward_one(cfg, p, x, mask);
    const std::size_t m = cfg.num_classes, d = cfg.cc_dim;
    const auto yhat = static_cast<std::size_t>(tr.pred[0]);
    const T norm = tr.v_norm.at2(0, yhat);
    if (dead) *dead = false;
    TensorT<double> out({cfg.in_h, cfg.in_w});
    if (norm <= T(0)) {
        if (dead) *dead = true;
        return out;
    }
    TensorT<T> d_v({std::size_t(1), m, d});
    for (std::size_t k = 0; k < d; ++k) d_v.at3(0, yhat, k) = tr.v().at3(0, yhat, k) / norm;
    ParamsT<T> grads = ParamsT<T>::zeros(cfg);
    TensorT<T> grad_input;
    backward_batch(cfg, p, tr, d_v, static_cast<const TensorT<T>*>(nullptr), grads, &grad_input);
    for (std::size_t y = 0; y < cfg.in_h; ++y)
        for (std::size_t x_ = 0; x_ < cfg.in_w; ++x_) {
            double best = 0;
            for (std::size_t c = 0; c < cfg.in_c; ++c)
                best = std::max(best, std::abs(static_cast<double>(
                                          grad_input[(c * cfg.in_h + y) * cfg.in_w + x_])));
            out.at2(y, x_) = best;
        }
    return out;
}

// layer "pc_unit": one positional PC capsule propagated; "pc_type": one
// capsule type; "cc": full network, conditioned on the predicted class
// (unit records that class).
Heatmap unit_saliency(const ModelConfig& cfg, const Params& p, const Tensor& x,
                      const std::string& layer, std::size_t unit);

// Affine map of the group's global [min, max] onto [0,1]; all heatmaps must
// belong to the same unit. Constant groups map to all-zeros.
void normalize_per_unit(std::vector<Heatmap*>& group);

BinaryMask binarize(const Heatmap& h_cc, double threshold);

// Relevance mass inside the mask over total mass. Mask must be nonempty;
// zero total mass scores 0 and sets *zero_mass.
double rma(const Heatmap& h_pc, const BinaryMask& mask, bool* zero_mass = nullptr);

// Pointwise maximum of same-shape normalized heatmaps.
Heatmap aggregate_heatmaps(const std::vector<const Heatmap*>& maps);

struct RmaOptions {
    std::size_t k = 200;
    std::vector<double> thresholds{0.1, 0.25, 0.5};
    std::string mode = "both";           // isolated | aggregated | both
    std::string unit_universe = "pc_unit";  // pc_unit (positional) | pc_type
    std::size_t per_class = 10;          // correctly-classified examples per class
    std::size_t workers = 1;
};

struct RmaRow {
    double threshold = 0;
    double mean = 0, stddev = 0;  // joint over all (unit, example) pairs
    std::size_t pairs = 0;        // pairs entering the mean
    std::size_t excluded = 0;     // pairs dropped for an empty binarized mask
    std::size_t zero_mass = 0;    // pairs scored 0 for zero total relevance
};

struct RmaResult {
    std::size_t k_used = 0;          // per-class set size actually available
    std::string unit_universe;
    std::size_t n_examples = 0;
    std::vector<RmaRow> isolated, aggregated;
    // Qualitative sheet: one row per class (first example) with panels
    // input | CC response | binarized CC | PC composite | overlap.
    GrayImage sheet;
};

// Top-k backward-path units per class (mean-rank aggregated), saliency maps
// per (example, unit), per-unit normalization, then RMA per threshold.
RmaResult rma_study(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                    const RmaOptions& opts);

}  // namespace capslab

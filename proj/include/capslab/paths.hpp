#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "capslab/capsnet.hpp"
#include "capslab/dataset.hpp"

// Activation-path extraction: GAP ranking of conv filters, coupling-based
// selection of PC capsule types (class-agnostic forward / predicted-class
// backward), cross-validated top-k selection and sparse-path inference.
namespace capslab {

struct UnitRanking {
    std::string layer;                // "conv" | "pc"
    std::vector<std::size_t> units;   // sorted by non-increasing score, ties by index
    std::vector<double> scores;
};

// Global-average-pooled score per conv filter for one sample of a trace.
UnitRanking gap_rank_conv(const ModelConfig& cfg, const BatchTrace<float>& tr, std::size_t sample);

// The selected units of one path. PC units are capsule types: masking a type
// suppresses all of its spatial instances.
struct PathSpec {
    std::string direction;  // "forward" | "backward"
    int cls = -1;           // class scope; -1 = per-example / global
    std::vector<std::size_t> conv_keep;
    std::vector<std::size_t> pc_keep;
    std::vector<double> coeffs;  // coupling-derived score per pc_keep entry
    bool starved = false;        // no coefficient exceeded the threshold

    UnitMask to_mask() const;
    nlohmann::ordered_json to_json() const;
    static PathSpec from_json(const nlohmann::json& j);
};

inline constexpr double kPathThreshold = 0.4;

// Class-agnostic selection for one routed sample: each PC type is scored by
// the maximum final-iteration coupling coefficient over its positions and all
// classes; entries above the threshold are ranked and the top k_pc kept. If
// nothing clears the threshold the top-k by raw score is returned with the
// starvation flag set. Conv units come from the sample's GAP ranking.
PathSpec forward_path(const ModelConfig& cfg, const BatchTrace<float>& tr, std::size_t sample,
                      double threshold = kPathThreshold, std::size_t k_pc = 10,
                      std::size_t k_conv = 35);

// Class-aware selection: only the predicted class's coefficient column is
// ranked.
PathSpec backward_path(const ModelConfig& cfg, const BatchTrace<float>& tr, std::size_t sample,
                       std::size_t k_pc = 10, std::size_t k_conv = 35);

// Dataset-level unit rankings used by the ablation curve: mean GAP per conv
// filter / mean forward score per PC type over all examples.
UnitRanking rank_units_dataset(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                               const std::string& layer, std::size_t workers = 1);

struct TopkCurve {
    std::string layer;
    std::vector<std::size_t> k;
    std::vector<double> accuracy;
    std::size_t k_star = 0;  // smallest k achieving the maximum accuracy
    UnitRanking ranking;
};

// Masked accuracy keeping the top-k ranked units, for every k in the grid.
TopkCurve select_topk_cv(const ModelConfig& cfg, const Params& p, const Dataset& valid,
                         const std::string& layer, const std::vector<std::size_t>& k_grid,
                         std::size_t workers = 1);

// Per-class path: rankings of correctly-classified examples of the class are
// aggregated by mean rank before taking the top-k.
PathSpec class_path(const ModelConfig& cfg, const Params& p, const Dataset& ds, int cls,
                    const std::string& direction, std::size_t k_pc = 10, std::size_t k_conv = 35,
                    double threshold = kPathThreshold, std::size_t workers = 1);

// Dataset-level path: per-example scores (GAP for conv filters, coupling
// scores for PC types in the given direction) are averaged over the whole
// dataset before taking the top-k of each layer. This is the single keep-set
// the sparse-accuracy comparison uses; the forward starvation flag is set
// only when every example starved.
PathSpec dataset_path(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                      const std::string& direction, std::size_t k_pc = 10,
                      std::size_t k_conv = 35, double threshold = kPathThreshold,
                      std::size_t workers = 1);

// Accuracy with only the dataset-level path's units propagated.
double path_accuracy(const ModelConfig& cfg, const Params& p, const Dataset& ds,
                     const std::string& direction, std::size_t k_pc = 10, std::size_t k_conv = 35,
                     double threshold = kPathThreshold, std::size_t workers = 1);

// Forward pass with only the path's units propagated; returns the predicted
// class and the reconstruction conditioned on it.
std::pair<int, Tensor> sparse_inference(const ModelConfig& cfg, const Params& p, const Tensor& x,
                                        const PathSpec& path);

struct OverlapReport {
    std::size_t k = 0;
    std::vector<std::vector<std::size_t>> shared;  // [C,C] pairwise intersection sizes
    std::vector<std::size_t> exclusive;            // per class: units in no other set
};

// Pairwise shared / per-class exclusive unit bookkeeping over per-class
// top-k sets; all sets must have equal size.
OverlapReport unit_overlap(const std::vector<std::vector<std::size_t>>& sets);

}  // namespace capslab

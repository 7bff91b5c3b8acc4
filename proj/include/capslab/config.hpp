#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace capslab {

// Architecture and loss constants. Defaults follow the standard
// dynamic-routing CapsNet for 28x28 grayscale inputs.
struct ModelConfig {
    std::size_t in_c = 1, in_h = 28, in_w = 28;
    std::size_t conv_out = 256, conv_k = 9, conv_stride = 1;
    std::size_t pc_types = 32, pc_dim = 8, pc_k = 9, pc_stride = 2;
    std::size_t num_classes = 10, cc_dim = 16;
    std::size_t routing_iters = 3;
    std::vector<std::size_t> decoder_hidden{512, 1024};
    double m_plus = 0.9, m_minus = 0.1, lambda = 0.5, recon_weight = 0.0005;

    std::size_t conv_h() const { return (in_h - conv_k) / conv_stride + 1; }
    std::size_t conv_w_() const { return (in_w - conv_k) / conv_stride + 1; }
    std::size_t pc_h() const { return (conv_h() - pc_k) / pc_stride + 1; }
    std::size_t pc_w_() const { return (conv_w_() - pc_k) / pc_stride + 1; }
    std::size_t pc_spatial() const { return pc_h() * pc_w_(); }
    // Positional capsules: one per (type, y, x).
    std::size_t n_pc() const { return pc_types * pc_spatial(); }
    std::size_t input_pixels() const { return in_c * in_h * in_w; }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::ordered_json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace capslab

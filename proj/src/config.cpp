#include "capslab/config.hpp"

#include <stdexcept>

namespace capslab {

void ModelConfig::validate() const {
    auto check = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(std::string("config: ") + msg);
    };
    check(routing_iters >= 1, "routing_iters must be >= 1");
    check(pc_dim >= 1 && cc_dim >= 1, "capsule dims must be >= 1");
    check(pc_dim <= 64, "pc_dim above 64 is not supported");
    check(num_classes >= 2, "num_classes must be >= 2");
    check(in_h >= conv_k && in_w >= conv_k, "input smaller than conv kernel");
    check(conv_h() >= pc_k && conv_w_() >= pc_k, "conv output smaller than PC kernel");
    check(!decoder_hidden.empty(), "decoder needs at least one hidden layer");
}

void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
    j = nlohmann::ordered_json{{"in_c", c.in_c},
                               {"in_h", c.in_h},
                               {"in_w", c.in_w},
                               {"conv_out", c.conv_out},
                               {"conv_k", c.conv_k},
                               {"conv_stride", c.conv_stride},
                               {"pc_types", c.pc_types},
                               {"pc_dim", c.pc_dim},
                               {"pc_k", c.pc_k},
                               {"pc_stride", c.pc_stride},
                               {"num_classes", c.num_classes},
                               {"cc_dim", c.cc_dim},
                               {"routing_iters", c.routing_iters},
                               {"decoder_hidden", c.decoder_hidden},
                               {"m_plus", c.m_plus},
                               {"m_minus", c.m_minus},
                               {"lambda", c.lambda},
                               {"recon_weight", c.recon_weight}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    j.at("in_c").get_to(c.in_c);
    j.at("in_h").get_to(c.in_h);
    j.at("in_w").get_to(c.in_w);
    j.at("conv_out").get_to(c.conv_out);
    j.at("conv_k").get_to(c.conv_k);
    j.at("conv_stride").get_to(c.conv_stride);
    j.at("pc_types").get_to(c.pc_types);
    j.at("pc_dim").get_to(c.pc_dim);
    j.at("pc_k").get_to(c.pc_k);
    j.at("pc_stride").get_to(c.pc_stride);
    j.at("num_classes").get_to(c.num_classes);
    j.at("cc_dim").get_to(c.cc_dim);
    j.at("routing_iters").get_to(c.routing_iters);
    j.at("decoder_hidden").get_to(c.decoder_hidden);
    j.at("m_plus").get_to(c.m_plus);
    j.at("m_minus").get_to(c.m_minus);
    j.at("lambda").get_to(c.lambda);
    j.at("recon_weight").get_to(c.recon_weight);
    c.validate();
}

}  // namespace capslab

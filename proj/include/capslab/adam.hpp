#pragma once

#include <cmath>

#include "capslab/capsnet.hpp"

namespace capslab {

// Adam with the standard defaults (lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8).
template <class T>
struct AdamT {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step_count = 0;
    ParamsT<T> m, v;

    AdamT() = default;
    explicit AdamT(const ModelConfig& cfg) : m(ParamsT<T>::zeros(cfg)), v(ParamsT<T>::zeros(cfg)) {}

    void step(ParamsT<T>& params, const ParamsT<T>& grads) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        auto update = [&](TensorT<T>& p, const TensorT<T>& g, TensorT<T>& mi, TensorT<T>& vi) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i];
                mi[i] = static_cast<T>(beta1 * mi[i] + (1.0 - beta1) * gi);
                vi[i] = static_cast<T>(beta2 * vi[i] + (1.0 - beta2) * gi * gi);
                const double mhat = mi[i] / bc1;
                const double vhat = vi[i] / bc2;
                p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + eps));
            }
        };
        update(params.conv_w, grads.conv_w, m.conv_w, v.conv_w);
        update(params.conv_b, grads.conv_b, m.conv_b, v.conv_b);
        update(params.pc_w, grads.pc_w, m.pc_w, v.pc_w);
        update(params.pc_b, grads.pc_b, m.pc_b, v.pc_b);
        update(params.W, grads.W, m.W, v.W);
        for (std::size_t l = 0; l < params.dec_w.size(); ++l) {
            update(params.dec_w[l], grads.dec_w[l], m.dec_w[l], v.dec_w[l]);
            update(params.dec_b[l], grads.dec_b[l], m.dec_b[l], v.dec_b[l]);
        }
    }
};

using Adam = AdamT<float>;

}  // namespace capslab

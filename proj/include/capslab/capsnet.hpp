#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "capslab/config.hpp"
#include "capslab/kernels.hpp"

// Dynamic-routing CapsNet: Conv -> PC -> CC encoder plus the fully-connected
// reconstruction decoder. Forward/backward operate on whole batches; the
// backward pass is hand-derived and differentiates through every routing
// iteration.
namespace capslab {

template <class T>
struct ParamsT {
    TensorT<T> conv_w, conv_b;  // [F,C,k,k], [F]
    TensorT<T> pc_w, pc_b;      // [types*dim, F, k, k], [types*dim]
    TensorT<T> W;               // [n_pc, M, cc_dim, pc_dim]
    std::vector<TensorT<T>> dec_w, dec_b;

    static ParamsT zeros(const ModelConfig& c) {
        ParamsT p;
        p.conv_w = TensorT<T>({c.conv_out, c.in_c, c.conv_k, c.conv_k});
        p.conv_b = TensorT<T>({c.conv_out});
        p.pc_w = TensorT<T>({c.pc_types * c.pc_dim, c.conv_out, c.pc_k, c.pc_k});
        p.pc_b = TensorT<T>({c.pc_types * c.pc_dim});
        p.W = TensorT<T>({c.n_pc(), c.num_classes, c.cc_dim, c.pc_dim});
        std::size_t prev = c.num_classes * c.cc_dim;
        for (std::size_t w : c.decoder_hidden) {
            p.dec_w.push_back(TensorT<T>({w, prev}));
            p.dec_b.push_back(TensorT<T>({w}));
            prev = w;
        }
        p.dec_w.push_back(TensorT<T>({c.input_pixels(), prev}));
        p.dec_b.push_back(TensorT<T>({c.input_pixels()}));
        return p;
    }

    // Fixed enumeration order; checkpointing and the optimizer both rely on it.
    template <class F>
    void for_each(F&& f) {
        f("conv_w", conv_w);
        f("conv_b", conv_b);
        f("pc_w", pc_w);
        f("pc_b", pc_b);
        f("W", W);
        for (std::size_t i = 0; i < dec_w.size(); ++i) {
            f("dec_w" + std::to_string(i), dec_w[i]);
            f("dec_b" + std::to_string(i), dec_b[i]);
        }
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<ParamsT*>(this)->for_each([&](const std::string& n, TensorT<T>& t) {
            f(n, static_cast<const TensorT<T>&>(t));
        });
    }

    bool all_finite() const {
        bool ok = true;
        for_each([&](const std::string&, const TensorT<T>& t) { ok = ok && t.all_finite(); });
        return ok;
    }

    template <class U>
    ParamsT<U> cast() const {
        ParamsT<U> o;
        o.conv_w = conv_w.template cast<U>();
        o.conv_b = conv_b.template cast<U>();
        o.pc_w = pc_w.template cast<U>();
        o.pc_b = pc_b.template cast<U>();
        o.W = W.template cast<U>();
        for (const auto& t : dec_w) o.dec_w.push_back(t.template cast<U>());
        for (const auto& t : dec_b) o.dec_b.push_back(t.template cast<U>());
        return o;
    }
};

using Params = ParamsT<float>;

// Keep-sets; a unit absent from its active set has its response zeroed before
// propagation. An unset optional keeps every unit of that kind.
struct UnitMask {
    std::optional<std::vector<std::size_t>> conv_keep;     // conv filter indices
    std::optional<std::vector<std::size_t>> pc_type_keep;  // capsule type indices
    std::optional<std::vector<std::size_t>> pc_unit_keep;  // positional capsule indices

    bool is_full() const { return !conv_keep && !pc_type_keep && !pc_unit_keep; }

    void validate(const ModelConfig& c) const {
        auto chk = [](const std::optional<std::vector<std::size_t>>& s, std::size_t n,
                      const char* what) {
            if (!s) return;
            for (std::size_t i : *s)
                if (i >= n)
                    throw std::invalid_argument(std::string("mask: ") + what + " index " +
                                                std::to_string(i) + " out of range");
        };
        chk(conv_keep, c.conv_out, "conv filter");
        chk(pc_type_keep, c.pc_types, "PC type");
        chk(pc_unit_keep, c.n_pc(), "PC capsule");
    }
};

// Everything the backward pass and the analysis modules need from one forward
// call. Tensors carry a leading batch dimension.
template <class T>
struct BatchTrace {
    std::size_t n = 0;
    UnitMask mask;                     // mask active during the forward pass
    TensorT<T> x;                      // [N,C,H,W]
    TensorT<T> conv_pre, conv_act;     // [N,F,H',W'] pre-ReLU / post-ReLU+mask
    TensorT<T> pc_pre;                 // [N,types*dim,h,w] pre-squash, post-mask
    TensorT<T> u;                      // [N,n_pc,d] squashed PC capsules
    TensorT<T> u_hat;                  // [N,n_pc,M,D] votes
    std::vector<TensorT<T>> e_iters;   // per routing iteration: [N,n_pc,M]
    std::vector<TensorT<T>> s_iters;   // per routing iteration: [N,M,D]
    std::vector<TensorT<T>> v_iters;   // per routing iteration: [N,M,D]
    TensorT<T> v_norm;                 // [N,M]
    std::vector<int> pred;             // [N]
    // Decoder (present when requested).
    bool has_decoder = false;
    std::vector<int> dec_target;            // class fed to the decoder, per sample
    TensorT<T> dec_in;                      // [N,M*D]
    std::vector<TensorT<T>> dec_pre, dec_act;  // hidden pre/post activations
    TensorT<T> recon;                       // [N,C*H*W], sigmoid output

    const TensorT<T>& v() const { return v_iters.back(); }
    const TensorT<T>& e() const { return e_iters.back(); }
    // Coupling coefficient of sample n, PC capsule i, class j (final iteration).
    T e_at(std::size_t ni, std::size_t i, std::size_t j) const { return e().at3(ni, i, j); }
};

using ForwardTrace = BatchTrace<float>;

// ------------------------------------------------------------ dynamic routing

template <class T>
struct RoutingResult {
    std::vector<TensorT<T>> e, s, v;  // one entry per iteration; e [n_pc,M], s/v [M,D]
};

// Routing-by-agreement for a single sample. votes: [n_pc,M,D]. Logits start at
// zero; each iteration takes the softmax over classes, forms the weighted vote
// sum, squashes it, and adds the vote/output agreement to the logits.
template <class T>
RoutingResult<T> dynamic_routing(const TensorT<T>& votes, std::size_t iters) {
    require(votes.rank() == 3, "routing: votes must be [n_pc,M,D]");
    require(iters >= 1, "routing: iters must be >= 1");
    const std::size_t n_pc = votes.shape[0], m = votes.shape[1], d = votes.shape[2];
    RoutingResult<T> r;
    TensorT<T> b({n_pc, m});
    for (std::size_t t = 0; t < iters; ++t) {
        TensorT<T> e = b;
        for (std::size_t i = 0; i < n_pc; ++i) softmax_inplace(e.ptr() + i * m, m, 1);
        TensorT<T> s({m, d});
        for (std::size_t i = 0; i < n_pc; ++i) {
            const T* uh = votes.ptr() + i * m * d;
            for (std::size_t j = 0; j < m; ++j) {
                const T ej = e.at2(i, j);
                T* sj = s.ptr() + j * d;
                for (std::size_t k = 0; k < d; ++k) sj[k] += ej * uh[j * d + k];
            }
        }
        TensorT<T> v = squash(s);
        if (t + 1 < iters) {
            for (std::size_t i = 0; i < n_pc; ++i) {
                const T* uh = votes.ptr() + i * m * d;
                for (std::size_t j = 0; j < m; ++j) {
                    T agree = 0;
                    const T* vj = v.ptr() + j * d;
                    for (std::size_t k = 0; k < d; ++k) agree += uh[j * d + k] * vj[k];
                    b.at2(i, j) += agree;
                }
            }
        }
        r.e.push_back(std::move(e));
        r.s.push_back(std::move(s));
        r.v.push_back(std::move(v));
    }
    return r;
}

// Gradient of the full unrolled routing loop. grad_v: [M,D] w.r.t. the final
// output; accumulates into grad_votes [n_pc,M,D].
template <class T>
void dynamic_routing_backward(const TensorT<T>& votes, const RoutingResult<T>& r,
                              const TensorT<T>& grad_v, TensorT<T>& grad_votes) {
    const std::size_t n_pc = votes.shape[0], m = votes.shape[1], d = votes.shape[2];
    const std::size_t iters = r.v.size();
    TensorT<T> dv = grad_v;        // gradient w.r.t. v at the iteration being processed
    TensorT<T> carry({n_pc, m});   // gradient w.r.t. the pre-softmax logits, from later iterations
    bool have_carry = false;
    for (std::size_t t = iters; t-- > 0;) {
        TensorT<T> ds = squash_backward(dv, r.s[t]);
        TensorT<T> de({n_pc, m});
        for (std::size_t i = 0; i < n_pc; ++i) {
            const T* uh = votes.ptr() + i * m * d;
            T* gv = grad_votes.ptr() + i * m * d;
            for (std::size_t j = 0; j < m; ++j) {
                const T* dsj = ds.ptr() + j * d;
                T dot = 0;
                const T ej = r.e[t].at2(i, j);
                for (std::size_t k = 0; k < d; ++k) {
                    dot += dsj[k] * uh[j * d + k];
                    gv[j * d + k] += ej * dsj[k];
                }
                de.at2(i, j) = dot;
            }
        }
        TensorT<T> g({n_pc, m});
        for (std::size_t i = 0; i < n_pc; ++i)
            softmax_backward_row(r.e[t].ptr() + i * m, de.ptr() + i * m, g.ptr() + i * m, m, 1);
        if (have_carry)
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += carry[i];
        if (t == 0) break;  // initial logits are constant
        // Logits at t were prev logits + votes . v^{t-1}.
        dv = TensorT<T>({m, d});
        for (std::size_t i = 0; i < n_pc; ++i) {
            const T* uh = votes.ptr() + i * m * d;
            T* gvot = grad_votes.ptr() + i * m * d;
            for (std::size_t j = 0; j < m; ++j) {
                const T gij = g.at2(i, j);
                const T* vprev = r.v[t - 1].ptr() + j * d;
                T* dvj = dv.ptr() + j * d;
                for (std::size_t k = 0; k < d; ++k) {
                    gvot[j * d + k] += gij * vprev[k];
                    dvj[k] += gij * uh[j * d + k];
                }
            }
        }
        carry = std::move(g);
        have_carry = true;
    }
}

// ------------------------------------------------------------ decoder

template <class T>
TensorT<T> build_decoder_input(const ModelConfig& cfg, const TensorT<T>& v,
                               const std::vector<int>& targets) {
    const std::size_t n = v.shape[0], m = cfg.num_classes, d = cfg.cc_dim;
    TensorT<T> in({n, m * d});
    for (std::size_t s = 0; s < n; ++s) {
        const int t = targets[s];
        require(t >= 0 && static_cast<std::size_t>(t) < m, "decoder: bad target class");
        for (std::size_t k = 0; k < d; ++k)
            in.at2(s, static_cast<std::size_t>(t) * d + k) = v.at3(s, static_cast<std::size_t>(t), k);
    }
    return in;
}

template <class T>
void decoder_forward(const ModelConfig& cfg, const ParamsT<T>& p, BatchTrace<T>& tr) {
    (void)cfg;
    tr.dec_pre.clear();
    tr.dec_act.clear();
    TensorT<T> cur = tr.dec_in;
    const std::size_t layers = p.dec_w.size();
    for (std::size_t l = 0; l < layers; ++l) {
        TensorT<T> pre = dense_forward(cur, p.dec_w[l], p.dec_b[l]);
        tr.dec_pre.push_back(pre);
        if (l + 1 < layers) {
            cur = relu(pre);
            tr.dec_act.push_back(cur);
        } else {
            tr.recon = sigmoid(pre);
        }
    }
    tr.has_decoder = true;
}

// ------------------------------------------------------------ forward

template <class T>
void apply_conv_mask(const ModelConfig& cfg, const UnitMask& mask, TensorT<T>& conv_act) {
    if (!mask.conv_keep) return;
    std::vector<char> keep(cfg.conv_out, 0);
    for (std::size_t i : *mask.conv_keep) keep[i] = 1;
    const std::size_t n = conv_act.shape[0], p = conv_act.shape[2] * conv_act.shape[3];
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t f = 0; f < cfg.conv_out; ++f)
            if (!keep[f]) {
                T* dst = conv_act.ptr() + (s * cfg.conv_out + f) * p;
                std::fill(dst, dst + p, T(0));
            }
}

template <class T>
void apply_pc_mask(const ModelConfig& cfg, const UnitMask& mask, TensorT<T>& pc_pre) {
    if (!mask.pc_type_keep && !mask.pc_unit_keep) return;
    std::vector<char> keep(cfg.n_pc(), 1);
    if (mask.pc_type_keep) {
        std::fill(keep.begin(), keep.end(), 0);
        for (std::size_t t : *mask.pc_type_keep)
            for (std::size_t sp = 0; sp < cfg.pc_spatial(); ++sp) keep[t * cfg.pc_spatial() + sp] = 1;
    }
    if (mask.pc_unit_keep) {
        std::vector<char> keep2(cfg.n_pc(), 0);
        for (std::size_t i : *mask.pc_unit_keep) keep2[i] = 1;
        if (mask.pc_type_keep) {
            for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = keep[i] && keep2[i];
        } else {
            keep = keep2;
        }
    }
    const std::size_t n = pc_pre.shape[0], sp = cfg.pc_spatial();
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < cfg.n_pc(); ++i) {
            if (keep[i]) continue;
            const std::size_t type = i / sp, pos = i % sp;
            for (std::size_t k = 0; k < cfg.pc_dim; ++k)
                pc_pre[((s * cfg.pc_types + type) * cfg.pc_dim + k) * sp + pos] = T(0);
        }
}

template <class T>
void check_layer_finite(const TensorT<T>& t, const char* layer) {
    if (!t.all_finite())
        throw std::runtime_error(std::string("non-finite activation in layer ") + layer);
}

// Full encoder (+ optional decoder) pass. decoder_targets: class fed to the
// decoder per sample; null means the predicted class. Prediction is
// argmax_j |v_j| with ties broken by the lowest class index.
template <class T>
BatchTrace<T> forward_batch(const ModelConfig& cfg, const ParamsT<T>& p, const TensorT<T>& xs,
                            const UnitMask& mask = {}, bool with_decoder = false,
                            const std::vector<int>* decoder_targets = nullptr) {
    require(xs.rank() == 4 && xs.shape[1] == cfg.in_c && xs.shape[2] == cfg.in_h &&
                xs.shape[3] == cfg.in_w,
            "forward: input shape " + shape_str(xs.shape) + " does not match config");
    mask.validate(cfg);
    const std::size_t n = xs.shape[0], m = cfg.num_classes, d = cfg.cc_dim;
    const std::size_t n_pc = cfg.n_pc(), pd = cfg.pc_dim, sp = cfg.pc_spatial();

    BatchTrace<T> tr;
    tr.n = n;
    tr.mask = mask;
    tr.x = xs;
    tr.conv_pre = conv_forward_batch(xs, p.conv_w, p.conv_b, cfg.conv_stride);
    tr.conv_act = relu(tr.conv_pre);
    apply_conv_mask(cfg, mask, tr.conv_act);
    check_layer_finite(tr.conv_act, "Conv");

    tr.pc_pre = conv_forward_batch(tr.conv_act, p.pc_w, p.pc_b, cfg.pc_stride);
    apply_pc_mask(cfg, mask, tr.pc_pre);
    check_layer_finite(tr.pc_pre, "PC");

    // Re-index [types*dim, h, w] channels into capsule vectors and squash.
    tr.u = TensorT<T>({n, n_pc, pd});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < n_pc; ++i) {
            const std::size_t type = i / sp, pos = i % sp;
            T buf[64];
            for (std::size_t k = 0; k < pd; ++k)
                buf[k] = tr.pc_pre[((s * cfg.pc_types + type) * pd + k) * sp + pos];
            squash_vec(buf, tr.u.ptr() + (s * n_pc + i) * pd, pd);
        }

    // Votes: u_hat[n,i,j,:] = W[i,j] u[n,i]; one gemm per PC capsule across the batch.
    tr.u_hat = TensorT<T>({n, n_pc, m, d});
    for (std::size_t i = 0; i < n_pc; ++i)
        gemm(false, true, n, m * d, pd, T(1), tr.u.ptr() + i * pd, n_pc * pd,
             p.W.ptr() + i * m * d * pd, pd, T(0), tr.u_hat.ptr() + i * m * d, n_pc * m * d);

    tr.e_iters.assign(cfg.routing_iters, TensorT<T>({n, n_pc, m}));
    tr.s_iters.assign(cfg.routing_iters, TensorT<T>({n, m, d}));
    tr.v_iters.assign(cfg.routing_iters, TensorT<T>({n, m, d}));
    for (std::size_t s = 0; s < n; ++s) {
        TensorT<T> votes({n_pc, m, d},
                         std::vector<T>(tr.u_hat.ptr() + s * n_pc * m * d,
                                        tr.u_hat.ptr() + (s + 1) * n_pc * m * d));
        RoutingResult<T> r = dynamic_routing(votes, cfg.routing_iters);
        for (std::size_t t = 0; t < cfg.routing_iters; ++t) {
            std::copy(r.e[t].data.begin(), r.e[t].data.end(),
                      tr.e_iters[t].ptr() + s * n_pc * m);
            std::copy(r.s[t].data.begin(), r.s[t].data.end(), tr.s_iters[t].ptr() + s * m * d);
            std::copy(r.v[t].data.begin(), r.v[t].data.end(), tr.v_iters[t].ptr() + s * m * d);
        }
    }
    check_layer_finite(tr.v(), "CC");

    tr.v_norm = TensorT<T>({n, m});
    tr.pred.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        int best = 0;
        for (std::size_t j = 0; j < m; ++j) {
            tr.v_norm.at2(s, j) = vec_norm(tr.v().ptr() + (s * m + j) * d, d);
            if (tr.v_norm.at2(s, j) > tr.v_norm.at2(s, static_cast<std::size_t>(best)))
                best = static_cast<int>(j);
        }
        tr.pred[s] = best;
    }

    if (with_decoder) {
        tr.dec_target = decoder_targets ? *decoder_targets : tr.pred;
        require(tr.dec_target.size() == n, "forward: decoder target count mismatch");
        tr.dec_in = build_decoder_input(cfg, tr.v(), tr.dec_target);
        decoder_forward(cfg, p, tr);
        check_layer_finite(tr.recon, "decoder");
    }
    return tr;
}

template <class T>
BatchTrace<T> forward_one(const ModelConfig& cfg, const ParamsT<T>& p, const TensorT<T>& x,
                          const UnitMask& mask = {}, bool with_decoder = false,
                          const std::vector<int>* decoder_targets = nullptr) {
    require(x.rank() == 3, "forward_one: input must be [C,H,W]");
    TensorT<T> xs({1, x.shape[0], x.shape[1], x.shape[2]}, x.data);
    return forward_batch(cfg, p, xs, mask, with_decoder, decoder_targets);
}

// Decoder applied to an externally supplied class vector (the perturbation
// analysis feeds modified v rows through this). v_row: [M*D] with non-target
// blocks already zeroed.
template <class T>
TensorT<T> decode_vector(const ModelConfig& cfg, const ParamsT<T>& p, const TensorT<T>& rows) {
    require(rows.rank() == 2 && rows.shape[1] == cfg.num_classes * cfg.cc_dim,
            "decode: bad input shape");
    TensorT<T> cur = rows;
    for (std::size_t l = 0; l < p.dec_w.size(); ++l) {
        cur = dense_forward(cur, p.dec_w[l], p.dec_b[l]);
        cur = (l + 1 < p.dec_w.size()) ? relu(cur) : sigmoid(cur);
    }
    return cur;
}

// Reconstruction conditioned on a chosen class capsule; all other class
// vectors are zeroed before decoding.
template <class T>
TensorT<T> reconstruct(const ModelConfig& cfg, const ParamsT<T>& p, const BatchTrace<T>& tr,
                       const std::vector<int>& targets) {
    TensorT<T> in = build_decoder_input(cfg, tr.v(), targets);
    return decode_vector(cfg, p, in);
}

// ------------------------------------------------------------ loss

// Margin loss over class vector lengths plus the weighted reconstruction
// error; mean over the batch.
template <class T>
double capsule_loss(const ModelConfig& cfg, const BatchTrace<T>& tr, const std::vector<int>& labels) {
    require(labels.size() == tr.n, "loss: label count mismatch");
    const std::size_t m = cfg.num_classes;
    double total = 0;
    for (std::size_t s = 0; s < tr.n; ++s) {
        for (std::size_t j = 0; j < m; ++j) {
            const double nj = tr.v_norm.at2(s, j);
            const bool tj = labels[s] == static_cast<int>(j);
            const double below = std::max(0.0, cfg.m_plus - nj);
            const double above = std::max(0.0, nj - cfg.m_minus);
            total += tj ? below * below : cfg.lambda * above * above;
        }
        if (tr.has_decoder && cfg.recon_weight > 0) {
            double sse = 0;
            const std::size_t px = cfg.input_pixels();
            for (std::size_t i = 0; i < px; ++i) {
                const double diff = tr.recon.at2(s, i) - tr.x[s * px + i];
                sse += diff * diff;
            }
            total += cfg.recon_weight * sse;
        }
    }
    return total / static_cast<double>(tr.n);
}

// ------------------------------------------------------------ backward

// Backpropagates d_v (gradient w.r.t. the final class vectors, [N,M,D]) and
// optionally d_recon ([N,pixels]) through the whole network, accumulating
// parameter gradients and, when requested, the input gradient.
template <class T>
void backward_batch(const ModelConfig& cfg, const ParamsT<T>& p, const BatchTrace<T>& tr,
                    const TensorT<T>& d_v_in, const TensorT<T>* d_recon, ParamsT<T>& grads,
                    TensorT<T>* grad_input = nullptr) {
    const std::size_t n = tr.n, m = cfg.num_classes, d = cfg.cc_dim;
    const std::size_t n_pc = cfg.n_pc(), pd = cfg.pc_dim, sp = cfg.pc_spatial();

    TensorT<T> d_v = d_v_in;

    // Decoder backward feeds additional gradient into the target class vector.
    if (d_recon) {
        require(tr.has_decoder, "backward: reconstruction gradient without decoder trace");
        const std::size_t layers = p.dec_w.size();
        TensorT<T> cur = sigmoid_backward(*d_recon, tr.recon);
        for (std::size_t l = layers; l-- > 0;) {
            const TensorT<T>& input = (l == 0) ? tr.dec_in : tr.dec_act[l - 1];
            TensorT<T> dx, dw, db;
            dense_backward(cur, input, p.dec_w[l], dx, dw, db);
            for (std::size_t i = 0; i < dw.size(); ++i) grads.dec_w[l][i] += dw[i];
            for (std::size_t i = 0; i < db.size(); ++i) grads.dec_b[l][i] += db[i];
            cur = (l == 0) ? std::move(dx) : relu_backward(dx, tr.dec_pre[l - 1]);
        }
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t t = static_cast<std::size_t>(tr.dec_target[s]);
            for (std::size_t k = 0; k < d; ++k) d_v.at3(s, t, k) += cur.at2(s, t * d + k);
        }
    }

    // Routing backward per sample.
    TensorT<T> d_u_hat({n, n_pc, m, d});
    for (std::size_t s = 0; s < n; ++s) {
        TensorT<T> votes({n_pc, m, d},
                         std::vector<T>(tr.u_hat.ptr() + s * n_pc * m * d,
                                        tr.u_hat.ptr() + (s + 1) * n_pc * m * d));
        RoutingResult<T> r;
        for (std::size_t t = 0; t < cfg.routing_iters; ++t) {
            r.e.push_back(TensorT<T>({n_pc, m},
                                     std::vector<T>(tr.e_iters[t].ptr() + s * n_pc * m,
                                                    tr.e_iters[t].ptr() + (s + 1) * n_pc * m)));
            r.s.push_back(TensorT<T>({m, d}, std::vector<T>(tr.s_iters[t].ptr() + s * m * d,
                                                            tr.s_iters[t].ptr() + (s + 1) * m * d)));
            r.v.push_back(TensorT<T>({m, d}, std::vector<T>(tr.v_iters[t].ptr() + s * m * d,
                                                            tr.v_iters[t].ptr() + (s + 1) * m * d)));
        }
        TensorT<T> dv_s({m, d}, std::vector<T>(d_v.ptr() + s * m * d, d_v.ptr() + (s + 1) * m * d));
        TensorT<T> gv({n_pc, m, d});
        dynamic_routing_backward(votes, r, dv_s, gv);
        std::copy(gv.data.begin(), gv.data.end(), d_u_hat.ptr() + s * n_pc * m * d);
    }

    // Vote backward: dW[i,j] += d_u_hat[n,i,j] u[n,i]^T ; du[n,i] += W[i,j]^T d_u_hat[n,i,j].
    TensorT<T> d_u({n, n_pc, pd});
    for (std::size_t i = 0; i < n_pc; ++i) {
        gemm(true, false, m * d, pd, n, T(1), d_u_hat.ptr() + i * m * d, n_pc * m * d,
             tr.u.ptr() + i * pd, n_pc * pd, T(1), grads.W.ptr() + i * m * d * pd, pd);
        gemm(false, false, n, pd, m * d, T(1), d_u_hat.ptr() + i * m * d, n_pc * m * d,
             p.W.ptr() + i * m * d * pd, pd, T(0), d_u.ptr() + i * pd, n_pc * pd);
    }

    // PC squash backward, re-indexed back onto the conv layout.
    TensorT<T> d_pc_pre({n, cfg.pc_types * pd, cfg.pc_h(), cfg.pc_w_()});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < n_pc; ++i) {
            const std::size_t type = i / sp, pos = i % sp;
            T sbuf[64], gbuf[64] = {};
            for (std::size_t k = 0; k < pd; ++k)
                sbuf[k] = tr.pc_pre[((s * cfg.pc_types + type) * pd + k) * sp + pos];
            squash_backward_vec(sbuf, d_u.ptr() + (s * n_pc + i) * pd, gbuf, pd);
            for (std::size_t k = 0; k < pd; ++k)
                d_pc_pre[((s * cfg.pc_types + type) * pd + k) * sp + pos] = gbuf[k];
        }

    apply_pc_mask(cfg, tr.mask, d_pc_pre);  // masked units pass no gradient

    TensorT<T> d_conv_act, d_pc_w;
    TensorT<T> d_pc_b;
    conv_backward_batch(d_pc_pre, tr.conv_act, p.pc_w, cfg.pc_stride, d_conv_act, d_pc_w, &d_pc_b);
    for (std::size_t i = 0; i < d_pc_w.size(); ++i) grads.pc_w[i] += d_pc_w[i];
    for (std::size_t i = 0; i < d_pc_b.size(); ++i) grads.pc_b[i] += d_pc_b[i];

    apply_conv_mask(cfg, tr.mask, d_conv_act);
    TensorT<T> d_conv_pre = relu_backward(d_conv_act, tr.conv_pre);
    TensorT<T> d_x, d_conv_w, d_conv_b;
    conv_backward_batch(d_conv_pre, tr.x, p.conv_w, cfg.conv_stride, d_x, d_conv_w, &d_conv_b);
    for (std::size_t i = 0; i < d_conv_w.size(); ++i) grads.conv_w[i] += d_conv_w[i];
    for (std::size_t i = 0; i < d_conv_b.size(); ++i) grads.conv_b[i] += d_conv_b[i];
    if (grad_input) *grad_input = std::move(d_x);
}

// Builds the capsule-loss gradients (mean over batch) and runs backward.
template <class T>
double loss_backward(const ModelConfig& cfg, const ParamsT<T>& p, const BatchTrace<T>& tr,
                     const std::vector<int>& labels, ParamsT<T>& grads,
                     TensorT<T>* grad_input = nullptr) {
    const std::size_t n = tr.n, m = cfg.num_classes, d = cfg.cc_dim;
    const T scale = T(1) / static_cast<T>(n);
    TensorT<T> d_v({n, m, d});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < m; ++j) {
            const T nj = tr.v_norm.at2(s, j);
            const bool tj = labels[s] == static_cast<int>(j);
            T dn = 0;
            if (tj) {
                const T below = std::max(T(0), T(cfg.m_plus) - nj);
                dn = T(-2) * below;
            } else {
                const T above = std::max(T(0), nj - T(cfg.m_minus));
                dn = T(2) * T(cfg.lambda) * above;
            }
            if (dn != T(0)) {
                const T inv = T(1) / std::max(nj, T(1e-12));
                for (std::size_t k = 0; k < d; ++k)
                    d_v.at3(s, j, k) = scale * dn * tr.v().at3(s, j, k) * inv;
            }
        }
    TensorT<T> d_recon;
    const TensorT<T>* d_recon_ptr = nullptr;
    if (tr.has_decoder && cfg.recon_weight > 0) {
        const std::size_t px = cfg.input_pixels();
        d_recon = TensorT<T>({n, px});
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < px; ++i)
                d_recon.at2(s, i) = scale * T(2) * T(cfg.recon_weight) *
                                    (tr.recon.at2(s, i) - tr.x[s * px + i]);
        d_recon_ptr = &d_recon;
    }
    backward_batch(cfg, p, tr, d_v, d_recon_ptr, grads, grad_input);
    // The input also enters the loss directly as the reconstruction target.
    if (grad_input && d_recon_ptr)
        for (std::size_t i = 0; i < grad_input->size(); ++i) (*grad_input)[i] -= d_recon[i];
    return capsule_loss(cfg, tr, labels);
}

}  // namespace capslab

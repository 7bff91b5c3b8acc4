#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "capslab/gemm.hpp"
#include "capslab/tensor.hpp"

// Hand-written differentiable kernels. Convolutions are lowered to matrix
// multiplies via im2col; every backward is derived per kernel (no autodiff).
namespace capslab {

constexpr double kSquashEps = 1e-8;

// ---------------------------------------------------------------- conv2d

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride) {
    require(in >= k, "conv2d: input smaller than kernel");
    return (in - k) / stride + 1;
}

// col has shape [C*kh*kw, H'*W'], written at column offset col_off with row
// stride col_ld (lets a batch share one buffer).
template <class T>
void im2col(const T* in, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, T* col, std::size_t col_ld, std::size_t col_off) {
    const std::size_t oh = conv_out_extent(h, kh, stride);
    const std::size_t ow = conv_out_extent(w, kw, stride);
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
                T* dst = col + row * col_ld + col_off;
                const T* src = in + (ci * h + ky) * w + kx;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const T* s = src + oy * stride * w;
                    for (std::size_t ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = s[ox * stride];
                }
            }
}

template <class T>
void col2im_accum(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                  std::size_t kw, std::size_t stride, T* in, std::size_t col_ld,
                  std::size_t col_off) {
    const std::size_t oh = conv_out_extent(h, kh, stride);
    const std::size_t ow = conv_out_extent(w, kw, stride);
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
                const T* src = col + row * col_ld + col_off;
                T* dst = in + (ci * h + ky) * w + kx;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    T* d = dst + oy * stride * w;
                    for (std::size_t ox = 0; ox < ow; ++ox) d[ox * stride] += src[oy * ow + ox];
                }
            }
}

// Valid (no padding) convolution of a batch. xs: [N,C,H,W], filters:
// [F,C,kh,kw], bias: [F] or empty. Returns [N,F,H',W'].
template <class T>
TensorT<T> conv_forward_batch(const TensorT<T>& xs, const TensorT<T>& filters,
                              const TensorT<T>& bias, std::size_t stride) {
    require(xs.rank() == 4 && filters.rank() == 4, "conv2d: rank mismatch");
    require(xs.shape[1] == filters.shape[1],
            "conv2d: channel mismatch " + shape_str(xs.shape) + " vs " + shape_str(filters.shape));
    const std::size_t n = xs.shape[0], c = xs.shape[1], h = xs.shape[2], w = xs.shape[3];
    const std::size_t f = filters.shape[0], kh = filters.shape[2], kw = filters.shape[3];
    const std::size_t oh = conv_out_extent(h, kh, stride), ow = conv_out_extent(w, kw, stride);
    const std::size_t p = oh * ow, ckk = c * kh * kw;

    TensorT<T> col({ckk, n * p});
    for (std::size_t s = 0; s < n; ++s)
        im2col(xs.ptr() + s * c * h * w, c, h, w, kh, kw, stride, col.ptr(), n * p, s * p);

    TensorT<T> prod({f, n * p});
    gemm(false, false, f, n * p, ckk, T(1), filters.ptr(), ckk, col.ptr(), n * p, T(0), prod.ptr(),
         n * p);

    TensorT<T> out({n, f, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t fi = 0; fi < f; ++fi) {
            const T b = bias.size() ? bias[fi] : T(0);
            const T* src = prod.ptr() + fi * n * p + s * p;
            T* dst = out.ptr() + (s * f + fi) * p;
            for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + b;
        }
    return out;
}

// Single-image convenience wrapper: input [C,H,W], filters [F,C,kh,kw].
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& filters, std::size_t stride) {
    require(input.rank() == 3, "conv2d: input must be [C,H,W]");
    TensorT<T> xs({1, input.shape[0], input.shape[1], input.shape[2]}, input.data);
    TensorT<T> out = conv_forward_batch(xs, filters, TensorT<T>{}, stride);
    return TensorT<T>({out.shape[1], out.shape[2], out.shape[3]}, std::move(out.data));
}

// Gradients for conv_forward_batch. grad_bias may be null when the layer has
// no bias. Accumulation runs in a fixed order so results are reproducible.
template <class T>
void conv_backward_batch(const TensorT<T>& grad_out, const TensorT<T>& xs,
                         const TensorT<T>& filters, std::size_t stride, TensorT<T>& grad_input,
                         TensorT<T>& grad_filters, TensorT<T>* grad_bias) {
    const std::size_t n = xs.shape[0], c = xs.shape[1], h = xs.shape[2], w = xs.shape[3];
    const std::size_t f = filters.shape[0], kh = filters.shape[2], kw = filters.shape[3];
    const std::size_t oh = conv_out_extent(h, kh, stride), ow = conv_out_extent(w, kw, stride);
    const std::size_t p = oh * ow, ckk = c * kh * kw;
    require(grad_out.shape == std::vector<std::size_t>({n, f, oh, ow}),
            "conv2d_backward: grad shape mismatch " + shape_str(grad_out.shape));

    // [F, N*P] view of grad_out.
    TensorT<T> gout({f, n * p});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t fi = 0; fi < f; ++fi)
            std::memcpy(gout.ptr() + fi * n * p + s * p, grad_out.ptr() + (s * f + fi) * p,
                        p * sizeof(T));

    TensorT<T> col({ckk, n * p});
    for (std::size_t s = 0; s < n; ++s)
        im2col(xs.ptr() + s * c * h * w, c, h, w, kh, kw, stride, col.ptr(), n * p, s * p);

    grad_filters = TensorT<T>(filters.shape);
    gemm(false, true, f, ckk, n * p, T(1), gout.ptr(), n * p, col.ptr(), n * p, T(0),
         grad_filters.ptr(), ckk);

    if (grad_bias) {
        *grad_bias = TensorT<T>({f});
        for (std::size_t fi = 0; fi < f; ++fi) {
            T acc = 0;
            const T* src = gout.ptr() + fi * n * p;
            for (std::size_t i = 0; i < n * p; ++i) acc += src[i];
            (*grad_bias)[fi] = acc;
        }
    }

    TensorT<T> dcol({ckk, n * p});
    gemm(true, false, ckk, n * p, f, T(1), filters.ptr(), ckk, gout.ptr(), n * p, T(0), dcol.ptr(),
         n * p);
    grad_input = TensorT<T>(xs.shape);
    for (std::size_t s = 0; s < n; ++s)
        col2im_accum(dcol.ptr(), c, h, w, kh, kw, stride, grad_input.ptr() + s * c * h * w, n * p,
                     s * p);
}

// Single-image wrapper matching the forward wrapper.
template <class T>
std::pair<TensorT<T>, TensorT<T>> conv2d_backward(const TensorT<T>& grad_out,
                                                  const TensorT<T>& input,
                                                  const TensorT<T>& filters, std::size_t stride) {
    TensorT<T> xs({1, input.shape[0], input.shape[1], input.shape[2]}, input.data);
    TensorT<T> go({1, grad_out.shape[0], grad_out.shape[1], grad_out.shape[2]}, grad_out.data);
    TensorT<T> gi, gf;
    conv_backward_batch(go, xs, filters, stride, gi, gf, static_cast<TensorT<T>*>(nullptr));
    return {TensorT<T>(input.shape, std::move(gi.data)), std::move(gf)};
}

// ---------------------------------------------------------------- dense

// X: [N,in], W: [out,in], b: [out]. Returns [N,out].
template <class T>
TensorT<T> dense_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    require(x.rank() == 2 && w.rank() == 2 && x.shape[1] == w.shape[1],
            "dense: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
    const std::size_t n = x.shape[0], in = x.shape[1], out = w.shape[0];
    TensorT<T> y({n, out});
    gemm(false, true, n, out, in, T(1), x.ptr(), in, w.ptr(), in, T(0), y.ptr(), out);
    if (b.size()) {
        require(b.size() == out, "dense: bias size mismatch");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) y.at2(i, j) += b[j];
    }
    return y;
}

template <class T>
void dense_backward(const TensorT<T>& grad_y, const TensorT<T>& x, const TensorT<T>& w,
                    TensorT<T>& grad_x, TensorT<T>& grad_w, TensorT<T>& grad_b) {
    const std::size_t n = x.shape[0], in = x.shape[1], out = w.shape[0];
    require(grad_y.shape == std::vector<std::size_t>({n, out}), "dense_backward: shape mismatch");
    grad_x = TensorT<T>({n, in});
    gemm(false, false, n, in, out, T(1), grad_y.ptr(), out, w.ptr(), in, T(0), grad_x.ptr(), in);
    grad_w = TensorT<T>({out, in});
    gemm(true, false, out, in, n, T(1), grad_y.ptr(), out, x.ptr(), in, T(0), grad_w.ptr(), in);
    grad_b = TensorT<T>({out});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) grad_b[j] += grad_y.at2(i, j);
}

// ---------------------------------------------------------------- pointwise

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <class T>
TensorT<T> relu_backward(const TensorT<T>& grad_y, const TensorT<T>& x) {
    TensorT<T> g(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T(0) ? grad_y[i] : T(0);
    return g;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    TensorT<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    return y;
}

// Takes the forward output y = sigmoid(x).
template <class T>
TensorT<T> sigmoid_backward(const TensorT<T>& grad_y, const TensorT<T>& y) {
    TensorT<T> g(y.shape);
    for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_y[i] * y[i] * (T(1) - y[i]);
    return g;
}

// ---------------------------------------------------------------- softmax

// Numerically stable (max-subtracted) softmax along `axis`.
template <class T>
void softmax_inplace(T* v, std::size_t m, std::size_t stride) {
    T mx = v[0];
    for (std::size_t i = 1; i < m; ++i) mx = std::max(mx, v[i * stride]);
    T sum = 0;
    for (std::size_t i = 0; i < m; ++i) {
        v[i * stride] = std::exp(v[i * stride] - mx);
        sum += v[i * stride];
    }
    for (std::size_t i = 0; i < m; ++i) v[i * stride] /= sum;
}

template <class T>
TensorT<T> softmax(const TensorT<T>& logits, std::size_t axis) {
    require(axis < logits.rank(), "softmax: bad axis");
    TensorT<T> out = logits;
    const std::size_t m = logits.shape[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < logits.rank(); ++i) inner *= logits.shape[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= logits.shape[i];
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
            softmax_inplace(out.ptr() + o * m * inner + i, m, inner);
    return out;
}

// grad_logits for one softmax row y (length m, stride apart).
template <class T>
void softmax_backward_row(const T* y, const T* grad_y, T* grad_x, std::size_t m,
                          std::size_t stride) {
    T dot = 0;
    for (std::size_t i = 0; i < m; ++i) dot += y[i * stride] * grad_y[i * stride];
    for (std::size_t i = 0; i < m; ++i) grad_x[i * stride] += y[i * stride] * (grad_y[i * stride] - dot);
}

// ---------------------------------------------------------------- squash

// v = (|s|^2 / (1+|s|^2)) * s/|s|, with the eps-regularized norm at s=0.
template <class T>
void squash_vec(const T* s, T* v, std::size_t d) {
    T n2 = 0;
    for (std::size_t i = 0; i < d; ++i) n2 += s[i] * s[i];
    const T n = std::sqrt(n2 + T(kSquashEps));
    const T scale = n2 / ((T(1) + n2) * n);
    for (std::size_t i = 0; i < d; ++i) v[i] = scale * s[i];
}

// grad_s += J_squash(s)^T * grad_v.
template <class T>
void squash_backward_vec(const T* s, const T* grad_v, T* grad_s, std::size_t d) {
    T n2 = 0, gdot = 0;
    for (std::size_t i = 0; i < d; ++i) {
        n2 += s[i] * s[i];
        gdot += grad_v[i] * s[i];
    }
    const T ne = std::sqrt(n2 + T(kSquashEps));
    const T inv1 = T(1) / (T(1) + n2);
    const T c = n2 * inv1 / ne;
    // dc/d(n2)
    const T dc = inv1 / ne - n2 * inv1 * inv1 / ne - T(0.5) * n2 * inv1 / (ne * ne * ne);
    for (std::size_t i = 0; i < d; ++i) grad_s[i] += c * grad_v[i] + T(2) * gdot * dc * s[i];
}

// Squash applied along the last axis.
template <class T>
TensorT<T> squash(const TensorT<T>& s) {
    require(s.rank() >= 1, "squash: rank 0");
    const std::size_t d = s.shape.back();
    TensorT<T> v(s.shape);
    for (std::size_t off = 0; off < s.size(); off += d)
        squash_vec(s.ptr() + off, v.ptr() + off, d);
    return v;
}

template <class T>
TensorT<T> squash_backward(const TensorT<T>& grad_v, const TensorT<T>& s) {
    const std::size_t d = s.shape.back();
    TensorT<T> g(s.shape);
    for (std::size_t off = 0; off < s.size(); off += d)
        squash_backward_vec(s.ptr() + off, grad_v.ptr() + off, g.ptr() + off, d);
    return g;
}

template <class T>
T vec_norm(const T* v, std::size_t d) {
    T n2 = 0;
    for (std::size_t i = 0; i < d; ++i) n2 += v[i] * v[i];
    return std::sqrt(n2);
}

}  // namespace capslab

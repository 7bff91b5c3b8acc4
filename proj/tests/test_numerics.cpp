#include <doctest.h>

#include <random>

#include "capslab/kernels.hpp"
#include "testutil.hpp"

using namespace capslab;
using testutil::fill_uniform;
using testutil::gradcheck;

namespace {

// Direct-loop convolution oracle, structured nothing like the im2col path.
DTensor conv_direct(const DTensor& xs, const DTensor& filters, const DTensor& bias,
                    std::size_t stride) {
    const std::size_t n = xs.shape[0], c = xs.shape[1], h = xs.shape[2], w = xs.shape[3];
    const std::size_t f = filters.shape[0], kh = filters.shape[2], kw = filters.shape[3];
    const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
    DTensor out({n, f, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t fi = 0; fi < f; ++fi)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double acc = bias.size() ? bias[fi] : 0.0;
                    for (std::size_t ci = 0; ci < c; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx)
                                acc += xs.at4(s, ci, oy * stride + ky, ox * stride + kx) *
                                       filters.at4(fi, ci, ky, kx);
                    out.at4(s, fi, oy, ox) = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv forward matches the direct-loop oracle") {
    std::mt19937_64 rng(11);
    for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
        DTensor xs({2, 3, 9, 8}), filters({4, 3, 3, 3}), bias({4});
        fill_uniform(xs, rng);
        fill_uniform(filters, rng);
        fill_uniform(bias, rng);
        DTensor got = conv_forward_batch(xs, filters, bias, stride);
        DTensor want = conv_direct(xs, filters, bias, stride);
        REQUIRE(got.shape == want.shape);
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv forward in float stays close to the double oracle") {
    std::mt19937_64 rng(12);
    Tensor xs({1, 2, 7, 7}), filters({3, 2, 3, 3}), bias({3});
    fill_uniform(xs, rng);
    fill_uniform(filters, rng);
    fill_uniform(bias, rng);
    Tensor got = conv_forward_batch(xs, filters, bias, 2);
    DTensor want = conv_direct(xs.cast<double>(), filters.cast<double>(), bias.cast<double>(), 2);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(static_cast<double>(got[i]) == doctest::Approx(want[i]).epsilon(1e-4));
}

TEST_CASE("conv backward passes a finite-difference check") {
    std::mt19937_64 rng(13);
    DTensor xs({2, 2, 6, 6}), filters({3, 2, 3, 3}), bias({3});
    fill_uniform(xs, rng);
    fill_uniform(filters, rng);
    fill_uniform(bias, rng);
    DTensor w({2, 3, 2, 2});  // fixed loss weights, output is [2,3,2,2] at stride 2
    fill_uniform(w, rng);

    auto loss = [&] {
        DTensor out = conv_forward_batch(xs, filters, bias, 2);
        double acc = 0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += w[i] * out[i];
        return acc;
    };
    DTensor out = conv_forward_batch(xs, filters, bias, 2);
    DTensor gx, gf, gb;
    conv_backward_batch(w, xs, filters, 2, gx, gf, &gb);

    CHECK(gradcheck(xs, gx, loss) < 1e-7);
    CHECK(gradcheck(filters, gf, loss) < 1e-7);
    CHECK(gradcheck(bias, gb, loss) < 1e-7);
}

TEST_CASE("im2col and col2im are adjoint") {
    std::mt19937_64 rng(14);
    const std::size_t c = 2, h = 5, w = 5, k = 3, stride = 1;
    const std::size_t oh = 3, ow = 3, rows = c * k * k, cols = oh * ow;
    DTensor x({c, h, w}), y({rows, cols});
    fill_uniform(x, rng);
    fill_uniform(y, rng);
    DTensor col({rows, cols});
    im2col(x.ptr(), c, h, w, k, k, stride, col.ptr(), cols, 0);
    DTensor back({c, h, w});
    col2im_accum(y.ptr(), c, h, w, k, k, stride, back.ptr(), cols, 0);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < col.size(); ++i) lhs += col[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * back[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("dense layer forward and backward") {
    std::mt19937_64 rng(15);
    DTensor x({3, 4}), w({5, 4}), b({5}), gy({3, 5});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    fill_uniform(b, rng);
    fill_uniform(gy, rng);
    auto loss = [&] {
        DTensor y = dense_forward(x, w, b);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += gy[i] * y[i];
        return acc;
    };
    DTensor gx, gw, gb;
    dense_backward(gy, x, w, gx, gw, gb);
    CHECK(gradcheck(x, gx, loss) < 1e-8);
    CHECK(gradcheck(w, gw, loss) < 1e-8);
    CHECK(gradcheck(b, gb, loss) < 1e-8);
}

TEST_CASE("relu and sigmoid backward") {
    std::mt19937_64 rng(16);
    DTensor x({10}), gy({10});
    // keep away from the relu kink
    std::uniform_real_distribution<double> d(0.2, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (auto& v : x.data) v = (sign(rng) ? 1 : -1) * d(rng);
    fill_uniform(gy, rng);

    auto relu_loss = [&] {
        DTensor y = relu(x);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += gy[i] * y[i];
        return acc;
    };
    DTensor gr = relu_backward(gy, x);
    CHECK(gradcheck(x, gr, relu_loss) < 1e-8);

    auto sig_loss = [&] {
        DTensor y = sigmoid(x);
        double acc = 0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += gy[i] * y[i];
        return acc;
    };
    DTensor gs = sigmoid_backward(gy, sigmoid(x));
    CHECK(gradcheck(x, gs, sig_loss) < 1e-7);
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
    std::mt19937_64 rng(17);
    DTensor x({4, 6});
    fill_uniform(x, rng, -3, 3);
    DTensor y = softmax(x, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 6; ++j) {
            CHECK(y.at2(i, j) > 0);
            sum += y.at2(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    DTensor shifted = x;
    for (auto& v : shifted.data) v += 100.0;
    DTensor y2 = softmax(shifted, 1);
    for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(y[i] == doctest::Approx(y2[i]).epsilon(1e-12));
}

TEST_CASE("softmax two-element closed form and backward") {
    DTensor x({1, 2}, {0.3, -0.7});
    DTensor y = softmax(x, 1);
    const double want = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(y[0] == doctest::Approx(want).epsilon(1e-14));

    std::mt19937_64 rng(18);
    DTensor z({5}), gy({5});
    fill_uniform(z, rng, -2, 2);
    fill_uniform(gy, rng);
    auto loss = [&] {
        DTensor s = z;
        softmax_inplace(s.ptr(), 5, 1);
        double acc = 0;
        for (std::size_t i = 0; i < 5; ++i) acc += gy[i] * s[i];
        return acc;
    };
    DTensor s = z;
    softmax_inplace(s.ptr(), 5, 1);
    DTensor gz({5});
    softmax_backward_row(s.ptr(), gy.ptr(), gz.ptr(), 5, 1);
    CHECK(gradcheck(z, gz, loss) < 1e-8);
}

TEST_CASE("squash shrinks norms into the unit ball") {
    std::mt19937_64 rng(19);
    DTensor s({8});
    fill_uniform(s, rng, -2, 2);
    DTensor v({8});
    squash_vec(s.ptr(), v.ptr(), 8);
    const double n = vec_norm(s.ptr(), 8);
    const double vn = vec_norm(v.ptr(), 8);
    CHECK(vn < 1.0);
    // closed form: |v| = n^2/(1+n^2) * n/sqrt(n^2+eps)
    const double want = n * n / (1 + n * n) * n / std::sqrt(n * n + kSquashEps);
    CHECK(vn == doctest::Approx(want).epsilon(1e-12));
    // direction preserved
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(v[i] * n == doctest::Approx(s[i] * vn).epsilon(1e-9));

    DTensor zero({4});
    DTensor vz({4});
    squash_vec(zero.ptr(), vz.ptr(), 4);
    for (double z : vz.data) CHECK(z == 0.0);
}

TEST_CASE("squash backward passes a finite-difference check") {
    std::mt19937_64 rng(20);
    for (int rep = 0; rep < 3; ++rep) {
        DTensor s({6}), gy({6});
        fill_uniform(s, rng, -1.5, 1.5);
        fill_uniform(gy, rng);
        auto loss = [&] {
            DTensor v({6});
            squash_vec(s.ptr(), v.ptr(), 6);
            double acc = 0;
            for (std::size_t i = 0; i < 6; ++i) acc += gy[i] * v[i];
            return acc;
        };
        DTensor gs({6});
        squash_backward_vec(s.ptr(), gy.ptr(), gs.ptr(), 6);
        CHECK(gradcheck(s, gs, loss) < 1e-7);
    }
}

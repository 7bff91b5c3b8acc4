#include <doctest.h>

#include <cmath>
#include <random>

#include "capslab/partwhole.hpp"
#include "capslab/train.hpp"
#include "testutil.hpp"

using namespace capslab;
using testutil::fill_uniform;

namespace {

ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.conv_out = 2;
    cfg.conv_k = 3;
    cfg.pc_types = 2;
    cfg.pc_dim = 2;
    cfg.pc_k = 3;
    cfg.num_classes = 3;
    cfg.cc_dim = 2;
    cfg.decoder_hidden = {5};
    cfg.validate();
    return cfg;
}

Heatmap heat(std::size_t h, std::size_t w, std::vector<double> vals, bool normalized = false) {
    Heatmap hm;
    hm.values = DTensor({h, w}, std::move(vals));
    hm.normalized = normalized;
    return hm;
}

BinaryMask mask_of(std::size_t h, std::size_t w, const std::vector<char>& bits) {
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.bits = bits;
    return m;
}

Heatmap random_heat(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(0, 1);
    Heatmap hm;
    hm.values = DTensor({h, w});
    for (auto& v : hm.values.data) v = d(rng);
    return hm;
}

}  // namespace

TEST_CASE("relevance mass accuracy on hand-computed cases") {
    Heatmap h = heat(2, 2, {3.0, 1.0, 0.0, 0.0});

    CHECK(rma(h, mask_of(2, 2, {1, 1, 1, 1})) == 1.0);   // everything inside
    CHECK(rma(h, mask_of(2, 2, {0, 0, 1, 1})) == 0.0);   // mass entirely outside
    CHECK(rma(h, mask_of(2, 2, {1, 0, 0, 0})) == 0.75);  // 3 of 4 units of mass
    CHECK(rma(h, mask_of(2, 2, {0, 1, 0, 0})) == 0.25);

    bool zero_mass = false;
    Heatmap flat = heat(2, 2, {0, 0, 0, 0});
    CHECK(rma(flat, mask_of(2, 2, {1, 0, 0, 0}), &zero_mass) == 0.0);
    CHECK(zero_mass);

    CHECK_THROWS(rma(h, mask_of(2, 2, {0, 0, 0, 0})));  // empty mask
    CHECK_THROWS(rma(h, mask_of(1, 2, {1, 0})));        // shape mismatch
    Heatmap neg = heat(2, 2, {1.0, -0.5, 0.0, 0.0});
    CHECK_THROWS(rma(neg, mask_of(2, 2, {1, 1, 1, 1})));
}

TEST_CASE("binarization keeps pixels at or above the threshold") {
    Heatmap h = heat(2, 2, {0.0, 0.25, 0.5, 1.0}, true);
    BinaryMask m = binarize(h, 0.25);
    CHECK(m.bits == std::vector<char>{0, 1, 1, 1});
    CHECK(m.count() == 3);
    BinaryMask all = binarize(h, 0.0);
    CHECK(all.count() == 4);
    BinaryMask none = binarize(h, 1.01);
    CHECK(none.empty());

    Heatmap raw = heat(2, 2, {0.0, 0.25, 0.5, 1.0}, false);
    CHECK_THROWS(binarize(raw, 0.25));  // must be normalized first
}

TEST_CASE("per-unit normalization maps the group extremes onto [0,1]") {
    Heatmap a = heat(1, 3, {2.0, 4.0, 6.0});
    Heatmap b = heat(1, 3, {10.0, 8.0, 6.0});
    std::vector<Heatmap*> group{&a, &b};
    normalize_per_unit(group);
    CHECK(a.values[0] == 0.0);   // global min
    CHECK(b.values[0] == 1.0);   // global max
    CHECK(a.normalized);
    CHECK(a.norm_lo == 2.0);
    CHECK(a.norm_hi == 10.0);
    CHECK(a.values[1] == doctest::Approx(0.25));
    CHECK(b.values[2] == doctest::Approx(0.5));
    // Order within each map is preserved.
    CHECK(a.values[0] < a.values[1]);
    CHECK(a.values[1] < a.values[2]);
    CHECK(b.values[0] > b.values[1]);

    Heatmap c = heat(1, 2, {3.0, 3.0});
    std::vector<Heatmap*> constant{&c};
    normalize_per_unit(constant);
    CHECK(c.values[0] == 0.0);
    CHECK(c.values[1] == 0.0);
}

TEST_CASE("aggregation is a pointwise max: dominant, idempotent, commutative") {
    Heatmap a = heat(2, 2, {0.1, 0.9, 0.4, 0.0});
    Heatmap b = heat(2, 2, {0.5, 0.2, 0.4, 0.3});
    Heatmap ab = aggregate_heatmaps({&a, &b});
    Heatmap ba = aggregate_heatmaps({&b, &a});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(ab.values[i] >= a.values[i]);
        CHECK(ab.values[i] >= b.values[i]);
        CHECK(ab.values[i] == ba.values[i]);
    }
    Heatmap aa = aggregate_heatmaps({&a, &a});
    for (std::size_t i = 0; i < 4; ++i) CHECK(aa.values[i] == a.values[i]);
    CHECK(ab.values[0] == 0.5);
    CHECK(ab.values[1] == 0.9);

    Heatmap odd = heat(1, 2, {0.0, 0.0});
    CHECK_THROWS(aggregate_heatmaps({&a, &odd}));
}

TEST_CASE("RMA properties hold on random heatmaps") {
    std::mt19937_64 rng(61);
    for (int rep = 0; rep < 200; ++rep) {
        Heatmap cc = random_heat(6, 6, rng);
        Heatmap pc = random_heat(6, 6, rng);
        std::vector<Heatmap*> g{&cc};
        normalize_per_unit(g);

        double prev = 2.0;
        for (double thr : {0.1, 0.25, 0.5}) {
            BinaryMask m = binarize(cc, thr);
            if (m.empty()) break;
            const double score = rma(pc, m);
            CHECK(score >= 0.0);
            CHECK(score <= 1.0);
            // Higher thresholds shrink the mask, so the score cannot grow.
            CHECK(score <= prev + 1e-12);
            prev = score;
        }
    }
}

TEST_CASE("saliency maps match a finite-difference oracle at 64-bit") {
    const ModelConfig cfg = mini_config();
    std::mt19937_64 rng(63);
    ParamsT<double> p = ParamsT<double>::zeros(cfg);
    p.for_each([&](const std::string&, DTensor& t) { fill_uniform(t, rng, -0.5, 0.5); });
    DTensor x({cfg.in_c, cfg.in_h, cfg.in_w});
    fill_uniform(x, rng, 0, 1);

    bool dead = false;
    DTensor map = saliency_map(cfg, p, x, {}, &dead);
    REQUIRE_FALSE(dead);
    REQUIRE(map.shape == std::vector<std::size_t>({cfg.in_h, cfg.in_w}));

    const auto yhat = static_cast<std::size_t>(forward_one(cfg, p, x).pred[0]);
    auto norm_fn = [&] {
        BatchTrace<double> tr = forward_one(cfg, p, x);
        return static_cast<double>(tr.v_norm.at2(0, yhat));
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = std::abs(testutil::central_diff(norm_fn, x[i], 1e-5));
        CHECK(map[i] == doctest::Approx(fd).epsilon(1e-3));
    }
}

TEST_CASE("dead units yield flagged all-zero maps") {
    const ModelConfig cfg = mini_config();
    const Params p = Params::zeros(cfg);  // all class vectors are zero
    Tensor x({cfg.in_c, cfg.in_h, cfg.in_w});
    x.fill(0.5f);
    Heatmap h = unit_saliency(cfg, p, x, "cc", 0);
    CHECK(h.dead);
    for (double v : h.values.data) CHECK(v == 0.0);
}

TEST_CASE("unit_saliency validates its arguments and tags its output") {
    const ModelConfig cfg = mini_config();
    std::mt19937_64 rng(65);
    Params p = Params::zeros(cfg);
    p.for_each([&](const std::string&, Tensor& t) { fill_uniform(t, rng, -0.5, 0.5); });
    Tensor x({cfg.in_c, cfg.in_h, cfg.in_w});
    fill_uniform(x, rng, 0, 1);

    Heatmap h = unit_saliency(cfg, p, x, "pc_unit", 3);
    CHECK(h.layer == "pc_unit");
    CHECK(h.unit == 3);
    for (double v : h.values.data) CHECK(v >= 0.0);
    Heatmap t = unit_saliency(cfg, p, x, "pc_type", 1);
    CHECK(t.layer == "pc_type");

    CHECK_THROWS(unit_saliency(cfg, p, x, "pc_unit", cfg.n_pc()));
    CHECK_THROWS(unit_saliency(cfg, p, x, "pc_type", cfg.pc_types));
    CHECK_THROWS(unit_saliency(cfg, p, x, "whatever", 0));
}

TEST_CASE("the RMA study runs end to end on a self-labeled toy model") {
    const ModelConfig cfg = mini_config();
    std::mt19937_64 rng(67);
    Params p = Params::zeros(cfg);
    p.for_each([&](const std::string&, Tensor& t) { fill_uniform(t, rng, -0.5, 0.5); });
    Dataset ds;
    ds.images = Tensor({std::size_t(12), cfg.in_c, cfg.in_h, cfg.in_w});
    fill_uniform(ds.images, rng, 0, 1);
    ds.labels.assign(12, 0);
    ds.num_classes = static_cast<int>(cfg.num_classes);
    ds.split_tag = "synthetic";
    ds.labels = evaluate(cfg, p, ds).predictions;  // every example is correct

    RmaOptions opts;
    opts.k = 3;
    opts.per_class = 2;
    RmaResult res = rma_study(cfg, p, ds, opts);
    CHECK(res.k_used == 3);
    CHECK(res.isolated.size() == 3);
    CHECK(res.aggregated.size() == 3);
    for (const auto& rows : {res.isolated, res.aggregated})
        for (const RmaRow& row : rows) {
            CHECK(row.mean >= 0.0);
            CHECK(row.mean <= 1.0);
            CHECK(row.stddev >= 0.0);
        }
    CHECK(res.sheet.w > 0);

    RmaResult res2 = rma_study(cfg, p, ds, opts);  // deterministic
    for (std::size_t i = 0; i < res.isolated.size(); ++i) {
        CHECK(res.isolated[i].mean == res2.isolated[i].mean);
        CHECK(res.aggregated[i].mean == res2.aggregated[i].mean);
    }
}

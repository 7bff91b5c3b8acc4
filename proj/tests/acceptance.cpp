// Acceptance gate. Runs the numeric oracle suite in-process, then drives the
// CLI through two identical seeded desk-scale pipelines and checks every
// criterion from the produced artifacts. Prints one PASS/FAIL line per
// criterion; exits nonzero if any fails.
//
//   acceptance <cli_binary> <mnist_dir> <work_dir>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "capslab/capsnet.hpp"
#include "capslab/checkpoint.hpp"
#include "capslab/partwhole.hpp"
#include "capslab/paths.hpp"
#include "capslab/train.hpp"

namespace fs = std::filesystem;
using namespace capslab;
using json = nlohmann::json;

namespace {

int g_failures = 0;

void verdict(int criterion, bool pass, const std::string& detail) {
    std::cout << "criterion " << criterion << ": " << (pass ? "PASS" : "FAIL");
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << std::endl;
    if (!pass) ++g_failures;
}

std::string g_log;

int run(const std::string& cmd) {
    std::cout << "+ " << cmd << std::endl;
    const int rc = std::system((cmd + " >> " + g_log + " 2>&1").c_str());
    if (rc == -1) return -1;
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : 128;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

// CSV rows with '#' comment lines and the header stripped; also returns the
// comments for the key: value metadata they carry.
struct Csv {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> comments;
};

Csv load_csv(const fs::path& p) {
    Csv out;
    std::istringstream in(slurp(p));
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            out.comments.push_back(line);
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        out.rows.push_back(std::move(cells));
    }
    return out;
}

double comment_value(const Csv& csv, const std::string& key) {
    for (const std::string& c : csv.comments) {
        const auto pos = c.find(key + ": ");
        if (pos != std::string::npos) return std::stod(c.substr(pos + key.size() + 2));
    }
    throw std::runtime_error("comment key not found: " + key);
}

// ------------------------------------------------------------- criterion 8

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

double central_diff(const std::function<double()>& f, double& xi, double h = 1e-5) {
    const double saved = xi;
    xi = saved + h;
    const double up = f();
    xi = saved - h;
    const double down = f();
    xi = saved;
    return (up - down) / (2 * h);
}

// (a) whole-model gradient check at 64-bit: exercises every kernel's backward
// (conv, dense, relu, sigmoid, softmax, squash, routing) in composition.
bool oracle_gradients(std::string& detail) {
    const ModelConfig cfg = mini_config();
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    ParamsT<double> p = ParamsT<double>::zeros(cfg);
    p.for_each([&](const std::string&, DTensor& t) {
        for (auto& v : t.data) v = d(rng);
    });
    DTensor xs({2, 1, 8, 8});
    for (auto& v : xs.data) v = 0.5 * (d(rng) + 0.5);
    const std::vector<int> labels{0, 2};

    auto loss_fn = [&] {
        BatchTrace<double> tr = forward_batch(cfg, p, xs, {}, true, &labels);
        return capsule_loss(cfg, tr, labels);
    };
    BatchTrace<double> tr = forward_batch(cfg, p, xs, {}, true, &labels);
    ParamsT<double> grads = ParamsT<double>::zeros(cfg);
    DTensor grad_input;
    loss_backward(cfg, p, tr, labels, grads, &grad_input);

    double worst = 0;
    auto check = [&](DTensor& x, const DTensor& g) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double fd = central_diff(loss_fn, x[i]);
            const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
            worst = std::max(worst, std::abs(fd - g[i]) / denom);
        }
    };
    p.for_each([&](const std::string& name, DTensor& t) {
        grads.for_each([&](const std::string& gname, DTensor& g) {
            if (gname == name) check(t, g);
        });
    });
    check(xs, grad_input);
    detail = "max rel err " + std::to_string(worst);
    return worst < 1e-4;
}

// (b) routing vs an independent scalar 2x2x2 oracle for r in {1,2,3,5}.
bool oracle_routing(std::string& detail) {
    std::mt19937_64 rng(102);
    std::uniform_real_distribution<double> d(-1, 1);
    double worst = 0;
    for (std::size_t iters : {1u, 2u, 3u, 5u}) {
        for (int rep = 0; rep < 10; ++rep) {
            double uh[2][2][2];
            DTensor votes({2, 2, 2});
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    for (int k = 0; k < 2; ++k) {
                        uh[i][j][k] = d(rng);
                        votes[std::size_t((i * 2 + j) * 2 + k)] = uh[i][j][k];
                    }
            // Hand-rolled routing, scalar arithmetic only.
            double b[2][2] = {{0, 0}, {0, 0}};
            double v[2][2] = {{0, 0}, {0, 0}};
            double e[2][2];
            for (std::size_t t = 0; t < iters; ++t) {
                for (int i = 0; i < 2; ++i) {
                    const double mx = std::max(b[i][0], b[i][1]);
                    const double e0 = std::exp(b[i][0] - mx), e1 = std::exp(b[i][1] - mx);
                    e[i][0] = e0 / (e0 + e1);
                    e[i][1] = e1 / (e0 + e1);
                }
                for (int j = 0; j < 2; ++j) {
                    double s0 = 0, s1 = 0;
                    for (int i = 0; i < 2; ++i) {
                        s0 += e[i][j] * uh[i][j][0];
                        s1 += e[i][j] * uh[i][j][1];
                    }
                    const double n2 = s0 * s0 + s1 * s1;
                    const double scale = n2 / ((1 + n2) * std::sqrt(n2 + 1e-8));
                    v[j][0] = scale * s0;
                    v[j][1] = scale * s1;
                }
                if (t + 1 < iters)
                    for (int i = 0; i < 2; ++i)
                        for (int j = 0; j < 2; ++j)
                            b[i][j] += uh[i][j][0] * v[j][0] + uh[i][j][1] * v[j][1];
            }
            RoutingResult<double> r = dynamic_routing(votes, iters);
            for (int j = 0; j < 2; ++j)
                for (int k = 0; k < 2; ++k)
                    worst = std::max(worst,
                                     std::abs(r.v.back().at2(std::size_t(j), std::size_t(k)) -
                                              v[j][k]));
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    worst = std::max(worst, std::abs(r.e.back().at2(std::size_t(i), std::size_t(j)) -
                                                     e[i][j]));
        }
    }
    detail = "max abs err " + std::to_string(worst);
    return worst < 1e-10;
}

// (c) conv vs the direct quadruple loop, strides 1 and 2.
bool oracle_conv(std::string& detail) {
    std::mt19937_64 rng(103);
    std::uniform_real_distribution<double> d(-1, 1);
    double worst = 0;
    for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
        DTensor xs({2, 3, 9, 9}), w({4, 3, 3, 3}), b({4});
        for (auto& v : xs.data) v = d(rng);
        for (auto& v : w.data) v = d(rng);
        for (auto& v : b.data) v = d(rng);
        DTensor out = conv_forward_batch(xs, w, b, stride);
        const std::size_t oh = out.shape[2], ow = out.shape[3];
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t f = 0; f < 4; ++f)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        double acc = b[f];
                        for (std::size_t c = 0; c < 3; ++c)
                            for (std::size_t ky = 0; ky < 3; ++ky)
                                for (std::size_t kx = 0; kx < 3; ++kx)
                                    acc += w[((f * 3 + c) * 3 + ky) * 3 + kx] *
                                           xs[((s * 3 + c) * 9 + oy * stride + ky) * 9 +
                                              ox * stride + kx];
                        worst = std::max(
                            worst, std::abs(out[((s * 4 + f) * oh + oy) * ow + ox] - acc));
                    }
    }
    detail = "max abs err " + std::to_string(worst);
    return worst < 1e-12;
}

// (d) RMA properties on 1000 random heatmaps.
bool oracle_rma(std::string& detail) {
    std::mt19937_64 rng(104);
    std::uniform_real_distribution<double> d(0, 1);
    for (int rep = 0; rep < 1000; ++rep) {
        Heatmap cc, a, b;
        cc.values = DTensor({6, 6});
        a.values = DTensor({6, 6});
        b.values = DTensor({6, 6});
        for (auto& v : cc.values.data) v = d(rng);
        for (auto& v : a.values.data) v = d(rng);
        for (auto& v : b.values.data) v = d(rng);
        std::vector<Heatmap*> g{&cc};
        normalize_per_unit(g);

        // Aggregate dominance.
        Heatmap agg = aggregate_heatmaps({&a, &b});
        for (std::size_t i = 0; i < agg.values.size(); ++i) {
            if (agg.values[i] < a.values[i] || agg.values[i] < b.values[i]) {
                detail = "aggregate dominance violated";
                return false;
            }
        }
        // Range + nesting monotonicity over growing thresholds.
        double prev = 2.0;
        for (double thr : {0.1, 0.25, 0.5}) {
            BinaryMask m = binarize(cc, thr);
            if (m.empty()) break;
            const double s = rma(a, m);
            if (s < 0.0 || s > 1.0) {
                detail = "score out of [0,1]";
                return false;
            }
            if (s > prev + 1e-12) {
                detail = "threshold monotonicity violated";
                return false;
            }
            prev = s;
        }
    }
    detail = "1000 heatmaps";
    return true;
}

void criterion_8() {
    const auto t0 = std::chrono::steady_clock::now();
    std::string da, db, dc, dd;
    const bool a = oracle_gradients(da);
    const bool b = oracle_routing(db);
    const bool c = oracle_conv(dc);
    const bool d = oracle_rma(dd);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < 120.0;
    verdict(8, a && b && c && d && in_time,
            "gradients: " + da + "; routing: " + db + "; conv: " + dc + "; rma: " + dd +
                "; " + std::to_string(secs) + "s");
}

// ------------------------------------------------------------- pipeline

struct RunArtifacts {
    fs::path dir;
    double train_seconds = 0;
};

bool pipeline(const std::string& cli, const std::string& mnist, const fs::path& dir,
              RunArtifacts& out) {
    fs::create_directories(dir);
    out.dir = dir;
    const std::string common = " --seed 7 --workers 1 --out " + dir.string();
    const std::string ck = (dir / "checkpoint.cpsn").string();

    const auto t0 = std::chrono::steady_clock::now();
    if (run(cli + " train --data " + mnist + " --limit 20000 --valid 2000 --epochs 15 --batch 32" +
            common) != 0)
        return false;
    out.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const std::string evalbase = cli + " eval --checkpoint " + ck + " --data " + mnist +
                                 " --split test" + common;
    if (run(evalbase + " --name dense") != 0) return false;
    if (run(evalbase + " --limit 1000 --name dense1k") != 0) return false;

    // Path spec keeping every unit, for the ablation-identity check.
    {
        ModelConfig cfg = load_checkpoint(ck).config;
        PathSpec full;
        full.direction = "backward";
        for (std::size_t f = 0; f < cfg.conv_out; ++f) full.conv_keep.push_back(f);
        for (std::size_t t = 0; t < cfg.pc_types; ++t) full.pc_keep.push_back(t);
        std::ofstream js(dir / "allunits_pathspec.json", std::ios::binary);
        js << full.to_json().dump(2) << "\n";
    }
    if (run(evalbase + " --limit 1000 --name full1k --path " +
            (dir / "allunits_pathspec.json").string()) != 0)
        return false;

    if (run(cli + " paths --checkpoint " + ck + " --data " + mnist + " --split test --limit 1000" +
            common) != 0)
        return false;
    if (run(cli + " perturb --checkpoint " + ck + " --data " + mnist +
            " --split test --mode alpha --per-class 100" + common) != 0)
        return false;
    if (run(cli + " rma --checkpoint " + ck + " --data " + mnist +
            " --split test --per-class 10 --k 200" + common) != 0)
        return false;
    if (run(cli + " report --dir " + dir.string()) != 0) return false;
    return true;
}

void check_criteria_1_to_7(const RunArtifacts& a) {
    const fs::path& dir = a.dir;

    // 1. Dense test accuracy and the training time budget (scaled for hosts
    // with fewer than 4 cores, since the budget assumes a 4-core desktop).
    {
        const double acc = load_json(dir / "eval_dense.json")["accuracy"].get<double>();
        const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
        const double budget = 2700.0 * std::max(1.0, 4.0 / static_cast<double>(hw));
        verdict(1, acc >= 0.96 && a.train_seconds <= budget,
                "accuracy " + std::to_string(acc) + ", train " +
                    std::to_string(a.train_seconds) + "s, budget " + std::to_string(budget) +
                    "s on " + std::to_string(hw) + " cores");
    }

    // 2. Path ordering at k_pc = 10.
    {
        const json j = load_json(dir / "paths.json");
        const double dense = j["dense_accuracy"].get<double>();
        const double fwd = j["forward_path_accuracy"].get<double>();
        const double bwd = j["backward_path_accuracy"].get<double>();
        verdict(2, fwd >= bwd && fwd >= dense - 0.06,
                "dense " + std::to_string(dense) + ", forward " + std::to_string(fwd) +
                    ", backward " + std::to_string(bwd));
    }

    // 3. Ablation identity on 1000 examples: identical predictions and a
    // bit-identical class-vector-norm trace under the all-units mask.
    {
        const json dense = load_json(dir / "eval_dense1k.json");
        const json full = load_json(dir / "eval_full1k.json");
        const bool same_preds = dense["predictions"] == full["predictions"];
        const bool same_trace = dense["trace_crc"] == full["trace_crc"];
        verdict(3, same_preds && same_trace,
                std::string("predictions ") + (same_preds ? "identical" : "differ") +
                    ", trace crc " + (same_trace ? "identical" : "differ"));
    }

    // 4. Top-k conv curve: exact at k = 256, within 1 point at k = 64.
    {
        Csv csv = load_csv(dir / "topk_conv.csv");
        const double dense = comment_value(csv, "dense_accuracy");
        double at64 = -1, at256 = -1;
        for (const auto& row : csv.rows) {
            if (row[1] == "64") at64 = std::stod(row[3]);
            if (row[1] == "256") at256 = std::stod(row[3]);
        }
        verdict(4, at256 == dense && at64 >= dense - 0.01,
                "dense " + std::to_string(dense) + ", k=64 " + std::to_string(at64) +
                    ", k=256 " + std::to_string(at256));
    }

    // 5. Alpha strictly contains [-0.25, 0.25]; class intervals within alpha.
    {
        const json j = load_json(dir / "perturb_alpha.json");
        const double lo = j["alpha"][0].get<double>(), hi = j["alpha"][1].get<double>();
        bool nested = true;
        for (const auto& itv : j["class_intervals"])
            nested = nested && itv[0].get<double>() >= lo && itv[1].get<double>() <= hi;
        verdict(5, lo < -0.25 && hi > 0.25 && nested,
                "alpha [" + std::to_string(lo) + ", " + std::to_string(hi) + "], class intervals " +
                    (nested ? "nested" : "escape"));
    }

    // 6. Mean endpoint accuracy <= baseline (original-coordinate) accuracy.
    {
        const json j = load_json(dir / "perturb_alpha.json");
        const double baseline = j["baseline_accuracy"].get<double>();
        const auto steps = j["steps"].get<std::size_t>();
        Csv csv = load_csv(dir / "perturb_alpha.csv");
        double endpoint_sum = 0;
        std::size_t endpoint_n = 0;
        for (const auto& row : csv.rows) {
            const auto step = static_cast<std::size_t>(std::stoul(row[1]));
            if (step == 0 || step == steps - 1) {
                endpoint_sum += std::stod(row[3]);
                ++endpoint_n;
            }
        }
        const double endpoint = endpoint_sum / static_cast<double>(endpoint_n);
        verdict(6, endpoint <= baseline,
                "endpoint mean " + std::to_string(endpoint) + ", baseline " +
                    std::to_string(baseline));
    }

    // 7. RMA strictly decreasing over 0.1 > 0.25 > 0.5 in both modes;
    // isolated mean at 0.1 within [0.15, 0.5].
    {
        Csv csv = load_csv(dir / "rma.csv");
        std::vector<double> iso, agg;
        for (const auto& row : csv.rows)
            (row[1] == "isolated" ? iso : agg).push_back(std::stod(row[3]));
        const bool iso_dec = iso.size() == 3 && iso[0] > iso[1] && iso[1] > iso[2];
        const bool agg_dec = agg.size() == 3 && agg[0] > agg[1] && agg[1] > agg[2];
        const bool band = iso.size() == 3 && iso[0] >= 0.15 && iso[0] <= 0.50;
        std::string d = "isolated";
        for (double v : iso) d += " " + std::to_string(v);
        d += "; aggregated";
        for (double v : agg) d += " " + std::to_string(v);
        verdict(7, iso_dec && agg_dec && band, d);
    }
}

void criterion_9(const fs::path& a, const fs::path& b) {
    bool pass = true;
    std::string detail;
    try {
        const json ma = load_json(a / "manifest.json");
        const json mb = load_json(b / "manifest.json");
        if (ma != mb) {
            pass = false;
            detail = "manifests differ";
        } else {
            std::size_t compared = 0;
            for (auto it = ma.begin(); it != ma.end(); ++it) {
                if (slurp(a / it.key()) != slurp(b / it.key())) {
                    pass = false;
                    detail = it.key() + " differs";
                    break;
                }
                ++compared;
            }
            if (pass) detail = std::to_string(compared) + " artifacts byte-identical";
        }
    } catch (const std::exception& e) {
        pass = false;
        detail = e.what();
    }
    verdict(9, pass, detail);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 4) {
        std::cerr << "usage: acceptance <cli_binary> <mnist_dir> <work_dir>\n";
        return 2;
    }
    const std::string cli = argv[1], mnist = argv[2];
    const fs::path work = argv[3];
    fs::create_directories(work);
    g_log = (work / "acceptance.log").string();

    criterion_8();  // fast, no training needed

    RunArtifacts runA, runB;
    if (!pipeline(cli, mnist, work / "runA", runA)) {
        std::cerr << "pipeline run A failed; see " << g_log << "\n";
        for (int c : {1, 2, 3, 4, 5, 6, 7, 9}) verdict(c, false, "pipeline run A failed");
        return 1;
    }
    check_criteria_1_to_7(runA);
    if (!pipeline(cli, mnist, work / "runB", runB)) {
        std::cerr << "pipeline run B failed; see " << g_log << "\n";
        verdict(9, false, "pipeline run B failed");
        return 1;
    }
    criterion_9(runA.dir, runB.dir);

    std::cout << (g_failures == 0 ? "all criteria passed" : "failures: ")
              << (g_failures == 0 ? "" : std::to_string(g_failures)) << std::endl;
    return g_failures == 0 ? 0 : 1;
}

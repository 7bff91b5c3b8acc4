// Command-line surface: train the capsule network, evaluate it (dense or
// path-masked), and run the perturbation / activation-path / part-whole
// analyses. Every artifact embeds tool version, config, checkpoint hash,
// dataset hash and seed; reruns with the same inputs are byte-identical.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "capslab/checkpoint.hpp"
#include "capslab/partwhole.hpp"
#include "capslab/paths.hpp"
#include "capslab/perturb.hpp"
#include "capslab/report.hpp"
#include "capslab/train.hpp"

namespace fs = std::filesystem;
using namespace capslab;

namespace {

struct Common {
    std::string out = ".";
    std::uint64_t seed = 7;
    std::size_t workers = 1;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--out", c.out, "Output directory (created if missing)");
    const char* env_seed = std::getenv("SEED");
    if (env_seed) c.seed = std::strtoull(env_seed, nullptr, 10);
    cmd->add_option("--seed", c.seed, "RNG seed (SEED env honored when omitted)");
    cmd->add_option("--workers", c.workers, "Worker threads; 1 = bit-reproducible")
        ->check(CLI::PositiveNumber);
}

Dataset load_split(const std::string& dir, const std::string& split) {
    const fs::path root(dir);
    const bool test = split == "test";
    require(test || split == "train", "split must be train or test");
    const fs::path img = root / (test ? "t10k-images-idx3-ubyte" : "train-images-idx3-ubyte");
    const fs::path lab = root / (test ? "t10k-labels-idx1-ubyte" : "train-labels-idx1-ubyte");
    if (!fs::exists(img) || !fs::exists(lab))
        throw std::invalid_argument("dataset files not found under " + dir);
    Dataset ds = load_idx(img.string(), lab.string());
    ds.split_tag = split;
    return ds;
}

Dataset head(const Dataset& ds, std::size_t limit) {
    if (limit == 0 || limit >= ds.size()) return ds;
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    return ds.subset(idx, ds.split_tag);
}

Provenance make_prov(const ModelConfig& cfg, const std::string& ck_path, const Dataset& ds,
                     std::uint64_t seed) {
    Provenance prov;
    prov.config = cfg;
    prov.checkpoint_hash = ck_path.empty() ? "none" : crc32_file(ck_path);
    prov.dataset_hash = dataset_fingerprint(ds);
    prov.seed = seed;
    return prov;
}

std::string outfile(const Common& c, const std::string& name) {
    fs::create_directories(c.out);
    return (fs::path(c.out) / name).string();
}

// ------------------------------------------------------------------ train

int cmd_train(const Common& c, const std::string& data, const std::string& config_path,
              std::size_t limit, std::size_t valid_count, const TrainOptions& topts_in) {
    ModelConfig cfg;
    if (!config_path.empty())
        from_json(nlohmann::json::parse(read_text_file(config_path)), cfg);
    cfg.validate();

    Dataset full = load_split(data, "train");
    Dataset train_set = full, valid_set;
    if (valid_count > 0) std::tie(train_set, valid_set) = split(full, valid_count, c.seed);
    train_set = head(train_set, limit);
    std::cout << "training on " << train_set.size() << " examples, validating on "
              << valid_set.size() << "\n";

    TrainOptions topts = topts_in;
    topts.seed = c.seed;
    topts.on_epoch = [](const EpochMetrics& m) {
        std::cout << "epoch " << m.epoch << ": loss " << m.train_loss << " train acc "
                  << m.train_acc << " valid acc " << m.valid_acc << " (" << m.seconds << "s)\n";
    };
    TrainResult res = train(cfg, train_set, valid_set, topts);

    const std::string ck_path = outfile(c, "checkpoint.cpsn");
    save_checkpoint(res.checkpoint, ck_path);

    Provenance prov = make_prov(cfg, ck_path, train_set, c.seed);
    std::vector<std::vector<std::string>> rows;
    for (const auto& m : res.metrics)
        rows.push_back({std::to_string(m.epoch), fmt(m.train_loss), fmt(m.train_acc),
                        fmt(m.valid_acc)});
    const std::string csv = outfile(c, "metrics.csv");
    write_csv(csv, prov, {"epoch", "train_loss", "train_acc", "valid_acc"}, rows);
    manifest_record(c.out, {ck_path, csv});
    std::cout << "checkpoint " << prov.checkpoint_hash << " written to " << ck_path << "\n";
    return 0;
}

// ------------------------------------------------------------------ eval

int cmd_eval(const Common& c, const std::string& ck_path, const std::string& data,
             const std::string& split_name, std::size_t limit, const std::string& path_file,
             const std::string& name) {
    Checkpoint ck = load_checkpoint(ck_path);
    Dataset ds = head(load_split(data, split_name), limit);
    if (ds.size() == 0) throw std::invalid_argument("eval: empty split");

    UnitMask mask;
    nlohmann::ordered_json path_json;
    if (!path_file.empty()) {
        PathSpec path = PathSpec::from_json(nlohmann::json::parse(read_text_file(path_file)));
        mask = path.to_mask();
        path_json = path.to_json();
    }

    // Forward in fixed batches, keeping the class-vector norms for the trace
    // fingerprint (bit-identity evidence for ablation checks).
    const std::size_t batch = 64, m = ck.config.num_classes;
    Tensor norms({ds.size(), m});
    std::vector<int> preds(ds.size());
    const std::size_t n_batches = (ds.size() + batch - 1) / batch;
    parallel_tasks(n_batches, c.workers, [&](std::size_t b) {
        const std::size_t lo = b * batch, hi = std::min(ds.size(), lo + batch);
        std::vector<std::size_t> idx(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        BatchTrace<float> tr = forward_batch(ck.config, ck.params, ds.gather(idx), mask);
        for (std::size_t s = 0; s < idx.size(); ++s) {
            preds[lo + s] = tr.pred[s];
            for (std::size_t j = 0; j < m; ++j) norms.at2(lo + s, j) = tr.v_norm.at2(s, j);
        }
    });

    std::vector<std::size_t> cls_total(m, 0), cls_correct(m, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto y = static_cast<std::size_t>(ds.labels[i]);
        ++cls_total[y];
        if (preds[i] == ds.labels[i]) {
            ++correct;
            ++cls_correct[y];
        }
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(ds.size());

    std::cout << "overall: " << fmt(acc, 4) << " (" << correct << "/" << ds.size() << ")\n";
    for (std::size_t j = 0; j < m; ++j)
        std::cout << "class " << j << ": "
                  << fmt(cls_total[j] ? static_cast<double>(cls_correct[j]) / cls_total[j] : 0, 4)
                  << " (" << cls_correct[j] << "/" << cls_total[j] << ")\n";

    Provenance prov = make_prov(ck.config, ck_path, ds, c.seed);
    nlohmann::ordered_json body;
    body["split"] = split_name;
    body["examples"] = ds.size();
    body["accuracy"] = acc;
    body["per_class_correct"] = cls_correct;
    body["per_class_total"] = cls_total;
    body["predictions"] = preds;
    body["trace_crc"] = crc32_hex(norms.ptr(), norms.size() * sizeof(float));
    if (!path_json.is_null()) body["path"] = path_json;
    const std::string out = outfile(c, "eval_" + name + ".json");
    write_json_artifact(out, prov, body);
    manifest_record(c.out, {out});
    return 0;
}

// ------------------------------------------------------------------ perturb

int cmd_perturb(const Common& c, const std::string& ck_path, const std::string& data,
                const std::string& split_name, std::size_t limit, const PerturbOptions& popts) {
    Checkpoint ck = load_checkpoint(ck_path);
    Dataset ds = head(load_split(data, split_name), limit);
    PerturbOptions opts = popts;
    opts.workers = c.workers;
    PerturbResult res = run_perturb(ck.config, ck.params, ds, opts);

    Provenance prov = make_prov(ck.config, ck_path, ds, c.seed);
    const std::size_t steps = res.table.shape[1];
    std::vector<std::vector<std::string>> rows;
    for (std::size_t d = 0; d < res.table.shape[0]; ++d)
        for (std::size_t t = 0; t < steps; ++t)
            rows.push_back({std::to_string(d), std::to_string(t),
                            res.values.empty() ? "" : fmt(res.values[t]),
                            fmt(res.table.at2(d, t))});
    const std::string csv = outfile(c, "perturb_" + opts.mode + ".csv");
    write_csv(csv, prov, {"dimension", "step", "value", "accuracy"}, rows,
              {"mode: " + opts.mode, "per_class: " + std::to_string(opts.per_class),
               "baseline_accuracy: " + fmt(res.baseline_acc)});

    nlohmann::ordered_json body;
    body["mode"] = opts.mode;
    body["alpha"] = {res.alpha.lo, res.alpha.hi};
    nlohmann::ordered_json intervals = nlohmann::ordered_json::array();
    for (const Interval& itv : res.class_intervals) intervals.push_back({itv.lo, itv.hi});
    body["class_intervals"] = intervals;
    body["values"] = res.values;
    body["baseline_accuracy"] = res.baseline_acc;
    body["seeds"] = res.n_seeds;
    body["seeds_per_class"] = res.seeds_per_class;
    body["per_class"] = opts.per_class;
    body["steps"] = steps;
    const std::string json = outfile(c, "perturb_" + opts.mode + ".json");
    write_json_artifact(json, prov, body);

    std::vector<std::string> files{csv, json};
    for (std::size_t i = 0; i < res.sheets.size(); ++i) {
        const std::string sheet =
            outfile(c, "perturb_" + opts.mode + "_class" + std::to_string(i) + ".pgm");
        std::vector<std::string> comments = prov.comment_lines();
        for (auto& line : comments) line.erase(0, 2);  // PGM writer re-prefixes
        write_pgm(sheet, res.sheets[i], comments);
        files.push_back(sheet);
    }
    manifest_record(c.out, files);
    std::cout << "alpha = [" << res.alpha.lo << ", " << res.alpha.hi << "], baseline "
              << fmt(res.baseline_acc, 4) << "\n";
    return 0;
}

// ------------------------------------------------------------------ paths

int cmd_paths(const Common& c, const std::string& ck_path, const std::string& data,
              const std::string& split_name, std::size_t limit, std::size_t k_conv,
              std::size_t k_pc, bool no_curves) {
    Checkpoint ck = load_checkpoint(ck_path);
    const ModelConfig& cfg = ck.config;
    Dataset ds = head(load_split(data, split_name), limit);
    Provenance prov = make_prov(cfg, ck_path, ds, c.seed);
    std::vector<std::string> files;

    const double dense_acc = evaluate(cfg, ck.params, ds, {}, 64, c.workers).accuracy;
    const PathSpec fwd_path = dataset_path(cfg, ck.params, ds, "forward", k_pc, k_conv,
                                           kPathThreshold, c.workers);
    const PathSpec bwd_path = dataset_path(cfg, ck.params, ds, "backward", k_pc, k_conv,
                                           kPathThreshold, c.workers);
    const double fwd_acc = evaluate(cfg, ck.params, ds, fwd_path.to_mask(), 64, c.workers).accuracy;
    const double bwd_acc = evaluate(cfg, ck.params, ds, bwd_path.to_mask(), 64, c.workers).accuracy;
    for (const auto& [tag, path] : {std::pair<std::string, const PathSpec&>{"forward", fwd_path},
                                    {"backward", bwd_path}}) {
        const std::string jf = outfile(c, "pathspec_" + tag + "_global.json");
        write_json_artifact(jf, prov, path.to_json());
        files.push_back(jf);
    }
    std::cout << "dense " << fmt(dense_acc, 4) << "  forward-path " << fmt(fwd_acc, 4)
              << "  backward-path " << fmt(bwd_acc, 4) << " (k_conv=" << k_conv
              << ", k_pc=" << k_pc << ")\n";

    if (!no_curves) {
        std::vector<std::size_t> conv_grid, pc_grid;
        for (std::size_t k = 1; k <= 50; ++k) conv_grid.push_back(k);
        for (std::size_t k : {std::size_t(64), std::size_t(128), std::size_t(256)})
            if (k <= cfg.conv_out) conv_grid.push_back(k);
        for (std::size_t k = 1; k <= cfg.pc_types; ++k) pc_grid.push_back(k);

        for (const auto& [layer, grid] :
             {std::pair<std::string, std::vector<std::size_t>>{"conv", conv_grid},
              {"pc", pc_grid}}) {
            TopkCurve curve = select_topk_cv(cfg, ck.params, ds, layer, grid, c.workers);
            std::vector<std::vector<std::string>> rows;
            for (std::size_t i = 0; i < curve.k.size(); ++i)
                rows.push_back({layer, std::to_string(curve.k[i]), split_name,
                                fmt(curve.accuracy[i])});
            const std::string csv = outfile(c, "topk_" + layer + ".csv");
            write_csv(csv, prov, {"layer", "k", "split", "accuracy"}, rows,
                      {"k_star: " + std::to_string(curve.k_star),
                       "dense_accuracy: " + fmt(dense_acc)});
            files.push_back(csv);
            std::cout << layer << " k* = " << curve.k_star << "\n";
        }
    }

    // Per-class paths (both directions) + overlap of the backward PC sets.
    std::vector<std::vector<std::size_t>> backward_sets;
    for (const std::string dir : {"forward", "backward"}) {
        for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
            PathSpec path = class_path(cfg, ck.params, ds, static_cast<int>(cls), dir, k_pc,
                                       k_conv, kPathThreshold, c.workers);
            const std::string jf =
                outfile(c, "pathspec_" + dir + "_class" + std::to_string(cls) + ".json");
            write_json_artifact(jf, prov, path.to_json());
            files.push_back(jf);
            if (dir == "backward") backward_sets.push_back(path.pc_keep);
        }
    }
    OverlapReport ov = unit_overlap(backward_sets);
    std::vector<std::vector<std::string>> ovrows;
    for (std::size_t a = 0; a < ov.shared.size(); ++a) {
        std::vector<std::string> row{std::to_string(a)};
        for (std::size_t b = 0; b < ov.shared.size(); ++b)
            row.push_back(std::to_string(ov.shared[a][b]));
        ovrows.push_back(row);
    }
    std::vector<std::string> ovhdr{"class"};
    for (std::size_t b = 0; b < ov.shared.size(); ++b) ovhdr.push_back("c" + std::to_string(b));
    const std::string ovcsv = outfile(c, "overlap.csv");
    write_csv(ovcsv, prov, ovhdr, ovrows, {"k: " + std::to_string(ov.k)});
    files.push_back(ovcsv);

    nlohmann::ordered_json body;
    body["k_conv"] = k_conv;
    body["k_pc"] = k_pc;
    body["dense_accuracy"] = dense_acc;
    body["forward_path_accuracy"] = fwd_acc;
    body["backward_path_accuracy"] = bwd_acc;
    body["overlap_k"] = ov.k;
    body["shared"] = ov.shared;
    body["exclusive"] = ov.exclusive;
    const std::string json = outfile(c, "paths.json");
    write_json_artifact(json, prov, body);
    files.push_back(json);
    manifest_record(c.out, files);
    return 0;
}

// ------------------------------------------------------------------ rma

int cmd_rma(const Common& c, const std::string& ck_path, const std::string& data,
            const std::string& split_name, std::size_t limit, const RmaOptions& ropts) {
    Checkpoint ck = load_checkpoint(ck_path);
    Dataset ds = head(load_split(data, split_name), limit);
    RmaOptions opts = ropts;
    opts.workers = c.workers;
    RmaResult res = rma_study(ck.config, ck.params, ds, opts);

    Provenance prov = make_prov(ck.config, ck_path, ds, c.seed);
    std::vector<std::vector<std::string>> rows;
    auto emit = [&](const std::string& mode, const std::vector<RmaRow>& rws) {
        for (const RmaRow& r : rws)
            rows.push_back({split_name, mode, fmt(r.threshold, 2), fmt(r.mean), fmt(r.stddev),
                            std::to_string(r.pairs), std::to_string(r.excluded),
                            std::to_string(r.zero_mass)});
    };
    emit("isolated", res.isolated);
    emit("aggregated", res.aggregated);
    const std::string csv = outfile(c, "rma.csv");
    write_csv(csv, prov,
              {"dataset", "mode", "threshold", "mean", "std", "pairs", "excluded", "zero_mass"},
              rows,
              {"k: " + std::to_string(res.k_used), "unit_universe: " + res.unit_universe,
               "examples: " + std::to_string(res.n_examples)});

    const std::string sheet = outfile(c, "rma_sheet.pgm");
    std::vector<std::string> comments = prov.comment_lines();
    for (auto& line : comments) line.erase(0, 2);
    write_pgm(sheet, res.sheet, comments);
    manifest_record(c.out, {csv, sheet});

    for (const RmaRow& r : res.isolated)
        std::cout << "isolated thr " << r.threshold << ": " << fmt(r.mean, 4) << " +- "
                  << fmt(r.stddev, 4) << " (" << r.pairs << " pairs, " << r.excluded
                  << " excluded)\n";
    for (const RmaRow& r : res.aggregated)
        std::cout << "aggregated thr " << r.threshold << ": " << fmt(r.mean, 4) << " +- "
                  << fmt(r.stddev, 4) << " (" << r.pairs << " pairs, " << r.excluded
                  << " excluded)\n";
    return 0;
}

// ------------------------------------------------------------------ report

int cmd_report(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    nlohmann::ordered_json summary;
    summary["tool"] = kToolVersion;
    nlohmann::ordered_json artifacts = nlohmann::ordered_json::array();
    std::vector<std::string> warnings;
    if (fs::exists(mpath)) {
        nlohmann::ordered_json manifest =
            nlohmann::ordered_json::parse(read_text_file(mpath.string()));
        for (auto it = manifest.begin(); it != manifest.end(); ++it) {
            const fs::path f = fs::path(dir) / it.key();
            nlohmann::ordered_json a;
            a["file"] = it.key();
            a["recorded_crc"] = it.value();
            if (!fs::exists(f)) {
                a["status"] = "missing";
                warnings.push_back(it.key() + ": missing");
            } else {
                const std::string actual = crc32_file(f.string());
                a["actual_crc"] = actual;
                a["status"] = actual == it.value().get<std::string>() ? "ok" : "tampered";
                if (actual != it.value().get<std::string>())
                    warnings.push_back(it.key() + ": hash mismatch");
            }
            artifacts.push_back(a);
        }
    }
    summary["artifacts"] = artifacts;
    summary["warnings"] = warnings;

    std::ofstream js(fs::path(dir) / "summary.json", std::ios::binary);
    js << summary.dump(2) << "\n";
    std::ofstream md(fs::path(dir) / "summary.md", std::ios::binary);
    md << "# Run summary\n\n";
    if (artifacts.empty()) md << "No recorded artifacts.\n";
    for (const auto& a : artifacts)
        md << "- `" << a["file"].get<std::string>() << "` (" << a["status"].get<std::string>()
           << ", crc " << a["recorded_crc"].get<std::string>() << ")\n";
    if (!warnings.empty()) {
        md << "\n## Warnings\n\n";
        for (const auto& w : warnings) md << "- " << w << "\n";
    }
    for (const auto& w : warnings) std::cout << "warning: " << w << "\n";
    std::cout << "summary written to " << (fs::path(dir) / "summary.md").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Capsule-network interpretability laboratory"};
    app.require_subcommand(1);

    Common c_train, c_eval, c_perturb, c_paths, c_rma;
    std::string data, config_path, ck_path, split_name = "test", path_file, eval_name = "dense";
    std::string report_dir;
    std::size_t limit = 0, valid_count = 2000, k_conv = 35, k_pc = 10;
    bool no_curves = false;
    TrainOptions topts;
    PerturbOptions popts;
    RmaOptions ropts;

    CLI::App* train_cmd = app.add_subcommand("train", "Train the capsule network");
    add_common(train_cmd, c_train);
    train_cmd->add_option("--data", data, "Directory with the IDX files")->required();
    train_cmd->add_option("--config", config_path, "Model config JSON");
    train_cmd->add_option("--limit", limit, "Cap the training set size (0 = all)");
    train_cmd->add_option("--valid", valid_count, "Held-out validation examples");
    train_cmd->add_option("--epochs", topts.epochs, "Training epochs")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--batch", topts.batch_size, "Batch size")->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", topts.lr, "Adam learning rate");

    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate dense or path-masked accuracy");
    add_common(eval_cmd, c_eval);
    eval_cmd->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
    eval_cmd->add_option("--data", data, "Directory with the IDX files")->required();
    eval_cmd->add_option("--split", split_name, "train or test");
    eval_cmd->add_option("--limit", limit, "Cap the split size (0 = all)");
    eval_cmd->add_option("--path", path_file, "PathSpec JSON to mask with");
    eval_cmd->add_option("--name", eval_name, "Artifact name suffix");

    CLI::App* perturb_cmd = app.add_subcommand("perturb", "Class-vector perturbation analysis");
    add_common(perturb_cmd, c_perturb);
    perturb_cmd->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
    perturb_cmd->add_option("--data", data, "Directory with the IDX files")->required();
    perturb_cmd->add_option("--split", split_name, "train or test");
    perturb_cmd->add_option("--limit", limit, "Cap the split size (0 = all)");
    perturb_cmd->add_option("--mode", popts.mode, "alpha, heuristic or class");
    perturb_cmd->add_option("--per-class", popts.per_class, "Seed examples per class");
    perturb_cmd->add_option("--steps", popts.steps, "Sweep steps over the interval");

    CLI::App* paths_cmd = app.add_subcommand("paths", "Activation-path extraction and curves");
    add_common(paths_cmd, c_paths);
    paths_cmd->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
    paths_cmd->add_option("--data", data, "Directory with the IDX files")->required();
    paths_cmd->add_option("--split", split_name, "train or test");
    paths_cmd->add_option("--limit", limit, "Cap the split size (0 = all)");
    paths_cmd->add_option("--k-conv", k_conv, "Conv filters to keep");
    paths_cmd->add_option("--k-pc", k_pc, "PC capsule types to keep");
    paths_cmd->add_flag("--no-curves", no_curves, "Skip the accuracy-vs-k curves");

    CLI::App* rma_cmd = app.add_subcommand("rma", "Part-whole relevance-mass analysis");
    add_common(rma_cmd, c_rma);
    rma_cmd->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
    rma_cmd->add_option("--data", data, "Directory with the IDX files")->required();
    rma_cmd->add_option("--split", split_name, "train or test");
    rma_cmd->add_option("--limit", limit, "Cap the split size (0 = all)");
    rma_cmd->add_option("--k", ropts.k, "Top-k relevant units per class");
    rma_cmd->add_option("--mode", ropts.mode, "isolated, aggregated or both");
    rma_cmd->add_option("--universe", ropts.unit_universe, "pc_unit or pc_type");
    rma_cmd->add_option("--per-class", ropts.per_class, "Examples per class");
    rma_cmd->add_option("--thresholds", ropts.thresholds, "Binarization thresholds");

    CLI::App* report_cmd = app.add_subcommand("report", "Consolidate a run directory");
    report_cmd->add_option("--dir", report_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train_cmd->parsed())
            return cmd_train(c_train, data, config_path, limit, valid_count, topts);
        if (eval_cmd->parsed())
            return cmd_eval(c_eval, ck_path, data, split_name, limit, path_file, eval_name);
        if (perturb_cmd->parsed())
            return cmd_perturb(c_perturb, ck_path, data, split_name, limit, popts);
        if (paths_cmd->parsed())
            return cmd_paths(c_paths, ck_path, data, split_name, limit, k_conv, k_pc, no_curves);
        if (rma_cmd->parsed()) return cmd_rma(c_rma, ck_path, data, split_name, limit, ropts);
        if (report_cmd->parsed()) return cmd_report(report_dir);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        std::cerr << "error: " << msg << "\n";
        const bool numeric = msg.find("diverged") != std::string::npos ||
                             msg.find("non-finite") != std::string::npos;
        return numeric ? 3 : 2;
    }
    return 2;
}

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "capslab/checkpoint.hpp"
#include "capslab/report.hpp"
#include "capslab/train.hpp"

using namespace capslab;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
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
    cfg.decoder_hidden = {4};
    cfg.validate();
    return cfg;
}

struct TmpDir {
    fs::path path;
    TmpDir() : path(fs::temp_directory_path() / ("capslab_ck_" + std::to_string(std::rand()))) {
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
};

Checkpoint make_checkpoint() {
    const ModelConfig cfg = small_config();
    Checkpoint ck(cfg);
    ck.params = init_params(cfg, 123);
    ck.seed = 123;
    ck.epoch = 4;
    ck.opt.step_count = 77;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> d(-1, 1);
    ck.opt.m.for_each([&](const std::string&, Tensor& t) {
        for (auto& v : t.data) v = d(rng);
    });
    ck.opt.v.for_each([&](const std::string&, Tensor& t) {
        for (auto& v : t.data) v = std::abs(d(rng));
    });
    return ck;
}

}  // namespace

TEST_CASE("checkpoint round trip restores everything bit-for-bit") {
    TmpDir tmp;
    const std::string path = (tmp.path / "ck.cpsn").string();
    Checkpoint ck = make_checkpoint();
    save_checkpoint(ck, path);
    Checkpoint back = load_checkpoint(path);

    CHECK(back.config == ck.config);
    CHECK(back.seed == ck.seed);
    CHECK(back.epoch == ck.epoch);
    CHECK(back.opt.step_count == ck.opt.step_count);
    ck.params.for_each([&](const std::string& name, Tensor& t) {
        back.params.for_each([&](const std::string& bname, Tensor& bt) {
            if (bname != name) return;
            REQUIRE(bt.shape == t.shape);
            for (std::size_t i = 0; i < t.size(); ++i) CHECK(bt[i] == t[i]);
        });
    });

    // Saving the loaded checkpoint again reproduces the file byte-for-byte.
    const std::string path2 = (tmp.path / "ck2.cpsn").string();
    save_checkpoint(back, path2);
    CHECK(crc32_file(path) == crc32_file(path2));
    CHECK(fs::file_size(path) == fs::file_size(path2));
}

TEST_CASE("corruption is caught by the CRC") {
    TmpDir tmp;
    const std::string path = (tmp.path / "ck.cpsn").string();
    save_checkpoint(make_checkpoint(), path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(fs::file_size(path) / 2));
        f.put(static_cast<char>(0x5a));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("CRC"), std::runtime_error);
}

TEST_CASE("bad magic, truncation and version are rejected") {
    TmpDir tmp;
    const std::string path = (tmp.path / "ck.cpsn").string();
    save_checkpoint(make_checkpoint(), path);

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.put('X');
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), std::runtime_error);

    save_checkpoint(make_checkpoint(), path);
    fs::resize_file(path, fs::file_size(path) / 3);
    CHECK_THROWS(load_checkpoint(path));

    CHECK_THROWS(load_checkpoint((tmp.path / "missing.cpsn").string()));
}

TEST_CASE("config/tensor shape mismatches are named") {
    TmpDir tmp;
    // Write a checkpoint, then load it with its config swapped for one that
    // implies different tensor shapes by rewriting the config length-prefixed
    // block. Easier: save under config A, hand-edit is brittle, so instead
    // serialize a checkpoint whose params were resized behind the API's back.
    Checkpoint ck = make_checkpoint();
    ck.params.conv_b = Tensor({3});  // config says 2 filters
    const std::string path = (tmp.path / "ck.cpsn").string();
    save_checkpoint(ck, path);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("shape"), std::runtime_error);
}

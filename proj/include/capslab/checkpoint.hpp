#pragma once

#include <cstdint>
#include <string>

#include "capslab/adam.hpp"
#include "capslab/capsnet.hpp"

namespace capslab {

// Everything needed to resume or analyze a training run.
struct Checkpoint {
    ModelConfig config;
    Params params;
    Adam opt;
    std::uint64_t seed = 0;
    std::uint32_t epoch = 0;

    Checkpoint() = default;
    explicit Checkpoint(const ModelConfig& cfg)
        : config(cfg), params(Params::zeros(cfg)), opt(cfg) {}
};

// Little-endian binary container: magic "CPSN", u32 version, u32 CRC32 of the
// payload, then length-prefixed JSON config and per-tensor records
// (name, rank, dims, raw 32-bit floats).
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace capslab

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "capslab/dataset.hpp"

namespace capslab {

inline constexpr const char* kToolVersion = "capslab 1.0.0";

// CRC32 hex digests used as provenance fingerprints.
std::string crc32_hex(const void* data, std::size_t size);
std::string crc32_file(const std::string& path);
std::string dataset_fingerprint(const Dataset& ds);

// Stamped into every artifact so reruns can be verified byte-for-byte.
struct Provenance {
    std::string tool_version = kToolVersion;
    nlohmann::ordered_json config;
    std::string checkpoint_hash;
    std::string dataset_hash;
    std::uint64_t seed = 0;

    nlohmann::ordered_json to_json() const;
    // "# key: value" lines for CSV and PGM headers.
    std::vector<std::string> comment_lines() const;
};

// CSV with provenance comment lines, then a header row, then data rows.
void write_csv(const std::string& path, const Provenance& prov,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows,
               const std::vector<std::string>& extra_comments = {});

// JSON artifact; provenance is embedded under the "provenance" key.
void write_json_artifact(const std::string& path, const Provenance& prov,
                         const nlohmann::ordered_json& body);

std::string read_text_file(const std::string& path);

// Per-run manifest (manifest.json in the output directory) mapping artifact
// file names to their CRC32 at write time; `report` re-checks them.
void manifest_record(const std::string& outdir, const std::vector<std::string>& files);

// Fixed-precision float formatting so artifact bytes are locale-independent.
std::string fmt(double v, int digits = 6);

}  // namespace capslab

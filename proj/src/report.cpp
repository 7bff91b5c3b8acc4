#include "capslab/report.hpp"

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace capslab {

namespace fs = std::filesystem;

std::string crc32_hex(const void* data, std::size_t size) {
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(size)));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc);
    return buf;
}

std::string crc32_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for hashing: " + path);
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, Z_NULL, 0));
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount())
        crc = static_cast<std::uint32_t>(crc32(crc, reinterpret_cast<const Bytef*>(buf),
                                               static_cast<uInt>(in.gcount())));
    char out[9];
    std::snprintf(out, sizeof out, "%08x", crc);
    return out;
}

std::string dataset_fingerprint(const Dataset& ds) {
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, Z_NULL, 0));
    crc = static_cast<std::uint32_t>(
        crc32(crc, reinterpret_cast<const Bytef*>(ds.images.ptr()),
              static_cast<uInt>(ds.images.size() * sizeof(float))));
    crc = static_cast<std::uint32_t>(
        crc32(crc, reinterpret_cast<const Bytef*>(ds.labels.data()),
              static_cast<uInt>(ds.labels.size() * sizeof(int))));
    char out[9];
    std::snprintf(out, sizeof out, "%08x", crc);
    return out;
}

nlohmann::ordered_json Provenance::to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = tool_version;
    j["seed"] = seed;
    j["checkpoint"] = checkpoint_hash;
    j["dataset"] = dataset_hash;
    j["config"] = config;
    return j;
}

std::vector<std::string> Provenance::comment_lines() const {
    return {
        "# tool: " + tool_version,
        "# seed: " + std::to_string(seed),
        "# checkpoint: " + checkpoint_hash,
        "# dataset: " + dataset_hash,
        "# config: " + config.dump(),
    };
}

void write_csv(const std::string& path, const Provenance& prov,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows,
               const std::vector<std::string>& extra_comments) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& line : prov.comment_lines()) out << line << "\n";
    for (const auto& line : extra_comments) out << "# " << line << "\n";
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

void write_json_artifact(const std::string& path, const Provenance& prov,
                         const nlohmann::ordered_json& body) {
    nlohmann::ordered_json j;
    j["provenance"] = prov.to_json();
    for (auto it = body.begin(); it != body.end(); ++it) j[it.key()] = it.value();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void manifest_record(const std::string& outdir, const std::vector<std::string>& files) {
    const fs::path mpath = fs::path(outdir) / "manifest.json";
    nlohmann::ordered_json m;
    if (fs::exists(mpath)) m = nlohmann::ordered_json::parse(read_text_file(mpath.string()));
    for (const auto& f : files) {
        const fs::path p(f);
        m[p.filename().string()] = crc32_file(f);
    }
    std::ofstream out(mpath, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + mpath.string());
    out << m.dump(2) << "\n";
}

std::string fmt(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace capslab

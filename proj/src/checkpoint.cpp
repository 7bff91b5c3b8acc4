#include "capslab/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

namespace capslab {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'S', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::vector<char>& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::vector<char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::vector<char>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const char* p;
    const char* end;
    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end - p) < n)
            throw std::runtime_error("checkpoint: truncated payload");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint8_t(p[0]) | (std::uint16_t(std::uint8_t(p[1])) << 8);
        p += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
        p += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(p[i])) << (8 * i);
        p += 8;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(p, p + n);
        p += n;
        return s;
    }
};

void put_tensor(std::vector<char>& buf, const std::string& name, const Tensor& t) {
    put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) put_u32(buf, static_cast<std::uint32_t>(d));
    const char* raw = reinterpret_cast<const char*>(t.ptr());
    buf.insert(buf.end(), raw, raw + t.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::vector<char> payload;
    nlohmann::ordered_json jcfg = ck.config;
    const std::string cfg = jcfg.dump();
    put_u32(payload, static_cast<std::uint32_t>(cfg.size()));
    payload.insert(payload.end(), cfg.begin(), cfg.end());
    put_u64(payload, ck.seed);
    put_u32(payload, ck.epoch);
    put_u64(payload, ck.opt.step_count);

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    ck.params.for_each([&](const std::string& n, const Tensor& t) { tensors.emplace_back(n, &t); });
    ck.opt.m.for_each(
        [&](const std::string& n, const Tensor& t) { tensors.emplace_back("adam.m." + n, &t); });
    ck.opt.v.for_each(
        [&](const std::string& n, const Tensor& t) { tensors.emplace_back("adam.v." + n, &t); });
    put_u32(payload, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) put_tensor(payload, name, *t);

    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    char hdr[8];
    std::memcpy(hdr, &kVersion, 4);
    std::memcpy(hdr + 4, &crc, 4);
    out.write(hdr, 8);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::vector<char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < 12 || std::memcmp(file.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t version, crc;
    std::memcpy(&version, file.data() + 4, 4);
    std::memcpy(&crc, file.data() + 8, 4);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const char* payload = file.data() + 12;
    const std::size_t psize = file.size() - 12;
    const std::uint32_t actual = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(psize)));
    if (actual != crc) throw std::runtime_error("checkpoint: CRC mismatch (corrupted file)");

    Reader r{payload, payload + psize};
    const std::uint32_t cfg_len = r.u32();
    const std::string cfg_str = r.str(cfg_len);
    ModelConfig cfg = nlohmann::json::parse(cfg_str).get<ModelConfig>();

    Checkpoint ck(cfg);
    ck.seed = r.u64();
    ck.epoch = r.u32();
    ck.opt.step_count = r.u64();

    std::map<std::string, Tensor*> want;
    ck.params.for_each([&](const std::string& n, Tensor& t) { want[n] = &t; });
    ck.opt.m.for_each([&](const std::string& n, Tensor& t) { want["adam.m." + n] = &t; });
    ck.opt.v.for_each([&](const std::string& n, Tensor& t) { want["adam.v." + n] = &t; });

    const std::uint32_t n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape;
        for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32());
        auto it = want.find(name);
        if (it == want.end())
            throw std::runtime_error("checkpoint: unexpected tensor " + name);
        if (it->second->shape != shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file has " +
                                     shape_str(shape) + ", config implies " +
                                     shape_str(it->second->shape));
        const std::size_t bytes = it->second->size() * sizeof(float);
        r.need(bytes);
        std::memcpy(it->second->ptr(), r.p, bytes);
        r.p += bytes;
        want.erase(it);
    }
    if (!want.empty())
        throw std::runtime_error("checkpoint: missing tensor " + want.begin()->first);
    if (!ck.params.all_finite()) throw std::runtime_error("checkpoint: non-finite parameters");
    return ck;
}

}  // namespace capslab

#include "capslab/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "capslab/image_io.hpp"

namespace fs = std::filesystem;

namespace capslab {

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("idx: truncated file while reading " + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

void Dataset::validate() const {
    if (images.rank() != 4) throw std::runtime_error("dataset: images must be [N,C,H,W]");
    if (images.shape[0] != labels.size())
        throw std::runtime_error("dataset: image/label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= num_classes) throw std::runtime_error("dataset: label out of range");
}

Tensor Dataset::gather(const std::vector<std::size_t>& idx) const {
    const std::size_t px = pixels();
    Tensor out({idx.size(), images.shape[1], images.shape[2], images.shape[3]});
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::copy(images.ptr() + idx[k] * px, images.ptr() + (idx[k] + 1) * px,
                  out.ptr() + k * px);
    return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx, const std::string& tag) const {
    Dataset out;
    out.images = gather(idx);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(labels[i]);
    out.num_classes = num_classes;
    out.split_tag = tag;
    return out;
}

std::vector<std::size_t> Dataset::indices_of_class(int c) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == c) out.push_back(i);
    return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw std::runtime_error("idx: cannot open " + images_path);
    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw std::runtime_error("idx: cannot open " + labels_path);

    const std::uint32_t magic_i = read_be32(fi, "image magic");
    if (magic_i != 0x00000803u) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "idx: bad image magic 0x%08x", magic_i);
        throw std::runtime_error(buf);
    }
    const std::uint32_t n = read_be32(fi, "image count");
    const std::uint32_t h = read_be32(fi, "rows");
    const std::uint32_t w = read_be32(fi, "cols");

    const std::uint32_t magic_l = read_be32(fl, "label magic");
    if (magic_l != 0x00000801u) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "idx: bad label magic 0x%08x", magic_l);
        throw std::runtime_error(buf);
    }
    const std::uint32_t nl = read_be32(fl, "label count");
    if (n != nl)
        throw std::runtime_error("idx: image count " + std::to_string(n) +
                                 " != label count " + std::to_string(nl));

    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * h * w);
    fi.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(fi.gcount()) != raw.size())
        throw std::runtime_error("idx: image file truncated");
    std::vector<unsigned char> lab(n);
    fl.read(reinterpret_cast<char*>(lab.data()), n);
    if (static_cast<std::size_t>(fl.gcount()) != lab.size())
        throw std::runtime_error("idx: label file truncated");

    Dataset ds;
    ds.images = Tensor({n, 1, h, w});
    for (std::size_t i = 0; i < raw.size(); ++i) ds.images[i] = raw[i] / 255.0f;
    ds.labels.assign(lab.begin(), lab.end());
    ds.num_classes = 1 + *std::max_element(ds.labels.begin(), ds.labels.end());
    ds.validate();
    return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    if (ds.channels() != 1) throw std::runtime_error("idx: only single-channel export supported");
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw std::runtime_error("idx: cannot write " + images_path);
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw std::runtime_error("idx: cannot write " + labels_path);

    write_be32(fi, 0x00000803u);
    write_be32(fi, static_cast<std::uint32_t>(ds.size()));
    write_be32(fi, static_cast<std::uint32_t>(ds.height()));
    write_be32(fi, static_cast<std::uint32_t>(ds.width()));
    std::vector<unsigned char> raw(ds.images.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(ds.images[i] * 255.0f));
    fi.write(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));

    write_be32(fl, 0x00000801u);
    write_be32(fl, static_cast<std::uint32_t>(ds.size()));
    for (int l : ds.labels) {
        const unsigned char b = static_cast<unsigned char>(l);
        fl.write(reinterpret_cast<const char*>(&b), 1);
    }
}

std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t valid_count, std::uint64_t seed) {
    if (valid_count >= ds.size() && valid_count != 0)
        throw std::invalid_argument("split: valid_count must be < dataset size");
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> valid_idx(idx.begin(), idx.begin() + static_cast<long>(valid_count));
    std::vector<std::size_t> train_idx(idx.begin() + static_cast<long>(valid_count), idx.end());
    // Keep original ordering within each part.
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(valid_idx.begin(), valid_idx.end());
    return {ds.subset(train_idx, "train"), ds.subset(valid_idx, "valid")};
}

Dataset load_image_dir(const std::string& root, std::size_t target_h, std::size_t target_w) {
    if (!fs::is_directory(root)) throw std::runtime_error("image dir: not a directory: " + root);
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw std::runtime_error("image dir: no class subdirectories in " + root);

    std::vector<std::vector<float>> imgs;
    std::vector<int> labels;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[c])) {
            const std::string ext = e.path().extension().string();
            if (ext == ".pgm" || ext == ".png") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        std::size_t loaded = 0;
        for (const auto& f : files) {
            GrayImage img;
            try {
                img = (f.extension() == ".pgm") ? read_pgm(f.string()) : read_png_gray(f.string());
            } catch (const std::exception& ex) {
                std::fprintf(stderr, "warning: skipping unreadable image %s: %s\n",
                             f.string().c_str(), ex.what());
                continue;
            }
            GrayImage r = resize_nearest(img, target_h, target_w);
            std::vector<float> px(r.pixels.size());
            for (std::size_t i = 0; i < px.size(); ++i) px[i] = r.pixels[i] / 255.0f;
            imgs.push_back(std::move(px));
            labels.push_back(static_cast<int>(c));
            ++loaded;
        }
        if (loaded == 0)
            throw std::runtime_error("image dir: class " + class_dirs[c].filename().string() +
                                     " has no readable images");
    }

    Dataset ds;
    ds.images = Tensor({imgs.size(), 1, target_h, target_w});
    for (std::size_t i = 0; i < imgs.size(); ++i)
        std::copy(imgs[i].begin(), imgs[i].end(), ds.images.ptr() + i * target_h * target_w);
    ds.labels = std::move(labels);
    ds.num_classes = static_cast<int>(class_dirs.size());
    ds.split_tag = "external";
    ds.validate();
    return ds;
}

std::vector<std::vector<std::size_t>> BatchIterator::next_epoch() {
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_) std::shuffle(order.begin(), order.end(), rng_);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n_; i += batch_) {
        const std::size_t e = std::min(n_, i + batch_);
        batches.emplace_back(order.begin() + static_cast<long>(i),
                             order.begin() + static_cast<long>(e));
    }
    ++epoch_;
    return batches;
}

}  // namespace capslab

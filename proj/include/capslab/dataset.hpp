#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "capslab/tensor.hpp"

namespace capslab {

// Labeled image set; pixels normalized to [0,1] (raw bytes / 255).
struct Dataset {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
    int num_classes = 0;
    std::string split_tag;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.shape[1]; }
    std::size_t height() const { return images.shape[2]; }
    std::size_t width() const { return images.shape[3]; }
    std::size_t pixels() const { return images.shape[1] * images.shape[2] * images.shape[3]; }

    Tensor image(std::size_t i) const {
        const std::size_t px = pixels();
        return Tensor({images.shape[1], images.shape[2], images.shape[3]},
                      std::vector<float>(images.ptr() + i * px, images.ptr() + (i + 1) * px));
    }

    // Image rows gathered into one [|idx|,C,H,W] batch.
    Tensor gather(const std::vector<std::size_t>& idx) const;
    Dataset subset(const std::vector<std::size_t>& idx, const std::string& tag) const;
    std::vector<std::size_t> indices_of_class(int c) const;
    void validate() const;
};

// IDX (big-endian) container, magics 0x803 for images and 0x801 for labels.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Seed-deterministic disjoint partition into (train, valid).
std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t valid_count, std::uint64_t seed);

// Generic loader: one subdirectory per class holding PGM/PNG files, resized
// (nearest neighbor) to target_h x target_w.
Dataset load_image_dir(const std::string& root, std::size_t target_h, std::size_t target_w);

// Deterministic shuffled mini-batches. With a fixed seed the batch sequence
// is identical across runs; each epoch continues the same RNG stream.
class BatchIterator {
  public:
    BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed, bool shuffle = true)
        : n_(n), batch_(batch_size), shuffle_(shuffle), rng_(seed) {}

    // Shuffles (when enabled) and returns the index order for the next epoch.
    std::vector<std::vector<std::size_t>> next_epoch();
    std::size_t epoch() const { return epoch_; }

  private:
    std::size_t n_, batch_;
    bool shuffle_;
    std::mt19937_64 rng_;
    std::size_t epoch_ = 0;
};

}  // namespace capslab

#pragma once

#include <string>
#include <vector>

#include "fpb/rng.hpp"
#include "fpb/tensor.hpp"

namespace fpb::data {

struct Dataset {
  Tensor images;             // [N,1,H,W] for image data, [N,D] for vector data
  std::vector<int> labels;   // size N
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  Tensor sample(std::size_t i) const;  // [1, ...] single-sample batch
};

// IDX-format reader (big-endian headers). Image magic 0x00000803, label
// magic 0x00000801; pixels are unsigned bytes scaled to [0,1]. `limit` > 0
// truncates to the first `limit` records; image and label counts must agree
// after truncation.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       std::size_t limit = 0);

// Writes a dataset back out as an IDX pair (u8 pixels). Used by fixture
// generation and round-trip tests.
void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

// Gaussian class blobs with means placed on the coordinate axes (alternating
// sign, increasing radius as classes wrap), stddev `spread`. Deterministic in
// the rng stream.
Dataset gen_synthetic_blobs(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                            double spread, Rng rng);

// Disjoint contiguous shards after a seeded shuffle (IID split). Returns
// per-client index lists; every index appears in exactly one shard.
std::vector<std::vector<std::size_t>> iid_shards(std::size_t n, std::size_t clients, Rng rng);

// Stacks the given rows of `images` into one batch tensor.
Tensor gather_batch(const Tensor& images, const std::vector<std::size_t>& idx);

}  // namespace fpb::data

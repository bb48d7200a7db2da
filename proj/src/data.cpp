#include "fpb/data.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace fpb::data {

namespace {

std::uint32_t read_be32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error(std::string("idx: truncated file while reading ") + what);
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

Tensor Dataset::sample(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("dataset: sample index out of range");
  Shape s = images.shape();
  std::size_t per = images.size() / s[0];
  Shape out = s;
  out[0] = 1;
  Tensor t(out);
  std::copy(images.data() + i * per, images.data() + (i + 1) * per, t.data());
  return t;
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       std::size_t limit) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("idx: cannot open image file " + images_path);
  const std::uint32_t magic_i = read_be32(fi, "image magic");
  if (magic_i != kImageMagic) {
    throw std::runtime_error("idx: wrong image magic in " + images_path + " (got " +
                             std::to_string(magic_i) + ")");
  }
  const std::uint32_t n_img = read_be32(fi, "image count");
  const std::uint32_t h = read_be32(fi, "image rows");
  const std::uint32_t w = read_be32(fi, "image cols");

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("idx: cannot open label file " + labels_path);
  const std::uint32_t magic_l = read_be32(fl, "label magic");
  if (magic_l != kLabelMagic) {
    throw std::runtime_error("idx: wrong label magic in " + labels_path + " (got " +
                             std::to_string(magic_l) + ")");
  }
  const std::uint32_t n_lab = read_be32(fl, "label count");
  if (n_img != n_lab) {
    throw std::runtime_error("idx: image count " + std::to_string(n_img) +
                             " does not match label count " + std::to_string(n_lab));
  }

  std::size_t n = n_img;
  if (limit > 0) n = std::min<std::size_t>(n, limit);

  Dataset d;
  d.images = Tensor({n, 1, h, w});
  d.labels.resize(n);
  std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < n; ++i) {
    if (!fi.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()))) {
      throw std::runtime_error("idx: truncated pixel data in " + images_path);
    }
    double* dst = d.images.data() + i * row.size();
    for (std::size_t p = 0; p < row.size(); ++p) dst[p] = row[p] / 255.0;
    unsigned char lab;
    if (!fl.read(reinterpret_cast<char*>(&lab), 1)) {
      throw std::runtime_error("idx: truncated label data in " + labels_path);
    }
    d.labels[i] = lab;
  }
  int maxlab = 0;
  for (int l : d.labels) maxlab = std::max(maxlab, l);
  d.classes = static_cast<std::size_t>(maxlab) + 1;
  return d;
}

void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  if (d.images.ndim() != 4 || d.images.shape()[1] != 1) {
    throw std::invalid_argument("idx: save expects [N,1,H,W] images");
  }
  const std::size_t n = d.size(), h = d.images.shape()[2], w = d.images.shape()[3];
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("idx: cannot write image file " + images_path);
  write_be32(fi, kImageMagic);
  write_be32(fi, static_cast<std::uint32_t>(n));
  write_be32(fi, static_cast<std::uint32_t>(h));
  write_be32(fi, static_cast<std::uint32_t>(w));
  std::vector<unsigned char> row(h * w);
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = d.images.data() + i * row.size();
    for (std::size_t p = 0; p < row.size(); ++p) {
      const double v = std::clamp(src[p], 0.0, 1.0);
      row[p] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    fi.write(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("idx: cannot write label file " + labels_path);
  write_be32(fl, kLabelMagic);
  write_be32(fl, static_cast<std::uint32_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char lab = static_cast<unsigned char>(d.labels[i]);
    fl.write(reinterpret_cast<char*>(&lab), 1);
  }
}

Dataset gen_synthetic_blobs(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                            double spread, Rng rng) {
  if (classes == 0 || dim == 0 || n_per_class == 0) {
    throw std::invalid_argument("blobs: classes, dim, and n_per_class must be positive");
  }
  if (spread < 0) throw std::invalid_argument("blobs: spread must be non-negative");
  const std::size_t n = classes * n_per_class;
  Dataset d;
  d.classes = classes;
  d.images = Tensor({n, dim});
  d.labels.resize(n);
  std::size_t row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    // Mean on axis (c % dim); sign and radius change as classes wrap around.
    std::vector<double> mean(dim, 0.0);
    const std::size_t wrap = c / dim;
    const double sign = (wrap % 2 == 0) ? 1.0 : -1.0;
    mean[c % dim] = sign * (1.0 + 0.5 * static_cast<double>(wrap / 2));
    Rng cr = rng.child(c);
    for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
      double* dst = d.images.data() + row * dim;
      for (std::size_t j = 0; j < dim; ++j) dst[j] = mean[j] + spread * cr.normal();
      d.labels[row] = static_cast<int>(c);
    }
  }
  return d;
}

std::vector<std::vector<std::size_t>> iid_shards(std::size_t n, std::size_t clients, Rng rng) {
  if (clients == 0) throw std::invalid_argument("shards: client count must be positive");
  if (n < clients) throw std::invalid_argument("shards: fewer samples than clients");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates on our stream
    std::size_t j = rng.index(i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::vector<std::vector<std::size_t>> shards(clients);
  for (std::size_t i = 0; i < n; ++i) shards[i % clients].push_back(perm[i]);
  return shards;
}

Tensor gather_batch(const Tensor& images, const std::vector<std::size_t>& idx) {
  if (images.ndim() < 2) throw std::invalid_argument("gather_batch: images must be batched");
  const std::size_t per = images.size() / images.shape()[0];
  Shape s = images.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= images.shape()[0]) throw std::out_of_range("gather_batch: index out of range");
    std::copy(images.data() + idx[i] * per, images.data() + (idx[i] + 1) * per,
              out.data() + i * per);
  }
  return out;
}

}  // namespace fpb::data

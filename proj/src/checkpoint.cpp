#include "fpb/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fpb::io {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'B', 'C'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error(std::string("checkpoint: truncated file while reading ") + what);
  }
  return v;
}

}  // namespace

void save_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, 4);
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::map<std::string, Tensor> load_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: wrong magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  }
  const auto count = read_pod<std::uint32_t>(in, "entry count");
  std::map<std::string, Tensor> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = read_pod<std::uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      throw std::runtime_error("checkpoint: truncated name in " + path);
    }
    const auto ndim = read_pod<std::uint32_t>(in, "rank");
    Shape shape(ndim);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in, "dimension");
    const std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    if (n && !in.read(reinterpret_cast<char*>(data.data()),
                      static_cast<std::streamsize>(n * sizeof(double)))) {
      throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    }
    // Bypass finite checks: checkpoints round-trip whatever was stored.
    const bool prev = Tensor::set_checked(false);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    Tensor::set_checked(prev);
  }
  return out;
}

}  // namespace fpb::io

#pragma once

#include <map>
#include <string>

#include "fpb/tensor.hpp"

namespace fpb::io {

// Binary tensor-map container:
//   magic "FPBC" | u32 version | u32 entry count |
//   per entry: u32 name length | name bytes | u32 ndim | u64 dims... |
//              f64 data (little-endian)
// Round-trips bit-exactly: save(load(f)) writes identical bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_tensors(const std::string& path);

}  // namespace fpb::io

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "m2m/tensor.hpp"

namespace m2m {

/// One entry of the named-array container. Data is held widened to double in
/// memory; `f64` selects the on-disk element type.
struct NamedArray {
    std::string name;
    std::vector<int64_t> shape;
    bool f64 = false;  // false: float32 on disk
    std::vector<double> data;
};

/// Byte layout (little-endian throughout):
///   magic "M2MB", u32 version=1, u32 array count, then per array:
///   u16 name length, name bytes, u8 dtype (0=f32, 1=f64), u8 ndim,
///   u64 dims[ndim], raw C-order data.
void write_container(const std::filesystem::path& file, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_container(const std::filesystem::path& file);

/// Lookup by name; throws DataError when absent.
const NamedArray& find_array(const std::vector<NamedArray>& arrays, const std::string& name);

}  // namespace m2m

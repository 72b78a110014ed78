#include "m2m/container.hpp"

#include <cstring>
#include <fstream>

#include "m2m/errors.hpp"

namespace m2m {

namespace {

constexpr char kMagic[4] = {'M', '2', 'M', 'B'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& is, const std::filesystem::path& file) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("container: truncated file " + file.string());
    return v;
}

}  // namespace

void write_container(const std::filesystem::path& file, const std::vector<NamedArray>& arrays) {
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("container: cannot open for writing: " + file.string());
    os.write(kMagic, 4);
    write_pod<uint32_t>(os, kVersion);
    write_pod<uint32_t>(os, static_cast<uint32_t>(arrays.size()));
    for (const NamedArray& a : arrays) {
        if (a.name.size() > 0xffff) throw DataError("container: array name too long");
        const int64_t n = Tensor::numel_of(a.shape);
        if (static_cast<int64_t>(a.data.size()) != n)
            throw DataError("container: data size does not match shape for '" + a.name + "'");
        write_pod<uint16_t>(os, static_cast<uint16_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        write_pod<uint8_t>(os, a.f64 ? 1 : 0);
        write_pod<uint8_t>(os, static_cast<uint8_t>(a.shape.size()));
        for (int64_t d : a.shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
        if (a.f64) {
            os.write(reinterpret_cast<const char*>(a.data.data()),
                     static_cast<std::streamsize>(sizeof(double) * a.data.size()));
        } else {
            std::vector<float> f(a.data.size());
            for (size_t i = 0; i < a.data.size(); ++i) f[i] = static_cast<float>(a.data[i]);
            os.write(reinterpret_cast<const char*>(f.data()),
                     static_cast<std::streamsize>(sizeof(float) * f.size()));
        }
    }
    if (!os) throw DataError("container: write failed: " + file.string());
}

std::vector<NamedArray> read_container(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw DataError("container: cannot open: " + file.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("container: bad magic in " + file.string());
    const auto version = read_pod<uint32_t>(is, file);
    if (version != kVersion)
        throw DataError("container: unsupported version " + std::to_string(version));
    const auto count = read_pod<uint32_t>(is, file);
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        const auto name_len = read_pod<uint16_t>(is, file);
        a.name.resize(name_len);
        is.read(a.name.data(), name_len);
        const auto dtype = read_pod<uint8_t>(is, file);
        if (dtype > 1) throw DataError("container: unknown dtype in " + file.string());
        a.f64 = dtype == 1;
        const auto ndim = read_pod<uint8_t>(is, file);
        a.shape.resize(ndim);
        for (auto& d : a.shape) d = static_cast<int64_t>(read_pod<uint64_t>(is, file));
        const int64_t n = Tensor::numel_of(a.shape);
        a.data.resize(static_cast<size_t>(n));
        if (a.f64) {
            is.read(reinterpret_cast<char*>(a.data.data()),
                    static_cast<std::streamsize>(sizeof(double) * a.data.size()));
        } else {
            std::vector<float> f(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(f.data()),
                    static_cast<std::streamsize>(sizeof(float) * f.size()));
            for (size_t k = 0; k < f.size(); ++k) a.data[k] = static_cast<double>(f[k]);
        }
        if (!is) throw DataError("container: truncated array data in " + file.string());
        arrays.push_back(std::move(a));
    }
    return arrays;
}

const NamedArray& find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
    for (const NamedArray& a : arrays)
        if (a.name == name) return a;
    throw DataError("container: missing array '" + name + "'");
}

}  // namespace m2m

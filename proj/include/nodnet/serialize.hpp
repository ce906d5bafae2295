#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "nodnet/errors.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

// Little-endian primitives. x86 hosts pass straight through.

namespace detail {

template <typename T>
inline T byteswap(T v) {
    unsigned char* p = reinterpret_cast<unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    return v;
}

template <typename T>
inline void write_le(std::ostream& out, T v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
inline T read_le(std::istream& in, const char* what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError(std::string("truncated stream while reading ") + what);
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    return v;
}

template <typename S>
inline constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>, "only f32/f64 tensors are serialized");
    return std::is_same_v<S, float> ? 0 : 1;
}

}  // namespace detail

/// Writes the whole file through a temporary sibling and renames it into
/// place, so readers never observe a partial file.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open for writing: " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// ".ten" tensor format: magic "TEN1", u32 rank, rank x u32 dims,
// u8 dtype (0 = f32, 1 = f64), little-endian payload. Round-trips bit-exact.
// ---------------------------------------------------------------------------

template <typename S>
void write_ten(std::ostream& out, const Tensor<S>& t) {
    out.write("TEN1", 4);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(i)));
    detail::write_le<std::uint8_t>(out, detail::dtype_code<S>());
    for (S v : t.data()) detail::write_le<S>(out, v);
}

template <typename S>
Tensor<S> read_ten(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TEN1", 4) != 0)
        throw DataError("bad tensor magic (expected TEN1)");
    const std::uint32_t rank = detail::read_le<std::uint32_t>(in, "tensor rank");
    if (rank > 8) throw DataError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_le<std::uint32_t>(in, "tensor dim"));
    const std::uint8_t dtype = detail::read_le<std::uint8_t>(in, "tensor dtype");
    if (dtype != detail::dtype_code<S>())
        throw DataError("tensor dtype code " + std::to_string(dtype) + " does not match requested scalar");
    std::vector<S> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = detail::read_le<S>(in, "tensor payload");
    return Tensor<S>::from_data(std::move(shape), std::move(data));
}

template <typename S>
void save_tensor(const Tensor<S>& t, const std::string& path) {
    std::ostringstream ss(std::ios::binary);
    write_ten(ss, t);
    atomic_write_file(path, ss.str());
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    Tensor<S> t = read_ten<S>(in);
    // anything left over means the dims lied about the payload size
    in.peek();
    if (!in.eof()) throw DataError("trailing bytes after tensor payload in " + path);
    return t;
}

}  // namespace nodnet

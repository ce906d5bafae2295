#include "nodnet/mhd.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "nodnet/errors.hpp"
#include "nodnet/serialize.hpp"

namespace nodnet {

namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<double> parse_doubles(const std::string& s, std::size_t expected, const std::string& key) {
    std::istringstream in(s);
    std::vector<double> out;
    double v;
    while (in >> v) out.push_back(v);
    if (out.size() != expected)
        throw DataError("mhd: key " + key + " expects " + std::to_string(expected) + " values, got \"" + s + "\"");
    return out;
}

const char* type_name(MhdElementType t) { return t == MhdElementType::Int16 ? "MET_SHORT" : "MET_FLOAT"; }

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Volume read_mhd(const std::string& header_path) {
    std::ifstream in(header_path);
    if (!in) throw DataError("cannot open: " + header_path);

    std::map<std::string, std::string> kv;
    std::vector<std::string> key_order;
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("mhd: malformed header line \"" + line + "\" in " + header_path);
        const std::string key = trim(line.substr(0, eq));
        kv[key] = trim(line.substr(eq + 1));
        key_order.push_back(key);
    }

    static const char* known[] = {"ObjectType",   "NDims",          "BinaryData",      "BinaryDataByteOrderMSB",
                                  "ElementByteOrderMSB", "CompressedData", "DimSize",  "ElementType",
                                  "ElementSpacing",      "Offset",         "ElementDataFile"};
    for (const auto& key : key_order) {
        bool is_known = false;
        for (const char* k : known) is_known |= key == k;
        if (!is_known) std::cerr << "mhd: ignoring key " << key << " in " << header_path << "\n";
    }

    const auto require = [&](const char* key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError(std::string("mhd: missing key ") + key + " in " + header_path);
        return it->second;
    };

    const int ndims = std::stoi(require("NDims"));
    if (ndims != 2 && ndims != 3) throw DataError("mhd: unsupported NDims " + std::to_string(ndims));

    VolumeMeta meta;
    const auto dims = parse_doubles(require("DimSize"), static_cast<std::size_t>(ndims), "DimSize");
    for (int i = 0; i < ndims; ++i) {
        meta.dims[static_cast<std::size_t>(i)] = static_cast<int>(dims[static_cast<std::size_t>(i)]);
        if (meta.dims[static_cast<std::size_t>(i)] <= 0) throw DataError("mhd: non-positive DimSize");
    }
    if (ndims == 2) meta.dims[2] = 1;

    if (auto it = kv.find("ElementSpacing"); it != kv.end()) {
        const auto sp = parse_doubles(it->second, static_cast<std::size_t>(ndims), "ElementSpacing");
        for (int i = 0; i < ndims; ++i) meta.spacing[static_cast<std::size_t>(i)] = sp[static_cast<std::size_t>(i)];
    }
    if (auto it = kv.find("Offset"); it != kv.end()) {
        const auto off = parse_doubles(it->second, static_cast<std::size_t>(ndims), "Offset");
        for (int i = 0; i < ndims; ++i) meta.offset[static_cast<std::size_t>(i)] = off[static_cast<std::size_t>(i)];
    }
    for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"})
        if (auto it = kv.find(key); it != kv.end() && it->second == "True")
            throw DataError("mhd: big-endian data is not supported");
    if (auto it = kv.find("CompressedData"); it != kv.end() && it->second == "True")
        throw DataError("mhd: compressed data is not supported");

    const std::string& et = require("ElementType");
    if (et == "MET_SHORT")
        meta.element_type = MhdElementType::Int16;
    else if (et == "MET_FLOAT")
        meta.element_type = MhdElementType::Float32;
    else
        throw DataError("mhd: unknown ElementType " + et + " (supported: MET_SHORT, MET_FLOAT)");

    const std::string& data_file = require("ElementDataFile");
    if (data_file == "LOCAL" || data_file == "LIST")
        throw DataError("mhd: ElementDataFile " + data_file + " is not supported");
    const fs::path raw_path = fs::path(header_path).parent_path() / data_file;

    const std::string raw = read_file(raw_path.string());
    const std::int64_t count =
        static_cast<std::int64_t>(meta.dims[0]) * meta.dims[1] * meta.dims[2];
    const std::size_t elem_size = meta.element_type == MhdElementType::Int16 ? 2 : 4;
    if (raw.size() != static_cast<std::size_t>(count) * elem_size)
        throw DataError("mhd: raw payload of " + raw_path.string() + " has " + std::to_string(raw.size()) +
                        " bytes, expected " + std::to_string(static_cast<std::size_t>(count) * elem_size) + " (DimSize " +
                        std::to_string(meta.dims[0]) + " " + std::to_string(meta.dims[1]) + " " +
                        std::to_string(meta.dims[2]) + ")");

    Tensor<float> voxels(Shape{meta.dims[2], meta.dims[1], meta.dims[0]});
    std::istringstream rs(raw, std::ios::binary);
    if (meta.element_type == MhdElementType::Int16) {
        for (std::int64_t i = 0; i < count; ++i)
            voxels.data()[i] = static_cast<float>(detail::read_le<std::int16_t>(rs, "raw voxel"));
    } else {
        for (std::int64_t i = 0; i < count; ++i) voxels.data()[i] = detail::read_le<float>(rs, "raw voxel");
    }

    meta.series = fs::path(header_path).stem().string();
    return {meta, std::move(voxels)};
}

void write_mhd(const VolumeMeta& meta, const Tensor<float>& voxels, const std::string& header_path) {
    const std::int64_t count = static_cast<std::int64_t>(meta.dims[0]) * meta.dims[1] * meta.dims[2];
    if (voxels.numel() != count)
        throw std::invalid_argument("write_mhd: voxel tensor " + shape_string(voxels.shape()) +
                                    " does not match DimSize");

    const fs::path header(header_path);
    const fs::path raw_path = fs::path(header).replace_extension(".raw");

    std::ostringstream rs(std::ios::binary);
    if (meta.element_type == MhdElementType::Int16) {
        for (std::int64_t i = 0; i < count; ++i) {
            const float v = voxels.data()[i];
            if (v != std::floor(v) || v < -32768.0f || v > 32767.0f)
                throw DataError("write_mhd: voxel value " + std::to_string(v) + " cannot be stored as MET_SHORT");
            detail::write_le<std::int16_t>(rs, static_cast<std::int16_t>(v));
        }
    } else {
        for (std::int64_t i = 0; i < count; ++i) detail::write_le<float>(rs, voxels.data()[i]);
    }

    std::ostringstream hs;
    hs << "ObjectType = Image\n";
    hs << "NDims = 3\n";
    hs << "BinaryData = True\n";
    hs << "BinaryDataByteOrderMSB = False\n";
    hs << "CompressedData = False\n";
    hs << "DimSize = " << meta.dims[0] << " " << meta.dims[1] << " " << meta.dims[2] << "\n";
    hs << "ElementSpacing = " << fmt_double(meta.spacing[0]) << " " << fmt_double(meta.spacing[1]) << " "
       << fmt_double(meta.spacing[2]) << "\n";
    hs << "Offset = " << fmt_double(meta.offset[0]) << " " << fmt_double(meta.offset[1]) << " "
       << fmt_double(meta.offset[2]) << "\n";
    hs << "ElementType = " << type_name(meta.element_type) << "\n";
    hs << "ElementDataFile = " << raw_path.filename().string() << "\n";

    atomic_write_file(raw_path.string(), rs.str());
    atomic_write_file(header_path, hs.str());
}

Tensor<float> volume_slice(const Volume& vol, int z) {
    const int zs = vol.meta.dims[2], ys = vol.meta.dims[1], xs = vol.meta.dims[0];
    if (z < 0 || z >= zs)
        throw std::invalid_argument("volume_slice: slice " + std::to_string(z) + " outside [0, " + std::to_string(zs) +
                                    ")");
    const std::int64_t plane = static_cast<std::int64_t>(ys) * xs;
    const float* p = vol.voxels.data().data() + static_cast<std::int64_t>(z) * plane;
    return Tensor<float>::from_data({ys, xs}, {p, p + plane});
}

}  // namespace nodnet

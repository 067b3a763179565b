#pragma once

// Tensor container file layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "ADAPTKIT"
//   offset 8   u32       format version (1)
//   offset 12  u64       header length H in bytes
//   offset 20  H bytes   UTF-8 JSON header:
//                          {"meta": {...},
//                           "arrays": [{"name": str, "dtype": "float64",
//                                       "shape": [rows, cols], "offset": u64,
//                                       "nbytes": u64}, ...]}
//   offset 20+H          data section: each array as row-major IEEE-754 float64,
//                        concatenated in header order, no padding; "offset" is
//                        relative to the start of the data section.
//
// The header is written with sorted keys and no whitespace, so identical contents
// always serialize to identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptkit/errors.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'A', 'D', 'A', 'P', 'T', 'K', 'I', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorArchive {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Matrix>> arrays;

    const Matrix& get(const std::string& name) const {
        for (const auto& [n, m] : arrays)
            if (n == name) return m;
        throw CheckpointError("archive: missing array '" + name + "'");
    }

    bool contains(const std::string& name) const {
        for (const auto& [n, m] : arrays)
            if (n == name) return true;
        return false;
    }
};

inline std::string serialize_archive(const TensorArchive& ar) {
    nlohmann::json header;
    header["meta"] = ar.meta;
    header["arrays"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : ar.arrays) {
        const std::uint64_t nbytes = static_cast<std::uint64_t>(m.size()) * sizeof(double);
        header["arrays"].push_back({{"name", name}, {"dtype", "float64"}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string h = header.dump();
    std::string out;
    out.reserve(20 + h.size() + offset);
    out.append(kContainerMagic, 8);
    const std::uint32_t ver = kContainerVersion;
    const std::uint64_t hlen = h.size();
    out.append(reinterpret_cast<const char*>(&ver), sizeof ver);
    out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out += h;
    for (const auto& [name, m] : ar.arrays) out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    return out;
}

inline TensorArchive deserialize_archive(const std::string& bytes) {
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0) throw CheckpointError("archive: bad magic");
    std::uint32_t ver = 0;
    std::uint64_t hlen = 0;
    std::memcpy(&ver, bytes.data() + 8, sizeof ver);
    std::memcpy(&hlen, bytes.data() + 12, sizeof hlen);
    if (ver != kContainerVersion) throw CheckpointError("archive: unsupported format version " + std::to_string(ver));
    if (20 + hlen > bytes.size()) throw CheckpointError("archive: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("archive: corrupt header: ") + e.what());
    }
    TensorArchive ar;
    ar.meta = header.value("meta", nlohmann::json::object());
    const std::size_t data_start = 20 + hlen;
    for (const auto& a : header.at("arrays")) {
        if (a.at("dtype") != "float64") throw CheckpointError("archive: unsupported dtype");
        const auto rows = a.at("shape").at(0).get<Eigen::Index>();
        const auto cols = a.at("shape").at(1).get<Eigen::Index>();
        const auto off = a.at("offset").get<std::uint64_t>();
        const auto nbytes = a.at("nbytes").get<std::uint64_t>();
        if (nbytes != static_cast<std::uint64_t>(rows * cols) * sizeof(double)) throw CheckpointError("archive: inconsistent array size");
        if (data_start + off + nbytes > bytes.size()) throw CheckpointError("archive: truncated data section");
        Matrix m(rows, cols);
        std::memcpy(m.data(), bytes.data() + data_start + off, nbytes);
        ar.arrays.emplace_back(a.at("name").get<std::string>(), std::move(m));
    }
    return ar;
}

inline void write_archive(const std::filesystem::path& path, const TensorArchive& ar) {
    const std::string bytes = serialize_archive(ar);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open '" + path.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for '" + path.string() + "'");
}

inline TensorArchive read_archive(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_archive(bytes);
}

}  // namespace adaptkit

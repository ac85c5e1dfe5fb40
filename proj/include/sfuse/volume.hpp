#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sfuse/common.hpp"

namespace sfuse {

enum class Modality : std::uint8_t { ct_like = 0, mr_like = 1 };

inline const char* modality_name(Modality m) {
    return m == Modality::ct_like ? "ct" : "mr";
}

// 3D scalar grid, x fastest. Labels are optional; 0 is background.
struct Volume {
    int dx = 0, dy = 0, dz = 0;
    std::vector<float> voxels;
    Modality modality = Modality::ct_like;
    std::vector<int> labels;  // empty when absent
    float sx = 1.0f, sy = 1.0f, sz = 1.0f;

    std::int64_t count() const { return static_cast<std::int64_t>(dx) * dy * dz; }
    bool has_labels() const { return !labels.empty(); }

    std::int64_t index(int x, int y, int z) const {
        return (static_cast<std::int64_t>(z) * dy + y) * dx + x;
    }

    float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
    float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::uint64_t off = 0;

    void need(std::uint64_t n, const char* what) const {
        if (off + n > buf.size())
            throw FormatError(std::string("truncated ") + what, off);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(
            static_cast<unsigned char>(buf[off]) |
            (static_cast<unsigned char>(buf[off + 1]) << 8));
        off += 2;
        return v;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[off++]);
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t lo = u32(what);
        std::uint64_t hi = u32(what);
        return lo | (hi << 32);
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'", 0);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing", 0);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + path + "'", 0);
}

}  // namespace detail

// SFV1, little-endian:
//   magic "SFV1" | u32 dx,dy,dz | u8 modality | u8 has_labels | f32 sx,sy,sz
//   | dx*dy*dz f32 voxels (x fastest, then y, then z)
//   | if has_labels: dx*dy*dz u16 labels, same order
inline std::string encode_volume(const Volume& v) {
    std::string out;
    out.reserve(22 + v.count() * (v.has_labels() ? 6 : 4));
    out += "SFV1";
    detail::put_u32(out, static_cast<std::uint32_t>(v.dx));
    detail::put_u32(out, static_cast<std::uint32_t>(v.dy));
    detail::put_u32(out, static_cast<std::uint32_t>(v.dz));
    out.push_back(static_cast<char>(v.modality));
    out.push_back(static_cast<char>(v.has_labels() ? 1 : 0));
    detail::put_f32(out, v.sx);
    detail::put_f32(out, v.sy);
    detail::put_f32(out, v.sz);
    for (float x : v.voxels) detail::put_f32(out, x);
    if (v.has_labels()) {
        for (std::int64_t i = 0; i < v.count(); ++i) {
            const int l = v.labels[i];
            if (l < 0 || l > 65535)
                throw FormatError("label value " + std::to_string(l) + " outside u16 range",
                                  out.size());
            detail::put_u16(out, static_cast<std::uint16_t>(l));
        }
    }
    return out;
}

inline void write_volume(const Volume& v, const std::string& path) {
    if (static_cast<std::int64_t>(v.voxels.size()) != v.count())
        throw ContractError("volume voxel count does not match dims");
    if (v.has_labels() && static_cast<std::int64_t>(v.labels.size()) != v.count())
        throw ContractError("volume label count does not match dims");
    detail::write_file_bytes(path, encode_volume(v));
}

inline Volume decode_volume(const std::string& bytes) {
    detail::ByteReader r{bytes};
    r.need(4, "magic");
    if (bytes.compare(0, 4, "SFV1") != 0) throw FormatError("bad magic, expected SFV1", 0);
    r.off = 4;
    Volume v;
    v.dx = static_cast<int>(r.u32("dims"));
    v.dy = static_cast<int>(r.u32("dims"));
    v.dz = static_cast<int>(r.u32("dims"));
    if (v.dx < 1 || v.dy < 1 || v.dz < 1) throw FormatError("non-positive dimension", 4);
    const std::uint8_t mod = r.u8("modality");
    if (mod > 1) throw FormatError("unknown modality tag", r.off - 1);
    v.modality = static_cast<Modality>(mod);
    const std::uint8_t has_labels = r.u8("label flag");
    if (has_labels > 1) throw FormatError("bad label flag", r.off - 1);
    v.sx = r.f32("spacing");
    v.sy = r.f32("spacing");
    v.sz = r.f32("spacing");
    const std::int64_t n = v.count();
    r.need(static_cast<std::uint64_t>(n) * 4, "voxel payload");
    v.voxels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v.voxels[static_cast<std::size_t>(i)] = r.f32("voxel");
    if (has_labels) {
        r.need(static_cast<std::uint64_t>(n) * 2, "label payload");
        v.labels.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) v.labels[static_cast<std::size_t>(i)] = r.u16("label");
    }
    if (r.off != bytes.size()) throw FormatError("trailing bytes after payload", r.off);
    return v;
}

inline Volume read_volume(const std::string& path) {
    return decode_volume(detail::read_file_bytes(path));
}

}  // namespace sfuse

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/optim.hpp"
#include "sfuse/params.hpp"
#include "sfuse/volume.hpp"  // byte reader/writer helpers

namespace sfuse {

// SFCK, little-endian:
//   magic "SFCK" | u32 version | u64 config fingerprint | u32 tensor count
//   | per tensor: u16 name length, name bytes, u8 rank, u32 extents, f32 data
//   | u8 moments flag | if 1: u64 completed steps, then for each tensor in
//     file order its Adam m data then v data (f32, same extents)
struct CheckpointData {
    std::uint32_t version = 1;
    std::uint64_t fingerprint = 0;
    ParamStore<float> params;
    bool has_moments = false;
    AdamState<float> moments;
};

namespace detail {

inline void put_tensor_record(std::string& out, const std::string& name, const Tensor<float>& t) {
    if (name.size() > 65535) throw FormatError("parameter name too long", out.size());
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    if (t.rank() > 255) throw FormatError("tensor rank too large", out.size());
    out.push_back(static_cast<char>(t.rank()));
    for (int e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
    for (float x : t.data) put_f32(out, x);
}

}  // namespace detail

inline std::string encode_checkpoint(const ParamStore<float>& params, std::uint64_t fingerprint,
                                     const AdamState<float>* moments = nullptr) {
    std::string out;
    out += "SFCK";
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(fingerprint & 0xffffffffull));
    detail::put_u32(out, static_cast<std::uint32_t>(fingerprint >> 32));
    detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) detail::put_tensor_record(out, name, t);
    out.push_back(moments ? 1 : 0);
    if (moments) {
        detail::put_u32(out, static_cast<std::uint32_t>(moments->step & 0xffffffffull));
        detail::put_u32(out, static_cast<std::uint32_t>(static_cast<std::uint64_t>(moments->step) >> 32));
        for (const auto& [name, t] : params) {
            for (float x : moments->m.at(name).data) detail::put_f32(out, x);
            for (float x : moments->v.at(name).data) detail::put_f32(out, x);
        }
    }
    return out;
}

inline void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                            std::uint64_t fingerprint, const AdamState<float>* moments = nullptr) {
    detail::write_file_bytes(path, encode_checkpoint(params, fingerprint, moments));
}

inline CheckpointData decode_checkpoint(const std::string& bytes) {
    detail::ByteReader r{bytes};
    r.need(4, "magic");
    if (bytes.compare(0, 4, "SFCK") != 0) throw FormatError("bad magic, expected SFCK", 0);
    r.off = 4;
    CheckpointData ck;
    ck.version = r.u32("version");
    if (ck.version != 1)
        throw FormatError("unsupported checkpoint version " + std::to_string(ck.version), 4);
    ck.fingerprint = r.u64("fingerprint");
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        r.need(name_len, "name");
        std::string name = bytes.substr(r.off, name_len);
        r.off += name_len;
        const int rank = r.u8("rank");
        std::vector<int> shape(static_cast<std::size_t>(rank));
        for (int d = 0; d < rank; ++d) shape[static_cast<std::size_t>(d)] = static_cast<int>(r.u32("extent"));
        Tensor<float> t = Tensor<float>::zeros(shape);
        r.need(static_cast<std::uint64_t>(t.numel()) * 4, "tensor data");
        for (auto& x : t.data) x = r.f32("tensor data");
        if (!ck.params.emplace(std::move(name), std::move(t)).second)
            throw FormatError("duplicate tensor name in checkpoint", r.off);
    }
    ck.has_moments = r.u8("moments flag") != 0;
    if (ck.has_moments) {
        ck.moments.step = static_cast<std::int64_t>(r.u64("moment step"));
        for (const auto& [name, t] : ck.params) {
            Tensor<float> m = Tensor<float>::zeros(t.shape);
            for (auto& x : m.data) x = r.f32("adam m");
            Tensor<float> v = Tensor<float>::zeros(t.shape);
            for (auto& x : v.data) x = r.f32("adam v");
            ck.moments.m.emplace(name, std::move(m));
            ck.moments.v.emplace(name, std::move(v));
        }
    }
    if (r.off != bytes.size()) throw FormatError("trailing bytes after checkpoint payload", r.off);
    return ck;
}

inline CheckpointData load_checkpoint(const std::string& path) {
    return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace sfuse

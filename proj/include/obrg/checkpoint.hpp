#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "obrg/common.hpp"
#include "obrg/nn.hpp"
#include "obrg/optimizer.hpp"

namespace obrg {

// Binary checkpoint: magic "OBRG", version u32, little-endian throughout.
// Header scalars, then a table of {name length, name, dtype tag, rank, dims,
// byte length}, then the raw payloads in table order, then a CRC32 of the
// payload region. Optimizer moments ride along as "opt.m.<name>" /
// "opt.v.<name>" entries.
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr uint8_t kDtypeF32 = 0;

struct CheckpointMeta {
    uint64_t config_fingerprint = 0;
    uint32_t stage = 0;
    uint64_t step = 0;
    uint64_t gen_step = 0;
    uint64_t rng_key = 0;
    uint64_t rng_counter = 0;
    uint64_t opt_step = 0;
};

namespace detail {

struct TableEntry {
    std::string name;
    uint8_t dtype = kDtypeF32;
    std::vector<int64_t> dims;
    uint64_t byte_len = 0;
};

template <typename T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& off, const std::string& path) {
    if (off + sizeof(T) > buf.size()) fail(ErrKind::corruption, "checkpoint: truncated file '" + path + "'");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamRegistry& reg, const Adam& opt,
                            const CheckpointMeta& meta) {
    std::vector<detail::TableEntry> table;
    std::string payload;
    auto add_blob = [&](const std::string& name, const Shape& shape, const std::vector<float>& values) {
        detail::TableEntry e;
        e.name = name;
        for (int d : shape) e.dims.push_back(d);
        e.byte_len = values.size() * sizeof(float);
        table.push_back(std::move(e));
        const size_t off = payload.size();
        payload.resize(off + values.size() * sizeof(float));
        std::memcpy(payload.data() + off, values.data(), values.size() * sizeof(float));
    };
    for (const auto& [name, p] : reg.items()) add_blob(name, p->shape(), p->values());
    for (const auto& [name, p] : reg.items()) {
        auto it = opt.state().find(name);
        if (it == opt.state().end()) continue;
        add_blob("opt.m." + name, p->shape(), it->second.m);
        add_blob("opt.v." + name, p->shape(), it->second.v);
    }

    std::string buf;
    buf.append("OBRG", 4);
    detail::put(buf, kCheckpointVersion);
    detail::put(buf, meta.config_fingerprint);
    detail::put(buf, meta.stage);
    detail::put(buf, meta.step);
    detail::put(buf, meta.gen_step);
    detail::put(buf, meta.rng_key);
    detail::put(buf, meta.rng_counter);
    detail::put(buf, meta.opt_step);
    detail::put(buf, static_cast<uint32_t>(table.size()));
    for (const auto& e : table) {
        detail::put(buf, static_cast<uint32_t>(e.name.size()));
        buf.append(e.name);
        detail::put(buf, e.dtype);
        detail::put(buf, static_cast<uint32_t>(e.dims.size()));
        for (int64_t d : e.dims) detail::put(buf, d);
        detail::put(buf, e.byte_len);
    }
    buf.append(payload);
    detail::put(buf, crc32(payload.data(), payload.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrKind::io, "checkpoint: cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) fail(ErrKind::io, "checkpoint: write failed for '" + path + "'");
}

// Loads into an existing registry: every registry parameter must be present
// with matching shape. Returns header metadata; optimizer moments are
// restored for entries that exist in the file.
inline CheckpointMeta load_checkpoint(const std::string& path, const ParamRegistry& reg, Adam& opt,
                                      uint64_t expected_fingerprint) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrKind::io, "checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    size_t off = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "OBRG") != 0) {
        fail(ErrKind::corruption, "checkpoint: bad magic in '" + path + "'");
    }
    off = 4;
    const auto version = detail::take<uint32_t>(buf, off, path);
    if (version != kCheckpointVersion) {
        fail(ErrKind::compat, "checkpoint: version " + std::to_string(version) + " unsupported");
    }
    CheckpointMeta meta;
    meta.config_fingerprint = detail::take<uint64_t>(buf, off, path);
    meta.stage = detail::take<uint32_t>(buf, off, path);
    meta.step = detail::take<uint64_t>(buf, off, path);
    meta.gen_step = detail::take<uint64_t>(buf, off, path);
    meta.rng_key = detail::take<uint64_t>(buf, off, path);
    meta.rng_counter = detail::take<uint64_t>(buf, off, path);
    meta.opt_step = detail::take<uint64_t>(buf, off, path);
    if (meta.config_fingerprint != expected_fingerprint) {
        fail(ErrKind::compat, "checkpoint: config fingerprint mismatch (file " +
                                  std::to_string(meta.config_fingerprint) + ", expected " +
                                  std::to_string(expected_fingerprint) + ")");
    }

    const auto n_entries = detail::take<uint32_t>(buf, off, path);
    std::vector<detail::TableEntry> table(n_entries);
    for (auto& e : table) {
        const auto name_len = detail::take<uint32_t>(buf, off, path);
        if (off + name_len > buf.size()) fail(ErrKind::corruption, "checkpoint: truncated table in '" + path + "'");
        e.name.assign(buf, off, name_len);
        off += name_len;
        e.dtype = detail::take<uint8_t>(buf, off, path);
        const auto rank = detail::take<uint32_t>(buf, off, path);
        for (uint32_t r = 0; r < rank; ++r) e.dims.push_back(detail::take<int64_t>(buf, off, path));
        e.byte_len = detail::take<uint64_t>(buf, off, path);
        if (e.dtype != kDtypeF32) fail(ErrKind::compat, "checkpoint: unknown dtype tag");
    }

    uint64_t payload_len = 0;
    for (const auto& e : table) payload_len += e.byte_len;
    if (off + payload_len + 4 > buf.size()) fail(ErrKind::corruption, "checkpoint: truncated payload in '" + path + "'");
    const char* payload = buf.data() + off;
    size_t crc_off = off + payload_len;
    const uint32_t stored_crc = detail::take<uint32_t>(buf, crc_off, path);
    if (crc32(payload, payload_len) != stored_crc) {
        fail(ErrKind::corruption, "checkpoint: payload CRC mismatch in '" + path + "'");
    }

    size_t cursor = off;
    auto read_values = [&](const detail::TableEntry& e) {
        std::vector<float> v(e.byte_len / sizeof(float));
        std::memcpy(v.data(), buf.data() + cursor, e.byte_len);
        cursor += e.byte_len;
        return v;
    };

    size_t params_restored = 0;
    for (const auto& e : table) {
        if (e.name.rfind("opt.m.", 0) == 0 || e.name.rfind("opt.v.", 0) == 0) {
            const bool is_m = e.name.rfind("opt.m.", 0) == 0;
            const std::string pname = e.name.substr(6);
            Tensor* p = reg.find(pname);
            if (p == nullptr) fail(ErrKind::compat, "checkpoint: moments for unknown parameter '" + pname + "'");
            auto& mom = opt.state()[pname];
            auto vals = read_values(e);
            if (vals.size() != p->numel()) fail(ErrKind::compat, "checkpoint: moment size mismatch for '" + pname + "'");
            if (is_m) {
                mom.m = std::move(vals);
                if (mom.v.size() != p->numel()) mom.v.assign(p->numel(), 0.0f);
            } else {
                mom.v = std::move(vals);
            }
            continue;
        }
        Tensor* p = reg.find(e.name);
        if (p == nullptr) fail(ErrKind::compat, "checkpoint: unknown parameter '" + e.name + "'");
        Shape shape;
        for (int64_t d : e.dims) shape.push_back(static_cast<int>(d));
        if (shape != p->shape()) fail(ErrKind::compat, "checkpoint: shape mismatch for '" + e.name + "'");
        auto vals = read_values(e);
        *p = Tensor(shape, std::move(vals), p->requires_grad());
        ++params_restored;
    }
    if (params_restored != reg.items().size()) {
        fail(ErrKind::compat, "checkpoint: file does not cover every registered parameter");
    }
    opt.set_step_count(meta.opt_step);
    return meta;
}

}  // namespace obrg

#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace obrg {

// Error taxonomy shared by all modules. Callers match on kind, humans read msg.
enum class ErrKind {
    shape,
    mask,
    numeric,
    parse,
    edit,
    sequence,
    loss,
    config,
    schedule,
    io,
    corruption,
    compat,
};

class Error : public std::runtime_error {
public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const noexcept { return kind_; }

private:
    ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline const char* err_kind_name(ErrKind k) {
    switch (k) {
        case ErrKind::shape: return "shape";
        case ErrKind::mask: return "mask";
        case ErrKind::numeric: return "numeric";
        case ErrKind::parse: return "parse";
        case ErrKind::edit: return "edit";
        case ErrKind::sequence: return "sequence";
        case ErrKind::loss: return "loss";
        case ErrKind::config: return "config";
        case ErrKind::schedule: return "schedule";
        case ErrKind::io: return "io";
        case ErrKind::corruption: return "corruption";
        case ErrKind::compat: return "compat";
    }
    return "unknown";
}

// FNV-1a, used for config fingerprints and rng stream splitting.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// CRC-32 (polynomial 0xEDB88320), for checkpoint payloads and corpus checksums.
inline uint32_t crc32(const void* data, size_t n, uint32_t crc = 0) {
    static const auto table = [] {
        std::vector<uint32_t> t(256);
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            }
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (size_t i = 0; i < n; ++i) {
        crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    }
    return ~crc;
}

// Runs fn(i) for i in [0, n). Each task must own its outputs; results are
// byte-identical to the serial order regardless of thread count.
inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const size_t t = std::min<size_t>(static_cast<size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (size_t w = 0; w < t; ++w) {
        pool.emplace_back([&, w] {
            for (size_t i = w; i < n; i += t) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

inline int env_thread_cap() {
    const char* v = std::getenv("OBRG_THREADS");
    if (v == nullptr || *v == '\0') return 1;
    const long n = std::strtol(v, nullptr, 10);
    return n > 0 ? static_cast<int>(n) : 1;
}

}  // namespace obrg

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace ctxaudit {

// FNV-1a, 64-bit. Used for provenance hashes and trial ids; not cryptographic.
inline constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                       std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string to_hex16(std::uint64_t v);
std::uint64_t from_hex16(std::string_view hex);

// Hash of a file's raw bytes, rendered as 16 hex digits. Throws ConfigError
// if the file cannot be read.
std::string hash_file(const std::filesystem::path& path);

} // namespace ctxaudit

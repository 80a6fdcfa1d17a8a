#include "ctxaudit/hash.hpp"

#include <fstream>
#include <sstream>

#include "ctxaudit/errors.hpp"

namespace ctxaudit {

std::string to_hex16(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

std::uint64_t from_hex16(std::string_view hex) {
    std::uint64_t v = 0;
    for (char c : hex) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint64_t>(c - 'A' + 10);
        else throw ConfigError("invalid hex digit in id: " + std::string(hex));
    }
    return v;
}

std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read file for hashing: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return to_hex16(fnv1a64(buf.str()));
}

} // namespace ctxaudit

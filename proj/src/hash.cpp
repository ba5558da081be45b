#include "fvlm/hash.hpp"

#include <cstdio>
#include <fstream>

#include "fvlm/errors.hpp"

namespace fvlm {

std::uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptionError("cannot hash missing file " + path);
    char buf[1 << 16];
    std::uint64_t h = kFnvOffset;
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace fvlm

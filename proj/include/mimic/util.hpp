#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mimic {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds from a
/// base seed plus (tag, index) so that every stage of a run is a pure
/// function of the user-supplied seed.
constexpr std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index = 0) {
    return mix_seed(mix_seed(mix_seed(base) ^ tag) ^ index);
}

/// Raised when a persisted file is malformed. The message names the section.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace io {

// All on-disk binary formats are little-endian; the targets we build for are too.
static_assert(std::endian::native == std::endian::little);

template <typename T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, std::string_view section) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw FormatError("truncated " + std::string(section));
    }
    return value;
}

inline void get_bytes(std::istream& in, char* dst, std::size_t n, std::string_view section) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw FormatError("truncated " + std::string(section));
    }
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace io
}  // namespace mimic

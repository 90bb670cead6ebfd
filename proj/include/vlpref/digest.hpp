#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>

namespace vlpref {

// Lowercase hex SHA-256 of the given bytes (64 characters).
std::string sha256_hex(std::string_view bytes);

// SHA-256 of a file's exact bytes. Throws IoError if unreadable.
std::string file_sha256_hex(const std::filesystem::path& path);

// Joins fields with a 0x00 separator before hashing, so ("ab","c") and
// ("a","bc") never collide.
std::string field_digest(std::initializer_list<std::string_view> fields);

// First 16 hex characters of field_digest; used for record identifiers that
// only need to be unique within a run.
std::string short_id(std::initializer_list<std::string_view> fields);

// First 8 bytes of field_digest as a big-endian integer. Platform independent.
std::uint64_t digest_u64(std::initializer_list<std::string_view> fields);

// SplitMix64. Used instead of <random> distributions because their output is
// implementation defined, and runs must be byte-identical across platforms.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next();

    // Uniform integer in [0, bound). bound must be positive.
    std::uint64_t below(std::uint64_t bound);

    // Uniform double in [0, 1) with 53 random bits.
    double unit();

private:
    std::uint64_t state_;
};

std::string base64_encode(std::string_view bytes);

}  // namespace vlpref

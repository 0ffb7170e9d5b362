#pragma once

// Versioned binary container shared by every on-disk artifact.
//
//   magic line     "<FAMILY><VERSION>\n"      e.g. "CFXDS1\n"
//   header         u32 length, JSON text, u32 crc32
//   array count    u32
//   each array     "CFXA", u16 name length, name, u8 dtype, u8 rank,
//                  u64 dims[rank], u64 byte count, raw little-endian data,
//                  u32 crc32 of everything after the tag
//   trailer        "END!"
//
// JSON is dumped with sorted keys, so writing the same content twice yields
// identical bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cfx/tensor.hpp"
#include "json.hpp"

namespace cfx {

enum class DType : std::uint8_t { f64 = 1, i32 = 2, u8 = 3 };

struct ArrayRecord {
    DType dtype = DType::f64;
    Shape shape;
    std::vector<std::uint8_t> bytes;
};

class ArchiveWriter {
public:
    // magic is family plus version, e.g. "CFXDS1".
    ArchiveWriter(std::string magic, nlohmann::json header);

    void add(const std::string& name, const Tensor& t);
    void add(const std::string& name, std::span<const std::int32_t> values);
    void add(const std::string& name, std::span<const std::uint8_t> values);

    std::vector<std::uint8_t> bytes() const;
    // Writes through a temporary file and renames it into place.
    void write(const std::filesystem::path& path) const;

private:
    std::string magic_;
    nlohmann::json header_;
    std::vector<std::pair<std::string, ArrayRecord>> arrays_;
};

class ArchiveReader {
public:
    // Throws VersionError when the family matches but the version does not,
    // IntegrityError (with byte position) on any structural damage.
    static ArchiveReader parse(std::span<const std::uint8_t> data, const std::string& magic);
    static ArchiveReader read(const std::filesystem::path& path, const std::string& magic);

    const nlohmann::json& header() const { return header_; }
    bool has(const std::string& name) const { return arrays_.count(name) != 0; }
    Tensor tensor(const std::string& name) const;
    std::vector<std::int32_t> ints(const std::string& name) const;
    std::vector<std::uint8_t> bytes(const std::string& name) const;

private:
    const ArrayRecord& get(const std::string& name, DType expected) const;

    nlohmann::json header_;
    std::map<std::string, ArrayRecord> arrays_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace cfx

#include <filesystem>

#include "cfx/archive.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cfx;

namespace {

std::vector<std::uint8_t> sample_archive() {
    ArchiveWriter w("CFXTST1", {{"name", "probe"}, {"values", {1, 2, 3}}});
    w.add("t", test::random_tensor({2, 3}, 1));
    const std::vector<std::int32_t> ints{-1, 0, 7};
    w.add("i", std::span<const std::int32_t>(ints));
    const std::vector<std::uint8_t> flags{0, 1, 1};
    w.add("b", std::span<const std::uint8_t>(flags));
    return w.bytes();
}

}  // namespace

TEST_CASE("archive roundtrip") {
    const auto bytes = sample_archive();
    const auto r = ArchiveReader::parse(bytes, "CFXTST1");
    CHECK(r.header().at("name") == "probe");
    CHECK(r.tensor("t") == test::random_tensor({2, 3}, 1));
    CHECK(r.ints("i") == std::vector<std::int32_t>{-1, 0, 7});
    CHECK(r.bytes("b") == std::vector<std::uint8_t>{0, 1, 1});
    CHECK_FALSE(r.has("missing"));
    CHECK_THROWS_AS(r.tensor("missing"), IntegrityError);
    CHECK_THROWS_AS(r.tensor("i"), IntegrityError);
    CHECK(sample_archive() == bytes);
}

TEST_CASE("archive rejects damaged input") {
    const auto bytes = sample_archive();
    SUBCASE("empty") { CHECK_THROWS_AS(ArchiveReader::parse({}, "CFXTST1"), IntegrityError); }
    SUBCASE("every truncation") {
        for (std::size_t n = 0; n < bytes.size(); ++n)
            CHECK_THROWS_AS(ArchiveReader::parse(std::span(bytes.data(), n), "CFXTST1"), IntegrityError);
    }
    SUBCASE("flipped payload byte") {
        auto bad = bytes;
        bad[bad.size() - 20] ^= 0x40;
        CHECK_THROWS_AS(ArchiveReader::parse(bad, "CFXTST1"), IntegrityError);
    }
    SUBCASE("version mismatch") { CHECK_THROWS_AS(ArchiveReader::parse(bytes, "CFXTST2"), VersionError); }
    SUBCASE("other family") { CHECK_THROWS_AS(ArchiveReader::parse(bytes, "CFXXYZ1"), IntegrityError); }
    SUBCASE("truncation reports a position") {
        try {
            ArchiveReader::parse(std::span(bytes.data(), bytes.size() - 3), "CFXTST1");
            FAIL("expected an integrity error");
        } catch (const IntegrityError& e) {
            CHECK(e.position() <= bytes.size());
        }
    }
}

TEST_CASE("archive files") {
    const auto dir = std::filesystem::temp_directory_path() / "cfx_archive_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "a.bin";
    const auto bytes = sample_archive();
    write_file_atomic(path, bytes);
    CHECK(read_file_bytes(path) == bytes);
    CHECK(ArchiveReader::read(path, "CFXTST1").header().at("name") == "probe");
    CHECK_THROWS_AS(read_file_bytes(dir / "missing.bin"), Error);
    std::filesystem::remove_all(dir);
}

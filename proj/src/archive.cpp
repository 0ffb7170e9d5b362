#include "cfx/archive.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace cfx {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

namespace {

constexpr char kArrayTag[4] = {'C', 'F', 'X', 'A'};
constexpr char kTrailer[4] = {'E', 'N', 'D', '!'};

std::size_t dtype_width(DType d) {
    switch (d) {
        case DType::f64: return 8;
        case DType::i32: return 4;
        case DType::u8: return 1;
    }
    return 0;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

void put_bytes(std::vector<std::uint8_t>& out, const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
}

// Split "CFXGEN1" into ("CFXGEN", "1").
std::pair<std::string, std::string> split_magic(const std::string& magic) {
    std::size_t i = magic.size();
    while (i > 0 && std::isdigit(static_cast<unsigned char>(magic[i - 1]))) --i;
    return {magic.substr(0, i), magic.substr(i)};
}

class Cursor {
public:
    explicit Cursor(std::span<const std::uint8_t> d) : d_(d) {}
    std::size_t pos() const { return pos_; }

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > d_.size()) throw IntegrityError(std::string("truncated file while reading ") + what, pos_);
    }
    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, d_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = d_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> d_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

ArchiveWriter::ArchiveWriter(std::string magic, nlohmann::json header)
    : magic_(std::move(magic)), header_(std::move(header)) {}

void ArchiveWriter::add(const std::string& name, const Tensor& t) {
    ArrayRecord r{DType::f64, t.shape, {}};
    put_bytes(r.bytes, t.data.data(), t.data.size() * sizeof(double));
    arrays_.emplace_back(name, std::move(r));
}

void ArchiveWriter::add(const std::string& name, std::span<const std::int32_t> values) {
    ArrayRecord r{DType::i32, {values.size()}, {}};
    put_bytes(r.bytes, values.data(), values.size() * sizeof(std::int32_t));
    arrays_.emplace_back(name, std::move(r));
}

void ArchiveWriter::add(const std::string& name, std::span<const std::uint8_t> values) {
    ArrayRecord r{DType::u8, {values.size()}, {values.begin(), values.end()}};
    arrays_.emplace_back(name, std::move(r));
}

std::vector<std::uint8_t> ArchiveWriter::bytes() const {
    std::vector<std::uint8_t> out;
    put_bytes(out, magic_.data(), magic_.size());
    out.push_back('\n');
    const std::string header = header_.dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    put_bytes(out, header.data(), header.size());
    put<std::uint32_t>(out, crc32_of({reinterpret_cast<const std::uint8_t*>(header.data()), header.size()}));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(arrays_.size()));
    for (const auto& [name, rec] : arrays_) {
        put_bytes(out, kArrayTag, 4);
        const std::size_t start = out.size();
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        put_bytes(out, name.data(), name.size());
        put<std::uint8_t>(out, static_cast<std::uint8_t>(rec.dtype));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(rec.shape.size()));
        for (auto d : rec.shape) put<std::uint64_t>(out, d);
        put<std::uint64_t>(out, rec.bytes.size());
        put_bytes(out, rec.bytes.data(), rec.bytes.size());
        put<std::uint32_t>(out, crc32_of({out.data() + start, out.size() - start}));
    }
    put_bytes(out, kTrailer, 4);
    return out;
}

void ArchiveWriter::write(const std::filesystem::path& path) const { write_file_atomic(path, bytes()); }

ArchiveReader ArchiveReader::parse(std::span<const std::uint8_t> data, const std::string& magic) {
    Cursor c(data);
    if (data.empty()) throw IntegrityError("empty file", 0);
    const auto [family, version] = split_magic(magic);
    std::size_t nl = 0;
    while (nl < data.size() && nl < 32 && data[nl] != '\n') ++nl;
    if (nl >= data.size() || data[nl] != '\n') throw IntegrityError("missing format magic line", 0);
    const std::string found(reinterpret_cast<const char*>(data.data()), nl);
    const auto [found_family, found_version] = split_magic(found);
    if (found_family != family) throw IntegrityError("expected a " + magic + " file, found '" + found + "'", 0);
    if (found_version != version)
        throw VersionError("unsupported " + family + " format version " + found_version + " (expected " + version + ")");
    c.take(nl + 1, "magic");

    ArchiveReader r;
    const auto hlen = c.get<std::uint32_t>("header length");
    const std::size_t hpos = c.pos();
    const auto htext = c.take(hlen, "header");
    const auto hcrc = c.get<std::uint32_t>("header checksum");
    if (crc32_of(htext) != hcrc) throw IntegrityError("header checksum mismatch", hpos);
    try {
        r.header_ = nlohmann::json::parse(htext.begin(), htext.end());
    } catch (const nlohmann::json::exception&) {
        throw IntegrityError("header is not valid JSON", hpos);
    }
    const auto count = c.get<std::uint32_t>("array count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t tag_pos = c.pos();
        const auto tag = c.take(4, "array tag");
        if (std::memcmp(tag.data(), kArrayTag, 4) != 0) throw IntegrityError("bad array tag", tag_pos);
        const std::size_t start = c.pos();
        const auto name_len = c.get<std::uint16_t>("array name length");
        const auto name_bytes = c.take(name_len, "array name");
        const auto dtype = static_cast<DType>(c.get<std::uint8_t>("dtype"));
        if (dtype_width(dtype) == 0) throw IntegrityError("unknown dtype", c.pos() - 1);
        const auto rank = c.get<std::uint8_t>("rank");
        ArrayRecord rec{dtype, {}, {}};
        for (std::uint8_t k = 0; k < rank; ++k) rec.shape.push_back(c.get<std::uint64_t>("dimension"));
        const std::size_t len_pos = c.pos();
        const auto nbytes = c.get<std::uint64_t>("array byte count");
        if (nbytes != numel(rec.shape) * dtype_width(dtype))
            throw IntegrityError("array byte count does not match its shape", len_pos);
        const auto payload = c.take(nbytes, "array data");
        rec.bytes.assign(payload.begin(), payload.end());
        const std::size_t end = c.pos();
        const auto crc = c.get<std::uint32_t>("array checksum");
        if (crc32_of(data.subspan(start, end - start)) != crc) throw IntegrityError("array checksum mismatch", start);
        r.arrays_[std::string(name_bytes.begin(), name_bytes.end())] = std::move(rec);
    }
    const std::size_t trailer_pos = c.pos();
    const auto trailer = c.take(4, "trailer");
    if (std::memcmp(trailer.data(), kTrailer, 4) != 0) throw IntegrityError("bad trailer", trailer_pos);
    if (c.pos() != data.size()) throw IntegrityError("trailing bytes after archive", c.pos());
    return r;
}

ArchiveReader ArchiveReader::read(const std::filesystem::path& path, const std::string& magic) {
    const auto bytes = read_file_bytes(path);
    return parse(bytes, magic);
}

const ArrayRecord& ArchiveReader::get(const std::string& name, DType expected) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw IntegrityError("archive has no array '" + name + "'", 0);
    if (it->second.dtype != expected) throw IntegrityError("array '" + name + "' has unexpected dtype", 0);
    return it->second;
}

Tensor ArchiveReader::tensor(const std::string& name) const {
    const auto& rec = get(name, DType::f64);
    Tensor t(rec.shape);
    std::memcpy(t.data.data(), rec.bytes.data(), rec.bytes.size());
    return t;
}

std::vector<std::int32_t> ArchiveReader::ints(const std::string& name) const {
    const auto& rec = get(name, DType::i32);
    std::vector<std::int32_t> out(rec.bytes.size() / 4);
    std::memcpy(out.data(), rec.bytes.data(), rec.bytes.size());
    return out;
}

std::vector<std::uint8_t> ArchiveReader::bytes(const std::string& name) const { return get(name, DType::u8).bytes; }

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace cfx

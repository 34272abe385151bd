#pragma once

// On-disk formats shared with external embedding producers.
//
// .medb (one case per file, all integers little-endian):
//
//   offset  size  field
//   0       4     magic "MEDB"
//   4       2     version (1)
//   6       4     dim
//   10      4     slice_count
//   14      2     case_id_len
//   16      len   case_id (UTF-8)
//   ...           slice_count * dim float32 LE, slice-major
//
// Manifest: UTF-8 CSV with the header
//   case_id,file_path,bucket,kind,ground_truth,transform_tag,task
// Fields may not contain commas or newlines; empty fields mean "absent".

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dedup3d/binary_io.hpp"
#include "dedup3d/core.hpp"

namespace dedup3d {

inline constexpr std::array<char, 4> kEmbeddingMagic = {'M', 'E', 'D', 'B'};
inline constexpr std::uint16_t kEmbeddingVersion = 1;

inline std::size_t embedding_header_size(const CaseId& id) { return 16 + id.str().size(); }

inline std::vector<std::uint8_t> encode_embedding_set(const EmbeddingSet& es) {
    validate_embedding_set(es);
    if (es.case_id.str().size() > 0xFFFF) throw Error(Errc::InvalidArgument, "case id longer than 65535 bytes");
    detail::ByteWriter w;
    w.raw(std::string_view(kEmbeddingMagic.data(), kEmbeddingMagic.size()));
    w.u16(kEmbeddingVersion);
    w.u32(static_cast<std::uint32_t>(es.dim));
    w.u32(static_cast<std::uint32_t>(es.slice_count()));
    w.u16(static_cast<std::uint16_t>(es.case_id.str().size()));
    w.raw(es.case_id.str());
    for (const auto& v : es.vectors)
        for (const float x : v) w.f32(x);
    return w.bytes();
}

inline EmbeddingSet decode_embedding_set(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, Errc::TruncatedPayload);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kEmbeddingMagic.data(), 4) != 0)
        throw Error(Errc::BadMagic, "not a .medb stream");
    r.raw(4);
    const auto version = r.u16();
    if (version != kEmbeddingVersion)
        throw Error(Errc::UnsupportedVersion, "version " + std::to_string(version) + " is not supported");
    const std::uint32_t dim = r.u32();
    const std::uint32_t slices = r.u32();
    const std::uint16_t id_len = r.u16();
    if (dim == 0 || slices == 0 || id_len == 0)
        throw Error(Errc::InvalidHeader, "dim, slice_count and case_id_len must be positive");
    CaseId id(r.raw(id_len));

    const std::uint64_t payload = static_cast<std::uint64_t>(dim) * slices * 4;
    if (r.remaining() < payload)
        throw Error(Errc::TruncatedPayload, "payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                                                std::to_string(payload));
    if (r.remaining() > payload)
        throw Error(Errc::InvalidHeader, "trailing bytes after payload");

    EmbeddingSet es{std::move(id), dim, {}};
    es.vectors.assign(slices, std::vector<float>(dim));
    for (auto& v : es.vectors)
        for (auto& x : v) {
            x = r.f32();
            if (!std::isfinite(x)) throw Error(Errc::NonFiniteValue, "payload contains a non-finite value");
        }
    return es;
}

inline void write_embedding_file(const EmbeddingSet& es, const std::filesystem::path& path) {
    const auto bytes = encode_embedding_set(es);
    detail::write_file_bytes(path, bytes);
}

inline EmbeddingSet read_embedding_file(const std::filesystem::path& path) {
    return decode_embedding_set(detail::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Manifest

enum class Bucket { DB_1A, NEAR_1B, NONDUP_1C, DB_2A, NEAR_2B, NONDUP_2C, UNASSIGNED };

constexpr std::string_view bucket_name(Bucket b) {
    switch (b) {
        case Bucket::DB_1A: return "DB_1A";
        case Bucket::NEAR_1B: return "NEAR_1B";
        case Bucket::NONDUP_1C: return "NONDUP_1C";
        case Bucket::DB_2A: return "DB_2A";
        case Bucket::NEAR_2B: return "NEAR_2B";
        case Bucket::NONDUP_2C: return "NONDUP_2C";
        case Bucket::UNASSIGNED: return "UNASSIGNED";
    }
    return "";
}

inline std::optional<Bucket> parse_bucket(std::string_view text) {
    for (const Bucket b : {Bucket::DB_1A, Bucket::NEAR_1B, Bucket::NONDUP_1C, Bucket::DB_2A, Bucket::NEAR_2B,
                           Bucket::NONDUP_2C, Bucket::UNASSIGNED})
        if (bucket_name(b) == text) return b;
    return std::nullopt;
}

struct ManifestEntry {
    CaseId case_id;
    std::string file_path;  // relative to the manifest's directory
    Bucket bucket = Bucket::UNASSIGNED;
    std::optional<QueryLabel> label;
    std::string task;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline constexpr std::string_view kManifestHeader = "case_id,file_path,bucket,kind,ground_truth,transform_tag,task";

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.emplace_back(line.substr(start));
            return fields;
        }
        fields.emplace_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

/// Index of the first entry repeating a (bucket, case_id) pair.
inline std::optional<std::size_t> first_duplicate_in_bucket(const Manifest& m) {
    std::set<std::pair<Bucket, std::string>> seen;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        if (!seen.emplace(m.entries[i].bucket, m.entries[i].case_id.str()).second) return i;
    return std::nullopt;
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& in) {
    Manifest m;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    std::vector<std::size_t> entry_lines;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!header_seen) {
            if (line != kManifestHeader) throw ParseError(line_no, "missing or malformed header");
            header_seen = true;
            continue;
        }
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 7) throw ParseError(line_no, "expected 7 fields, found " + std::to_string(f.size()));
        if (f[0].empty()) throw ParseError(line_no, "empty case_id");
        if (f[1].empty()) throw ParseError(line_no, "empty file_path");
        const auto bucket = parse_bucket(f[2]);
        if (!bucket) throw ParseError(line_no, "unknown bucket '" + f[2] + "'");

        std::optional<QueryLabel> label;
        if (!f[3].empty()) {
            const auto kind = parse_query_kind(f[3]);
            if (!kind) throw ParseError(line_no, "unknown kind '" + f[3] + "'");
            if ((*kind != QueryKind::NonDuplicate) != !f[4].empty())
                throw ParseError(line_no, "ground_truth must be set iff kind is Duplicate or NearDuplicate");
            std::optional<CaseId> gt;
            if (!f[4].empty()) gt.emplace(f[4]);
            std::optional<std::string> tag;
            if (!f[5].empty()) tag = f[5];
            label.emplace(*kind, std::move(gt), std::move(tag));
        } else if (!f[4].empty() || !f[5].empty()) {
            throw ParseError(line_no, "ground_truth/transform_tag given without kind");
        }
        m.entries.push_back(ManifestEntry{CaseId(f[0]), f[1], *bucket, std::move(label), f[6]});
        entry_lines.push_back(line_no);
    }
    if (!header_seen) throw ParseError(1, "missing header");

    if (const auto dup = detail::first_duplicate_in_bucket(m)) {
        const auto& e = m.entries[*dup];
        throw ParseError(entry_lines[*dup], "duplicate case_id '" + e.case_id.str() + "' in bucket " +
                                                std::string(bucket_name(e.bucket)));
    }
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open manifest '" + path.string() + "'");
    return parse_manifest(in);
}

inline std::string format_manifest(const Manifest& m) {
    if (const auto dup = detail::first_duplicate_in_bucket(m))
        throw Error(Errc::InvalidArgument, "duplicate case_id '" + m.entries[*dup].case_id.str() + "' in bucket " +
                                               std::string(bucket_name(m.entries[*dup].bucket)));
    std::ostringstream out;
    out << kManifestHeader << '\n';
    const auto check = [](std::string_view field) {
        if (field.find_first_of(",\r\n") != std::string_view::npos)
            throw Error(Errc::InvalidArgument, "manifest field '" + std::string(field) + "' contains a separator");
        return field;
    };
    for (const auto& e : m.entries) {
        if (e.file_path.empty()) throw Error(Errc::InvalidArgument, "entry '" + e.case_id.str() + "' has no file_path");
        out << check(e.case_id.str()) << ',' << check(e.file_path) << ',' << bucket_name(e.bucket) << ',';
        if (e.label) {
            out << query_kind_name(e.label->kind()) << ',';
            if (e.label->ground_truth()) out << check(e.label->ground_truth()->str());
            out << ',';
            if (e.label->transform_tag()) out << check(*e.label->transform_tag());
            out << ',';
        } else {
            out << ",,,";
        }
        out << check(e.task) << '\n';
    }
    return out.str();
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    const auto text = format_manifest(m);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot open manifest '" + path.string() + "' for writing");
    out << text;
    if (!out) throw Error(Errc::IoError, "write failed for manifest '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// .mvol: raw float volumes used by the synthesize/embed CLI steps.
//   "MVOL", u16 version, u32 nz, u32 ny, u32 nx, u16 id_len, id,
//   u16 tag_len, tag, then nz*ny*nx float32 LE in (z, y, x) order.

inline constexpr std::uint16_t kVolumeVersion = 1;

inline std::vector<std::uint8_t> encode_volume(const Volume& v) {
    detail::ByteWriter w;
    w.raw("MVOL");
    w.u16(kVolumeVersion);
    w.u32(static_cast<std::uint32_t>(v.shape().nz));
    w.u32(static_cast<std::uint32_t>(v.shape().ny));
    w.u32(static_cast<std::uint32_t>(v.shape().nx));
    w.u16(static_cast<std::uint16_t>(v.case_id().str().size()));
    w.raw(v.case_id().str());
    const std::string tag = v.transform_tag().value_or("");
    w.u16(static_cast<std::uint16_t>(tag.size()));
    w.raw(tag);
    for (const float x : v.voxels()) w.f32(x);
    return w.bytes();
}

inline Volume decode_volume(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "MVOL", 4) != 0) throw Error(Errc::BadMagic, "not a .mvol stream");
    detail::ByteReader r(bytes, Errc::TruncatedPayload);
    r.raw(4);
    if (const auto version = r.u16(); version != kVolumeVersion)
        throw Error(Errc::UnsupportedVersion, "volume version " + std::to_string(version));
    Shape3 shape;
    shape.nz = r.u32();
    shape.ny = r.u32();
    shape.nx = r.u32();
    CaseId id(r.raw(r.u16()));
    std::string tag = r.raw(r.u16());
    if (r.remaining() != shape.voxel_count() * 4) throw Error(Errc::TruncatedPayload, "voxel payload length mismatch");
    std::vector<float> voxels(shape.voxel_count());
    for (auto& x : voxels) x = r.f32();
    std::optional<std::string> opt_tag;
    if (!tag.empty()) opt_tag = std::move(tag);
    return Volume(std::move(id), shape, std::move(voxels), std::move(opt_tag));
}

inline void write_volume_file(const Volume& v, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_volume(v));
}

inline Volume read_volume_file(const std::filesystem::path& path) {
    return decode_volume(detail::read_file_bytes(path));
}

}  // namespace dedup3d

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "dedup3d/embedding_io.hpp"
#include "oracles.hpp"

using namespace dedup3d;

namespace {

template <typename F>
Errc code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no exception";
    return Errc::InvalidArgument;
}

EmbeddingSet identity2() { return EmbeddingSet{CaseId("A"), 2, {{1.0f, 0.0f}, {0.0f, 1.0f}}}; }

Manifest parse(const std::string& text) {
    std::istringstream in(text);
    return parse_manifest(in);
}

const std::string kHeader(kManifestHeader);

}  // namespace

TEST(Medb, KnownBytes) {
    const auto bytes = encode_embedding_set(identity2());
    std::vector<std::uint8_t> expected = {'M', 'E', 'D', 'B', 1, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 'A'};
    ASSERT_EQ(embedding_header_size(CaseId("A")), expected.size());
    for (const double x : {1.0, 0.0, 0.0, 1.0}) {
        const auto f = oracle::float_le_bytes(x);
        expected.insert(expected.end(), f.begin(), f.end());
    }
    EXPECT_EQ(bytes, expected);
    // 1.0f little-endian
    EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin() + 17, bytes.begin() + 21), (std::vector<std::uint8_t>{0, 0, 0x80, 0x3F}));
}

TEST(Medb, FileSizeIsHeaderPlusPayload) {
    oracle::TempDir dir("medb");
    EmbeddingSet es{CaseId("case7"), 3, {{1, 2, 3}, {4, 5, 6}}};
    write_embedding_file(es, dir / "a.medb");
    EXPECT_EQ(std::filesystem::file_size(dir / "a.medb"), embedding_header_size(es.case_id) + 24);
    EXPECT_EQ(read_embedding_file(dir / "a.medb"), es);
}

TEST(Medb, RoundTripProperty) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> dim(1, 512), slices(1, 64);
    for (int i = 0; i < 60; ++i) {
        auto es = oracle::random_set("case_" + std::to_string(i), slices(rng), dim(rng), rng);
        if (i % 3 == 0) es.vectors[0][0] = -0.0f;
        if (i % 5 == 0) es.vectors.back().back() = std::numeric_limits<float>::denorm_min();
        const auto bytes = encode_embedding_set(es);
        const auto back = decode_embedding_set(bytes);
        ASSERT_EQ(back.case_id, es.case_id);
        ASSERT_EQ(back.dim, es.dim);
        ASSERT_EQ(back.vectors.size(), es.vectors.size());
        for (std::size_t j = 0; j < es.vectors.size(); ++j)
            ASSERT_EQ(std::memcmp(back.vectors[j].data(), es.vectors[j].data(), es.dim * 4), 0);
        ASSERT_EQ(encode_embedding_set(back), bytes);
    }
}

TEST(Medb, CorruptHeaders) {
    const auto good = encode_embedding_set(identity2());
    auto bad_magic = good;
    std::memcpy(bad_magic.data(), "XXXX", 4);
    EXPECT_EQ(code_of([&] { decode_embedding_set(bad_magic); }), Errc::BadMagic);

    auto bad_version = good;
    bad_version[4] = 2;
    EXPECT_EQ(code_of([&] { decode_embedding_set(bad_version); }), Errc::UnsupportedVersion);

    auto short_payload = good;
    short_payload.resize(good.size() - 1);
    EXPECT_EQ(code_of([&] { decode_embedding_set(short_payload); }), Errc::TruncatedPayload);

    const std::vector<std::uint8_t> short_header(good.begin(), good.begin() + 9);
    EXPECT_EQ(code_of([&] { decode_embedding_set(short_header); }), Errc::TruncatedPayload);

    auto zero_dim = good;
    zero_dim[6] = 0;
    EXPECT_EQ(code_of([&] { decode_embedding_set(zero_dim); }), Errc::InvalidHeader);

    auto trailing = good;
    trailing.push_back(0);
    EXPECT_EQ(code_of([&] { decode_embedding_set(trailing); }), Errc::InvalidHeader);

    auto nan_payload = good;
    const std::uint8_t qnan[] = {0, 0, 0xC0, 0x7F};
    std::memcpy(nan_payload.data() + 17, qnan, 4);
    EXPECT_EQ(code_of([&] { decode_embedding_set(nan_payload); }), Errc::NonFiniteValue);

    EXPECT_EQ(code_of([] { decode_embedding_set(std::vector<std::uint8_t>{}); }), Errc::BadMagic);
}

TEST(Medb, WriteRejectsInvalidSet) {
    EmbeddingSet es{CaseId("x"), 2, {{1.0f}}};
    EXPECT_EQ(code_of([&] { encode_embedding_set(es); }), Errc::DimensionMismatch);
}

TEST(Medb, MissingFileIsIoError) {
    EXPECT_EQ(code_of([] { read_embedding_file("/nonexistent/dir/x.medb"); }), Errc::IoError);
}

TEST(Manifest, HeaderOnlyIsEmpty) { EXPECT_TRUE(parse(kHeader + "\n").entries.empty()); }

TEST(Manifest, NearDuplicateLine) {
    const auto m = parse(kHeader + "\nq1,q1.medb,NEAR_1B,NearDuplicate,caseA,crop:0.05,Task01\n");
    ASSERT_EQ(m.entries.size(), 1u);
    const auto& e = m.entries[0];
    EXPECT_EQ(e.case_id, CaseId("q1"));
    EXPECT_EQ(e.file_path, "q1.medb");
    EXPECT_EQ(e.bucket, Bucket::NEAR_1B);
    ASSERT_TRUE(e.label);
    EXPECT_EQ(e.label->kind(), QueryKind::NearDuplicate);
    EXPECT_EQ(e.label->ground_truth(), CaseId("caseA"));
    EXPECT_EQ(e.label->transform_tag(), "crop:0.05");
    EXPECT_EQ(e.task, "Task01");
}

TEST(Manifest, DuplicateCaseInBucketReportsLine) {
    try {
        parse(kHeader + "\na,a.medb,DB_1A,,,,T\nb,b.medb,DB_1A,,,,T\na,a2.medb,DB_1A,,,,T\n");
        FAIL() << "no exception";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 4u);
    }
    // the same case id in different buckets is fine
    EXPECT_EQ(parse(kHeader + "\na,a.medb,DB_1A,,,,T\na,a.medb,NONDUP_2C,,,,T\n").entries.size(), 2u);
}

TEST(Manifest, MalformedLines) {
    const auto line_of = [](const std::string& text) -> std::size_t {
        try {
            parse(text);
        } catch (const ParseError& e) {
            return e.line();
        }
        return 0;
    };
    EXPECT_EQ(line_of("case_id,file\n"), 1u);
    EXPECT_EQ(line_of(""), 1u);
    EXPECT_EQ(line_of(kHeader + "\na,a.medb,DB_1A,,,T\n"), 2u);
    EXPECT_EQ(line_of(kHeader + "\na,a.medb,DB_9Z,,,,T\n"), 2u);
    EXPECT_EQ(line_of(kHeader + "\n\na,a.medb,DB_1A,Duplicate,,,T\n"), 3u);
    EXPECT_EQ(line_of(kHeader + "\na,a.medb,DB_1A,NonDuplicate,x,,T\n"), 2u);
    EXPECT_EQ(line_of(kHeader + "\na,a.medb,DB_1A,Unknown,,,T\n"), 2u);
    EXPECT_EQ(line_of(kHeader + "\n,a.medb,DB_1A,,,,T\n"), 2u);
}

TEST(Manifest, AcceptsCrlf) {
    const auto m = parse(kHeader + "\r\na,a.medb,DB_1A,Duplicate,a,,T\r\n");
    ASSERT_EQ(m.entries.size(), 1u);
    EXPECT_EQ(m.entries[0].task, "T");
}

TEST(Manifest, SaveLoadRoundTrip) {
    Manifest m;
    m.entries.push_back({CaseId("a"), "a.medb", Bucket::DB_1A, QueryLabel::duplicate(CaseId("a")), "Task01"});
    m.entries.push_back({CaseId("a~blur:2"), "b/a.medb", Bucket::NEAR_1B, QueryLabel::near_duplicate(CaseId("a"), "blur:2"), "Task01"});
    m.entries.push_back({CaseId("c"), "c.medb", Bucket::NONDUP_1C, QueryLabel::non_duplicate(), "Task01"});
    m.entries.push_back({CaseId("d"), "d.medb", Bucket::UNASSIGNED, std::nullopt, ""});
    oracle::TempDir dir("manifest");
    save_manifest(m, dir / "manifest.csv");
    EXPECT_EQ(load_manifest(dir / "manifest.csv"), m);
    EXPECT_EQ(parse(format_manifest(m)), m);
}

TEST(Manifest, FormatRejectsSeparators) {
    Manifest m;
    m.entries.push_back({CaseId("a,b"), "a.medb", Bucket::DB_1A, std::nullopt, "T"});
    EXPECT_EQ(code_of([&] { format_manifest(m); }), Errc::InvalidArgument);
}

TEST(Mvol, RoundTripAndErrors) {
    std::vector<float> vox(2 * 3 * 4);
    for (std::size_t i = 0; i < vox.size(); ++i) vox[i] = static_cast<float>(i) * 0.25f - 1.0f;
    const Volume v(CaseId("vol"), Shape3{2, 3, 4}, vox, std::string("rotate:5"));
    const auto bytes = encode_volume(v);
    EXPECT_EQ(decode_volume(bytes), v);
    const Volume untagged(CaseId("u"), Shape3{1, 1, 1}, 3.0f);
    EXPECT_EQ(decode_volume(encode_volume(untagged)), untagged);

    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_EQ(code_of([&] { decode_volume(bad); }), Errc::BadMagic);
    bad = bytes;
    bad.pop_back();
    EXPECT_EQ(code_of([&] { decode_volume(bad); }), Errc::TruncatedPayload);
}

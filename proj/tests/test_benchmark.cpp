#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "dedup3d/benchmark.hpp"
#include "oracles.hpp"

using namespace dedup3d;
using nlohmann::ordered_json;

namespace {

ExperimentConfig parse(const std::string& text, const std::filesystem::path& base = {}) {
    return parse_experiment_config(ordered_json::parse(text), base);
}

Errc parse_error_code(const std::string& text) {
    try {
        parse(text);
    } catch (const Error& e) {
        return e.code();
    }
    return Errc::IoError;  // sentinel: no error
}

/// Small and fast: 16 cases of 6x32x32, reduced embedder. With four
/// database cases per split, k=3 saturates every score at 1.
ExperimentConfig small_config() {
    return parse(R"({
        "seed": 3,
        "embedder": {"type": "toy", "target_side": 8, "preprocess_side": 32},
        "synthetic": {"cases": 16, "shape": [6, 32, 32]},
        "backends": ["exact", {"type": "hnsw", "m": 8, "ef_construction": 32, "ef_search": 16}],
        "k_values": [3, 1],
        "transforms": ["crop:0.1", "noise:0.05", "noise:0.2"]
    })");
}

EmbeddingSet gaussian_set(const std::string& id, std::mt19937_64& rng, std::size_t slices = 8, std::size_t dim = 64) {
    return oracle::random_set(id, slices, dim, rng);
}

}  // namespace

TEST(Config, Defaults) {
    const auto cfg = parse("{}");
    EXPECT_EQ(cfg.embedder, EmbedderKind::Toy);
    EXPECT_EQ(cfg.k_values, (std::vector<std::uint32_t>{1, 3}));
    EXPECT_EQ(cfg.backends.size(), 1u);
    EXPECT_EQ(cfg.transforms.size(), default_transform_grid().size());
    EXPECT_EQ(cfg.calibration_sets, CalibrationRule::WeakestPlusDuplicate);
    EXPECT_FALSE(cfg.threshold_override.has_value());
    EXPECT_FALSE(cfg.data_root.has_value());
    EXPECT_FALSE(cfg.scan.enabled);
    EXPECT_EQ(cfg.seed, 0u);
}

TEST(Config, ParsesEverything) {
    const auto cfg = parse(R"({
        "seed": 9,
        "backends": ["lsh", {"type": "hnsw", "m": 4, "ef_construction": 8, "ef_search": 5, "seed": 1}],
        "k_values": [5, 1, 5, 2],
        "transforms": ["rotate:10", "jpeg:50"],
        "calibration_sets": "all",
        "threshold_override": 0.5,
        "scan": {"threshold": 0.9, "k": 2}
    })");
    EXPECT_EQ(cfg.k_values, (std::vector<std::uint32_t>{1, 2, 5}));
    ASSERT_EQ(cfg.backends.size(), 2u);
    EXPECT_EQ(std::get<LshParams>(cfg.backends[0]).seed, 9u);  // inherits the top-level seed
    EXPECT_EQ(std::get<HnswParams>(cfg.backends[1]).m, 4u);
    EXPECT_EQ(std::get<HnswParams>(cfg.backends[1]).seed, 1u);
    ASSERT_EQ(cfg.transforms.size(), 2u);
    EXPECT_EQ(cfg.transforms[1].kind, TransformKind::JpegCompress);
    EXPECT_EQ(cfg.calibration_sets, CalibrationRule::All);
    EXPECT_EQ(cfg.threshold_override, 0.5);
    EXPECT_TRUE(cfg.scan.enabled);
    EXPECT_EQ(cfg.scan.k, 2u);
}

TEST(Config, RelativeDataRootResolvesAgainstConfigDir) {
    const auto cfg = parse(R"({"data_root": "data"})", "/cfgdir");
    EXPECT_EQ(*cfg.data_root, std::filesystem::path("/cfgdir/data"));
    EXPECT_EQ(*parse(R"({"data_root": "/abs"})", "/cfgdir").data_root, std::filesystem::path("/abs"));
}

TEST(Config, Rejections) {
    for (const char* bad : {R"([])", R"({"bogus": 1})", R"({"backends": []})", R"({"backends": ["faiss"]})",
                            R"({"backends": [{"type": "hnsw", "m": 1}]})", R"({"k_values": [0]})", R"({"k_values": []})",
                            R"({"transforms": ["warp:1"]})", R"({"transforms": "all"})", R"({"threshold_override": 1.5})",
                            R"({"calibration_sets": "some"})", R"({"embedder": "cnn"})", R"({"embedder": "external"})",
                            R"({"synthetic": {"cases": 3}})", R"({"synthetic": {"shape": [1, 2]}})",
                            R"({"scan": {"k": 0}})", R"({"scan": {"threshold": -0.1}})", R"({"seed": "x"})",
                            R"({"embedder": {"target_side": 300}})"})
        EXPECT_EQ(parse_error_code(bad), Errc::ConfigError) << bad;
}

TEST(Config, EchoReparsesToSameConfig) {
    const auto cfg = small_config();
    const auto echoed = config_to_json(cfg);
    EXPECT_EQ(config_to_json(parse_experiment_config(echoed)), echoed);
}

TEST(Config, LoadFromFile) {
    oracle::TempDir dir("cfg");
    {
        std::ofstream(dir / "c.json") << R"({"data_root": "d", "embedder": "external"})";
        std::ofstream(dir / "broken.json") << "{ not json";
    }
    EXPECT_EQ(*load_experiment_config(dir / "c.json").data_root, dir.path() / "d");
    try {
        load_experiment_config(dir / "broken.json");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::ConfigError);
    }
    EXPECT_THROW(load_experiment_config(dir / "missing.json"), Error);
}

TEST(Synthetic, DeterministicAndDistinct) {
    const Shape3 shape{4, 24, 24};
    const auto a = generate_synthetic_dataset(10, shape, 11);
    const auto b = generate_synthetic_dataset(10, shape, 11);
    const auto c = generate_synthetic_dataset(10, shape, 12);
    ASSERT_EQ(a.size(), 10u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].case_id().str(), synthetic_case_name(i));
        EXPECT_TRUE(std::ranges::equal(a[i].voxels(), b[i].voxels()));
        EXPECT_FALSE(std::ranges::equal(a[i].voxels(), c[i].voxels()));
        const auto [lo, hi] = std::minmax_element(a[i].voxels().begin(), a[i].voxels().end());
        EXPECT_FLOAT_EQ(*lo, 0.0f);
        EXPECT_FLOAT_EQ(*hi, 1.0f);
        for (std::size_t j = 0; j < i; ++j) EXPECT_FALSE(std::ranges::equal(a[i].voxels(), a[j].voxels()));
    }
    EXPECT_THROW(generate_synthetic_dataset(1, shape, 0), Error);
}

TEST(Scan, FindsPlantedCopy) {
    std::mt19937_64 rng(1);
    std::vector<EmbeddingSet> db;
    for (int c = 0; c < 10; ++c) db.push_back(gaussian_set(oracle::case_name(c), rng));
    auto copy = db[3];
    copy.case_id = CaseId("zcopy");
    db.push_back(copy);
    for (const BackendSpec& b : {BackendSpec{ExactParams{}}, BackendSpec{HnswParams{}}}) {
        const auto pairs = scan_for_duplicates(db, b, 1, 0.8);
        ASSERT_EQ(pairs.size(), 1u);
        EXPECT_EQ(pairs[0].first, CaseId("c03"));
        EXPECT_EQ(pairs[0].second, CaseId("zcopy"));
        EXPECT_DOUBLE_EQ(pairs[0].c_k, 1.0);
    }
    const auto j = pairs_to_json(scan_for_duplicates(db, ExactParams{}, 1, 0.8));
    EXPECT_EQ(j[0]["query_case"], "c03");
    EXPECT_EQ(j[0]["matched_case"], "zcopy");
}

TEST(Scan, IndependentCasesYieldNothing) {
    std::mt19937_64 rng(2);
    std::vector<EmbeddingSet> db;
    for (int c = 0; c < 12; ++c) db.push_back(gaussian_set(oracle::case_name(c), rng));
    EXPECT_TRUE(scan_for_duplicates(db, ExactParams{}, 1, 0.8).empty());
    EXPECT_THROW(scan_for_duplicates(db, ExactParams{}, 1, 1.5), Error);
}

TEST(Run, ReportShape) {
    const auto rep = run_experiment(small_config());
    const auto& r = rep.report;
    EXPECT_EQ(r["report_version"], kReportVersion);
    EXPECT_EQ(r["data"]["split1"]["database_cases"], 4);
    EXPECT_EQ(r["data"]["split1"]["non_duplicate_queries"], 4);
    EXPECT_EQ(r["data"]["split2"]["near_duplicate_sets"].size(), 3u);
    ASSERT_EQ(r["results"].size(), 2u);
    EXPECT_EQ(r["results"][0]["backend"]["type"], "exact");
    EXPECT_FALSE(r["results"][0].contains("scan"));
    for (const auto& res : r["results"]) {
        ASSERT_EQ(res["per_k"].size(), 2u);
        EXPECT_EQ(res["per_k"][0]["k"], 1);
        EXPECT_EQ(res["per_k"][1]["k"], 3);
        for (const auto& pk : res["per_k"]) {
            EXPECT_EQ(pk["threshold_source"], "calibrated");
            const auto& cal = pk["calibration"];
            // duplicate set + weakest crop + weakest noise
            EXPECT_EQ(cal["sets"], ordered_json::array({"duplicate", "crop:0.1", "noise:0.05"}));
            EXPECT_EQ(pk["threshold"], cal["t_opt"]);
            ASSERT_EQ(pk["split2"].size(), 4u);
            const auto& dup = pk["split2"][0];
            EXPECT_EQ(dup["set"], "duplicate");
            if (pk["k"] == 1) {
                EXPECT_DOUBLE_EQ(dup["auc"].get<double>(), 1.0);
                EXPECT_DOUBLE_EQ(dup["stage1"]["sensitivity"].get<double>(), 1.0);
                EXPECT_DOUBLE_EQ(dup["stage2"]["sensitivity"].get<double>(), 1.0);
            }
            for (const auto& row : pk["split2"])
                EXPECT_LE(row["stage2"]["sensitivity"].get<double>(), row["stage1"]["sensitivity"].get<double>());
        }
    }
    EXPECT_EQ(r.dump().find("seconds"), std::string::npos);
    EXPECT_TRUE(rep.timings.contains("load_and_embed"));
}

TEST(Run, Deterministic) {
    EXPECT_EQ(run_experiment(small_config()).report.dump(), run_experiment(small_config()).report.dump());
}

TEST(Run, ThresholdOverride) {
    auto cfg = small_config();
    cfg.threshold_override = 0.25;
    const auto r = run_experiment(cfg).report;
    for (const auto& pk : r["results"][0]["per_k"]) {
        EXPECT_EQ(pk["threshold_source"], "override");
        EXPECT_TRUE(pk["calibration"].is_null());
        EXPECT_DOUBLE_EQ(pk["threshold"].get<double>(), 0.25);
    }
}

TEST(Run, IdentityOnly) {
    auto cfg = small_config();
    cfg.transforms.clear();
    cfg.backends = {ExactParams{}};
    const auto r = run_experiment(cfg).report;
    const auto& pk = r["results"][0]["per_k"][0];
    ASSERT_EQ(pk["split2"].size(), 1u);
    EXPECT_EQ(pk["calibration"]["sets"], ordered_json::array({"duplicate"}));
    EXPECT_DOUBLE_EQ(pk["split2"][0]["stage1"]["sensitivity"].get<double>(), 1.0);
}

TEST(Run, ScanSection) {
    auto cfg = small_config();
    cfg.scan.enabled = true;
    const auto r = run_experiment(cfg).report;
    for (const auto& res : r["results"]) {
        ASSERT_TRUE(res.contains("scan"));
        EXPECT_TRUE(res["scan"].is_array());
    }
}

TEST(Run, SnapshotIndicesReproduceEvaluation) {
    auto cfg = small_config();
    const auto data = load_experiment_data(cfg);
    oracle::TempDir dir("bench");
    for (const auto& backend : cfg.backends) {
        const auto i1 = Index::build(data.split1.database, backend);
        const auto i2 = Index::build(data.split2.database, backend);
        i1.save(dir / "i1");
        i2.save(dir / "i2");
        const auto direct = evaluate_backend(cfg, data, i1, i2);
        const auto loaded = evaluate_backend(cfg, data, Index::load(dir / "i1"), Index::load(dir / "i2"));
        EXPECT_EQ(direct.dump(), loaded.dump());
    }
}

TEST(Run, WriteReportSplitsTimings) {
    auto cfg = small_config();
    cfg.transforms.clear();
    cfg.backends = {ExactParams{}};
    const auto rep = run_experiment(cfg);
    oracle::TempDir dir("report");
    write_report(rep, dir / "r.json");
    std::ifstream in(dir / "r.json");
    EXPECT_EQ(ordered_json::parse(in), rep.report);
    EXPECT_TRUE(std::filesystem::exists(dir / "r.json.timings.json"));
}

TEST(Run, ExternalEmbeddings) {
    // Embeddings written by an outside tool: two splits, one near-duplicate set each.
    oracle::TempDir dir("ext");
    std::mt19937_64 rng(5);
    Manifest m;
    const auto add = [&](const EmbeddingSet& es, Bucket b, std::optional<QueryLabel> label) {
        write_embedding_file(es, dir / (es.case_id.str() + ".medb"));
        m.entries.push_back({es.case_id, es.case_id.str() + ".medb", b, std::move(label), "T"});
    };
    for (int split = 0; split < 2; ++split) {
        const Bucket db = split ? Bucket::DB_2A : Bucket::DB_1A;
        const Bucket near = split ? Bucket::NEAR_2B : Bucket::NEAR_1B;
        const Bucket nd = split ? Bucket::NONDUP_2C : Bucket::NONDUP_1C;
        for (int c = 0; c < 3; ++c) {
            const auto id = "s" + std::to_string(split) + "a" + std::to_string(c);
            auto es = gaussian_set(id, rng, 6, 16);
            add(es, db, QueryLabel::duplicate(CaseId(id)));
            auto noisy = es;
            noisy.case_id = CaseId(id + "_n");
            std::normal_distribution<float> g(0.0f, 0.05f);
            for (auto& v : noisy.vectors)
                for (auto& x : v) x += g(rng);
            add(noisy, near, QueryLabel::near_duplicate(CaseId(id), "noise:0.05"));
            add(gaussian_set("s" + std::to_string(split) + "c" + std::to_string(c), rng, 6, 16), nd,
                QueryLabel::non_duplicate());
        }
    }
    save_manifest(m, dir / "manifest.csv");
    auto cfg = parse(R"({"embedder": "external", "data_root": ")" + dir.path().string() + R"(", "k_values": [1]})");
    const auto r = run_experiment(cfg).report;
    EXPECT_EQ(r["data"]["split1"]["database_cases"], 3);
    EXPECT_EQ(r["data"]["split2"]["near_duplicate_sets"], ordered_json::array({"noise:0.05"}));
    const auto& row = r["results"][0]["per_k"][0]["split2"][1];
    EXPECT_EQ(row["set"], "noise:0.05");
    EXPECT_DOUBLE_EQ(row["auc"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(row["stage2"]["sensitivity"].get<double>(), 1.0);

    std::filesystem::remove(dir / "s1c2.medb");
    try {
        run_experiment(cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::DataError);
    }
}

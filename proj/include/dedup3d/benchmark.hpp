#pragma once

// End-to-end experiment runner.
//
//   split 1 (calibration): database 1A; queries 1A (duplicates), 1B (near
//                          duplicates per transform), 1C (non-duplicates)
//   split 2 (evaluation):  the same with 2A / 2B / 2C
//
// For every backend and k the threshold is selected on split 1 and applied
// to split 2. The report is JSON with a fixed key order and contains no
// timing data, so equal configs produce byte-identical reports; timings go
// to a separate document.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dedup3d/ann_index.hpp"
#include "dedup3d/calibration.hpp"
#include "dedup3d/core.hpp"
#include "dedup3d/embedder.hpp"
#include "dedup3d/embedding_io.hpp"
#include "dedup3d/evaluation.hpp"
#include "dedup3d/random.hpp"
#include "dedup3d/retrieval.hpp"
#include "dedup3d/transforms.hpp"

namespace dedup3d {

using ordered_json = nlohmann::ordered_json;

inline constexpr int kReportVersion = 1;

/// Reference operating point reported for DINOv1 + HNSW, top-3, on the full
/// medical decathlon benchmark. Not derived here; usable as threshold_override.
inline constexpr double kReferenceThreshold = 0.7711;

// ---------------------------------------------------------------------------
// Synthetic data

namespace detail {

/// Broad positive Gaussian blobs, each about one slice thick, so in-plane
/// structure is smooth while consecutive slices differ.
inline Volume make_blob_volume(const CaseId& id, Shape3 shape, Rng& rng) {
    struct Blob {
        double z, y, x, sz, sy, sx, amp;
    };
    const double nz = static_cast<double>(shape.nz), ny = static_cast<double>(shape.ny), nx = static_cast<double>(shape.nx);
    std::vector<Blob> blobs(3 * shape.nz + rng.below(5));
    for (auto& b : blobs) {
        b.z = rng.uniform(-0.5, nz - 0.5);
        b.y = rng.uniform(0.0, ny - 1.0);
        b.x = rng.uniform(0.0, nx - 1.0);
        b.sz = rng.uniform(0.6, 1.5);
        b.sy = rng.uniform(0.2, 0.4) * ny;
        b.sx = rng.uniform(0.2, 0.4) * nx;
        b.amp = rng.uniform(0.2, 1.0);
    }
    std::vector<float> voxels(shape.voxel_count());
    std::size_t i = 0;
    for (std::size_t z = 0; z < shape.nz; ++z)
        for (std::size_t y = 0; y < shape.ny; ++y)
            for (std::size_t x = 0; x < shape.nx; ++x, ++i) {
                const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
                double v = 0.0;
                for (const auto& b : blobs) {
                    const double dz = (fz - b.z) / b.sz, dy = (fy - b.y) / b.sy, dx = (fx - b.x) / b.sx;
                    v += b.amp * std::exp(-0.5 * (dz * dz + dy * dy + dx * dx));
                }
                voxels[i] = static_cast<float>(v);
            }
    return minmax_scale(Volume(id, shape, std::move(voxels)));
}

}  // namespace detail

inline std::string synthetic_case_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%03zu", i);
    return buf;
}

/// Seeded procedural volumes of smooth random blobs, min-max scaled to
/// [0, 1]. A case whose toy embedding coincides
/// with an earlier case is redrawn.
inline std::vector<Volume> generate_synthetic_dataset(std::size_t n_cases, Shape3 shape, std::uint64_t seed) {
    if (n_cases < 2) throw Error(Errc::InvalidArgument, "synthetic dataset needs at least 2 cases");
    if (shape.nz == 0 || shape.ny < 2 || shape.nx < 2) throw Error(Errc::InvalidArgument, "synthetic shape too small");
    std::vector<Volume> out;
    std::vector<EmbeddingSet> embeddings;
    for (std::size_t i = 0; i < n_cases; ++i) {
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng(derive_seed(seed, (std::uint64_t{i} << 16) + attempt));
            Volume v = detail::make_blob_volume(CaseId(synthetic_case_name(i)), shape, rng);
            EmbeddingSet es = embed_volume(v);
            const bool clash = std::any_of(embeddings.begin(), embeddings.end(),
                                           [&](const EmbeddingSet& e) { return e.vectors == es.vectors; });
            if (clash) continue;
            out.push_back(std::move(v));
            embeddings.push_back(std::move(es));
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

enum class EmbedderKind { Toy, External };
enum class CalibrationRule { WeakestPlusDuplicate, All, DuplicateOnly };

struct SyntheticDataConfig {
    std::size_t cases = 40;
    Shape3 shape{16, 48, 48};
};

struct ScanConfig {
    bool enabled = false;
    double threshold = 0.8;
    std::uint32_t k = 1;
};

struct ExperimentConfig {
    std::optional<std::filesystem::path> data_root;  // contains manifest.csv
    EmbedderKind embedder = EmbedderKind::Toy;
    ToyEmbedderConfig toy;
    SyntheticDataConfig synthetic;  // used when data_root is absent
    std::vector<BackendSpec> backends{ExactParams{}};
    std::vector<std::uint32_t> k_values{1, 3};
    std::vector<TransformSpec> transforms = default_transform_grid();
    CalibrationRule calibration_sets = CalibrationRule::WeakestPlusDuplicate;
    std::optional<double> threshold_override;
    ScanConfig scan;
    std::uint64_t seed = 0;
};

namespace detail {

[[noreturn]] inline void config_error(const std::string& what) { throw Error(Errc::ConfigError, what); }

inline std::string calibration_rule_name(CalibrationRule r) {
    switch (r) {
        case CalibrationRule::WeakestPlusDuplicate: return "weakest_plus_duplicate";
        case CalibrationRule::All: return "all";
        case CalibrationRule::DuplicateOnly: return "duplicate_only";
    }
    return "";
}

template <typename T>
T get_or(const ordered_json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        config_error(std::string("bad value for '") + key + "': " + e.what());
    }
}

inline void reject_unknown_keys(const ordered_json& j, std::initializer_list<const char*> known, const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
            config_error("unknown key '" + key + "' in " + where);
}

inline BackendSpec parse_backend(const ordered_json& j, std::uint64_t default_seed) {
    if (j.is_string()) return parse_backend(ordered_json{{"type", j.get<std::string>()}}, default_seed);
    if (!j.is_object()) config_error("backend must be a string or an object");
    const auto type = get_or<std::string>(j, "type", "");
    try {
        if (type == "exact") {
            reject_unknown_keys(j, {"type"}, "exact backend");
            return ExactParams{};
        }
        if (type == "lsh") {
            reject_unknown_keys(j, {"type", "num_tables", "bits_per_table", "seed"}, "lsh backend");
            LshParams p;
            p.num_tables = get_or<std::uint32_t>(j, "num_tables", p.num_tables);
            p.bits_per_table = get_or<std::uint32_t>(j, "bits_per_table", p.bits_per_table);
            p.seed = get_or<std::uint64_t>(j, "seed", default_seed);
            p.validate();
            return p;
        }
        if (type == "hnsw") {
            reject_unknown_keys(j, {"type", "m", "ef_construction", "ef_search", "seed", "level_lambda"}, "hnsw backend");
            HnswParams p;
            p.m = get_or<std::uint32_t>(j, "m", p.m);
            p.ef_construction = get_or<std::uint32_t>(j, "ef_construction", p.ef_construction);
            p.ef_search = get_or<std::uint32_t>(j, "ef_search", p.ef_search);
            p.seed = get_or<std::uint64_t>(j, "seed", default_seed);
            if (j.contains("level_lambda") && !j.at("level_lambda").is_null())
                p.level_lambda = get_or<double>(j, "level_lambda", 0.0);
            p.validate();
            return p;
        }
    } catch (const Error& e) {
        if (e.code() == Errc::ConfigError) throw;
        config_error(e.what());
    }
    config_error("unknown backend type '" + type + "'");
}

inline ordered_json backend_to_json(const BackendSpec& spec) {
    ordered_json j;
    j["type"] = backend_name(spec);
    if (const auto* p = std::get_if<LshParams>(&spec)) {
        j["num_tables"] = p->num_tables;
        j["bits_per_table"] = p->bits_per_table;
        j["seed"] = p->seed;
    } else if (const auto* h = std::get_if<HnswParams>(&spec)) {
        j["m"] = h->m;
        j["ef_construction"] = h->ef_construction;
        j["ef_search"] = h->ef_search;
        j["seed"] = h->seed;
        j["level_lambda"] = h->lambda();
    }
    return j;
}

}  // namespace detail

/// Parses the JSON config. Relative data_root paths resolve against base_dir.
inline ExperimentConfig parse_experiment_config(const ordered_json& j, const std::filesystem::path& base_dir = {}) {
    using namespace detail;
    if (!j.is_object()) config_error("config must be a JSON object");
    reject_unknown_keys(j,
                        {"data_root", "embedder", "synthetic", "backends", "k_values", "transforms", "calibration_sets",
                         "threshold_override", "scan", "seed"},
                        "config");
    ExperimentConfig cfg;
    cfg.seed = get_or<std::uint64_t>(j, "seed", 0);

    if (const auto root = get_or<std::string>(j, "data_root", ""); !root.empty()) {
        std::filesystem::path p(root);
        cfg.data_root = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }

    if (j.contains("embedder")) {
        const auto& e = j.at("embedder");
        if (e.is_string()) {
            const auto t = e.get<std::string>();
            if (t == "toy") cfg.embedder = EmbedderKind::Toy;
            else if (t == "external") cfg.embedder = EmbedderKind::External;
            else config_error("unknown embedder '" + t + "'");
        } else if (e.is_object()) {
            reject_unknown_keys(e, {"type", "target_side", "preprocess_side"}, "embedder");
            const auto t = get_or<std::string>(e, "type", "toy");
            if (t == "toy") cfg.embedder = EmbedderKind::Toy;
            else if (t == "external") cfg.embedder = EmbedderKind::External;
            else config_error("unknown embedder '" + t + "'");
            cfg.toy.target_side = get_or<std::size_t>(e, "target_side", cfg.toy.target_side);
            cfg.toy.preprocess_side = get_or<std::size_t>(e, "preprocess_side", cfg.toy.preprocess_side);
            try {
                cfg.toy.validate();
            } catch (const Error& err) {
                config_error(err.what());
            }
        } else {
            config_error("embedder must be a string or an object");
        }
    }
    if (cfg.embedder == EmbedderKind::External && !cfg.data_root) config_error("external embeddings need data_root");

    if (j.contains("synthetic")) {
        const auto& s = j.at("synthetic");
        if (!s.is_object()) config_error("synthetic must be an object");
        reject_unknown_keys(s, {"cases", "shape"}, "synthetic");
        cfg.synthetic.cases = get_or<std::size_t>(s, "cases", cfg.synthetic.cases);
        if (s.contains("shape")) {
            const auto shape = get_or<std::vector<std::size_t>>(s, "shape", {});
            if (shape.size() != 3) config_error("synthetic.shape must be [nz, ny, nx]");
            cfg.synthetic.shape = {shape[0], shape[1], shape[2]};
        }
        if (cfg.synthetic.cases < 8) config_error("synthetic.cases must be at least 8 (4 per split)");
        if (cfg.synthetic.shape.nz == 0 || cfg.synthetic.shape.ny < 2 || cfg.synthetic.shape.nx < 2)
            config_error("synthetic.shape too small");
    }

    if (j.contains("backends")) {
        const auto& b = j.at("backends");
        if (!b.is_array() || b.empty()) config_error("backends must be a non-empty array");
        cfg.backends.clear();
        for (const auto& item : b) cfg.backends.push_back(parse_backend(item, cfg.seed));
    }

    if (j.contains("k_values")) {
        cfg.k_values = get_or<std::vector<std::uint32_t>>(j, "k_values", {});
        if (cfg.k_values.empty()) config_error("k_values must be non-empty");
        if (std::find(cfg.k_values.begin(), cfg.k_values.end(), 0u) != cfg.k_values.end())
            config_error("k_values must be positive");
        std::sort(cfg.k_values.begin(), cfg.k_values.end());
        cfg.k_values.erase(std::unique(cfg.k_values.begin(), cfg.k_values.end()), cfg.k_values.end());
    }

    if (j.contains("transforms")) {
        const auto& t = j.at("transforms");
        if (t.is_string() && t.get<std::string>() == "default") {
            cfg.transforms = default_transform_grid();
        } else if (t.is_array()) {
            cfg.transforms.clear();
            for (const auto& tag : t) {
                if (!tag.is_string()) config_error("transforms entries must be 'kind:strength' strings");
                try {
                    cfg.transforms.push_back(parse_transform_tag(tag.get<std::string>()));
                } catch (const Error& e) {
                    config_error(e.what());
                }
            }
        } else {
            config_error("transforms must be \"default\" or an array of tags");
        }
    }

    const auto rule = get_or<std::string>(j, "calibration_sets", "weakest_plus_duplicate");
    if (rule == "weakest_plus_duplicate") cfg.calibration_sets = CalibrationRule::WeakestPlusDuplicate;
    else if (rule == "all") cfg.calibration_sets = CalibrationRule::All;
    else if (rule == "duplicate_only") cfg.calibration_sets = CalibrationRule::DuplicateOnly;
    else config_error("unknown calibration_sets rule '" + rule + "'");

    if (j.contains("threshold_override") && !j.at("threshold_override").is_null()) {
        const double t = get_or<double>(j, "threshold_override", 0.0);
        if (!(t >= 0.0 && t <= 1.0)) config_error("threshold_override must be in [0, 1]");
        cfg.threshold_override = t;
    }

    if (j.contains("scan")) {
        const auto& s = j.at("scan");
        if (!s.is_object()) config_error("scan must be an object");
        reject_unknown_keys(s, {"enabled", "threshold", "k"}, "scan");
        cfg.scan.enabled = get_or<bool>(s, "enabled", true);
        cfg.scan.threshold = get_or<double>(s, "threshold", cfg.scan.threshold);
        cfg.scan.k = get_or<std::uint32_t>(s, "k", cfg.scan.k);
        if (!(cfg.scan.threshold >= 0.0 && cfg.scan.threshold <= 1.0)) config_error("scan.threshold must be in [0, 1]");
        if (cfg.scan.k == 0) config_error("scan.k must be positive");
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::ConfigError, "cannot open config '" + path.string() + "'");
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigError, std::string("config is not valid JSON: ") + e.what());
    }
    return parse_experiment_config(j, path.parent_path());
}

inline ordered_json config_to_json(const ExperimentConfig& cfg) {
    ordered_json j;
    j["data_root"] = cfg.data_root ? ordered_json(cfg.data_root->generic_string()) : ordered_json(nullptr);
    ordered_json e;
    e["type"] = cfg.embedder == EmbedderKind::Toy ? "toy" : "external";
    if (cfg.embedder == EmbedderKind::Toy) {
        e["target_side"] = cfg.toy.target_side;
        e["preprocess_side"] = cfg.toy.preprocess_side;
    }
    j["embedder"] = e;
    if (!cfg.data_root)
        j["synthetic"] = {{"cases", cfg.synthetic.cases},
                          {"shape", {cfg.synthetic.shape.nz, cfg.synthetic.shape.ny, cfg.synthetic.shape.nx}}};
    ordered_json backends = ordered_json::array();
    for (const auto& b : cfg.backends) backends.push_back(detail::backend_to_json(b));
    j["backends"] = backends;
    j["k_values"] = cfg.k_values;
    ordered_json tags = ordered_json::array();
    for (const auto& t : cfg.transforms) tags.push_back(t.tag());
    j["transforms"] = tags;
    j["calibration_sets"] = detail::calibration_rule_name(cfg.calibration_sets);
    j["threshold_override"] = cfg.threshold_override ? ordered_json(*cfg.threshold_override) : ordered_json(nullptr);
    j["scan"] = {{"enabled", cfg.scan.enabled}, {"threshold", cfg.scan.threshold}, {"k", cfg.scan.k}};
    j["seed"] = cfg.seed;
    return j;
}

// ---------------------------------------------------------------------------
// Experiment data

/// One query set: positive queries of a single kind (duplicates or one
/// transform at one strength).
struct QueryGroup {
    std::string name;
    std::optional<TransformSpec> transform;
    std::vector<LabeledQuery> queries;
};

struct SplitData {
    std::vector<EmbeddingSet> database;
    QueryGroup duplicates;
    std::vector<QueryGroup> near_duplicates;
    std::vector<LabeledQuery> non_duplicates;
};

struct ExperimentData {
    SplitData split1;
    SplitData split2;
};

/// Transformed copy of `v` named "<case>~<tag>"; noise is seeded from the
/// experiment seed, the case id and the tag.
inline Volume make_near_duplicate(const Volume& v, TransformSpec t, std::uint64_t experiment_seed) {
    t.seed = derive_seed(experiment_seed, stable_hash(v.case_id().str() + "|" + t.tag()));
    const Volume out = apply(t, v);
    return Volume(CaseId(v.case_id().str() + "~" + t.tag()), out.shape(), {out.voxels().begin(), out.voxels().end()},
                  out.transform_tag());
}

/// Manifest for generated volumes: the first half forms split 1, the rest
/// split 2, each halved into A and C buckets. Files are "<case>.mvol".
inline Manifest synthetic_manifest(const std::vector<Volume>& volumes) {
    std::vector<ManifestEntry> first, second;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        const auto& id = volumes[i].case_id();
        (i < volumes.size() / 2 ? first : second).push_back({id, id.str() + ".mvol", Bucket::UNASSIGNED, {}, "synthetic"});
    }
    assign_buckets(first, 1);
    assign_buckets(second, 2);
    Manifest m;
    m.entries = std::move(first);
    m.entries.insert(m.entries.end(), second.begin(), second.end());
    return m;
}

namespace detail {

/// Ordering key within a transform family: 0 is the mildest setting.
inline double severity(const TransformSpec& t) {
    return t.kind == TransformKind::JpegCompress ? 100.0 - t.strength : std::abs(t.strength);
}

inline QueryGroup duplicate_group(const std::vector<EmbeddingSet>& database) {
    QueryGroup g{"duplicate", std::nullopt, {}};
    for (const auto& es : database) g.queries.push_back({es, QueryLabel::duplicate(es.case_id)});
    return g;
}

struct SplitVolumes {
    std::vector<Volume> a;
    std::vector<Volume> c;
};

inline SplitData embed_split(const SplitVolumes& vols, const ExperimentConfig& cfg) {
    SplitData d;
    for (const auto& v : vols.a) d.database.push_back(embed_volume(v, cfg.toy));
    d.duplicates = duplicate_group(d.database);
    for (const auto& t : cfg.transforms) {
        QueryGroup g{t.tag(), t, {}};
        for (const auto& v : vols.a) {
            EmbeddingSet es = embed_volume(make_near_duplicate(v, t, cfg.seed), cfg.toy);
            g.queries.push_back({std::move(es), QueryLabel::near_duplicate(v.case_id(), t.tag())});
        }
        d.near_duplicates.push_back(std::move(g));
    }
    for (const auto& v : vols.c) d.non_duplicates.push_back({embed_volume(v, cfg.toy), QueryLabel::non_duplicate()});
    return d;
}

inline std::filesystem::path resolve_entry(const std::filesystem::path& root, const ManifestEntry& e) {
    const auto p = root / e.file_path;
    if (!std::filesystem::exists(p)) throw Error(Errc::DataError, "manifest entry '" + e.case_id.str() + "': missing file " + p.string());
    return p;
}

inline ExperimentData load_toy_data(const ExperimentConfig& cfg) {
    SplitVolumes s1, s2;
    if (!cfg.data_root) {
        const auto volumes = generate_synthetic_dataset(cfg.synthetic.cases, cfg.synthetic.shape, cfg.seed);
        std::map<CaseId, Bucket> bucket_of;
        for (const auto& e : synthetic_manifest(volumes).entries) bucket_of.emplace(e.case_id, e.bucket);
        for (const auto& v : volumes) {
            switch (bucket_of.at(v.case_id())) {
                case Bucket::DB_1A: s1.a.push_back(v); break;
                case Bucket::NONDUP_1C: s1.c.push_back(v); break;
                case Bucket::DB_2A: s2.a.push_back(v); break;
                default: s2.c.push_back(v); break;
            }
        }
    } else {
        const auto manifest = load_manifest(*cfg.data_root / "manifest.csv");
        for (const auto& e : manifest.entries) {
            Volume v = minmax_scale(read_volume_file(resolve_entry(*cfg.data_root, e)));
            if (v.case_id() != e.case_id)
                throw Error(Errc::DataError, "volume file for '" + e.case_id.str() + "' carries case id '" +
                                                 v.case_id().str() + "'");
            switch (e.bucket) {
                case Bucket::DB_1A: s1.a.push_back(std::move(v)); break;
                case Bucket::NONDUP_1C: s1.c.push_back(std::move(v)); break;
                case Bucket::DB_2A: s2.a.push_back(std::move(v)); break;
                case Bucket::NONDUP_2C: s2.c.push_back(std::move(v)); break;
                case Bucket::NEAR_1B:
                case Bucket::NEAR_2B: break;  // near duplicates are synthesized from A
                case Bucket::UNASSIGNED:
                    throw Error(Errc::DataError, "manifest entry '" + e.case_id.str() + "' has no bucket");
            }
        }
    }
    for (const auto* s : {&s1, &s2})
        if (s->a.empty() || s->c.empty()) throw Error(Errc::DataError, "every split needs A and C cases");
    try {
        return {embed_split(s1, cfg), embed_split(s2, cfg)};
    } catch (const Error& e) {
        if (e.code() == Errc::DegenerateOutput) throw Error(Errc::DataError, e.what());
        throw;
    }
}

inline ExperimentData load_external_data(const ExperimentConfig& cfg) {
    const auto manifest = load_manifest(*cfg.data_root / "manifest.csv");
    ExperimentData data;
    std::map<std::string, std::size_t> group_index[2];
    for (const auto& e : manifest.entries) {
        EmbeddingSet es = read_embedding_file(resolve_entry(*cfg.data_root, e));
        if (es.case_id != e.case_id)
            throw Error(Errc::DataError, "embedding file for '" + e.case_id.str() + "' carries case id '" +
                                             es.case_id.str() + "'");
        const bool first = e.bucket == Bucket::DB_1A || e.bucket == Bucket::NEAR_1B || e.bucket == Bucket::NONDUP_1C;
        SplitData& split = first ? data.split1 : data.split2;
        switch (e.bucket) {
            case Bucket::DB_1A:
            case Bucket::DB_2A: split.database.push_back(std::move(es)); break;
            case Bucket::NONDUP_1C:
            case Bucket::NONDUP_2C: split.non_duplicates.push_back({std::move(es), QueryLabel::non_duplicate()}); break;
            case Bucket::NEAR_1B:
            case Bucket::NEAR_2B: {
                if (!e.label || e.label->kind() != QueryKind::NearDuplicate || !e.label->transform_tag())
                    throw Error(Errc::DataError, "near-duplicate entry '" + e.case_id.str() +
                                                     "' needs kind NearDuplicate, ground_truth and transform_tag");
                const auto& tag = *e.label->transform_tag();
                auto& index = group_index[first ? 0 : 1];
                auto [it, inserted] = index.try_emplace(tag, split.near_duplicates.size());
                if (inserted) {
                    std::optional<TransformSpec> spec;
                    try {
                        spec = parse_transform_tag(tag);
                    } catch (const Error&) {
                    }
                    split.near_duplicates.push_back({tag, spec, {}});
                }
                split.near_duplicates[it->second].queries.push_back({std::move(es), *e.label});
                break;
            }
            case Bucket::UNASSIGNED: break;
        }
    }
    for (auto* split : {&data.split1, &data.split2}) {
        if (split->database.empty() || split->non_duplicates.empty())
            throw Error(Errc::DataError, "every split needs DB and NONDUP entries");
        std::sort(split->database.begin(), split->database.end(),
                  [](const EmbeddingSet& a, const EmbeddingSet& b) { return a.case_id < b.case_id; });
        split->duplicates = duplicate_group(split->database);
        std::stable_sort(split->near_duplicates.begin(), split->near_duplicates.end(),
                         [](const QueryGroup& a, const QueryGroup& b) {
                             if (!a.transform || !b.transform) return a.transform.has_value() > b.transform.has_value();
                             if (a.transform->kind != b.transform->kind) return a.transform->kind < b.transform->kind;
                             return severity(*a.transform) < severity(*b.transform);
                         });
    }
    return data;
}

}  // namespace detail

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
    return cfg.embedder == EmbedderKind::Toy ? detail::load_toy_data(cfg) : detail::load_external_data(cfg);
}

// ---------------------------------------------------------------------------
// Scan

struct DuplicatePair {
    CaseId first;   // lexicographically smaller
    CaseId second;
    double c_k = 0.0;
};

/// Queries every case against the others (self excluded) and lists pairs
/// whose score reaches the threshold, each unordered pair once with the
/// higher of its two directional scores.
inline std::vector<DuplicatePair> scan_for_duplicates(const std::vector<EmbeddingSet>& db, const BackendSpec& backend,
                                                      std::uint32_t k, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error(Errc::InvalidArgument, "threshold must be in [0, 1]");
    const Index index = Index::build(db, backend);
    std::map<std::pair<CaseId, CaseId>, double> pairs;
    for (const auto& es : db) {
        const auto score = score_query(es, index, k, QueryLabel::non_duplicate(), true);
        if (!score.top1_case || !predicts_duplicate(score.c_k, threshold)) continue;
        auto key = std::minmax(es.case_id, *score.top1_case);
        auto [it, inserted] = pairs.try_emplace({key.first, key.second}, score.c_k);
        if (!inserted) it->second = std::max(it->second, score.c_k);
    }
    std::vector<DuplicatePair> out;
    for (const auto& [key, c] : pairs) out.push_back({key.first, key.second, c});
    return out;
}

/// Every original case of both splits (A then C); transformed copies are left out.
inline std::vector<EmbeddingSet> scan_population(const ExperimentData& data) {
    std::vector<EmbeddingSet> all;
    for (const auto* s : {&data.split1, &data.split2}) all.insert(all.end(), s->database.begin(), s->database.end());
    for (const auto* s : {&data.split1, &data.split2})
        for (const auto& q : s->non_duplicates) all.push_back(q.embeddings);
    return all;
}

inline ordered_json pairs_to_json(const std::vector<DuplicatePair>& pairs) {
    ordered_json arr = ordered_json::array();
    for (const auto& p : pairs) arr.push_back({{"query_case", p.first.str()}, {"matched_case", p.second.str()}, {"c_k", p.c_k}});
    return arr;
}

// ---------------------------------------------------------------------------
// Running

struct BenchmarkReport {
    ordered_json report;
    ordered_json timings;
};

namespace detail {

class PhaseTimer {
public:
    explicit PhaseTimer(ordered_json& sink) : sink_(sink) {
        if (sink_.is_null()) sink_ = ordered_json::object();
    }
    template <typename F>
    auto run(const std::string& phase, F&& f) {
        const auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            record(phase, start);
        } else {
            auto result = f();
            record(phase, start);
            return result;
        }
    }

private:
    void record(const std::string& phase, std::chrono::steady_clock::time_point start) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        sink_[phase] = sink_.value(phase, 0.0) + secs;
    }
    ordered_json& sink_;
};

/// Histograms of one query group, computed once and re-scored for every k.
struct ScoredGroup {
    std::string name;
    std::optional<TransformSpec> transform;
    std::vector<std::vector<QueryScore>> by_k;  // parallel to k_values
};

inline ScoredGroup score_group(const std::string& name, const std::optional<TransformSpec>& transform,
                               const std::vector<LabeledQuery>& queries, const Index& index,
                               const std::vector<std::uint32_t>& k_values) {
    ScoredGroup g{name, transform, std::vector<std::vector<QueryScore>>(k_values.size())};
    for (const auto& q : queries) {
        const auto h = case_histogram(q.embeddings, index, false);
        double previous = -1.0;
        for (std::size_t i = 0; i < k_values.size(); ++i) {
            auto s = score_from_histogram(q.embeddings.case_id, h, k_values[i], q.label);
            if (s.c_k < previous)
                throw Error(Errc::DataError, "normalized count decreased with k for query '" + q.embeddings.case_id.str() + "'");
            previous = s.c_k;
            g.by_k[i].push_back(std::move(s));
        }
    }
    return g;
}

struct ScoredSplit {
    std::vector<ScoredGroup> positives;  // duplicates first, then near-duplicate groups
    ScoredGroup negatives;
};

inline ScoredSplit score_split(const SplitData& split, const Index& index, const std::vector<std::uint32_t>& k_values) {
    ScoredSplit out{{}, score_group("non_duplicate", std::nullopt, split.non_duplicates, index, k_values)};
    out.positives.push_back(score_group(split.duplicates.name, std::nullopt, split.duplicates.queries, index, k_values));
    for (const auto& g : split.near_duplicates)
        out.positives.push_back(score_group(g.name, g.transform, g.queries, index, k_values));
    return out;
}

inline std::vector<QueryScore> combined(const ScoredGroup& pos, const ScoredGroup& neg, std::size_t ki) {
    std::vector<QueryScore> all = pos.by_k[ki];
    all.insert(all.end(), neg.by_k[ki].begin(), neg.by_k[ki].end());
    return all;
}

inline std::vector<std::size_t> calibration_members(const ScoredSplit& split, CalibrationRule rule) {
    std::vector<std::size_t> members{0};  // the duplicate set
    if (rule == CalibrationRule::DuplicateOnly) return members;
    std::map<int, std::size_t> weakest;  // transform kind -> group index
    for (std::size_t i = 1; i < split.positives.size(); ++i) {
        const auto& g = split.positives[i];
        if (g.by_k.front().empty()) continue;
        if (rule == CalibrationRule::All || !g.transform) {
            members.push_back(i);
            continue;
        }
        const int kind = static_cast<int>(g.transform->kind);
        auto [it, inserted] = weakest.try_emplace(kind, i);
        if (!inserted && severity(*g.transform) < severity(*split.positives[it->second].transform)) it->second = i;
    }
    for (const auto& [_, i] : weakest) members.push_back(i);
    std::sort(members.begin() + 1, members.end());
    return members;
}

inline ordered_json metrics_to_json(const ScoredGroup& g, const StageMetrics& m) {
    ordered_json j;
    j["set"] = g.name;
    j["transform"] = g.transform ? ordered_json(std::string(transform_kind_name(g.transform->kind))) : ordered_json(nullptr);
    j["strength"] = g.transform ? ordered_json(g.transform->strength) : ordered_json(nullptr);
    j["queries"] = g.by_k.front().size();
    j["auc"] = m.auc ? ordered_json(*m.auc) : ordered_json(nullptr);
    j["threshold"] = m.threshold;
    j["stage1"] = {{"sensitivity", m.stage1_sensitivity}, {"specificity", m.stage1_specificity}, {"tp", m.stage1.tp},
                   {"fp", m.stage1.fp}, {"tn", m.stage1.tn}, {"fn", m.stage1.fn}};
    j["stage2"] = {{"sensitivity", m.stage2_sensitivity}, {"spec_stage2_strict", m.stage2_spec_strict},
                   {"spec_stage2_folded", m.stage2_spec_folded}, {"tp", m.stage2.tp}, {"fp", m.stage2.fp},
                   {"tn", m.stage2.tn}, {"fn", m.stage2.fn}, {"id_mismatches", m.id_mismatches}};
    return j;
}

inline ordered_json calibration_to_json(const CalibrationResult& c) {
    ordered_json j;
    j["sets"] = c.set_names;
    j["candidate_thresholds"] = c.candidate_thresholds;
    j["se"] = c.se_matrix;
    j["sp"] = c.sp_matrix;
    j["mean_se_plus_sp"] = c.mean_scores;
    j["chosen_set_index"] = c.chosen_set_index;
    j["t_opt"] = c.t_opt;
    return j;
}

}  // namespace detail

/// Calibrates on split 1 and evaluates split 2 with an already-built index
/// pair; used directly to re-run evaluation from index snapshots.
inline ordered_json evaluate_backend(const ExperimentConfig& cfg, const ExperimentData& data, const Index& index1,
                                     const Index& index2, ordered_json* timings = nullptr) {
    ordered_json scratch;
    detail::PhaseTimer timer(timings ? *timings : scratch);
    const auto s1 = timer.run("score_split1", [&] { return detail::score_split(data.split1, index1, cfg.k_values); });
    const auto s2 = timer.run("score_split2", [&] { return detail::score_split(data.split2, index2, cfg.k_values); });

    ordered_json per_k = ordered_json::array();
    for (std::size_t ki = 0; ki < cfg.k_values.size(); ++ki) {
        ordered_json entry;
        entry["k"] = cfg.k_values[ki];
        double threshold = 0.0;
        if (cfg.threshold_override) {
            threshold = *cfg.threshold_override;
            entry["threshold_source"] = "override";
            entry["calibration"] = nullptr;
        } else {
            const auto members = detail::calibration_members(s1, cfg.calibration_sets);
            std::vector<ScoredSet> sets;
            for (const auto i : members)
                sets.push_back(to_scored_set(s1.positives[i].name, detail::combined(s1.positives[i], s1.negatives, ki)));
            const auto cal = timer.run("calibrate", [&] { return select_optimal_threshold(sets); });
            threshold = cal.t_opt;
            entry["threshold_source"] = "calibrated";
            entry["calibration"] = detail::calibration_to_json(cal);
        }
        entry["threshold"] = threshold;
        timer.run("evaluate", [&] {
            for (const auto* split : {&s1, &s2}) {
                ordered_json rows = ordered_json::array();
                for (const auto& g : split->positives)
                    rows.push_back(detail::metrics_to_json(g, stage2_confusion(detail::combined(g, split->negatives, ki), threshold)));
                entry[split == &s1 ? "split1" : "split2"] = rows;
            }
        });
        per_k.push_back(entry);
    }
    return per_k;
}

inline BenchmarkReport run_experiment(const ExperimentConfig& cfg) {
    if (cfg.backends.empty()) throw Error(Errc::ConfigError, "no backends configured");
    if (cfg.k_values.empty()) throw Error(Errc::ConfigError, "k_values must be non-empty");
    BenchmarkReport out;
    out.timings = ordered_json::object();
    detail::PhaseTimer timer(out.timings);

    const ExperimentData data = timer.run("load_and_embed", [&] { return load_experiment_data(cfg); });

    ordered_json& r = out.report;
    r["report_version"] = kReportVersion;
    r["config"] = config_to_json(cfg);
    const auto summary = [](const SplitData& s) {
        ordered_json sets = ordered_json::array();
        for (const auto& g : s.near_duplicates) sets.push_back(g.name);
        return ordered_json{{"database_cases", s.database.size()},
                            {"non_duplicate_queries", s.non_duplicates.size()},
                            {"near_duplicate_sets", sets}};
    };
    r["data"] = {{"split1", summary(data.split1)}, {"split2", summary(data.split2)}};

    ordered_json results = ordered_json::array();
    for (const auto& backend : cfg.backends) {
        ordered_json backend_timings = ordered_json::object();
        detail::PhaseTimer bt(backend_timings);
        const auto index1 = bt.run("build_index", [&] { return Index::build(data.split1.database, backend); });
        const auto index2 = bt.run("build_index", [&] { return Index::build(data.split2.database, backend); });
        ordered_json entry;
        entry["backend"] = detail::backend_to_json(backend);
        entry["per_k"] = evaluate_backend(cfg, data, index1, index2, &backend_timings);
        if (cfg.scan.enabled) {
            const auto all = scan_population(data);
            entry["scan"] = bt.run("scan", [&] {
                return pairs_to_json(scan_for_duplicates(all, backend, cfg.scan.k, cfg.scan.threshold));
            });
        }
        results.push_back(entry);
        out.timings["backend:" + backend_name(backend)] = backend_timings;
    }
    r["results"] = results;
    return out;
}

/// Writes `report` to path and timings next to it as <path>.timings.json.
inline void write_report(const BenchmarkReport& rep, const std::filesystem::path& path, bool with_timings = true) {
    const auto write = [](const std::filesystem::path& p, const ordered_json& j) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(Errc::IoError, "cannot write '" + p.string() + "'");
        out << j.dump(2) << '\n';
        if (!out) throw Error(Errc::IoError, "write failed for '" + p.string() + "'");
    };
    write(path, rep.report);
    if (with_timings) write(std::filesystem::path(path.string() + ".timings.json"), rep.timings);
}

}  // namespace dedup3d

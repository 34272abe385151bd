// dedup3d command-line front end.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 data or runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dedup3d/dedup3d.hpp"

namespace fs = std::filesystem;
using dedup3d::Errc;
using dedup3d::Error;
using nlohmann::ordered_json;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> backend;
    std::optional<std::uint32_t> k;
    std::optional<double> threshold;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_threshold = true) {
    cmd->add_option("--config", o.config, "experiment config (JSON)");
    cmd->add_option("--seed", o.seed, "experiment seed");
    cmd->add_option("--backend", o.backend, "index backend")->check(CLI::IsMember({"exact", "lsh", "hnsw"}));
    cmd->add_option("--k", o.k, "evaluate a single k")->check(CLI::PositiveNumber);
    if (with_threshold) cmd->add_option("--threshold", o.threshold, "fixed decision threshold in [0, 1]");
    cmd->add_option("--out", o.out, "output path");
}

enum class ThresholdTarget { Override, Scan };

/// Reads the config file (if any), applies command-line overrides and parses it.
dedup3d::ExperimentConfig load_config(const CommonOptions& o, ThresholdTarget target = ThresholdTarget::Override) {
    ordered_json j = ordered_json::object();
    fs::path base;
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) throw Error(Errc::ConfigError, "cannot open config '" + o.config + "'");
        try {
            j = ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::ConfigError, "config '" + o.config + "': " + e.what());
        }
        if (!j.is_object()) throw Error(Errc::ConfigError, "config must be a JSON object");
        base = fs::absolute(o.config).parent_path();
    }
    if (o.seed) j["seed"] = *o.seed;
    if (o.backend) j["backends"] = ordered_json::array({*o.backend});
    if (o.k) j["k_values"] = ordered_json::array({*o.k});
    if (o.threshold) {
        if (target == ThresholdTarget::Override) {
            j["threshold_override"] = *o.threshold;
        } else {
            if (!j.contains("scan") || !j["scan"].is_object()) j["scan"] = ordered_json::object();
            j["scan"]["threshold"] = *o.threshold;
        }
    }
    return dedup3d::parse_experiment_config(j, base);
}

void emit(const ordered_json& j, const std::string& out) {
    if (out.empty()) {
        std::cout << j.dump(2) << '\n';
        return;
    }
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::IoError, "cannot write '" + out + "'");
    f << j.dump(2) << '\n';
}

fs::path require_out(const CommonOptions& o, const char* what) {
    if (o.out.empty()) throw Error(Errc::ConfigError, std::string("--out is required for ") + what);
    return o.out;
}

struct IndexPair {
    dedup3d::Index split1, split2;
};

/// Loads split1.d3ix / split2.d3ix from `dir`, or builds both from the data.
IndexPair indices_for(const dedup3d::ExperimentData& data, const dedup3d::BackendSpec& backend, const std::string& dir) {
    if (!dir.empty())
        return {dedup3d::Index::load(fs::path(dir) / "split1.d3ix"), dedup3d::Index::load(fs::path(dir) / "split2.d3ix")};
    return {dedup3d::Index::build(data.split1.database, backend), dedup3d::Index::build(data.split2.database, backend)};
}

// -- subcommands -----------------------------------------------------------

int cmd_synthesize(const CommonOptions& o, const std::string& input, const std::string& transform) {
    const auto cfg = load_config(o);
    if (!transform.empty()) {
        if (input.empty()) throw Error(Errc::ConfigError, "--transform needs --input");
        const auto spec = dedup3d::parse_transform_tag(transform);
        const auto v = dedup3d::read_volume_file(input);
        dedup3d::write_volume_file(dedup3d::make_near_duplicate(dedup3d::minmax_scale(v), spec, cfg.seed),
                                   require_out(o, "synthesize"));
        return 0;
    }
    const fs::path dir = require_out(o, "synthesize");
    fs::create_directories(dir);
    const auto volumes = dedup3d::generate_synthetic_dataset(cfg.synthetic.cases, cfg.synthetic.shape, cfg.seed);
    const auto manifest = dedup3d::synthetic_manifest(volumes);
    for (const auto& v : volumes) dedup3d::write_volume_file(v, dir / (v.case_id().str() + ".mvol"));
    dedup3d::save_manifest(manifest, dir / "manifest.csv");
    std::cerr << "wrote " << volumes.size() << " volumes to " << dir.string() << '\n';
    return 0;
}

/// Toy-embeds a volume data root into an external-embedding data root,
/// including the configured near-duplicate copies of every A case.
int cmd_embed(const CommonOptions& o, const std::string& data) {
    const auto cfg = load_config(o);
    const fs::path src = data.empty() ? (cfg.data_root ? *cfg.data_root : fs::path()) : fs::path(data);
    if (src.empty()) throw Error(Errc::ConfigError, "embed needs --data or data_root");
    const fs::path dir = require_out(o, "embed");
    fs::create_directories(dir);
    const auto in = dedup3d::load_manifest(src / "manifest.csv");
    dedup3d::Manifest out;
    const auto write = [&](const dedup3d::Volume& v, dedup3d::Bucket bucket, std::optional<dedup3d::QueryLabel> label,
                           const std::string& task) {
        const auto es = dedup3d::embed_volume(v, cfg.toy);
        const std::string file = es.case_id.str() + ".medb";
        dedup3d::write_embedding_file(es, dir / file);
        out.entries.push_back({es.case_id, file, bucket, std::move(label), task});
    };
    for (const auto& e : in.entries) {
        if (e.bucket == dedup3d::Bucket::NEAR_1B || e.bucket == dedup3d::Bucket::NEAR_2B) continue;
        if (e.bucket == dedup3d::Bucket::UNASSIGNED)
            throw Error(Errc::DataError, "manifest entry '" + e.case_id.str() + "' has no bucket");
        const auto v = dedup3d::minmax_scale(dedup3d::read_volume_file(src / e.file_path));
        write(v, e.bucket, e.label, e.task);
        const bool is_a = e.bucket == dedup3d::Bucket::DB_1A || e.bucket == dedup3d::Bucket::DB_2A;
        if (!is_a) continue;
        const auto near = e.bucket == dedup3d::Bucket::DB_1A ? dedup3d::Bucket::NEAR_1B : dedup3d::Bucket::NEAR_2B;
        for (const auto& t : cfg.transforms)
            write(dedup3d::make_near_duplicate(v, t, cfg.seed), near, dedup3d::QueryLabel::near_duplicate(e.case_id, t.tag()),
                  e.task);
    }
    dedup3d::save_manifest(out, dir / "manifest.csv");
    std::cerr << "wrote " << out.entries.size() << " embedding files to " << dir.string() << '\n';
    return 0;
}

int cmd_index(const CommonOptions& o) {
    const auto cfg = load_config(o);
    const fs::path dir = require_out(o, "index");
    fs::create_directories(dir);
    const auto data = dedup3d::load_experiment_data(cfg);
    const auto& backend = cfg.backends.front();
    dedup3d::Index::build(data.split1.database, backend).save(dir / "split1.d3ix");
    dedup3d::Index::build(data.split2.database, backend).save(dir / "split2.d3ix");
    return 0;
}

ordered_json backend_evaluation(const dedup3d::ExperimentConfig& cfg, const std::string& index_dir) {
    const auto data = dedup3d::load_experiment_data(cfg);
    const auto& backend = cfg.backends.front();
    const auto idx = indices_for(data, backend, index_dir);
    ordered_json j;
    j["report_version"] = dedup3d::kReportVersion;
    j["config"] = dedup3d::config_to_json(cfg);
    j["backend"] = dedup3d::detail::backend_to_json(idx.split1.backend());
    j["per_k"] = dedup3d::evaluate_backend(cfg, data, idx.split1, idx.split2);
    return j;
}

int cmd_calibrate(const CommonOptions& o, const std::string& index_dir) {
    auto cfg = load_config(o);
    cfg.threshold_override.reset();
    auto j = backend_evaluation(cfg, index_dir);
    for (auto& pk : j["per_k"]) {
        pk.erase("split1");
        pk.erase("split2");
    }
    emit(j, o.out);
    return 0;
}

int cmd_evaluate(const CommonOptions& o, const std::string& index_dir) {
    emit(backend_evaluation(load_config(o), index_dir), o.out);
    return 0;
}

int cmd_run(const CommonOptions& o) {
    const auto cfg = load_config(o);
    const auto rep = dedup3d::run_experiment(cfg);
    if (o.out.empty())
        std::cout << rep.report.dump(2) << '\n';
    else
        dedup3d::write_report(rep, o.out);
    return 0;
}

int cmd_scan(const CommonOptions& o) {
    const auto cfg = load_config(o, ThresholdTarget::Scan);
    const auto data = dedup3d::load_experiment_data(cfg);
    const auto& backend = cfg.backends.front();
    ordered_json j;
    j["report_version"] = dedup3d::kReportVersion;
    j["backend"] = dedup3d::detail::backend_to_json(backend);
    j["k"] = cfg.scan.k;
    j["threshold"] = cfg.scan.threshold;
    j["pairs"] = dedup3d::pairs_to_json(
        dedup3d::scan_for_duplicates(dedup3d::scan_population(data), backend, cfg.scan.k, cfg.scan.threshold));
    emit(j, o.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Duplicate and near-duplicate detection for 3D medical volumes"};
    app.require_subcommand(1);

    CommonOptions o;
    std::string input, transform, data, index_dir;

    auto* synth = app.add_subcommand("synthesize", "generate synthetic volumes, or transform one volume");
    add_common(synth, o, false);
    synth->add_option("--input", input, "volume (.mvol) to transform");
    synth->add_option("--transform", transform, "transform tag, e.g. crop:0.1");

    auto* embed = app.add_subcommand("embed", "toy-embed a volume directory into .medb files");
    add_common(embed, o, false);
    embed->add_option("--data", data, "directory with manifest.csv and .mvol files");

    auto* index = app.add_subcommand("index", "build and snapshot both split indices");
    add_common(index, o, false);

    auto* calibrate = app.add_subcommand("calibrate", "select the decision threshold on split 1");
    add_common(calibrate, o, false);
    calibrate->add_option("--index", index_dir, "directory with index snapshots");

    auto* evaluate = app.add_subcommand("evaluate", "calibrate and evaluate one backend");
    add_common(evaluate, o);
    evaluate->add_option("--index", index_dir, "directory with index snapshots");

    auto* run = app.add_subcommand("run", "full experiment");
    add_common(run, o);

    auto* scan = app.add_subcommand("scan", "list likely duplicate pairs among all cases");
    add_common(scan, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synthesize(o, input, transform);
        if (embed->parsed()) return cmd_embed(o, data);
        if (index->parsed()) return cmd_index(o);
        if (calibrate->parsed()) return cmd_calibrate(o, index_dir);
        if (evaluate->parsed()) return cmd_evaluate(o, index_dir);
        if (run->parsed()) return cmd_run(o);
        if (scan->parsed()) return cmd_scan(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code() == Errc::ConfigError ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

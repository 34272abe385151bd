#pragma once

// Euclidean nearest-neighbour index over slice embeddings with three
// interchangeable backends:
//
//   Exact  brute-force scan; the reference every other backend is measured against.
//   Lsh    random-hyperplane signatures, one bucket map per table; candidates
//          are re-ranked by exact distance.
//   Hnsw   layered navigable small-world graph (greedy descent through the
//          upper layers, beam search with ef candidates on layer 0).
//
// Items are stored sorted by (case_id, slice_index), so the internal item id
// order is the tie-break order. Returned distances are always exact.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "dedup3d/binary_io.hpp"
#include "dedup3d/core.hpp"
#include "dedup3d/random.hpp"

namespace dedup3d {

struct IndexedItem {
    CaseId case_id;
    std::uint32_t slice_index = 0;
    std::vector<float> vector;
};

struct SliceHit {
    CaseId case_id;
    std::uint32_t slice_index = 0;
    double distance = 0.0;

    friend bool operator==(const SliceHit&, const SliceHit&) = default;
};

struct ExactParams {
    friend bool operator==(const ExactParams&, const ExactParams&) = default;
};

struct LshParams {
    std::uint32_t num_tables = 8;
    std::uint32_t bits_per_table = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_tables == 0) throw Error(Errc::InvalidArgument, "lsh: num_tables must be positive");
        if (bits_per_table == 0 || bits_per_table > 64)
            throw Error(Errc::InvalidArgument, "lsh: bits_per_table must be in [1, 64]");
    }
    friend bool operator==(const LshParams&, const LshParams&) = default;
};

struct HnswParams {
    std::uint32_t m = 16;
    std::uint32_t ef_construction = 200;
    std::uint32_t ef_search = 64;
    std::uint64_t seed = 0;
    std::optional<double> level_lambda;  // defaults to 1 / ln(m)

    double lambda() const { return level_lambda.value_or(1.0 / std::log(static_cast<double>(m))); }

    void validate() const {
        if (m < 2) throw Error(Errc::InvalidArgument, "hnsw: m must be at least 2");
        if (ef_search == 0) throw Error(Errc::InvalidArgument, "hnsw: ef_search must be positive");
        if (ef_construction < m) throw Error(Errc::InvalidArgument, "hnsw: ef_construction must be >= m");
        if (level_lambda && !(*level_lambda >= 0.0 && std::isfinite(*level_lambda)))
            throw Error(Errc::InvalidArgument, "hnsw: level_lambda must be finite and non-negative");
    }
    friend bool operator==(const HnswParams&, const HnswParams&) = default;
};

using BackendSpec = std::variant<ExactParams, LshParams, HnswParams>;

inline std::string backend_name(const BackendSpec& spec) {
    switch (spec.index()) {
        case 0: return "exact";
        case 1: return "lsh";
        default: return "hnsw";
    }
}

namespace detail {

/// (squared distance, item id); lexicographic order is the result order.
using Candidate = std::pair<double, std::uint32_t>;

inline constexpr std::int64_t kNoExclusion = -1;

struct VectorStore {
    std::size_t dim = 0;
    std::vector<std::string> case_names;  // sorted, unique
    std::vector<std::uint32_t> case_of;
    std::vector<std::uint32_t> slice_of;
    std::vector<float> data;

    std::size_t size() const noexcept { return case_of.size(); }
    const float* row(std::size_t i) const noexcept { return data.data() + i * dim; }

    double dist2(const float* a, const float* b) const noexcept {
        double acc = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
            acc += d * d;
        }
        return acc;
    }

    bool allowed(std::uint32_t id, std::int64_t excluded_case) const noexcept {
        return static_cast<std::int64_t>(case_of[id]) != excluded_case;
    }

    std::int64_t case_index(const CaseId& id) const {
        const auto it = std::lower_bound(case_names.begin(), case_names.end(), id.str());
        if (it == case_names.end() || *it != id.str()) return kNoExclusion;
        return it - case_names.begin();
    }

    static VectorStore from_items(std::vector<IndexedItem> items) {
        if (items.empty()) throw Error(Errc::EmptyDatabase, "cannot build an index without items");
        const std::size_t dim = items.front().vector.size();
        if (dim == 0) throw Error(Errc::DimensionMismatch, "item vectors must be non-empty");
        for (const auto& it : items) {
            if (it.vector.size() != dim)
                throw Error(Errc::DimensionMismatch, "item " + it.case_id.str() + "/" + std::to_string(it.slice_index) +
                                                         " has dim " + std::to_string(it.vector.size()) + ", expected " +
                                                         std::to_string(dim));
            for (const float x : it.vector)
                if (!std::isfinite(x)) throw Error(Errc::NonFiniteValue, "item vector has a non-finite component");
        }
        std::sort(items.begin(), items.end(), [](const IndexedItem& a, const IndexedItem& b) {
            return std::tie(a.case_id, a.slice_index) < std::tie(b.case_id, b.slice_index);
        });
        VectorStore s;
        s.dim = dim;
        s.data.reserve(items.size() * dim);
        for (std::size_t i = 0; i < items.size(); ++i) {
            const auto& it = items[i];
            if (i > 0 && items[i - 1].case_id == it.case_id && items[i - 1].slice_index == it.slice_index)
                throw Error(Errc::DuplicateCaseId, "item " + it.case_id.str() + "/" + std::to_string(it.slice_index) +
                                                       " inserted twice");
            if (s.case_names.empty() || s.case_names.back() != it.case_id.str()) s.case_names.push_back(it.case_id.str());
            s.case_of.push_back(static_cast<std::uint32_t>(s.case_names.size() - 1));
            s.slice_of.push_back(it.slice_index);
            s.data.insert(s.data.end(), it.vector.begin(), it.vector.end());
        }
        return s;
    }
};

inline std::vector<Candidate> exact_search(const VectorStore& s, const float* q, std::size_t k, std::int64_t excluded) {
    std::vector<Candidate> all;
    all.reserve(s.size());
    for (std::uint32_t i = 0; i < s.size(); ++i)
        if (s.allowed(i, excluded)) all.emplace_back(s.dist2(q, s.row(i)), i);
    if (k < all.size()) {
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
        all.resize(k);
    } else {
        std::sort(all.begin(), all.end());
    }
    return all;
}

inline std::vector<Candidate> rerank(const VectorStore& s, const float* q, const std::vector<std::uint32_t>& ids,
                                     std::size_t k) {
    std::vector<Candidate> out;
    out.reserve(ids.size());
    for (const auto id : ids) out.emplace_back(s.dist2(q, s.row(id)), id);
    std::sort(out.begin(), out.end());
    if (out.size() > k) out.resize(k);
    return out;
}

class LshBackend {
public:
    LshBackend(const VectorStore& store, LshParams params) : params_(params), dim_(store.dim) {
        params_.validate();
        planes_.resize(params_.num_tables);
        // Table t draws its hyperplanes from its own stream, so the first L
        // tables are identical whatever num_tables is.
        for (std::uint32_t t = 0; t < params_.num_tables; ++t) {
            Rng rng(derive_seed(params_.seed, t));
            planes_[t].resize(std::size_t{params_.bits_per_table} * dim_);
            for (auto& w : planes_[t]) w = rng.normal();
        }
        tables_.resize(params_.num_tables);
        for (std::uint32_t i = 0; i < store.size(); ++i)
            for (std::uint32_t t = 0; t < params_.num_tables; ++t) tables_[t][signature(t, store.row(i))].push_back(i);
    }

    const LshParams& params() const noexcept { return params_; }

    /// Bit b is set iff the dot product with hyperplane b is positive.
    std::uint64_t signature(std::size_t table, const float* v) const {
        std::uint64_t sig = 0;
        const double* plane = planes_[table].data();
        for (std::uint32_t b = 0; b < params_.bits_per_table; ++b, plane += dim_) {
            double dot = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) dot += plane[j] * static_cast<double>(v[j]);
            if (dot > 0.0) sig |= std::uint64_t{1} << b;
        }
        return sig;
    }

    /// Bucket union across tables; falls back to Hamming-1 probes, then to every allowed item.
    std::vector<std::uint32_t> candidates(const VectorStore& store, const float* q, std::int64_t excluded) const {
        std::vector<std::uint64_t> sigs(params_.num_tables);
        for (std::uint32_t t = 0; t < params_.num_tables; ++t) sigs[t] = signature(t, q);

        std::vector<std::uint32_t> out;
        const auto collect = [&](std::uint32_t t, std::uint64_t sig) {
            const auto it = tables_[t].find(sig);
            if (it == tables_[t].end()) return;
            for (const auto id : it->second)
                if (store.allowed(id, excluded)) out.push_back(id);
        };
        for (std::uint32_t t = 0; t < params_.num_tables; ++t) collect(t, sigs[t]);
        if (out.empty())
            for (std::uint32_t t = 0; t < params_.num_tables; ++t)
                for (std::uint32_t b = 0; b < params_.bits_per_table; ++b) collect(t, sigs[t] ^ (std::uint64_t{1} << b));
        if (out.empty()) {
            for (std::uint32_t i = 0; i < store.size(); ++i)
                if (store.allowed(i, excluded)) out.push_back(i);
            return out;
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

private:
    LshParams params_;
    std::size_t dim_;
    std::vector<std::vector<double>> planes_;
    std::vector<std::unordered_map<std::uint64_t, std::vector<std::uint32_t>>> tables_;
};

class HnswBackend {
public:
    using Links = std::vector<std::vector<std::uint32_t>>;  // per layer

    HnswBackend(const VectorStore& store, HnswParams params) : params_(params) {
        params_.validate();
        const double lambda = params_.lambda();
        Rng rng(params_.seed);
        links_.resize(store.size());
        for (std::uint32_t id = 0; id < store.size(); ++id) {
            const double u = rng.uniform_open_low();
            const int level = static_cast<int>(std::min(std::floor(-std::log(u) * lambda), 64.0));
            insert(store, id, level);
        }
    }

    /// Rebuilds from a snapshot; the caller vouches for consistency with the store.
    HnswBackend(HnswParams params, std::vector<Links> links, std::uint32_t entry, int max_level)
        : params_(params), links_(std::move(links)), entry_(entry), max_level_(max_level) {}

    const HnswParams& params() const noexcept { return params_; }
    const std::vector<Links>& links() const noexcept { return links_; }
    std::uint32_t entry_point() const noexcept { return entry_; }
    int max_level() const noexcept { return max_level_; }

    std::vector<Candidate> search(const VectorStore& store, const float* q, std::size_t k, std::int64_t excluded) const {
        std::uint32_t cur = entry_;
        double cur_d = store.dist2(q, store.row(cur));
        for (int layer = max_level_; layer > 0; --layer) cur = greedy_step(store, q, cur, cur_d, layer);
        const std::size_t ef = std::max<std::size_t>(params_.ef_search, k);
        auto found = search_layer(store, q, {Candidate{cur_d, cur}}, ef, 0, excluded);
        if (found.size() > k) found.resize(k);
        return found;
    }

private:
    std::size_t max_links(int layer) const { return layer == 0 ? 2 * std::size_t{params_.m} : params_.m; }

    std::uint32_t greedy_step(const VectorStore& store, const float* q, std::uint32_t cur, double& cur_d, int layer) const {
        bool changed = true;
        while (changed) {
            changed = false;
            for (const auto nb : links_[cur][static_cast<std::size_t>(layer)]) {
                const double d = store.dist2(q, store.row(nb));
                if (Candidate{d, nb} < Candidate{cur_d, cur}) {
                    cur = nb;
                    cur_d = d;
                    changed = true;
                }
            }
        }
        return cur;
    }

    /// Beam search on one layer. Only allowed items enter the result set, but
    /// every item is traversable; with an exclusion the search does not stop
    /// until the result set is full.
    std::vector<Candidate> search_layer(const VectorStore& store, const float* q, const std::vector<Candidate>& entry,
                                        std::size_t ef, int layer, std::int64_t excluded) const {
        std::vector<char> visited(store.size(), 0);
        std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;
        std::priority_queue<Candidate> best;
        for (const auto& c : entry) {
            visited[c.second] = 1;
            frontier.push(c);
            if (store.allowed(c.second, excluded)) best.push(c);
        }
        const bool filtering = excluded != kNoExclusion;
        while (!frontier.empty()) {
            const Candidate cur = frontier.top();
            if (!best.empty() && cur > best.top() && (best.size() >= ef || !filtering)) break;
            frontier.pop();
            for (const auto nb : links_[cur.second][static_cast<std::size_t>(layer)]) {
                if (visited[nb]) continue;
                visited[nb] = 1;
                const Candidate c{store.dist2(q, store.row(nb)), nb};
                if (best.size() < ef || c < best.top()) {
                    frontier.push(c);
                    if (store.allowed(nb, excluded)) {
                        best.push(c);
                        if (best.size() > ef) best.pop();
                    }
                }
            }
        }
        std::vector<Candidate> out;
        out.reserve(best.size());
        while (!best.empty()) {
            out.push_back(best.top());
            best.pop();
        }
        std::reverse(out.begin(), out.end());
        return out;
    }

    /// Keeps a candidate only if it is closer to the base point than to every
    /// neighbour already kept. `sorted` must be in ascending order.
    std::vector<std::uint32_t> select_neighbors(const VectorStore& store, const std::vector<Candidate>& sorted,
                                                std::size_t m) const {
        std::vector<std::uint32_t> kept;
        if (sorted.size() < m) {
            for (const auto& c : sorted) kept.push_back(c.second);
            return kept;
        }
        for (const auto& c : sorted) {
            if (kept.size() >= m) break;
            bool good = true;
            for (const auto r : kept)
                if (store.dist2(store.row(c.second), store.row(r)) < c.first) {
                    good = false;
                    break;
                }
            if (good) kept.push_back(c.second);
        }
        return kept;
    }

    void insert(const VectorStore& store, std::uint32_t id, int level) {
        links_[id].assign(static_cast<std::size_t>(level) + 1, {});
        if (id == 0) {
            entry_ = 0;
            max_level_ = level;
            return;
        }
        const float* q = store.row(id);
        std::uint32_t cur = entry_;
        double cur_d = store.dist2(q, store.row(cur));
        for (int layer = max_level_; layer > level; --layer) cur = greedy_step(store, q, cur, cur_d, layer);

        for (int layer = std::min(level, max_level_); layer >= 0; --layer) {
            const auto found = search_layer(store, q, {Candidate{cur_d, cur}}, params_.ef_construction, layer, kNoExclusion);
            const auto chosen = select_neighbors(store, found, params_.m);
            const auto L = static_cast<std::size_t>(layer);
            links_[id][L] = chosen;
            for (const auto nb : chosen) {
                auto& nb_links = links_[nb][L];
                nb_links.push_back(id);
                if (nb_links.size() > max_links(layer)) {
                    std::vector<Candidate> pool;
                    pool.reserve(nb_links.size());
                    for (const auto other : nb_links) pool.emplace_back(store.dist2(store.row(nb), store.row(other)), other);
                    std::sort(pool.begin(), pool.end());
                    nb_links = select_neighbors(store, pool, max_links(layer));
                }
            }
            cur = found.front().second;
            cur_d = found.front().first;
        }
        if (level > max_level_) {
            entry_ = id;
            max_level_ = level;
        }
    }

    HnswParams params_;
    std::vector<Links> links_;
    std::uint32_t entry_ = 0;
    int max_level_ = 0;
};

}  // namespace detail

/// Immutable after build; concurrent searches are safe.
class Index {
public:
    static Index build(std::vector<IndexedItem> items, const BackendSpec& backend) {
        Index index;
        index.spec_ = backend;
        index.store_ = detail::VectorStore::from_items(std::move(items));
        index.init_backend();
        return index;
    }

    /// Flattens whole cases into items; a repeated case id is rejected.
    static Index build(const std::vector<EmbeddingSet>& sets, const BackendSpec& backend) {
        std::vector<IndexedItem> items;
        std::set<CaseId> seen;
        for (const auto& es : sets) {
            validate_embedding_set(es);
            if (!seen.insert(es.case_id).second)
                throw Error(Errc::DuplicateCaseId, "case '" + es.case_id.str() + "' is already in the database");
            for (std::size_t s = 0; s < es.slice_count(); ++s)
                items.push_back({es.case_id, static_cast<std::uint32_t>(s), es.vectors[s]});
        }
        return build(std::move(items), backend);
    }

    std::size_t size() const noexcept { return store_.size(); }
    std::size_t dim() const noexcept { return store_.dim; }
    std::size_t case_count() const noexcept { return store_.case_names.size(); }
    const BackendSpec& backend() const noexcept { return spec_; }

    /// Up to k hits in ascending (distance, case_id, slice_index) order.
    /// Items of `exclude_case` are never returned.
    std::vector<SliceHit> search(std::span<const float> query, std::size_t k,
                                 const std::optional<CaseId>& exclude_case = std::nullopt) const {
        if (query.size() != store_.dim)
            throw Error(Errc::DimensionMismatch, "query has dim " + std::to_string(query.size()) + ", index has " +
                                                     std::to_string(store_.dim));
        if (k == 0) throw Error(Errc::InvalidArgument, "k must be positive");
        const std::int64_t excluded = exclude_case ? store_.case_index(*exclude_case) : detail::kNoExclusion;
        std::vector<detail::Candidate> found;
        if (lsh_)
            found = detail::rerank(store_, query.data(), lsh_->candidates(store_, query.data(), excluded), k);
        else if (hnsw_)
            found = hnsw_->search(store_, query.data(), k, excluded);
        else
            found = detail::exact_search(store_, query.data(), k, excluded);

        std::vector<SliceHit> hits;
        hits.reserve(found.size());
        for (const auto& [d2, id] : found)
            hits.push_back({CaseId(store_.case_names[store_.case_of[id]]), store_.slice_of[id], std::sqrt(d2)});
        return hits;
    }

    const detail::LshBackend* lsh() const noexcept { return lsh_ ? &*lsh_ : nullptr; }
    const detail::HnswBackend* hnsw() const noexcept { return hnsw_ ? &*hnsw_ : nullptr; }

    // -- snapshots ----------------------------------------------------------
    // "D3IX", u32 version, u8 backend, params, store, then the HNSW graph.
    // LSH tables are rebuilt from their seed on load.

    static constexpr std::uint32_t kSnapshotVersion = 1;

    std::vector<std::uint8_t> encode_snapshot() const {
        detail::ByteWriter w;
        w.raw("D3IX");
        w.u32(kSnapshotVersion);
        w.u8(static_cast<std::uint8_t>(spec_.index()));
        if (const auto* p = std::get_if<LshParams>(&spec_)) {
            w.u32(p->num_tables);
            w.u32(p->bits_per_table);
            w.u64(p->seed);
        } else if (const auto* h = std::get_if<HnswParams>(&spec_)) {
            w.u32(h->m);
            w.u32(h->ef_construction);
            w.u32(h->ef_search);
            w.u64(h->seed);
            w.u8(h->level_lambda.has_value());
            w.f64(h->level_lambda.value_or(0.0));
        }
        w.u32(static_cast<std::uint32_t>(store_.dim));
        w.u32(static_cast<std::uint32_t>(store_.case_names.size()));
        for (const auto& name : store_.case_names) w.str32(name);
        w.u32(static_cast<std::uint32_t>(store_.size()));
        for (std::size_t i = 0; i < store_.size(); ++i) {
            w.u32(store_.case_of[i]);
            w.u32(store_.slice_of[i]);
        }
        for (const float x : store_.data) w.f32(x);
        if (hnsw_) {
            w.u32(hnsw_->entry_point());
            w.u32(static_cast<std::uint32_t>(hnsw_->max_level()));
            for (const auto& per_layer : hnsw_->links()) {
                w.u32(static_cast<std::uint32_t>(per_layer.size()));
                for (const auto& nbs : per_layer) {
                    w.u32(static_cast<std::uint32_t>(nbs.size()));
                    for (const auto nb : nbs) w.u32(nb);
                }
            }
        }
        return w.bytes();
    }

    static Index decode_snapshot(std::span<const std::uint8_t> bytes) {
        if (bytes.size() < 4 || std::memcmp(bytes.data(), "D3IX", 4) != 0)
            throw Error(Errc::BadMagic, "not an index snapshot");
        detail::ByteReader r(bytes, Errc::TruncatedPayload);
        r.raw(4);
        if (const auto v = r.u32(); v != kSnapshotVersion)
            throw Error(Errc::UnsupportedVersion, "snapshot version " + std::to_string(v));
        Index index;
        const auto tag = r.u8();
        if (tag == 0) {
            index.spec_ = ExactParams{};
        } else if (tag == 1) {
            LshParams p;
            p.num_tables = r.u32();
            p.bits_per_table = r.u32();
            p.seed = r.u64();
            index.spec_ = p;
        } else if (tag == 2) {
            HnswParams h;
            h.m = r.u32();
            h.ef_construction = r.u32();
            h.ef_search = r.u32();
            h.seed = r.u64();
            const bool has_lambda = r.u8() != 0;
            const double lambda = r.f64();
            if (has_lambda) h.level_lambda = lambda;
            index.spec_ = h;
        } else {
            throw Error(Errc::InvalidHeader, "unknown backend tag " + std::to_string(tag));
        }
        auto& s = index.store_;
        s.dim = r.u32();
        s.case_names.resize(r.u32());
        for (auto& name : s.case_names) name = r.str32();
        const std::uint32_t n = r.u32();
        if (n == 0 || s.dim == 0) throw Error(Errc::InvalidHeader, "empty snapshot");
        s.case_of.resize(n);
        s.slice_of.resize(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            s.case_of[i] = r.u32();
            s.slice_of[i] = r.u32();
            if (s.case_of[i] >= s.case_names.size()) throw Error(Errc::InvalidHeader, "case index out of range");
        }
        s.data.resize(std::size_t{n} * s.dim);
        for (auto& x : s.data) x = r.f32();
        if (tag == 2) {
            const auto params = std::get<HnswParams>(index.spec_);
            params.validate();
            const std::uint32_t entry = r.u32();
            const int max_level = static_cast<int>(r.u32());
            std::vector<detail::HnswBackend::Links> links(n);
            for (auto& per_layer : links) {
                per_layer.resize(r.u32());
                for (auto& nbs : per_layer) {
                    nbs.resize(r.u32());
                    for (auto& nb : nbs) {
                        nb = r.u32();
                        if (nb >= n) throw Error(Errc::InvalidHeader, "graph link out of range");
                    }
                }
                if (per_layer.empty()) throw Error(Errc::InvalidHeader, "node without layers");
            }
            if (entry >= n || static_cast<std::size_t>(max_level) + 1 != links[entry].size())
                throw Error(Errc::InvalidHeader, "inconsistent entry point");
            index.hnsw_.emplace(params, std::move(links), entry, max_level);
        } else {
            index.init_backend();
        }
        if (r.remaining() != 0) throw Error(Errc::InvalidHeader, "trailing bytes in snapshot");
        return index;
    }

    void save(const std::filesystem::path& path) const { detail::write_file_bytes(path, encode_snapshot()); }
    static Index load(const std::filesystem::path& path) { return decode_snapshot(detail::read_file_bytes(path)); }

private:
    Index() = default;

    void init_backend() {
        if (const auto* p = std::get_if<LshParams>(&spec_))
            lsh_.emplace(store_, *p);
        else if (const auto* h = std::get_if<HnswParams>(&spec_))
            hnsw_.emplace(store_, *h);
    }

    BackendSpec spec_;
    detail::VectorStore store_;
    std::optional<detail::LshBackend> lsh_;
    std::optional<detail::HnswBackend> hnsw_;
};

}  // namespace dedup3d

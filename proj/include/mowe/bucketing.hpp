#pragma once

// Frequency bucketing of the routing vocabulary and per-bucket expert/block shapes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mowe/common.hpp"
#include "mowe/kv.hpp"
#include "mowe/routing.hpp"
#include "mowe/tokenizer.hpp"

namespace mowe {

struct FrequencyTable {
    std::vector<std::int64_t> counts;
    std::int64_t total = 0;

    RoutingId size() const { return static_cast<RoutingId>(counts.size()); }

    void add(const FrequencyTable& other) {
        if (other.counts.size() != counts.size()) {
            throw Error("FrequencyTable::add: size mismatch");
        }
        for (std::size_t i = 0; i < counts.size(); ++i) {
            counts[i] += other.counts[i];
        }
        total += other.total;
    }

    /// TSV `routing_id<TAB>count`, one row per id.
    std::string serialize() const {
        std::string out;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            out += std::to_string(i) + '\t' + std::to_string(counts[i]) + '\n';
        }
        return out;
    }

    static FrequencyTable parse(std::string_view text) {
        FrequencyTable ft;
        for (const auto& line : split(text, '\n')) {
            if (line.empty() || line[0] == '#') {
                continue;
            }
            const auto f = split(line, '\t');
            if (f.size() != 2 || std::stoll(f[0]) != static_cast<long long>(ft.counts.size())) {
                throw ConfigError("frequency file: expected dense rows 'routing_id<TAB>count'");
            }
            const auto c = std::stoll(f[1]);
            if (c < 0) {
                throw ConfigError("frequency file: negative count");
            }
            ft.counts.push_back(c);
            ft.total += c;
        }
        return ft;
    }

    void save(const std::string& path) const { write_file(path, serialize()); }
    static FrequencyTable load(const std::string& path) { return parse(read_file(path)); }
};

/// Encodes every line, assigns routing ids and tallies them.
inline FrequencyTable count_frequencies(const RoutingHashTable& table, const std::vector<std::string>& corpus,
                                        const SubwordVocab& dv) {
    FrequencyTable ft;
    ft.counts.assign(static_cast<std::size_t>(table.vocab_size), 0);
    for (const auto& line : corpus) {
        for (const RoutingId rid : assign_routing_ids(table, encode(dv, line)).routing_ids) {
            ++ft.counts.at(static_cast<std::size_t>(rid));
            ++ft.total;
        }
    }
    return ft;
}

enum class SplitMode { Mass, Count };

/// Ranked routing ids and the rank cutoffs of the buckets. Bucket b covers ranks
/// [cuts[b], cuts[b+1]); ranks below cuts[0] == bypass_top_n are never routed.
struct BucketBoundaries {
    std::vector<RoutingId> ranked_ids;
    int bypass_top_n = 0;
    std::vector<std::int64_t> cuts;

    int k() const { return static_cast<int>(cuts.size()) - 1; }

    /// Boundaries with explicit bucket sizes over an already ranked id list.
    static BucketBoundaries from_sizes(std::vector<RoutingId> ranked_ids, int bypass_top_n,
                                       const std::vector<std::int64_t>& sizes) {
        BucketBoundaries b;
        b.ranked_ids = std::move(ranked_ids);
        b.bypass_top_n = bypass_top_n;
        b.cuts.push_back(bypass_top_n);
        for (const auto s : sizes) {
            b.cuts.push_back(b.cuts.back() + s);
        }
        if (b.cuts.back() != static_cast<std::int64_t>(b.ranked_ids.size())) {
            throw Error("bucket sizes do not cover the ranked ids");
        }
        return b;
    }
};

/// Ids by descending count, ties by ascending id.
inline std::vector<RoutingId> rank_by_frequency(const FrequencyTable& ft) {
    std::vector<RoutingId> ids(ft.counts.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](RoutingId a, RoutingId b) {
        return ft.counts[static_cast<std::size_t>(a)] > ft.counts[static_cast<std::size_t>(b)];
    });
    return ids;
}

/// Greedy split: after dropping the top `bypass_top_n` ids, a bucket is closed as soon as
/// its mass reaches (remaining mass) / (remaining buckets). Count mode does the same with
/// every id weighing 1. Every bucket receives at least one id.
inline BucketBoundaries split_buckets(const FrequencyTable& ft, int k, int bypass_top_n, SplitMode mode = SplitMode::Mass) {
    if (k < 1) {
        throw Error("split_buckets: k must be >= 1");
    }
    if (bypass_top_n < 0) {
        throw Error("split_buckets: bypass_top_n must be >= 0");
    }
    const auto n = static_cast<std::int64_t>(ft.counts.size());
    if (n - bypass_top_n < k) {
        throw Error("split_buckets: " + std::to_string(n - bypass_top_n) + " routable ids for " + std::to_string(k) +
                    " buckets");
    }
    BucketBoundaries b;
    b.ranked_ids = rank_by_frequency(ft);
    b.bypass_top_n = bypass_top_n;
    auto weight = [&](std::int64_t rank) -> std::int64_t {
        return mode == SplitMode::Count ? 1 : ft.counts[static_cast<std::size_t>(b.ranked_ids[static_cast<std::size_t>(rank)])];
    };
    std::int64_t remaining = 0;
    for (std::int64_t r = bypass_top_n; r < n; ++r) {
        remaining += weight(r);
    }
    b.cuts.push_back(bypass_top_n);
    std::int64_t r = bypass_top_n;
    for (int bucket = 0; bucket < k - 1; ++bucket) {
        const std::int64_t buckets_left = k - bucket;
        const std::int64_t last_allowed = n - (buckets_left - 1);  // leave one id per later bucket
        std::int64_t mass = 0;
        do {
            mass += weight(r);
            ++r;
        } while (r < last_allowed && mass * buckets_left < remaining);
        remaining -= mass;
        b.cuts.push_back(r);
    }
    b.cuts.push_back(n);
    return b;
}

struct BucketShape {
    int num_blocks = 1;
    int experts_per_block = 1;
    int hidden_dim = 1;
    /// Tokens per expert per batch; 0 asks make_plan to size it from frequencies.
    int capacity_per_expert = 0;

    int total_experts() const { return num_blocks * experts_per_block; }
};

struct ShapeSpec {
    std::vector<BucketShape> buckets;
    double capacity_factor = 1.25;
    /// Tokens one MoWE layer sees per batch, used for frequency-based capacities.
    std::int64_t tokens_per_batch = 512;

    /// Keys: num_blocks, experts_per_block, hidden_dim (comma lists, one per bucket),
    /// optional capacity_per_expert, capacity_factor, tokens_per_batch.
    static ShapeSpec from_kv(const KeyValues& kv) {
        kv.reject_unknown({"num_blocks", "experts_per_block", "hidden_dim", "capacity_per_expert", "capacity_factor",
                           "tokens_per_batch"});
        const auto blocks = kv.int_list("num_blocks");
        const auto experts = kv.int_list("experts_per_block");
        const auto hidden = kv.int_list("hidden_dim");
        const auto caps = kv.has("capacity_per_expert") ? kv.int_list("capacity_per_expert")
                                                        : std::vector<long long>(blocks.size(), 0);
        if (experts.size() != blocks.size() || hidden.size() != blocks.size() || caps.size() != blocks.size()) {
            throw ConfigError("shape spec: per-bucket lists must have equal length");
        }
        ShapeSpec s;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            s.buckets.push_back({static_cast<int>(blocks[i]), static_cast<int>(experts[i]), static_cast<int>(hidden[i]),
                                 static_cast<int>(caps[i])});
        }
        s.capacity_factor = kv.real("capacity_factor", 1.25);
        s.tokens_per_batch = kv.integer("tokens_per_batch", 512);
        return s;
    }
};

/// Desk-scale shapes: four buckets of 4 blocks with {1,1,2,8} experts per block.
inline ShapeSpec desk_default_shapes() {
    ShapeSpec s;
    s.buckets = {{4, 1, 32, 0}, {4, 1, 32, 0}, {4, 2, 16, 0}, {4, 8, 8, 0}};
    return s;
}

/// 31B-parameter bucket configuration.
inline ShapeSpec base_scale_shapes() {
    ShapeSpec s;
    s.buckets = {{128, 1, 2048, 0}, {128, 7, 2048, 0}, {128, 8, 1024, 0}, {128, 235, 512, 0}};
    return s;
}

/// 2B-parameter bucket configuration.
inline ShapeSpec compact_scale_shapes() {
    ShapeSpec s;
    s.buckets = {{64, 1, 2048, 0}, {64, 1, 2048, 0}, {64, 1, 2048, 0}, {64, 128, 96, 0}};
    return s;
}

struct BucketPlan {
    std::vector<RoutingId> ranked_ids;
    std::vector<std::int64_t> rank_of;  // routing id -> rank
    int bypass_top_n = 0;
    std::vector<std::int64_t> cuts;
    std::vector<BucketShape> buckets;
    std::vector<std::int64_t> bucket_mass;
    std::int64_t bypass_mass = 0;
    std::int64_t total_mass = 0;

    int k() const { return static_cast<int>(buckets.size()); }
    RoutingId vocab_size() const { return static_cast<RoutingId>(ranked_ids.size()); }

    /// -1 for bypassed ids.
    int bucket_of_rank(std::int64_t rank) const {
        if (rank < bypass_top_n) {
            return -1;
        }
        const auto it = std::upper_bound(cuts.begin(), cuts.end(), rank);
        return static_cast<int>(it - cuts.begin()) - 1;
    }

    std::int64_t total_experts() const {
        std::int64_t n = 0;
        for (const auto& b : buckets) {
            n += b.total_experts();
        }
        return n;
    }

    /// Expected active expert hidden width per token, bypassed tokens counting as zero.
    double expected_hidden_dim() const {
        if (total_mass == 0) {
            double s = 0;
            for (const auto& b : buckets) {
                s += b.hidden_dim;
            }
            return buckets.empty() ? 0.0 : s / static_cast<double>(buckets.size());
        }
        double s = 0;
        for (int i = 0; i < k(); ++i) {
            s += static_cast<double>(bucket_mass[static_cast<std::size_t>(i)]) * buckets[static_cast<std::size_t>(i)].hidden_dim;
        }
        return s / static_cast<double>(total_mass);
    }

    std::string serialize() const {
        KeyValues kv;
        std::vector<int> blocks;
        std::vector<int> experts;
        std::vector<int> hidden;
        std::vector<int> caps;
        for (const auto& b : buckets) {
            blocks.push_back(b.num_blocks);
            experts.push_back(b.experts_per_block);
            hidden.push_back(b.hidden_dim);
            caps.push_back(b.capacity_per_expert);
        }
        kv.set("vocab_size", std::to_string(vocab_size()));
        kv.set("bypass_top_n", std::to_string(bypass_top_n));
        kv.set("k", std::to_string(k()));
        kv.set("cuts", join(cuts));
        kv.set("num_blocks", join(blocks));
        kv.set("experts_per_block", join(experts));
        kv.set("hidden_dim", join(hidden));
        kv.set("capacity_per_expert", join(caps));
        kv.set("bucket_mass", join(bucket_mass));
        kv.set("bypass_mass", std::to_string(bypass_mass));
        kv.set("total_mass", std::to_string(total_mass));
        kv.set("ranked_ids", join(ranked_ids));
        return "# mowe-bucket-plan v1\n" + kv.serialize();
    }

    static BucketPlan parse(std::string_view text);

    void save(const std::string& path) const { write_file(path, serialize()); }
    static BucketPlan load(const std::string& path) { return parse(read_file(path)); }

    std::uint64_t fingerprint() const { return fnv1a(serialize()); }
};

inline void validate_plan(const BucketPlan& p) {
    const auto n = static_cast<std::int64_t>(p.ranked_ids.size());
    if (p.cuts.size() != p.buckets.size() + 1 || p.cuts.front() != p.bypass_top_n || p.cuts.back() != n) {
        throw Error("bucket plan: cuts do not partition the ranked ids");
    }
    for (std::size_t i = 0; i + 1 < p.cuts.size(); ++i) {
        if (p.cuts[i + 1] <= p.cuts[i]) {
            throw Error("bucket plan: empty bucket " + std::to_string(i));
        }
    }
    for (const auto& b : p.buckets) {
        if (b.num_blocks <= 0 || b.experts_per_block <= 0) {
            throw Error("bucket plan: zero blocks or experts");
        }
        if (b.hidden_dim <= 0 || b.capacity_per_expert <= 0) {
            throw Error("bucket plan: hidden dim and capacity must be positive");
        }
    }
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (const auto id : p.ranked_ids) {
        if (id < 0 || id >= n || seen[static_cast<std::size_t>(id)]) {
            throw Error("bucket plan: ranked ids are not a permutation");
        }
        seen[static_cast<std::size_t>(id)] = 1;
    }
}

namespace detail {

inline void fill_rank_of(BucketPlan& p) {
    p.rank_of.assign(p.ranked_ids.size(), 0);
    for (std::size_t r = 0; r < p.ranked_ids.size(); ++r) {
        p.rank_of[static_cast<std::size_t>(p.ranked_ids[r])] = static_cast<std::int64_t>(r);
    }
}

}  // namespace detail

/// Validated plan. Buckets whose shape leaves capacity at 0 get
/// ceil(capacity_factor * expected tokens of their busiest expert), at least 1, where an
/// expert's expected load is the frequency share of the ids hashed to it times
/// tokens_per_batch. Without a frequency table the masses are zero and the floor applies.
inline BucketPlan make_plan(const BucketBoundaries& bounds, const ShapeSpec& shapes, const FrequencyTable* ft = nullptr) {
    if (static_cast<int>(shapes.buckets.size()) != bounds.k()) {
        throw Error("make_plan: shape spec has " + std::to_string(shapes.buckets.size()) + " buckets, boundaries have " +
                    std::to_string(bounds.k()));
    }
    for (const auto& s : shapes.buckets) {
        if (s.num_blocks <= 0 || s.experts_per_block <= 0) {
            throw Error("make_plan: zero blocks or experts");
        }
        if (s.hidden_dim <= 0) {
            throw Error("make_plan: hidden dim must be positive");
        }
    }
    if (ft && ft->counts.size() != bounds.ranked_ids.size()) {
        throw Error("make_plan: frequency table size does not match the ranked ids");
    }
    BucketPlan p;
    p.ranked_ids = bounds.ranked_ids;
    p.bypass_top_n = bounds.bypass_top_n;
    p.cuts = bounds.cuts;
    p.buckets = shapes.buckets;
    p.bucket_mass.assign(shapes.buckets.size(), 0);
    auto count = [&](std::int64_t rank) -> std::int64_t {
        return ft ? ft->counts[static_cast<std::size_t>(p.ranked_ids[static_cast<std::size_t>(rank)])] : 0;
    };
    for (std::int64_t r = 0; r < p.bypass_top_n; ++r) {
        p.bypass_mass += count(r);
    }
    p.total_mass = ft ? ft->total : 0;
    for (int b = 0; b < p.k(); ++b) {
        auto& shape = p.buckets[static_cast<std::size_t>(b)];
        std::vector<std::int64_t> load(static_cast<std::size_t>(shape.total_experts()), 0);
        for (std::int64_t r = p.cuts[static_cast<std::size_t>(b)]; r < p.cuts[static_cast<std::size_t>(b) + 1]; ++r) {
            const auto c = count(r);
            p.bucket_mass[static_cast<std::size_t>(b)] += c;
            load[static_cast<std::size_t>((r - p.cuts[static_cast<std::size_t>(b)]) % shape.total_experts())] += c;
        }
        if (shape.capacity_per_expert == 0) {
            const auto busiest = *std::max_element(load.begin(), load.end());
            const double expected = p.total_mass > 0 ? static_cast<double>(busiest) / static_cast<double>(p.total_mass) *
                                                           static_cast<double>(shapes.tokens_per_batch)
                                                     : 0.0;
            shape.capacity_per_expert = std::max(1, static_cast<int>(std::ceil(shapes.capacity_factor * expected - 1e-9)));
        }
    }
    detail::fill_rank_of(p);
    validate_plan(p);
    return p;
}

inline BucketPlan BucketPlan::parse(std::string_view text) {
    const auto kv = KeyValues::parse(text, "bucket plan");
    kv.reject_unknown({"vocab_size", "bypass_top_n", "k", "cuts", "num_blocks", "experts_per_block", "hidden_dim",
                       "capacity_per_expert", "bucket_mass", "bypass_mass", "total_mass", "ranked_ids"});
    BucketPlan p;
    for (const auto id : kv.int_list("ranked_ids")) {
        p.ranked_ids.push_back(static_cast<RoutingId>(id));
    }
    if (static_cast<long long>(p.ranked_ids.size()) != kv.integer("vocab_size")) {
        throw ConfigError("bucket plan: ranked_ids length differs from vocab_size");
    }
    p.bypass_top_n = static_cast<int>(kv.integer("bypass_top_n"));
    for (const auto c : kv.int_list("cuts")) {
        p.cuts.push_back(c);
    }
    const auto blocks = kv.int_list("num_blocks");
    const auto experts = kv.int_list("experts_per_block");
    const auto hidden = kv.int_list("hidden_dim");
    const auto caps = kv.int_list("capacity_per_expert");
    const auto k = static_cast<std::size_t>(kv.integer("k"));
    if (blocks.size() != k || experts.size() != k || hidden.size() != k || caps.size() != k) {
        throw ConfigError("bucket plan: per-bucket lists must have k entries");
    }
    for (std::size_t i = 0; i < k; ++i) {
        p.buckets.push_back({static_cast<int>(blocks[i]), static_cast<int>(experts[i]), static_cast<int>(hidden[i]),
                             static_cast<int>(caps[i])});
    }
    for (const auto m : kv.int_list("bucket_mass")) {
        p.bucket_mass.push_back(m);
    }
    p.bypass_mass = kv.integer("bypass_mass");
    p.total_mass = kv.integer("total_mass");
    detail::fill_rank_of(p);
    try {
        validate_plan(p);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return p;
}

}  // namespace mowe

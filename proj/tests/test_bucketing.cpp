#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "mowe/bucketing.hpp"

using namespace mowe;

namespace {

FrequencyTable table_of(std::vector<std::int64_t> counts) {
    FrequencyTable ft;
    ft.total = std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
    ft.counts = std::move(counts);
    return ft;
}

std::vector<std::int64_t> bucket_masses(const FrequencyTable& ft, const BucketBoundaries& b) {
    std::vector<std::int64_t> m;
    for (int i = 0; i < b.k(); ++i) {
        std::int64_t s = 0;
        for (auto r = b.cuts[static_cast<std::size_t>(i)]; r < b.cuts[static_cast<std::size_t>(i) + 1]; ++r) {
            s += ft.counts[static_cast<std::size_t>(b.ranked_ids[static_cast<std::size_t>(r)])];
        }
        m.push_back(s);
    }
    return m;
}

double imbalance(const std::vector<std::int64_t>& masses) {
    const auto [lo, hi] = std::minmax_element(masses.begin(), masses.end());
    return *lo == 0 ? 1e300 : static_cast<double>(*hi) / static_cast<double>(*lo);
}

/// Smallest max/min mass ratio over every split of the descending-sorted sequence into
/// k non-empty contiguous buckets.
double best_imbalance(const std::vector<std::int64_t>& sorted_desc, int k) {
    const int n = static_cast<int>(sorted_desc.size());
    double best = 1e300;
    std::vector<int> cut(static_cast<std::size_t>(k - 1));
    std::function<void(int, int)> rec = [&](int idx, int start) {
        if (idx == k - 1) {
            std::vector<std::int64_t> masses;
            int prev = 0;
            for (int c = 0; c <= k - 1; ++c) {
                const int end = c < k - 1 ? cut[static_cast<std::size_t>(c)] : n;
                masses.push_back(std::accumulate(sorted_desc.begin() + prev, sorted_desc.begin() + end, std::int64_t{0}));
                prev = end;
            }
            best = std::min(best, imbalance(masses));
            return;
        }
        for (int c = start; c <= n - (k - 1 - idx); ++c) {
            cut[static_cast<std::size_t>(idx)] = c;
            rec(idx + 1, c + 1);
        }
    };
    rec(0, 1);
    return best;
}

SubwordVocab letters_vocab() {
    return learn_vocab({"the zebra and the lion", "a zebra ran", "lions roar"}, 20, 3);
}

}  // namespace

TEST(CountFrequencies, EmptyCorpusGivesZeros) {
    const auto dv = letters_vocab();
    const auto table = build_hash_table(extend_with_default(build_routing_vocab({"zebra"}, {}, 5), dv), dv);
    const auto ft = count_frequencies(table, {}, dv);
    EXPECT_EQ(ft.size(), table.vocab_size);
    EXPECT_EQ(ft.total, 0);
    EXPECT_TRUE(std::all_of(ft.counts.begin(), ft.counts.end(), [](auto c) { return c == 0; }));
}

TEST(CountFrequencies, TenLineHandTally) {
    const auto dv = letters_vocab();
    const auto rv = extend_with_default(build_routing_vocab({"zebra", "lion"}, {}, 5), dv);
    const auto table = build_hash_table(rv, dv);
    const std::vector<std::string> corpus = {
        "zebra", "the zebra", "lion", "zebra lion zebra", "roar", "a", "the lion", "", "zebra", "ran",
    };
    const auto ft = count_frequencies(table, corpus, dv);
    ASSERT_TRUE(rv.routing_id.count("zebra"));
    ASSERT_GE(encode(dv, "zebra").size(), 2u);
    EXPECT_EQ(ft.counts[static_cast<std::size_t>(rv.routing_id.at("zebra"))], 5);
    std::int64_t tokens = 0;
    for (const auto& l : corpus) {
        tokens += static_cast<std::int64_t>(encode(dv, l).size());
    }
    EXPECT_EQ(ft.total, tokens);
    EXPECT_EQ(std::accumulate(ft.counts.begin(), ft.counts.end(), std::int64_t{0}), ft.total);

    auto shuffled = corpus;
    std::reverse(shuffled.begin(), shuffled.end());
    EXPECT_EQ(count_frequencies(table, shuffled, dv).counts, ft.counts);

    // Sharded counting merged by addition equals the single pass.
    auto half = count_frequencies(table, {corpus.begin(), corpus.begin() + 5}, dv);
    half.add(count_frequencies(table, {corpus.begin() + 5, corpus.end()}, dv));
    EXPECT_EQ(half.counts, ft.counts);
}

TEST(SplitBuckets, UniformFrequenciesSplitEvenly) {
    const auto ft = table_of(std::vector<std::int64_t>(40, 3));
    const auto b = split_buckets(ft, 4, 0);
    EXPECT_EQ(b.cuts, (std::vector<std::int64_t>{0, 10, 20, 30, 40}));
    const auto bc = split_buckets(ft, 4, 0, SplitMode::Count);
    EXPECT_EQ(bc.cuts, b.cuts);
}

TEST(SplitBuckets, ZipfTwoBucketsAgainstExhaustiveOracle) {
    const auto ft = table_of({16, 8, 4, 2, 1, 1, 1, 1});
    const auto b = split_buckets(ft, 2, 0);
    // 16 alone is below half of 34, so the first bucket closes after taking 8 as well.
    EXPECT_EQ(b.cuts, (std::vector<std::int64_t>{0, 2, 8}));
    EXPECT_EQ(bucket_masses(ft, b), (std::vector<std::int64_t>{24, 10}));
    EXPECT_DOUBLE_EQ(best_imbalance({16, 8, 4, 2, 1, 1, 1, 1}, 2), 18.0 / 16.0);
    EXPECT_LE(imbalance(bucket_masses(ft, b)), 3.0);
}

TEST(SplitBuckets, BypassRemovesTopIds) {
    std::vector<std::int64_t> counts(30);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        counts[i] = static_cast<std::int64_t>(1000 / (i + 1));
    }
    std::reverse(counts.begin(), counts.end());  // ids are not pre-sorted
    const auto ft = table_of(counts);
    const auto b = split_buckets(ft, 3, 16);
    EXPECT_EQ(b.cuts.front(), 16);
    EXPECT_EQ(b.cuts.back(), 30);
    for (int r = 0; r < 16; ++r) {
        EXPECT_EQ(b.ranked_ids[static_cast<std::size_t>(r)], 29 - r);
    }
}

TEST(SplitBuckets, Errors) {
    EXPECT_THROW(split_buckets(table_of({1, 2, 3}), 0, 0), Error);
    EXPECT_THROW(split_buckets(table_of({1, 2, 3}), 4, 0), Error);
    EXPECT_THROW(split_buckets(table_of({1, 2, 3, 4, 5}), 2, 4), Error);
}

TEST(SplitBuckets, PartitionAndMassBalanceOnZipfData) {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const auto n = 200 + rng.below(800);
        std::vector<std::int64_t> counts(n);
        for (std::size_t i = 0; i < n; ++i) {
            counts[i] = static_cast<std::int64_t>(100000.0 / static_cast<double>(i + 1));
        }
        rng.shuffle(counts);
        const auto ft = table_of(counts);
        const auto b = split_buckets(ft, 4, 16);
        EXPECT_LE(imbalance(bucket_masses(ft, b)), 3.0);
        std::vector<int> seen(n, 0);
        for (const auto id : b.ranked_ids) {
            ++seen[static_cast<std::size_t>(id)];
        }
        EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
        EXPECT_TRUE(std::is_sorted(b.cuts.begin(), b.cuts.end()));
    }
}

TEST(SplitBuckets, GreedyNeverBeatsExhaustiveOptimumOnSmallInstances) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 4 + static_cast<int>(rng.below(13));
        std::vector<std::int64_t> counts(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            counts[static_cast<std::size_t>(i)] = 1 + static_cast<std::int64_t>(rng.below(64) / static_cast<std::uint64_t>(i + 1));
        }
        const int k = 2 + static_cast<int>(rng.below(3));
        if (n < k) {
            continue;
        }
        const auto ft = table_of(counts);
        const auto b = split_buckets(ft, k, 0);
        auto sorted = counts;
        std::sort(sorted.rbegin(), sorted.rend());
        const double greedy = imbalance(bucket_masses(ft, b));
        EXPECT_GE(greedy, best_imbalance(sorted, k) - 1e-12);
    }
    // Zipfian small instances with k = 4 stay within the bound.
    std::vector<std::int64_t> zipf;
    for (int i = 1; i <= 16; ++i) {
        zipf.push_back(720720 / i);
    }
    const auto ft = table_of(zipf);
    const auto b = split_buckets(ft, 4, 0);
    EXPECT_LE(imbalance(bucket_masses(ft, b)), 3.0);
    EXPECT_GE(imbalance(bucket_masses(ft, b)), best_imbalance(zipf, 4));
}

TEST(MakePlan, BaseScaleConfiguration) {
    const std::int64_t vocab = 1 << 20;
    std::vector<RoutingId> ranked(static_cast<std::size_t>(vocab));
    std::iota(ranked.begin(), ranked.end(), 0);
    const auto bounds = BucketBoundaries::from_sizes(ranked, 16, {128, 880, 1024, vocab - 16 - 128 - 880 - 1024});
    const auto plan = make_plan(bounds, base_scale_shapes());
    EXPECT_EQ(plan.buckets[0].total_experts(), 128);
    EXPECT_EQ(plan.buckets[1].total_experts(), 896);
    EXPECT_EQ(plan.buckets[2].total_experts(), 1024);
    EXPECT_EQ(plan.buckets[3].total_experts(), 30080);
    EXPECT_EQ(plan.buckets[3].num_blocks, 128);
    EXPECT_EQ(plan.buckets[3].experts_per_block, 235);
    EXPECT_EQ(plan.buckets[3].hidden_dim, 512);

    const auto plan2b = make_plan(bounds, compact_scale_shapes());
    EXPECT_EQ(plan2b.buckets[3].total_experts(), 8192);
    EXPECT_EQ(plan2b.buckets[3].hidden_dim, 96);
    EXPECT_EQ(plan2b.total_experts(), 64 * 3 + 8192);
}

TEST(MakePlan, DeskDefaultAndCapacities) {
    std::vector<std::int64_t> counts(200);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        counts[i] = static_cast<std::int64_t>(4000 / (i + 1));
    }
    const auto ft = table_of(counts);
    auto shapes = desk_default_shapes();
    shapes.tokens_per_batch = 1000;
    const auto plan = make_plan(split_buckets(ft, 4, 16), shapes, &ft);
    const std::vector<int> experts = {4, 4, 8, 32};
    const std::vector<int> hidden = {32, 32, 16, 8};
    for (int b = 0; b < 4; ++b) {
        EXPECT_EQ(plan.buckets[static_cast<std::size_t>(b)].total_experts(), experts[static_cast<std::size_t>(b)]);
        EXPECT_EQ(plan.buckets[static_cast<std::size_t>(b)].hidden_dim, hidden[static_cast<std::size_t>(b)]);
    }
    // Bucket 0 starts at rank 16 with 4 experts: expert 0 gets ranks 16, 20, 24, ...
    std::int64_t busiest = 0;
    for (int e = 0; e < 4; ++e) {
        std::int64_t load = 0;
        for (auto r = plan.cuts[0] + e; r < plan.cuts[1]; r += 4) {
            load += counts[static_cast<std::size_t>(r)];
        }
        busiest = std::max(busiest, load);
    }
    const int expected_cap = static_cast<int>(std::ceil(1.25 * static_cast<double>(busiest) / static_cast<double>(ft.total) * 1000.0));
    EXPECT_EQ(plan.buckets[0].capacity_per_expert, expected_cap);
    for (const auto& b : plan.buckets) {
        EXPECT_GE(b.capacity_per_expert, 1);
    }
    EXPECT_EQ(plan.bypass_mass + std::accumulate(plan.bucket_mass.begin(), plan.bucket_mass.end(), std::int64_t{0}), ft.total);
}

TEST(MakePlan, RejectsZeroBlocksOrExperts) {
    const auto ft = table_of(std::vector<std::int64_t>(20, 1));
    auto shapes = desk_default_shapes();
    shapes.buckets[1].num_blocks = 0;
    EXPECT_THROW(make_plan(split_buckets(ft, 4, 0), shapes, &ft), Error);
    shapes = desk_default_shapes();
    shapes.buckets[2].experts_per_block = 0;
    EXPECT_THROW(make_plan(split_buckets(ft, 4, 0), shapes, &ft), Error);
    EXPECT_THROW(make_plan(split_buckets(ft, 3, 0), desk_default_shapes(), &ft), Error);
}

TEST(MakePlan, SerializationRoundTrip) {
    std::vector<std::int64_t> counts(64);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        counts[i] = static_cast<std::int64_t>((i * 37) % 11);
    }
    const auto ft = table_of(counts);
    const auto plan = make_plan(split_buckets(ft, 4, 4), desk_default_shapes(), &ft);
    const auto text = plan.serialize();
    const auto back = BucketPlan::parse(text);
    EXPECT_EQ(back.serialize(), text);
    EXPECT_EQ(back.rank_of, plan.rank_of);
    EXPECT_THROW(BucketPlan::parse(text + "extra = 1\n"), ConfigError);

    const auto ftback = FrequencyTable::parse(ft.serialize());
    EXPECT_EQ(ftback.counts, ft.counts);
    EXPECT_EQ(ftback.total, ft.total);
}

TEST(ShapeSpec, ParsesKeyValueFile) {
    const auto kv = KeyValues::parse("num_blocks = 4,4\nexperts_per_block = 1,8\nhidden_dim = 32,8\ntokens_per_batch = 64\n");
    const auto s = ShapeSpec::from_kv(kv);
    ASSERT_EQ(s.buckets.size(), 2u);
    EXPECT_EQ(s.buckets[1].total_experts(), 32);
    EXPECT_EQ(s.tokens_per_batch, 64);
    EXPECT_THROW(ShapeSpec::from_kv(KeyValues::parse("num_blocks = 4\nexperts_per_block = 1,2\nhidden_dim = 3\n")), ConfigError);
    EXPECT_THROW(ShapeSpec::from_kv(KeyValues::parse("num_blocks = 4\nexperts_per_block = 1\nhidden_dim = 3\nbogus = 1\n")),
                 ConfigError);
}

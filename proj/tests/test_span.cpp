#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "golden_util.hpp"
#include "mowe/common.hpp"
#include "mowe/span.hpp"
#include "tiny_world.hpp"

using namespace mowe;

namespace {

SubwordVocab bundled_vocab() { return learn_vocab(read_lines("data/mini_corpus.txt"), 160, 19); }

/// Rebuilds the original sequence by replacing each sentinel in the input with the tokens
/// that follow the same sentinel in the target.
TokenSequence reconstruct(const CorruptedPair& p, const SubwordVocab& dv) {
    TokenSequence out;
    for (const auto id : p.input) {
        if (!dv.is_sentinel(id)) {
            out.push_back(id);
            continue;
        }
        auto it = std::find(p.target.begin(), p.target.end(), id);
        for (++it; it != p.target.end() && !dv.is_sentinel(*it); ++it) {
            out.push_back(*it);
        }
    }
    return out;
}

}  // namespace

TEST(SpanCorruption, ZeroRateKeepsInput) {
    const auto dv = bundled_vocab();
    Rng rng(1);
    const TokenSequence ids = encode(dv, "the colosseum is in rome");
    const auto p = corrupt_spans(ids, dv, {0.0, 3.0, 63}, rng);
    EXPECT_EQ(p.input, ids);
    EXPECT_EQ(p.target, (TokenSequence{dv.sentinel(0)}));
}

TEST(SpanCorruption, FullRateMasksEverything) {
    const auto dv = bundled_vocab();
    Rng rng(1);
    const TokenSequence ids = encode(dv, "uluru");
    const auto p = corrupt_spans(ids, dv, {1.0, 100.0, 63}, rng);
    EXPECT_EQ(p.input, (TokenSequence{dv.sentinel(0)}));
    TokenSequence expected = {dv.sentinel(0)};
    expected.insert(expected.end(), ids.begin(), ids.end());
    expected.push_back(dv.sentinel(1));
    EXPECT_EQ(p.target, expected);
}

TEST(SpanCorruption, TargetsReconstructMaskedSpansInOrder) {
    const auto dv = bundled_vocab();
    const auto lines = read_lines("data/mini_corpus.txt");
    Rng rng(3);
    std::int64_t masked = 0, total = 0;
    for (int trial = 0; trial < 400; ++trial) {
        const auto ids = encode(dv, lines[rng.below(lines.size())]);
        const double rate = trial % 4 == 0 ? 0.5 : 0.15;
        const auto p = corrupt_spans(ids, dv, {rate, 3.0, 63}, rng);
        ASSERT_EQ(reconstruct(p, dv), ids);
        // Sentinels appear in order, the target ends with the next unused one.
        int next = 0;
        for (const auto id : p.input) {
            if (dv.is_sentinel(id)) {
                ASSERT_EQ(id, dv.sentinel(next++));
            }
        }
        ASSERT_EQ(p.target.back(), dv.sentinel(next));
        ASSERT_EQ(p.target.front(), dv.sentinel(0));
        if (rate == 0.15) {
            masked += static_cast<std::int64_t>(p.target.size()) - next - 1;
            total += static_cast<std::int64_t>(ids.size());
        }
    }
    const double frac = static_cast<double>(masked) / static_cast<double>(total);
    EXPECT_NEAR(frac, 0.15, 0.03);
}

TEST(SpanCorruption, Errors) {
    const auto dv = bundled_vocab();
    Rng rng(1);
    EXPECT_THROW(corrupt_spans({5, 6}, dv, {1.5, 3.0, 63}, rng), ConfigError);
    EXPECT_THROW(corrupt_spans({5, 6}, dv, {0.5, 0.0, 63}, rng), ConfigError);
    const auto bare = learn_vocab({"ab"}, 3 + 3, 3);
    EXPECT_THROW(corrupt_spans({3, 4}, bare, {0.5, 1.0, 63}, rng), Error);
}

TEST(SpanBatch, DeterministicAndTruncated) {
    const auto w = tiny::make_world();
    SpanOptions opt;
    opt.max_len = 6;
    const auto a = make_span_batch(5, w.corpus, w.dv, w.table, opt);
    const auto b = make_span_batch(5, w.corpus, w.dv, w.table, opt);
    EXPECT_EQ(format_batch(a), format_batch(b));
    EXPECT_NE(format_batch(a), format_batch(make_span_batch(6, w.corpus, w.dv, w.table, opt)));
    for (const auto& ex : a) {
        EXPECT_EQ(ex.input.back(), kEosId);
        EXPECT_EQ(ex.target.back(), kEosId);
        EXPECT_EQ(ex.input_routing.size(), ex.input.size());
        EXPECT_EQ(ex.dec_routing.size(), ex.target.size());
        EXPECT_LE(ex.input.size() + ex.target.size(), 6u + 2u + 2u * 3u);
    }
}

TEST(SpanBatch, GoldenOnBundledCorpus) {
    const auto dv = bundled_vocab();
    const auto corpus = read_lines("data/mini_corpus.txt");
    ASSERT_EQ(corpus.size(), 20u);
    const auto rv = extend_with_default(build_routing_vocab(read_lines("data/entity_names.txt"), corpus, 64), dv);
    const auto table = build_hash_table(rv, dv);
    expect_golden("tests/golden/span_batch_seed7.txt", format_batch(make_span_batch(7, corpus, dv, table)));
}

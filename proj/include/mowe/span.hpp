#pragma once

// T5-style span corruption.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mowe/common.hpp"
#include "mowe/model.hpp"
#include "mowe/routing.hpp"
#include "mowe/tokenizer.hpp"

namespace mowe {

struct SpanOptions {
    double corruption_rate = 0.15;
    double mean_span_len = 3.0;
    int max_len = 63;  // tokens kept per line before corruption
};

struct CorruptedPair {
    TokenSequence input;
    TokenSequence target;
};

namespace detail {

/// Splits `n` items into `parts` positive lengths, uniformly over compositions.
inline std::vector<int> random_segmentation(int n, int parts, Rng& rng) {
    std::vector<int> cuts;
    for (int i = 1; i < n; ++i) {
        cuts.push_back(i);
    }
    rng.shuffle(cuts);
    cuts.resize(static_cast<std::size_t>(parts - 1));
    std::sort(cuts.begin(), cuts.end());
    std::vector<int> out;
    int prev = 0;
    for (const int c : cuts) {
        out.push_back(c - prev);
        prev = c;
    }
    out.push_back(n - prev);
    return out;
}

}  // namespace detail

/// Replaces random spans of `tokens` by sentinels. The target lists each span after its
/// sentinel and ends with one more sentinel.
inline CorruptedPair corrupt_spans(const TokenSequence& tokens, const SubwordVocab& dv, const SpanOptions& opt, Rng& rng) {
    if (opt.corruption_rate < 0 || opt.corruption_rate > 1 || opt.mean_span_len <= 0) {
        throw ConfigError("span corruption: rate must be in [0, 1] and mean span length positive");
    }
    const int n = static_cast<int>(tokens.size());
    int noise = static_cast<int>(std::lround(n * opt.corruption_rate));
    if (opt.corruption_rate > 0 && n > 0) {
        noise = std::max(noise, 1);
    }
    noise = std::min(noise, n);
    CorruptedPair out;
    if (noise == 0) {
        out.input = tokens;
        out.target = {dv.sentinel(0)};
        return out;
    }
    const int keep = n - noise;
    int spans = std::max(1, static_cast<int>(std::lround(noise / opt.mean_span_len)));
    spans = std::min({spans, noise, keep + 1, dv.num_sentinels() - 1});
    if (spans < 1) {
        throw Error("span corruption: vocabulary needs at least two sentinels");
    }
    const auto noise_len = detail::random_segmentation(noise, spans, rng);
    // keep+2 split into spans+1 positive parts, then the two edge parts may shrink to zero.
    auto keep_len = detail::random_segmentation(keep + 2, spans + 1, rng);
    keep_len.front() -= 1;
    keep_len.back() -= 1;
    std::size_t pos = 0;
    for (int s = 0; s < spans; ++s) {
        for (int i = 0; i < keep_len[static_cast<std::size_t>(s)]; ++i) {
            out.input.push_back(tokens[pos++]);
        }
        const TokenId sentinel = dv.sentinel(s);
        out.input.push_back(sentinel);
        out.target.push_back(sentinel);
        for (int i = 0; i < noise_len[static_cast<std::size_t>(s)]; ++i) {
            out.target.push_back(tokens[pos++]);
        }
    }
    for (int i = 0; i < keep_len.back(); ++i) {
        out.input.push_back(tokens[pos++]);
    }
    out.target.push_back(dv.sentinel(spans));
    return out;
}

/// One corrupted example per line, all randomness from `seed`.
inline std::vector<Example> make_span_batch(std::uint64_t seed, const std::vector<std::string>& lines, const SubwordVocab& dv,
                                            const RoutingHashTable& table, const SpanOptions& opt = {}) {
    Rng rng(seed);
    std::vector<Example> batch;
    for (const auto& line : lines) {
        auto ids = encode(dv, line);
        if (static_cast<int>(ids.size()) > opt.max_len) {
            ids.resize(static_cast<std::size_t>(opt.max_len));
        }
        auto pair = corrupt_spans(ids, dv, opt, rng);
        batch.push_back(make_example(std::move(pair.input), std::move(pair.target), table));
    }
    return batch;
}

/// Text dump used for golden files.
inline std::string format_batch(const std::vector<Example>& batch) {
    std::string out;
    for (const auto& ex : batch) {
        out += "input\t" + join(ex.input, " ") + "\n";
        out += "input_routing\t" + join(ex.input_routing, " ") + "\n";
        out += "target\t" + join(ex.target, " ") + "\n";
        out += "decoder_routing\t" + join(ex.dec_routing, " ") + "\n";
    }
    return out;
}

}  // namespace mowe

#include <map>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mowe/tokenizer.hpp"

using namespace mowe;

namespace {

const std::string M(kWordMarker);

/// String-level BPE used only as an oracle for learn_vocab.
std::vector<std::string> reference_bpe(const std::vector<std::string>& corpus, int merges) {
    std::map<std::string, int> counts;
    for (const auto& line : corpus) {
        for (const auto& w : split(line, ' ')) {
            if (!w.empty()) {
                ++counts[w];
            }
        }
    }
    std::vector<std::pair<std::vector<std::string>, int>> words;
    for (const auto& [w, c] : counts) {
        std::vector<std::string> syms = {M};
        for (auto& ch : utf8_chars(w)) {
            syms.push_back(ch);
        }
        words.emplace_back(syms, c);
    }
    std::vector<std::string> learned;
    for (int m = 0; m < merges; ++m) {
        std::map<std::pair<std::string, std::string>, int> pairs;
        for (const auto& [syms, c] : words) {
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
                pairs[{syms[i], syms[i + 1]}] += c;
            }
        }
        std::pair<std::string, std::string> best;
        int best_count = -1;
        for (const auto& [p, c] : pairs) {
            if (c > best_count || (c == best_count && p.first + p.second < best.first + best.second)) {
                best = p;
                best_count = c;
            }
        }
        if (best_count < 0) {
            break;
        }
        for (auto& [syms, c] : words) {
            std::vector<std::string> out;
            for (std::size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
                    out.push_back(best.first + best.second);
                    ++i;
                } else {
                    out.push_back(syms[i]);
                }
            }
            syms = out;
        }
        learned.push_back(best.first + best.second);
    }
    return learned;
}

std::vector<std::string> random_lines(Rng& rng, int n, const std::string& alphabet_text) {
    const auto alphabet = utf8_chars(alphabet_text);
    std::vector<std::string> lines;
    for (int i = 0; i < n; ++i) {
        std::string line;
        const auto words = 1 + rng.below(6);
        for (std::uint64_t w = 0; w < words; ++w) {
            if (w) {
                line += ' ';
            }
            const auto len = 1 + rng.below(7);
            for (std::uint64_t c = 0; c < len; ++c) {
                line += alphabet[rng.below(alphabet.size())];
            }
        }
        lines.push_back(line);
    }
    return lines;
}

std::vector<std::string> learned_pieces(const SubwordVocab& v) {
    return {v.pieces().begin() + v.reserved(), v.pieces().end()};
}

}  // namespace

TEST(LearnVocab, ThreeWordCorpusMergesMostFrequentPairs) {
    // Pair counts: (marker,a)=3, (a,a)=2, (a,b)=1; then (marker+a,a)=2.
    const auto v = learn_vocab({"aa aa ab"}, 3 + 5, 3);
    EXPECT_EQ(learned_pieces(v), (std::vector<std::string>{"a", "b", M, M + "a", M + "aa"}));
    EXPECT_EQ(reference_bpe({"aa aa ab"}, 2), (std::vector<std::string>{M + "a", M + "aa"}));
}

TEST(LearnVocab, SingleCharacterCorpusAtMinimalSize) {
    const auto v = learn_vocab({"x"}, 4 + 2, 4);
    EXPECT_EQ(v.size(), 6);
    EXPECT_EQ(v.piece(0), "<pad>");
    EXPECT_EQ(v.piece(3), "<extra_id_0>");
    EXPECT_TRUE(v.find("x").has_value());
    EXPECT_TRUE(v.find(M).has_value());
}

TEST(LearnVocab, Errors) {
    EXPECT_THROW(learn_vocab({}, 100, 3), Error);
    EXPECT_THROW(learn_vocab({"", "   "}, 100, 3), Error);
    EXPECT_THROW(learn_vocab({"abc"}, 3 + 3, 3), Error);  // alphabet is 4 with the marker
    EXPECT_THROW(learn_vocab({"ab"}, 3 + 50, 3), Error);  // runs out of merges
}

TEST(LearnVocab, MatchesReferenceMergesOnRandomCorpora) {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const auto corpus = random_lines(rng, 40, "abcde");
        const auto v = learn_vocab(corpus, 3 + 6 + 20, 3);
        auto expected = reference_bpe(corpus, 20);
        // Merges that recreate an existing string add no piece; this corpus keeps them distinct.
        const auto got = learned_pieces(v);
        const std::vector<std::string> merges(got.begin() + 6, got.end());
        EXPECT_EQ(merges, expected);
    }
}

TEST(LearnVocab, DeterministicAndCoversEveryCharacter) {
    Rng rng(3);
    const auto corpus = random_lines(rng, 60, "xyzqrs\xC3\xA9");
    const auto a = learn_vocab(corpus, 60, 5);
    const auto b = learn_vocab(corpus, 60, 5);
    EXPECT_EQ(a.pieces(), b.pieces());
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    for (const auto& line : corpus) {
        for (const auto& ch : utf8_chars(line)) {
            if (ch != " ") {
                EXPECT_TRUE(a.find(ch).has_value()) << ch;
            }
        }
    }
    // Specials are only at the front.
    for (TokenId id = a.reserved(); id < a.size(); ++id) {
        EXPECT_NE(a.piece(id).front(), '<');
    }
}

TEST(Encode, EmptyInput) {
    const auto v = learn_vocab({"ab"}, 3 + 3, 3);
    EXPECT_TRUE(encode(v, "").empty());
}

TEST(Encode, GreedyLongestMatchSplitsUnknownWord) {
    auto pieces = SubwordVocab::special_pieces(3);
    for (const char* p : {"a", "c", "e", "h", "i", "m", "n", "t"}) {
        pieces.emplace_back(p);
    }
    pieces.push_back(M);
    pieces.push_back(M + "math");
    pieces.push_back("tician");
    pieces.push_back("ti");
    const auto v = SubwordVocab::from_pieces(pieces, 3);
    const auto ids = encode(v, "mathematician");
    std::vector<std::string> got;
    for (const auto id : ids) {
        got.push_back(v.piece(id));
    }
    EXPECT_EQ(got, (std::vector<std::string>{M + "math", "e", "m", "a", "tician"}));
    EXPECT_EQ(decode(v, ids), "mathematician");
}

TEST(Encode, RoundTripOnRandomCorpusLines) {
    Rng rng(5);
    const auto corpus = random_lines(rng, 200, "abcdefgh");
    const auto v = learn_vocab(corpus, 80, 6);
    Rng probe(6);
    for (int i = 0; i < 1000; ++i) {
        std::string s = corpus[probe.below(corpus.size())];
        // Also exercise leading, trailing and doubled spaces.
        if (i % 7 == 0) {
            s = " " + s + "  a";
        }
        EXPECT_EQ(decode(v, encode(v, s)), s);
    }
}

TEST(Encode, NoLongerPieceMatchesAtAnyPosition) {
    Rng rng(9);
    const auto corpus = random_lines(rng, 100, "abcd");
    const auto v = learn_vocab(corpus, 60, 3);
    for (const auto& line : corpus) {
        const auto ids = encode(v, line);
        // Rebuild the marked character stream and check every emitted piece exhaustively.
        std::vector<std::string> chars = {M};
        for (auto& ch : utf8_chars(line)) {
            chars.push_back(ch == " " ? M : ch);
        }
        std::size_t pos = 0;
        for (const auto id : ids) {
            const auto len = utf8_chars(v.piece(id)).size();
            for (TokenId other = v.reserved(); other < v.size(); ++other) {
                auto oc = utf8_chars(v.piece(other));
                if (oc.size() <= len) {
                    continue;
                }
                std::size_t end = pos;
                bool match = true;
                for (const auto& c : oc) {
                    if (end >= chars.size() || chars[end] != c) {
                        match = false;
                        break;
                    }
                    ++end;
                }
                EXPECT_FALSE(match) << "longer piece " << v.piece(other) << " matches at " << pos;
            }
            pos += len;
        }
        EXPECT_EQ(pos, chars.size());
    }
}

TEST(Encode, UnknownCharacterFallsBackToUnk) {
    const auto v = learn_vocab({"ab"}, 3 + 3, 3);
    const auto ids = encode(v, "az");
    ASSERT_EQ(ids.size(), 3u);
    EXPECT_EQ(ids[2], kUnkId);
}

TEST(Decode, RejectsOutOfRangeIds) {
    const auto v = learn_vocab({"ab"}, 3 + 3, 3);
    EXPECT_THROW(decode(v, {v.size()}), Error);
    EXPECT_THROW(decode(v, {-1}), Error);
}

TEST(VocabFile, SaveAndLoad) {
    Rng rng(1);
    const auto v = learn_vocab(random_lines(rng, 50, "pqrs"), 40, 7);
    const auto text = v.serialize();
    const auto back = SubwordVocab::parse(text);
    EXPECT_EQ(back.pieces(), v.pieces());
    EXPECT_EQ(back.reserved(), 7);
    EXPECT_EQ(back.serialize(), text);
    EXPECT_THROW(SubwordVocab::parse("a\nb\n"), ConfigError);
}

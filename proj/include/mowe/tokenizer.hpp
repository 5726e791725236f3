#pragma once

// Default tokenization: a small BPE-style subword vocabulary learned by greedy pair
// merging, and a greedy longest-match encoder over it.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mowe/common.hpp"

namespace mowe {

/// Prefix carried by every word-initial piece (U+2581). A literal space in the input
/// becomes this marker, which is what makes decode an exact inverse.
inline constexpr std::string_view kWordMarker = "\xE2\x96\x81";

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr TokenId kUnkId = 2;
inline constexpr int kMinReserved = 3;

using TokenSequence = std::vector<TokenId>;

class SubwordVocab {
public:
    SubwordVocab() = default;

    /// Builds a vocabulary from an explicit piece list. The first `reserved` entries are
    /// the special ids: <pad>, </s>, <unk> followed by span sentinels.
    static SubwordVocab from_pieces(std::vector<std::string> pieces, int reserved) {
        if (reserved < kMinReserved) {
            throw Error("subword vocab: reserved must be >= 3");
        }
        if (static_cast<int>(pieces.size()) < reserved) {
            throw Error("subword vocab: fewer pieces than reserved ids");
        }
        SubwordVocab v;
        v.reserved_ = reserved;
        v.pieces_ = std::move(pieces);
        for (std::size_t i = 0; i < v.pieces_.size(); ++i) {
            const auto [it, inserted] = v.ids_.emplace(v.pieces_[i], static_cast<TokenId>(i));
            if (!inserted) {
                throw Error("subword vocab: duplicate piece '" + v.pieces_[i] + "'");
            }
            if (static_cast<int>(i) >= reserved) {
                v.max_piece_chars_ = std::max(v.max_piece_chars_, utf8_chars(v.pieces_[i]).size());
            }
        }
        return v;
    }

    static std::vector<std::string> special_pieces(int reserved) {
        std::vector<std::string> out = {"<pad>", "</s>", "<unk>"};
        for (int i = 0; i < reserved - kMinReserved; ++i) {
            out.push_back("<extra_id_" + std::to_string(i) + ">");
        }
        return out;
    }

    TokenId size() const { return static_cast<TokenId>(pieces_.size()); }
    int reserved() const { return reserved_; }
    int num_sentinels() const { return reserved_ - kMinReserved; }
    const std::vector<std::string>& pieces() const { return pieces_; }
    const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
    std::size_t max_piece_chars() const { return max_piece_chars_; }

    TokenId sentinel(int i) const {
        if (i < 0 || i >= num_sentinels()) {
            throw Error("subword vocab: sentinel index out of range");
        }
        return kMinReserved + i;
    }
    bool is_sentinel(TokenId id) const { return id >= kMinReserved && id < reserved_; }

    std::optional<TokenId> find(std::string_view piece) const {
        const auto it = ids_.find(std::string(piece));
        if (it == ids_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    std::uint64_t fingerprint() const {
        std::uint64_t h = fnv1a(std::to_string(reserved_));
        for (const auto& p : pieces_) {
            h = fnv1a(p, h);
            h = fnv1a("\n", h);
        }
        return h;
    }

    /// File format: a header line `# mowe-subword-vocab reserved=N`, then one piece per
    /// line; the zero-based line index after the header is the id.
    std::string serialize() const {
        std::string out = "# mowe-subword-vocab reserved=" + std::to_string(reserved_) + "\n";
        for (const auto& p : pieces_) {
            out += p;
            out += '\n';
        }
        return out;
    }

    static SubwordVocab parse(std::string_view text) {
        auto lines = split(text, '\n');
        if (!lines.empty() && lines.back().empty()) {
            lines.pop_back();
        }
        const std::string prefix = "# mowe-subword-vocab reserved=";
        if (lines.empty() || lines[0].rfind(prefix, 0) != 0) {
            throw ConfigError("subword vocab file: missing header line");
        }
        int reserved = 0;
        try {
            reserved = std::stoi(lines[0].substr(prefix.size()));
        } catch (const std::exception&) {
            throw ConfigError("subword vocab file: bad reserved count");
        }
        std::vector<std::string> pieces(lines.begin() + 1, lines.end());
        return from_pieces(std::move(pieces), reserved);
    }

    void save(const std::string& path) const { write_file(path, serialize()); }
    static SubwordVocab load(const std::string& path) { return parse(read_file(path)); }

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, TokenId> ids_;
    int reserved_ = kMinReserved;
    std::size_t max_piece_chars_ = 1;
};

namespace detail {

/// Space-separated words of a line; runs of spaces produce no empty words.
inline std::vector<std::string> corpus_words(std::string_view line) {
    std::vector<std::string> out;
    for (auto& w : split(line, ' ')) {
        if (!w.empty()) {
            out.push_back(std::move(w));
        }
    }
    return out;
}

}  // namespace detail

/// Learns a vocabulary of exactly `target_size` pieces.
///
/// Words are the space-separated fields of each line, each seen as the marker followed
/// by its characters. The base alphabet is the marker plus every character in the
/// corpus; after that the most frequent adjacent symbol pair is merged repeatedly, ties
/// going to the lexicographically smallest merged string.
inline SubwordVocab learn_vocab(const std::vector<std::string>& corpus, int target_size, int reserved) {
    if (reserved < kMinReserved) {
        throw Error("learn_vocab: reserved must be >= 3");
    }
    std::map<std::string, std::int64_t> word_counts;
    for (const auto& line : corpus) {
        for (auto& w : detail::corpus_words(line)) {
            ++word_counts[w];
        }
    }
    if (word_counts.empty()) {
        throw Error("learn_vocab: corpus is empty");
    }

    // Symbol table local to learning; index -> string.
    std::vector<std::string> symbols;
    std::unordered_map<std::string, int> symbol_index;
    auto intern = [&](const std::string& s) {
        const auto [it, inserted] = symbol_index.emplace(s, static_cast<int>(symbols.size()));
        if (inserted) {
            symbols.push_back(s);
        }
        return it->second;
    };

    std::vector<std::string> alphabet = {std::string(kWordMarker)};
    {
        std::map<std::string, int> seen;
        for (const auto& [w, c] : word_counts) {
            for (auto& ch : utf8_chars(w)) {
                seen.emplace(std::move(ch), 0);
            }
        }
        for (const auto& [ch, unused] : seen) {
            if (ch != kWordMarker) {
                alphabet.push_back(ch);
            }
        }
    }
    std::sort(alphabet.begin(), alphabet.end());

    std::vector<std::string> pieces = SubwordVocab::special_pieces(reserved);
    if (target_size < reserved + static_cast<int>(alphabet.size())) {
        throw Error("learn_vocab: target size " + std::to_string(target_size) + " is below reserved + alphabet (" +
                    std::to_string(reserved + static_cast<int>(alphabet.size())) + ")");
    }
    std::unordered_map<std::string, int> in_vocab;
    for (const auto& a : alphabet) {
        in_vocab.emplace(a, 0);
        pieces.push_back(a);
    }

    struct Word {
        std::vector<int> syms;
        std::int64_t count;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    const int marker = intern(std::string(kWordMarker));
    for (const auto& [w, c] : word_counts) {
        Word word{{marker}, c};
        for (const auto& ch : utf8_chars(w)) {
            word.syms.push_back(intern(ch));
        }
        words.push_back(std::move(word));
    }

    while (static_cast<int>(pieces.size()) < target_size) {
        std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
                const auto key = (static_cast<std::uint64_t>(w.syms[i]) << 32) | static_cast<std::uint32_t>(w.syms[i + 1]);
                pair_counts[key] += w.count;
            }
        }
        if (pair_counts.empty()) {
            throw Error("learn_vocab: corpus too small to reach target size " + std::to_string(target_size));
        }
        std::uint64_t best_key = 0;
        std::int64_t best_count = -1;
        std::string best_str;
        for (const auto& [key, count] : pair_counts) {
            if (count < best_count) {
                continue;
            }
            std::string merged = symbols[key >> 32] + symbols[key & 0xFFFFFFFFULL];
            if (count > best_count || merged < best_str) {
                best_key = key;
                best_count = count;
                best_str = std::move(merged);
            }
        }
        const int left = static_cast<int>(best_key >> 32);
        const int right = static_cast<int>(best_key & 0xFFFFFFFFULL);
        const int merged = intern(best_str);
        for (auto& w : words) {
            std::vector<int> out;
            out.reserve(w.syms.size());
            for (std::size_t i = 0; i < w.syms.size(); ++i) {
                if (i + 1 < w.syms.size() && w.syms[i] == left && w.syms[i + 1] == right) {
                    out.push_back(merged);
                    ++i;
                } else {
                    out.push_back(w.syms[i]);
                }
            }
            w.syms = std::move(out);
        }
        if (in_vocab.emplace(best_str, 0).second) {
            pieces.push_back(best_str);
        }
    }
    return SubwordVocab::from_pieces(std::move(pieces), reserved);
}

/// Greedy longest-match encoding. Every space becomes the word marker and the text gets a
/// leading marker, so each word is a chunk starting with the marker; pieces never span
/// chunks. Characters without a piece map to <unk>.
inline TokenSequence encode(const SubwordVocab& vocab, std::string_view text) {
    TokenSequence out;
    if (text.empty()) {
        return out;
    }
    std::vector<std::string> chars = {std::string(kWordMarker)};
    for (auto& ch : utf8_chars(text)) {
        chars.push_back(ch == " " ? std::string(kWordMarker) : std::move(ch));
    }
    std::size_t pos = 0;
    while (pos < chars.size()) {
        std::size_t chunk_end = pos + 1;
        while (chunk_end < chars.size() && chars[chunk_end] != kWordMarker) {
            ++chunk_end;
        }
        while (pos < chunk_end) {
            const std::size_t max_len = std::min(vocab.max_piece_chars(), chunk_end - pos);
            TokenId hit = kUnkId;
            std::size_t hit_len = 1;
            for (std::size_t len = max_len; len >= 1; --len) {
                std::string cand;
                for (std::size_t j = pos; j < pos + len; ++j) {
                    cand += chars[j];
                }
                if (const auto id = vocab.find(cand); id && *id >= vocab.reserved()) {
                    hit = *id;
                    hit_len = len;
                    break;
                }
            }
            out.push_back(hit);
            pos += hit_len;
        }
    }
    return out;
}

/// Inverse of encode on its outputs. <pad> and </s> produce nothing; other special ids
/// produce their literal names.
inline std::string decode(const SubwordVocab& vocab, const TokenSequence& ids) {
    std::string joined;
    for (const TokenId id : ids) {
        if (id < 0 || id >= vocab.size()) {
            throw Error("decode: id " + std::to_string(id) + " out of range");
        }
        if (id == kPadId || id == kEosId) {
            continue;
        }
        joined += vocab.piece(id);
    }
    std::string out;
    out.reserve(joined.size());
    for (std::size_t i = 0; i < joined.size();) {
        if (joined.compare(i, kWordMarker.size(), kWordMarker) == 0) {
            out += ' ';
            i += kWordMarker.size();
        } else {
            out += joined[i++];
        }
    }
    if (!out.empty() && out.front() == ' ') {
        out.erase(out.begin());
    }
    return out;
}

}  // namespace mowe

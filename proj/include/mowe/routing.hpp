#pragma once

// Knowledge-rich routing vocabulary, the offline hash table from default-token
// sequences to routing ids, and the online longest-suffix routing-id lookup.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mowe/common.hpp"
#include "mowe/tokenizer.hpp"

namespace mowe {

/// Longest default-token sequence a routing key may have (lookups probe k in [0, 8]).
inline constexpr std::size_t kMaxRoutingKeyLen = 9;

/// Ordered routing vocabulary. After extend_with_default, ids [0, knowledge_threshold)
/// are the default pieces (routing id == default id) and the knowledge-rich words follow
/// in non-increasing corpus frequency.
struct RoutingVocab {
    std::vector<std::string> entries;
    std::vector<std::int64_t> freq;
    std::unordered_map<std::string, RoutingId> routing_id;
    RoutingId knowledge_threshold = 0;

    RoutingId size() const { return static_cast<RoutingId>(entries.size()); }

    void push(std::string word, std::int64_t count) {
        routing_id.emplace(word, size());
        entries.push_back(std::move(word));
        freq.push_back(count);
    }

    /// TSV rows `word<TAB>frequency<TAB>routing_id`, preceded by a comment carrying the
    /// knowledge threshold.
    std::string serialize() const {
        std::string out = "# knowledge_threshold=" + std::to_string(knowledge_threshold) + "\n";
        for (RoutingId i = 0; i < size(); ++i) {
            out += entries[static_cast<std::size_t>(i)] + '\t' + std::to_string(freq[static_cast<std::size_t>(i)]) + '\t' +
                   std::to_string(i) + '\n';
        }
        return out;
    }

    static RoutingVocab parse(std::string_view text) {
        RoutingVocab rv;
        const std::string prefix = "# knowledge_threshold=";
        for (const auto& line : split(text, '\n')) {
            if (line.empty()) {
                continue;
            }
            if (line.rfind(prefix, 0) == 0) {
                rv.knowledge_threshold = std::stoi(line.substr(prefix.size()));
                continue;
            }
            const auto fields = split(line, '\t');
            if (fields.size() != 3) {
                throw ConfigError("routing vocab file: expected 3 tab-separated fields, got '" + line + "'");
            }
            if (std::stoi(fields[2]) != rv.size()) {
                throw ConfigError("routing vocab file: routing ids must be dense and in order");
            }
            rv.push(fields[0], std::stoll(fields[1]));
        }
        return rv;
    }

    void save(const std::string& path) const { write_file(path, serialize()); }
    static RoutingVocab load(const std::string& path) { return parse(read_file(path)); }

    std::uint64_t fingerprint() const {
        std::uint64_t h = fnv1a(std::to_string(knowledge_threshold));
        for (const auto& e : entries) {
            h = fnv1a(e, h);
            h = fnv1a("\n", h);
        }
        return h;
    }
};

namespace detail {

inline bool is_word_char(unsigned char c) { return c >= 0x80 || std::isalnum(c) != 0; }

}  // namespace detail

/// Lowercases and strips leading/trailing punctuation; interior characters are kept.
/// Bytes >= 0x80 count as word characters so UTF-8 letters survive.
inline std::string normalize_word(std::string_view w) {
    std::size_t b = 0;
    std::size_t e = w.size();
    while (b < e && !detail::is_word_char(static_cast<unsigned char>(w[b]))) {
        ++b;
    }
    while (e > b && !detail::is_word_char(static_cast<unsigned char>(w[e - 1]))) {
        --e;
    }
    std::string out(w.substr(b, e - b));
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

/// Routing vocabulary from entity/relation names, ranked by how often each word occurs
/// in the corpus (same normalization applied to corpus words). Ties and unseen words are
/// ordered lexicographically; the first `top_k` are kept.
inline RoutingVocab build_routing_vocab(const std::vector<std::string>& name_list, const std::vector<std::string>& corpus,
                                        int top_k) {
    if (top_k <= 0) {
        throw Error("build_routing_vocab: top_k must be positive");
    }
    if (name_list.empty()) {
        throw Error("build_routing_vocab: name list is empty");
    }
    std::map<std::string, std::int64_t> words;
    for (const auto& name : name_list) {
        for (const auto& raw : split_ws(name)) {
            auto w = normalize_word(raw);
            if (!w.empty()) {
                words.emplace(std::move(w), 0);
            }
        }
    }
    for (const auto& line : corpus) {
        for (const auto& raw : split_ws(line)) {
            const auto it = words.find(normalize_word(raw));
            if (it != words.end()) {
                ++it->second;
            }
        }
    }
    std::vector<std::pair<std::string, std::int64_t>> ranked(words.begin(), words.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (static_cast<int>(ranked.size()) > top_k) {
        ranked.resize(static_cast<std::size_t>(top_k));
    }
    RoutingVocab rv;
    for (auto& [w, c] : ranked) {
        rv.push(std::move(w), c);
    }
    return rv;
}

/// Puts every default piece at the low end of the id space (routing id == default id)
/// and renumbers the knowledge words after them. A word that is already a single
/// word-initial default piece is dropped rather than duplicated.
inline RoutingVocab extend_with_default(const RoutingVocab& rv, const SubwordVocab& dv) {
    RoutingVocab out;
    for (const auto& p : dv.pieces()) {
        out.push(p, 0);
    }
    out.knowledge_threshold = dv.size();
    for (RoutingId i = rv.knowledge_threshold; i < rv.size(); ++i) {
        const auto& w = rv.entries[static_cast<std::size_t>(i)];
        if (dv.find(std::string(kWordMarker) + w) || out.routing_id.count(w) != 0) {
            continue;
        }
        out.push(w, rv.freq[static_cast<std::size_t>(i)]);
    }
    return out;
}

struct KeyHash {
    std::size_t operator()(const std::vector<TokenId>& key) const noexcept {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (const TokenId t : key) {
            h ^= static_cast<std::uint32_t>(t);
            h *= 0x100000001B3ULL;
        }
        return static_cast<std::size_t>(h);
    }
};

struct RoutingHashTable {
    std::unordered_map<std::vector<TokenId>, RoutingId, KeyHash> map;
    std::size_t max_key_len = kMaxRoutingKeyLen;
    RoutingId vocab_size = 0;
    RoutingId knowledge_threshold = 0;
    std::size_t dropped_too_long = 0;
    std::size_t collisions = 0;

    const RoutingId* find(const std::vector<TokenId>& key) const {
        const auto it = map.find(key);
        return it == map.end() ? nullptr : &it->second;
    }

    /// TSV rows `id,id,...<TAB>routing_id`, sorted by routing id then key.
    std::string serialize() const {
        std::vector<std::pair<RoutingId, const std::vector<TokenId>*>> rows;
        rows.reserve(map.size());
        for (const auto& [k, v] : map) {
            rows.emplace_back(v, &k);
        }
        std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first < b.first : *a.second < *b.second;
        });
        std::string out = "# vocab_size=" + std::to_string(vocab_size) +
                          " knowledge_threshold=" + std::to_string(knowledge_threshold) + "\n";
        for (const auto& [v, k] : rows) {
            for (std::size_t i = 0; i < k->size(); ++i) {
                out += (i ? "," : "") + std::to_string((*k)[i]);
            }
            out += '\t' + std::to_string(v) + '\n';
        }
        return out;
    }

    static RoutingHashTable parse(std::string_view text) {
        RoutingHashTable t;
        for (const auto& line : split(text, '\n')) {
            if (line.empty()) {
                continue;
            }
            if (line[0] == '#') {
                for (const auto& kv : split_ws(line.substr(1))) {
                    const auto eq = kv.find('=');
                    if (eq == std::string::npos) {
                        continue;
                    }
                    if (kv.substr(0, eq) == "vocab_size") {
                        t.vocab_size = std::stoi(kv.substr(eq + 1));
                    } else if (kv.substr(0, eq) == "knowledge_threshold") {
                        t.knowledge_threshold = std::stoi(kv.substr(eq + 1));
                    }
                }
                continue;
            }
            const auto fields = split(line, '\t');
            if (fields.size() != 2) {
                throw ConfigError("hash table file: malformed row '" + line + "'");
            }
            std::vector<TokenId> key;
            for (const auto& f : split(fields[0], ',')) {
                key.push_back(std::stoi(f));
            }
            if (key.empty() || key.size() > kMaxRoutingKeyLen) {
                throw ConfigError("hash table file: key length out of range");
            }
            t.map.emplace(std::move(key), std::stoi(fields[1]));
        }
        return t;
    }

    void save(const std::string& path) const { write_file(path, serialize()); }
    static RoutingHashTable load(const std::string& path) { return parse(read_file(path)); }
};

/// Offline table: the default tokenization of every knowledge word (word-initial form)
/// maps to that word's routing id, and every default piece maps to itself. Words longer
/// than kMaxRoutingKeyLen pieces are unreachable by the online probe and are dropped.
inline RoutingHashTable build_hash_table(const RoutingVocab& rv, const SubwordVocab& dv) {
    if (rv.knowledge_threshold != dv.size()) {
        throw Error("build_hash_table: routing vocab was not extended with this default vocab");
    }
    RoutingHashTable t;
    t.vocab_size = rv.size();
    t.knowledge_threshold = rv.knowledge_threshold;
    for (TokenId id = 0; id < dv.size(); ++id) {
        t.map.emplace(std::vector<TokenId>{id}, id);
    }
    // Knowledge words are in non-increasing frequency order, so on a collision the
    // first (more frequent) word keeps the key.
    for (RoutingId rid = rv.knowledge_threshold; rid < rv.size(); ++rid) {
        auto key = encode(dv, rv.entries[static_cast<std::size_t>(rid)]);
        if (key.size() > kMaxRoutingKeyLen) {
            ++t.dropped_too_long;
            continue;
        }
        if (!t.map.emplace(std::move(key), rid).second) {
            ++t.collisions;
        }
    }
    return t;
}

struct RoutingAssignment {
    std::vector<RoutingId> routing_ids;
    std::vector<int> match_len;
};

/// For each position, adopts the routing id of the longest table key that ends there.
inline RoutingAssignment assign_routing_ids(const RoutingHashTable& table, const TokenSequence& seq) {
    RoutingAssignment out;
    out.routing_ids.resize(seq.size());
    out.match_len.resize(seq.size());
    std::vector<TokenId> key;
    key.reserve(table.max_key_len);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const std::size_t longest = std::min(table.max_key_len, i + 1);
        bool found = false;
        for (std::size_t len = longest; len >= 1; --len) {
            key.assign(seq.begin() + static_cast<std::ptrdiff_t>(i + 1 - len), seq.begin() + static_cast<std::ptrdiff_t>(i + 1));
            if (const RoutingId* rid = table.find(key)) {
                out.routing_ids[i] = *rid;
                out.match_len[i] = static_cast<int>(len);
                found = true;
                break;
            }
        }
        if (!found) {
            throw Error("assign_routing_ids: token " + std::to_string(seq[i]) + " has no routing id");
        }
    }
    return out;
}

}  // namespace mowe

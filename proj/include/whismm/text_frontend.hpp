#pragma once

// WordPiece tokenizer: trained with greedy likelihood-gain merges over
// whitespace-pretokenized words, applied with longest-match-first
// segmentation. Sequences are CLS-prefixed; specials hold ids 0-3.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "whismm/common.hpp"

namespace whismm {

inline constexpr int kClsId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr const char* kSpecialSurface[4] = {"[CLS]", "[MASK]", "[PAD]", "[UNK]"};
inline const std::string kContinuationPrefix = "##";

struct Vocabulary {
    std::vector<std::string> pieces;  // line number = id; 0-3 are specials
    std::unordered_map<std::string, int> ids;

    int size() const { return static_cast<int>(pieces.size()); }

    int id_of(const std::string& piece) const {
        auto it = ids.find(piece);
        return it == ids.end() ? -1 : it->second;
    }

    void add(const std::string& piece) {
        require(ids.find(piece) == ids.end(), "Vocabulary: duplicate piece '" + piece + "'");
        ids.emplace(piece, static_cast<int>(pieces.size()));
        pieces.push_back(piece);
    }
};

struct TokenSequence {
    std::vector<int> ids;  // ids[0] == kClsId always

    size_t length() const { return ids.size(); }
};

// Lowercase (ASCII) + whitespace collapse. Input is treated as UTF-8; bytes
// outside ASCII pass through unchanged.
inline std::string normalize_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
        out.push_back(static_cast<char>(c));
    }
    return out;
}

inline std::vector<std::string> split_words(const std::string& normalized) {
    std::vector<std::string> words;
    size_t i = 0;
    while (i < normalized.size()) {
        size_t j = normalized.find(' ', i);
        if (j == std::string::npos) j = normalized.size();
        if (j > i) words.push_back(normalized.substr(i, j - i));
        i = j + 1;
    }
    return words;
}

namespace detail {

// Split a UTF-8 string at code point boundaries. Malformed bytes become
// single-byte units.
inline std::vector<std::string> utf8_codepoints(const std::string& s) {
    std::vector<std::string> cps;
    size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        if (c >= 0xf0) len = 4;
        else if (c >= 0xe0) len = 3;
        else if (c >= 0xc0) len = 2;
        len = std::min(len, s.size() - i);
        // verify continuation bytes; fall back to single byte otherwise
        for (size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) & 0xc0) != 0x80) {
                len = k;
                break;
            }
        }
        cps.push_back(s.substr(i, len));
        i += len;
    }
    return cps;
}

inline std::vector<std::string> word_to_units(const std::string& word) {
    auto cps = utf8_codepoints(word);
    std::vector<std::string> units;
    units.reserve(cps.size());
    for (size_t i = 0; i < cps.size(); ++i)
        units.push_back(i == 0 ? cps[i] : kContinuationPrefix + cps[i]);
    return units;
}

}  // namespace detail

// Greedy likelihood-gain WordPiece training. Pair score is
// freq(pair) / (freq(left) * freq(right)); ties break on the lexicographically
// smaller merged piece so identical corpora always give identical vocabularies.
inline Vocabulary train_wordpiece(const std::vector<std::string>& corpus_lines, int vocab_size) {
    // Pretokenize and count words.
    std::map<std::string, long long> word_counts;
    for (const auto& line : corpus_lines)
        for (const auto& w : split_words(normalize_text(line))) ++word_counts[w];
    require(!word_counts.empty(), "train_wordpiece: empty corpus");

    // Each distinct word becomes a symbol sequence of initial units.
    struct WordEntry {
        std::vector<std::string> units;
        long long count;
    };
    std::vector<WordEntry> words;
    words.reserve(word_counts.size());
    std::map<std::string, long long> unit_seen;  // alphabet, both forms
    for (const auto& [w, cnt] : word_counts) {
        WordEntry e{detail::word_to_units(w), cnt};
        for (const auto& u : e.units) unit_seen[u] += cnt;
        words.push_back(std::move(e));
    }

    int alphabet_size = static_cast<int>(unit_seen.size());
    if (vocab_size <= 4 + alphabet_size)
        fail("train_wordpiece: vocab_size " + std::to_string(vocab_size) +
             " too small; need at least " + std::to_string(4 + alphabet_size + 1) +
             " (4 specials + " + std::to_string(alphabet_size) + " alphabet units + 1)");

    Vocabulary vocab;
    for (const char* s : kSpecialSurface) vocab.add(s);
    for (const auto& [u, cnt] : unit_seen) vocab.add(u);  // lexicographic, deterministic

    while (vocab.size() < vocab_size) {
        // Recount units and adjacent pairs over the current segmentations.
        std::map<std::string, long long> unit_freq;
        std::map<std::pair<std::string, std::string>, long long> pair_freq;
        for (const auto& e : words) {
            for (const auto& u : e.units) unit_freq[u] += e.count;
            for (size_t i = 0; i + 1 < e.units.size(); ++i)
                pair_freq[{e.units[i], e.units[i + 1]}] += e.count;
        }
        if (pair_freq.empty()) break;

        double best_score = -1.0;
        std::pair<std::string, std::string> best_pair;
        std::string best_merged;
        for (const auto& [pr, cnt] : pair_freq) {
            double score = static_cast<double>(cnt) /
                           (static_cast<double>(unit_freq[pr.first]) * unit_freq[pr.second]);
            std::string merged = pr.first + pr.second.substr(kContinuationPrefix.size());
            if (score > best_score || (score == best_score && merged < best_merged)) {
                best_score = score;
                best_pair = pr;
                best_merged = merged;
            }
        }
        if (vocab.id_of(best_merged) >= 0) {
            // Piece already present under a different derivation; apply the
            // merge to the segmentations without growing the vocabulary.
        } else {
            vocab.add(best_merged);
        }
        for (auto& e : words) {
            std::vector<std::string> next;
            next.reserve(e.units.size());
            size_t i = 0;
            while (i < e.units.size()) {
                if (i + 1 < e.units.size() && e.units[i] == best_pair.first &&
                    e.units[i + 1] == best_pair.second) {
                    next.push_back(best_merged);
                    i += 2;
                } else {
                    next.push_back(e.units[i]);
                    ++i;
                }
            }
            e.units = std::move(next);
        }
    }
    return vocab;
}

// Greedy longest-match-first segmentation of one word. Returns false when the
// word cannot be covered (some position has no matching piece).
inline bool wordpiece_segment(const std::string& word, const Vocabulary& vocab,
                              std::vector<int>& out) {
    size_t start = 0;
    size_t emitted0 = out.size();
    while (start < word.size()) {
        size_t end = word.size();
        int match = -1;
        while (end > start) {
            std::string piece = (start == 0 ? "" : kContinuationPrefix) + word.substr(start, end - start);
            int id = vocab.id_of(piece);
            if (id >= 4) {  // specials never match ordinary text
                match = id;
                break;
            }
            --end;
        }
        if (match < 0) {
            out.resize(emitted0);
            return false;
        }
        out.push_back(match);
        start = end;
    }
    return true;
}

// CLS-prefixed encoding; uncoverable words map to a single UNK.
// max_len 0 means unlimited; truncation keeps the prefix.
inline TokenSequence encode(const std::string& text, const Vocabulary& vocab, size_t max_len = 0) {
    TokenSequence seq;
    seq.ids.push_back(kClsId);
    for (const auto& word : split_words(normalize_text(text))) {
        if (!wordpiece_segment(word, vocab, seq.ids)) seq.ids.push_back(kUnkId);
    }
    if (max_len > 0 && seq.ids.size() > max_len) seq.ids.resize(max_len);
    return seq;
}

inline std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
    std::string out;
    for (int id : seq.ids) {
        if (id < 0 || id >= vocab.size())
            fail("decode: token id " + std::to_string(id) + " out of range (vocab size " +
                 std::to_string(vocab.size()) + ")");
        if (id == kClsId || id == kMaskId || id == kPadId) continue;
        const std::string& piece = vocab.pieces[id];
        bool cont = id >= 4 && piece.rfind(kContinuationPrefix, 0) == 0;
        if (!cont && !out.empty()) out += ' ';
        out += cont ? piece.substr(kContinuationPrefix.size()) : piece;
    }
    return out;
}

// Vocabulary file: one piece per line, UTF-8, line number = id.
inline void save_vocab(const std::string& path, const Vocabulary& vocab) {
    std::string out;
    for (const auto& p : vocab.pieces) {
        out += p;
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline Vocabulary load_vocab(const std::string& path) {
    std::string buf = read_file(path);
    Vocabulary vocab;
    size_t i = 0;
    while (i < buf.size()) {
        size_t j = buf.find('\n', i);
        if (j == std::string::npos) j = buf.size();
        std::string line = buf.substr(i, j - i);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) vocab.add(line);
        i = j + 1;
    }
    require(vocab.size() > 4, path + ": vocabulary too small");
    for (int s = 0; s < 4; ++s)
        require(vocab.pieces[s] == kSpecialSurface[s],
                path + ": line " + std::to_string(s) + " must be " + kSpecialSurface[s]);
    return vocab;
}

}  // namespace whismm

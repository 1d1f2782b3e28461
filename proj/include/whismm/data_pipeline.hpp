#pragma once

// Corpus curation over word-aligned transcript records and packaging of
// paired audio/text training segments into shard files.
//
// Filtering rules: drop transcripts with fewer than 100 words, drop
// transcripts whose untranscribable fraction exceeds 0.1%, sort survivors by
// mean word confidence (descending, ties by file_id), then include files in
// order until the cumulative word count first reaches the budget; the
// crossing file is included.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "whismm/audio_frontend.hpp"
#include "whismm/common.hpp"
#include "whismm/text_frontend.hpp"
#include "whismm/wav.hpp"

namespace whismm {

struct Word {
    std::string surface;
    double start = 0.0;  // seconds
    double end = 0.0;
    double confidence = 1.0;
    bool transcribable = true;
};

struct TranscriptRecord {
    std::string file_id;
    std::string audio_path;
    std::vector<Word> words;

    void validate() const {
        for (size_t i = 0; i < words.size(); ++i) {
            const Word& w = words[i];
            require(w.end >= w.start, file_id + ": word " + std::to_string(i) + " has end < start");
            require(w.confidence >= 0.0 && w.confidence <= 1.0,
                    file_id + ": word " + std::to_string(i) + " confidence outside [0, 1]");
            if (i > 0)
                require(w.start >= words[i - 1].end,
                        file_id + ": word intervals overlap at index " + std::to_string(i));
        }
    }

    size_t word_count() const { return words.size(); }

    size_t untranscribable_count() const {
        size_t n = 0;
        for (const auto& w : words)
            if (!w.transcribable) ++n;
        return n;
    }

    double mean_confidence() const {
        if (words.empty()) return 0.0;
        double s = 0.0;
        for (const auto& w : words) s += w.confidence;
        return s / static_cast<double>(words.size());
    }

    std::string text() const {
        std::string s;
        for (const auto& w : words) {
            if (!s.empty()) s += ' ';
            s += w.surface;
        }
        return s;
    }
};

struct ManifestEntry {
    std::string file_id;
    size_t word_count = 0;
    double mean_confidence = 0.0;
    bool included = false;
    std::string exclusion_reason;  // "short" | "untranscribable" | "budget" | "" when included
};

struct CorpusManifest {
    std::vector<ManifestEntry> records;

    std::vector<std::string> included_ids() const {
        std::vector<std::string> out;
        for (const auto& r : records)
            if (r.included) out.push_back(r.file_id);
        return out;
    }

    size_t included_words() const {
        size_t n = 0;
        for (const auto& r : records)
            if (r.included) n += r.word_count;
        return n;
    }
};

inline CorpusManifest filter_corpus(const std::vector<TranscriptRecord>& records,
                                    size_t budget_words, std::ostream* warn = nullptr) {
    require(budget_words > 0, "filter_corpus: budget must be positive");
    CorpusManifest manifest;
    if (records.empty()) {
        if (warn) *warn << "filter_corpus: empty input, manifest is empty\n";
        return manifest;
    }

    std::vector<ManifestEntry> survivors;
    std::vector<ManifestEntry> rejected;
    for (const auto& rec : records) {
        rec.validate();
        ManifestEntry e;
        e.file_id = rec.file_id;
        e.word_count = rec.word_count();
        e.mean_confidence = rec.mean_confidence();
        if (e.word_count < 100) {
            e.exclusion_reason = "short";
            rejected.push_back(std::move(e));
        } else if (rec.untranscribable_count() * 1000 > e.word_count) {
            // integer form of fraction > 0.001; exactly 0.1% stays in
            e.exclusion_reason = "untranscribable";
            rejected.push_back(std::move(e));
        } else {
            survivors.push_back(std::move(e));
        }
    }

    std::sort(survivors.begin(), survivors.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
        if (a.mean_confidence != b.mean_confidence) return a.mean_confidence > b.mean_confidence;
        return a.file_id < b.file_id;
    });

    size_t cumulative = 0;
    for (auto& e : survivors) {
        if (cumulative < budget_words) {
            e.included = true;
            cumulative += e.word_count;
        } else {
            e.exclusion_reason = "budget";
        }
    }

    manifest.records = std::move(survivors);
    for (auto& e : rejected) manifest.records.push_back(std::move(e));
    return manifest;
}

// ---------------------------------------------------------------------------
// JSON-lines IO for records and manifests.
// ---------------------------------------------------------------------------

inline TranscriptRecord transcript_from_json(const nlohmann::json& j) {
    TranscriptRecord rec;
    rec.file_id = j.at("file_id").get<std::string>();
    rec.audio_path = j.value("audio_path", std::string());
    for (const auto& wj : j.at("words")) {
        Word w;
        w.surface = wj.at("surface").get<std::string>();
        w.start = wj.at("start").get<double>();
        w.end = wj.at("end").get<double>();
        w.confidence = wj.at("confidence").get<double>();
        w.transcribable = wj.value("transcribable", true);
        rec.words.push_back(std::move(w));
    }
    return rec;
}

inline std::vector<TranscriptRecord> read_records_jsonl(const std::string& path) {
    std::string buf = read_file(path);
    std::vector<TranscriptRecord> records;
    size_t i = 0, line_no = 0;
    while (i < buf.size()) {
        size_t j = buf.find('\n', i);
        if (j == std::string::npos) j = buf.size();
        std::string line = buf.substr(i, j - i);
        i = j + 1;
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            records.push_back(transcript_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            fail(path + ":" + std::to_string(line_no) + ": bad record: " + e.what());
        }
    }
    return records;
}

inline std::string manifest_to_jsonl(const CorpusManifest& manifest) {
    std::string out;
    for (const auto& e : manifest.records) {
        nlohmann::json j{{"file_id", e.file_id},
                         {"word_count", e.word_count},
                         {"mean_confidence", e.mean_confidence},
                         {"included", e.included}};
        if (!e.included) j["exclusion_reason"] = e.exclusion_reason;
        out += j.dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Segments: greedy packing of consecutive words under token and duration
// limits, audio sliced at word boundaries. No word is split across segments.
// ---------------------------------------------------------------------------

struct SegmentLimits {
    size_t max_text_len = 64;        // tokens including CLS
    double max_audio_seconds = 10.0;
    size_t min_audio_frames = 16;    // shorter mels cannot feed the conv stem
};

struct Segment {
    std::vector<int> token_ids;  // CLS-prefixed
    MelSpectrogram mel;
    std::string file_id;
    double t0 = 0.0, t1 = 0.0;  // seconds within the source audio
};

namespace detail {

inline size_t word_piece_count(const std::string& word, const Vocabulary& vocab) {
    std::vector<int> scratch;
    if (!wordpiece_segment(normalize_text(word), vocab, scratch)) return 1;  // UNK
    return scratch.size();
}

}  // namespace detail

inline std::vector<Segment> segment_pairs(const TranscriptRecord& record, const Vocabulary& vocab,
                                          const SegmentLimits& limits,
                                          const AudioClip* preloaded = nullptr,
                                          std::ostream* warn = nullptr) {
    require(limits.max_text_len >= 2, "segment_pairs: max_text_len must allow CLS plus one token");
    require(limits.max_audio_seconds > 0.0, "segment_pairs: max_audio_seconds must be positive");
    record.validate();

    AudioClip clip;
    if (preloaded) {
        clip = *preloaded;
    } else {
        clip = read_wav(record.audio_path);
    }
    if (clip.sample_rate != kMelSampleRate) clip = resample(clip, kMelSampleRate);

    // Group words greedily.
    struct Group {
        size_t first = 0, last = 0;  // word index range, inclusive
    };
    std::vector<Group> groups;
    size_t tokens_in_group = 0;
    for (size_t i = 0; i < record.words.size(); ++i) {
        const Word& w = record.words[i];
        size_t pieces = detail::word_piece_count(w.surface, vocab);
        bool alone_ok = 1 + pieces <= limits.max_text_len &&
                        (w.end - w.start) <= limits.max_audio_seconds;
        if (!alone_ok) {
            if (warn)
                *warn << record.file_id << ": word " << i << " ('" << w.surface
                      << "') exceeds segment limits, skipped\n";
            tokens_in_group = 0;  // close any open group
            continue;
        }
        bool extend = false;
        if (tokens_in_group > 0 && !groups.empty() && groups.back().last == i - 1) {
            double span = w.end - record.words[groups.back().first].start;
            extend = tokens_in_group + pieces <= limits.max_text_len - 1 &&
                     span <= limits.max_audio_seconds;
        }
        if (extend) {
            groups.back().last = i;
            tokens_in_group += pieces;
        } else {
            groups.push_back({i, i});
            tokens_in_group = pieces;
        }
    }

    std::vector<Segment> segments;
    for (const auto& g : groups) {
        double t0 = record.words[g.first].start;
        double t1 = record.words[g.last].end;
        auto s0 = static_cast<long long>(std::floor(t0 * kMelSampleRate));
        auto s1 = static_cast<long long>(std::ceil(t1 * kMelSampleRate));
        s0 = std::max<long long>(s0, 0);
        s1 = std::min<long long>(s1, static_cast<long long>(clip.samples.size()));
        if (s1 - s0 < kMelWindow ||
            mel_frame_count(static_cast<size_t>(std::max<long long>(s1 - s0, kMelWindow))) <
                limits.min_audio_frames) {
            if (warn)
                *warn << record.file_id << ": segment at " << t0
                      << "s too short for feature extraction, skipped\n";
            continue;
        }
        std::string text;
        for (size_t i = g.first; i <= g.last; ++i) {
            if (!text.empty()) text += ' ';
            text += record.words[i].surface;
        }
        Segment seg;
        seg.token_ids = encode(text, vocab, limits.max_text_len).ids;
        seg.file_id = record.file_id;
        seg.t0 = t0;
        seg.t1 = t1;
        AudioClip piece{std::vector<float>(clip.samples.begin() + s0, clip.samples.begin() + s1),
                        kMelSampleRate};
        seg.mel = log_mel(piece);
        segments.push_back(std::move(seg));
    }
    return segments;
}

// ---------------------------------------------------------------------------
// Shard file: "WSHD" | u32 count | per segment: u32 token count, token ids as
// u32, then the WMEL feature block. Round-trips token ids and features
// bitwise.
// ---------------------------------------------------------------------------

inline void write_shard(const std::string& path, const std::vector<Segment>& segments) {
    require(!segments.empty(), "write_shard: refusing to write an empty shard");
    std::string out = "WSHD";
    put_u32(out, static_cast<uint32_t>(segments.size()));
    for (const auto& seg : segments) {
        put_u32(out, static_cast<uint32_t>(seg.token_ids.size()));
        for (int id : seg.token_ids) put_u32(out, static_cast<uint32_t>(id));
        append_wmel(out, seg.mel);
    }
    write_file_atomic(path, out);
}

inline std::vector<Segment> read_shard(const std::string& path) {
    std::string buf = read_file(path);
    ByteReader r(buf, path + ": ");
    if (r.bytes(4, "WSHD magic") != "WSHD") fail(path + ": bad shard magic");
    uint32_t count = r.u32("segment count");
    std::vector<Segment> segments;
    segments.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        r.context = path + ": segment " + std::to_string(i) + ": ";
        Segment seg;
        uint32_t n_tokens = r.u32("token count");
        seg.token_ids.reserve(n_tokens);
        for (uint32_t t = 0; t < n_tokens; ++t)
            seg.token_ids.push_back(static_cast<int>(r.u32("token id")));
        seg.mel = parse_wmel(r);
        segments.push_back(std::move(seg));
    }
    return segments;
}

}  // namespace whismm

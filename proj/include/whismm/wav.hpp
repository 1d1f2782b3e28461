#pragma once

// Minimal RIFF/WAV support: PCM 16-bit little-endian, mono or stereo.
// Stereo is averaged down to mono at load. Anything else is rejected.

#include <cstdint>
#include <string>
#include <vector>

#include "whismm/common.hpp"

namespace whismm {

struct AudioClip {
    std::vector<float> samples;  // [-1, 1]
    int sample_rate = 0;
};

inline AudioClip read_wav(const std::string& path) {
    std::string buf = read_file(path);
    ByteReader r(buf, path + ": ");
    if (r.bytes(4, "RIFF tag") != "RIFF") fail(path + ": not a RIFF file");
    r.u32("riff size");
    if (r.bytes(4, "WAVE tag") != "WAVE") fail(path + ": not a WAVE file");

    int channels = 0, sample_rate = 0, bits = 0, format = 0;
    std::vector<float> samples;
    bool have_fmt = false, have_data = false;
    while (!r.at_end()) {
        if (buf.size() - r.pos < 8) break;  // trailing junk
        std::string id = r.bytes(4, "chunk id");
        uint32_t size = r.u32("chunk size");
        if (id == "fmt ") {
            std::string fmt = r.bytes(size, "fmt chunk");
            if (size < 16) fail(path + ": fmt chunk too small");
            auto u16 = [&](size_t off) {
                return (uint16_t)(uint8_t)fmt[off] | ((uint16_t)(uint8_t)fmt[off + 1] << 8);
            };
            auto u32f = [&](size_t off) {
                return (uint32_t)(uint8_t)fmt[off] | ((uint32_t)(uint8_t)fmt[off + 1] << 8) |
                       ((uint32_t)(uint8_t)fmt[off + 2] << 16) | ((uint32_t)(uint8_t)fmt[off + 3] << 24);
            };
            format = u16(0);
            channels = u16(2);
            sample_rate = static_cast<int>(u32f(4));
            bits = u16(14);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) fail(path + ": data chunk before fmt chunk");
            if (format != 1 || bits != 16) fail(path + ": only PCM 16-bit supported");
            if (channels != 1 && channels != 2) fail(path + ": only mono/stereo supported");
            std::string data = r.bytes(size, "data chunk");
            size_t n_frames = data.size() / (2 * static_cast<size_t>(channels));
            samples.resize(n_frames);
            for (size_t i = 0; i < n_frames; ++i) {
                float acc = 0.0f;
                for (int ch = 0; ch < channels; ++ch) {
                    size_t off = (i * channels + ch) * 2;
                    int16_t s = static_cast<int16_t>((uint16_t)(uint8_t)data[off] |
                                                     ((uint16_t)(uint8_t)data[off + 1] << 8));
                    acc += static_cast<float>(s) / 32768.0f;
                }
                samples[i] = acc / static_cast<float>(channels);
            }
            have_data = true;
        } else {
            r.bytes(size, "chunk payload");  // skip unknown chunk
        }
        if (size % 2 == 1 && !r.at_end()) r.bytes(1, "chunk padding");
    }
    if (!have_data) fail(path + ": no data chunk");
    return AudioClip{std::move(samples), sample_rate};
}

inline void write_wav(const std::string& path, const AudioClip& clip) {
    std::string data;
    data.reserve(44 + clip.samples.size() * 2);
    auto put_u16 = [&](uint16_t v) {
        data.push_back(static_cast<char>(v & 0xff));
        data.push_back(static_cast<char>(v >> 8));
    };
    uint32_t payload = static_cast<uint32_t>(clip.samples.size() * 2);
    data += "RIFF";
    put_u32(data, 36 + payload);
    data += "WAVEfmt ";
    put_u32(data, 16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(data, static_cast<uint32_t>(clip.sample_rate));
    put_u32(data, static_cast<uint32_t>(clip.sample_rate) * 2);
    put_u16(2);
    put_u16(16);
    data += "data";
    put_u32(data, payload);
    for (float s : clip.samples) {
        float c = std::max(-1.0f, std::min(1.0f, s));
        auto q = static_cast<int16_t>(std::lround(c * 32767.0f));
        put_u16(static_cast<uint16_t>(q));
    }
    write_file_atomic(path, data);
}

}  // namespace whismm

#pragma once

// Raw audio -> 80-channel log-mel features.
//
// Pipeline: band-limited resampling to 16 kHz, STFT with a periodic Hann
// window (400 samples, hop 160, no padding - the final partial window is
// dropped), HTK-scale triangular mel filterbank, log10 with a 1e-10 power
// floor, then dynamic-range compression:
//     x <- (max(x, global_max - 8) + 4) / 4

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "whismm/common.hpp"
#include "whismm/tensor.hpp"
#include "whismm/wav.hpp"

namespace whismm {

constexpr int kMelSampleRate = 16000;
constexpr int kMelWindow = 400;   // 25 ms
constexpr int kMelHop = 160;      // 10 ms
constexpr int kMelChannels = 80;
constexpr int kMelFftBins = kMelWindow / 2 + 1;  // 201 one-sided bins
constexpr double kMelPowerFloor = 1e-10;

struct MelSpectrogram {
    Tensor<float> values;  // frames x 80, row-major
    int frame_stride_ms = 10;
    int window_ms = 25;
    int n_mels = kMelChannels;

    size_t frames() const { return values.rows(); }
};

inline size_t mel_frame_count(size_t n_samples) {
    require(n_samples >= kMelWindow, "mel_frame_count: clip shorter than one window");
    return 1 + (n_samples - kMelWindow) / kMelHop;
}

// HTK mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters, centers equally spaced on the mel scale between 0 Hz
// and Nyquist. Rows are filters (n_mels x n_fft/2+1), peak weight 1.
inline Tensor<double> mel_filterbank(int n_mels = kMelChannels, int n_fft = kMelWindow,
                                     int sample_rate = kMelSampleRate) {
    require(n_mels >= 1, "mel_filterbank: n_mels must be >= 1");
    require(n_fft % 2 == 0, "mel_filterbank: n_fft must be even");
    int n_bins = n_fft / 2 + 1;
    require(n_mels <= n_bins, "mel_filterbank: n_mels exceeds number of FFT bins");

    double mel_lo = hz_to_mel(0.0);
    double mel_hi = hz_to_mel(sample_rate / 2.0);
    std::vector<double> hz_pts(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        hz_pts[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));

    Tensor<double> fb({static_cast<size_t>(n_mels), static_cast<size_t>(n_bins)});
    for (int m = 0; m < n_mels; ++m) {
        double f0 = hz_pts[m], f1 = hz_pts[m + 1], f2 = hz_pts[m + 2];
        for (int k = 0; k < n_bins; ++k) {
            double fk = static_cast<double>(k) * sample_rate / n_fft;
            double w = 0.0;
            if (fk > f0 && fk <= f1) w = (fk - f0) / (f1 - f0);
            else if (fk > f1 && fk < f2) w = (f2 - fk) / (f2 - f1);
            fb.at(m, k) = w;
        }
    }
    return fb;
}

// Center frequency (Hz) of each mel channel, for diagnostics and tests.
inline std::vector<double> mel_filter_centers(int n_mels = kMelChannels,
                                              int sample_rate = kMelSampleRate) {
    double mel_lo = hz_to_mel(0.0);
    double mel_hi = hz_to_mel(sample_rate / 2.0);
    std::vector<double> centers(n_mels);
    for (int m = 0; m < n_mels; ++m)
        centers[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (n_mels + 1));
    return centers;
}

// Band-limited resampling with a Hann-windowed sinc kernel (32 taps per side).
inline AudioClip resample(const AudioClip& clip, int target_rate) {
    require(!clip.samples.empty(), "resample: empty clip");
    require(clip.sample_rate > 0, "resample: source rate must be positive");
    require(target_rate > 0, "resample: target rate must be positive");
    if (target_rate == clip.sample_rate) return clip;

    const double ratio = static_cast<double>(target_rate) / clip.sample_rate;
    const size_t out_len = static_cast<size_t>(
        std::llround(static_cast<double>(clip.samples.size()) * target_rate / clip.sample_rate));
    const double cutoff = std::min(1.0, ratio);  // fraction of source Nyquist
    const int half_width = 32;
    const double taps = half_width / cutoff;

    AudioClip out;
    out.sample_rate = target_rate;
    out.samples.resize(out_len);
    const size_t n = clip.samples.size();
    for (size_t i = 0; i < out_len; ++i) {
        double center = static_cast<double>(i) / ratio;
        long j0 = static_cast<long>(std::ceil(center - taps));
        long j1 = static_cast<long>(std::floor(center + taps));
        double acc = 0.0;
        for (long j = j0; j <= j1; ++j) {
            if (j < 0 || j >= static_cast<long>(n)) continue;
            double u = center - static_cast<double>(j);
            double x = M_PI * cutoff * u;
            double sinc = (std::abs(x) < 1e-12) ? 1.0 : std::sin(x) / x;
            double win = 0.5 * (1.0 + std::cos(M_PI * u / taps));
            acc += static_cast<double>(clip.samples[j]) * cutoff * sinc * win;
        }
        out.samples[i] = static_cast<float>(std::max(-1.0, std::min(1.0, acc)));
    }
    return out;
}

namespace detail {

// DFT twiddles for n_fft = 400 share a 400-entry table via k*n mod 400.
struct DftTable {
    std::vector<double> cos_t, sin_t;
    DftTable() : cos_t(kMelWindow), sin_t(kMelWindow) {
        for (int i = 0; i < kMelWindow; ++i) {
            double a = 2.0 * M_PI * i / kMelWindow;
            cos_t[i] = std::cos(a);
            sin_t[i] = std::sin(a);
        }
    }
};

inline const DftTable& dft_table() {
    static const DftTable t;
    return t;
}

inline const std::vector<double>& hann_periodic_400() {
    static const std::vector<double> w = [] {
        std::vector<double> v(kMelWindow);
        for (int i = 0; i < kMelWindow; ++i)
            v[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / kMelWindow));
        return v;
    }();
    return w;
}

}  // namespace detail

// One-sided power spectrum of a single 400-sample frame (window applied).
inline void stft_frame_power(const float* frame, std::vector<double>& power) {
    const auto& tw = detail::dft_table();
    const auto& win = detail::hann_periodic_400();
    power.resize(kMelFftBins);
    std::vector<double> wx(kMelWindow);
    for (int i = 0; i < kMelWindow; ++i) wx[i] = static_cast<double>(frame[i]) * win[i];
    for (int k = 0; k < kMelFftBins; ++k) {
        double re = 0.0, im = 0.0;
        size_t idx = 0;
        for (int i = 0; i < kMelWindow; ++i) {
            re += wx[i] * tw.cos_t[idx];
            im -= wx[i] * tw.sin_t[idx];
            idx += k;
            if (idx >= kMelWindow) idx -= kMelWindow;
        }
        power[k] = re * re + im * im;
    }
}

inline MelSpectrogram log_mel(const AudioClip& clip) {
    require(clip.sample_rate == kMelSampleRate, "log_mel: clip must be resampled to 16000 Hz");
    require(clip.samples.size() >= kMelWindow,
            "log_mel: clip shorter than one 25 ms window (" +
                std::to_string(clip.samples.size()) + " samples, need 400)");
    static const Tensor<double> fb = mel_filterbank();

    size_t n_frames = mel_frame_count(clip.samples.size());
    Tensor<double> logmel({n_frames, static_cast<size_t>(kMelChannels)});
    std::vector<double> power;
    double global_max = -1e300;
    for (size_t f = 0; f < n_frames; ++f) {
        stft_frame_power(clip.samples.data() + f * kMelHop, power);
        for (int m = 0; m < kMelChannels; ++m) {
            double acc = 0.0;
            const double* frow = fb.data.data() + static_cast<size_t>(m) * kMelFftBins;
            for (int k = 0; k < kMelFftBins; ++k) acc += frow[k] * power[k];
            double v = std::log10(std::max(acc, kMelPowerFloor));
            logmel.at(f, m) = v;
            global_max = std::max(global_max, v);
        }
    }

    MelSpectrogram mel;
    mel.values = Tensor<float>({n_frames, static_cast<size_t>(kMelChannels)});
    double floor = global_max - 8.0;
    for (size_t i = 0; i < logmel.numel(); ++i)
        mel.values.data[i] = static_cast<float>((std::max(logmel.data[i], floor) + 4.0) / 4.0);
    return mel;
}

// ---------------------------------------------------------------------------
// WMEL feature dump: "WMEL" | u32 frames | u32 n_mels | f32 row-major values.
// ---------------------------------------------------------------------------

inline void append_wmel(std::string& out, const MelSpectrogram& mel) {
    out += "WMEL";
    put_u32(out, static_cast<uint32_t>(mel.frames()));
    put_u32(out, static_cast<uint32_t>(mel.n_mels));
    for (float v : mel.values.data) put_f32(out, v);
}

inline MelSpectrogram parse_wmel(ByteReader& r) {
    if (r.bytes(4, "WMEL magic") != "WMEL") fail(r.context + "bad WMEL magic");
    uint32_t frames = r.u32("frame count");
    uint32_t n_mels = r.u32("mel channel count");
    MelSpectrogram mel;
    mel.n_mels = static_cast<int>(n_mels);
    mel.values = Tensor<float>({frames, n_mels});
    r.need(static_cast<size_t>(frames) * n_mels * 4, "WMEL payload");
    for (size_t i = 0; i < mel.values.numel(); ++i) mel.values.data[i] = r.f32();
    return mel;
}

inline void write_wmel(const std::string& path, const MelSpectrogram& mel) {
    std::string out;
    append_wmel(out, mel);
    write_file_atomic(path, out);
}

inline MelSpectrogram read_wmel(const std::string& path) {
    std::string buf = read_file(path);
    ByteReader r(buf, path + ": ");
    return parse_wmel(r);
}

}  // namespace whismm

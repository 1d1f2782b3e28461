#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "whismm/audio_frontend.hpp"
#include "whismm/rng.hpp"
#include "whismm/wav.hpp"

using namespace whismm;

namespace {

AudioClip sine(double hz, double seconds, int rate, float amp = 1.0f) {
    AudioClip c;
    c.sample_rate = rate;
    size_t n = static_cast<size_t>(std::llround(seconds * rate));
    c.samples.resize(n);
    for (size_t i = 0; i < n; ++i)
        c.samples[i] = amp * static_cast<float>(std::sin(2.0 * M_PI * hz * i / rate));
    return c;
}

// Test-local DFT magnitude, independent of the production STFT path.
std::vector<double> dft_magnitude(const std::vector<float>& x) {
    size_t n = x.size();
    std::vector<double> mag(n / 2 + 1);
    for (size_t k = 0; k < mag.size(); ++k) {
        double re = 0, im = 0;
        for (size_t i = 0; i < n; ++i) {
            double a = 2.0 * M_PI * k * i / n;
            re += x[i] * std::cos(a);
            im -= x[i] * std::sin(a);
        }
        mag[k] = std::sqrt(re * re + im * im);
    }
    return mag;
}

}  // namespace

TEST_CASE("resample at the same rate returns identical samples") {
    AudioClip c = sine(440.0, 0.1, 16000);
    AudioClip out = resample(c, 16000);
    REQUIRE(out.samples == c.samples);
    REQUIRE(out.sample_rate == 16000);
}

TEST_CASE("resample length arithmetic") {
    AudioClip c = sine(1000.0, 0.5, 48000);
    REQUIRE(c.samples.size() == 24000);
    AudioClip out = resample(c, 16000);
    CHECK(out.samples.size() == 8000);
    CHECK(out.sample_rate == 16000);
}

TEST_CASE("resampled sine keeps its DFT peak at the source frequency") {
    AudioClip c = sine(440.0, 1.0, 8000, 0.8f);
    AudioClip out = resample(c, 16000);
    REQUIRE(out.samples.size() == 16000);
    auto mag = dft_magnitude(out.samples);
    size_t argmax = 1;  // skip DC
    for (size_t k = 2; k < mag.size(); ++k)
        if (mag[k] > mag[argmax]) argmax = k;
    // 16000 samples at 16 kHz: bin k corresponds to k Hz.
    CHECK(argmax == 440);
}

TEST_CASE("resample rejects an empty clip") {
    AudioClip empty;
    empty.sample_rate = 16000;
    CHECK_THROWS_AS(resample(empty, 8000), Error);
}

TEST_CASE("mel filterbank construction properties") {
    Tensor<double> fb = mel_filterbank();
    REQUIRE(fb.rows() == 80);
    REQUIRE(fb.cols() == 201);
    for (size_t m = 0; m < fb.rows(); ++m) {
        double row_sum = 0;
        double row_min = 0;
        for (size_t k = 0; k < fb.cols(); ++k) {
            row_min = std::min(row_min, fb.at(m, k));
            row_sum += fb.at(m, k);
        }
        CHECK(row_min >= 0.0);
        CHECK(row_sum > 0.0);
    }
    auto centers = mel_filter_centers();
    for (size_t m = 1; m < centers.size(); ++m) CHECK(centers[m] > centers[m - 1]);
}

TEST_CASE("mel filterbank rejects more channels than FFT bins") {
    CHECK_THROWS_AS(mel_filterbank(300, 400, 16000), Error);
    CHECK_THROWS_AS(mel_filterbank(80, 401, 16000), Error);
}

TEST_CASE("pure 1000 Hz tone activates the channel centered nearest 1000 Hz") {
    // Analytic tone spectrum: all power in the bin at 1000 Hz (bin 25).
    std::vector<double> power(kMelFftBins, 0.0);
    power[25] = 1.0;
    Tensor<double> fb = mel_filterbank();
    size_t argmax = 0;
    double best = -1;
    for (size_t m = 0; m < fb.rows(); ++m) {
        double v = 0;
        for (size_t k = 0; k < fb.cols(); ++k) v += fb.at(m, k) * power[k];
        if (v > best) { best = v; argmax = m; }
    }
    // Oracle: channel whose HTK-scale center is nearest 1000 Hz.
    auto centers = mel_filter_centers();
    size_t nearest = 0;
    for (size_t m = 1; m < centers.size(); ++m)
        if (std::abs(centers[m] - 1000.0) < std::abs(centers[nearest] - 1000.0)) nearest = m;
    CHECK(argmax == nearest);
}

TEST_CASE("log_mel framing arithmetic") {
    AudioClip c = sine(440.0, 1.0, 16000);
    REQUIRE(c.samples.size() == 16000);
    MelSpectrogram mel = log_mel(c);
    CHECK(mel.frames() == 98);
    CHECK(mel.values.cols() == 80);

    // Framing invariant over assorted lengths.
    for (size_t n : {size_t(400), size_t(401), size_t(559), size_t(560), size_t(561),
                     size_t(4000), size_t(16123)}) {
        AudioClip clip;
        clip.sample_rate = 16000;
        clip.samples.assign(n, 0.1f);
        CHECK(log_mel(clip).frames() == 1 + (n - 400) / 160);
    }
}

TEST_CASE("silent clip maps to the normalized log floor everywhere") {
    AudioClip c;
    c.sample_rate = 16000;
    c.samples.assign(16000, 0.0f);
    MelSpectrogram mel = log_mel(c);
    float expected = static_cast<float>((std::log10(kMelPowerFloor) + 4.0) / 4.0);
    for (float v : mel.values.data) REQUIRE(v == mel.values.data[0]);  // all identical
    CHECK(mel.values.data[0] == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("log_mel rejects clips shorter than one window and wrong rates") {
    AudioClip c;
    c.sample_rate = 16000;
    c.samples.assign(399, 0.5f);
    CHECK_THROWS_AS(log_mel(c), Error);
    c.sample_rate = 8000;
    c.samples.assign(16000, 0.5f);
    CHECK_THROWS_AS(log_mel(c), Error);
}

TEST_CASE("1 kHz sine: per-frame argmax channel matches an independent DFT oracle") {
    AudioClip c = sine(1000.0, 1.0, 16000);
    MelSpectrogram mel = log_mel(c);
    Tensor<double> fb = mel_filterbank();

    // Oracle path: windowed frame -> test-local DFT -> filterbank, outside
    // the production STFT code.
    std::vector<double> window(400);
    for (int i = 0; i < 400; ++i) window[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / 400.0));
    for (size_t f = 0; f < mel.frames(); f += 17) {
        std::vector<float> frame(400);
        for (int i = 0; i < 400; ++i)
            frame[i] = c.samples[f * 160 + i] * static_cast<float>(window[i]);
        auto mag = dft_magnitude(frame);
        size_t oracle_argmax = 0;
        double best = -1;
        for (size_t m = 0; m < 80; ++m) {
            double v = 0;
            for (size_t k = 0; k < fb.cols(); ++k) v += fb.at(m, k) * mag[k] * mag[k];
            if (v > best) { best = v; oracle_argmax = m; }
        }
        size_t got = 0;
        for (size_t m = 1; m < 80; ++m)
            if (mel.values.at(f, m) > mel.values.at(f, got)) got = m;
        CHECK(got == oracle_argmax);
    }
}

TEST_CASE("scaling samples up never decreases pre-normalization log-mel values") {
    Rng rng(77);
    AudioClip a;
    a.sample_rate = 16000;
    a.samples.resize(1200);
    for (auto& s : a.samples) s = static_cast<float>(rng.normal(0.0, 0.05));
    AudioClip b = a;
    for (auto& s : b.samples) s *= 3.5f;

    Tensor<double> fb = mel_filterbank();
    std::vector<double> pa, pb;
    for (size_t f = 0; f < mel_frame_count(a.samples.size()); ++f) {
        stft_frame_power(a.samples.data() + f * kMelHop, pa);
        stft_frame_power(b.samples.data() + f * kMelHop, pb);
        for (size_t m = 0; m < 80; ++m) {
            double va = 0, vb = 0;
            for (size_t k = 0; k < fb.cols(); ++k) {
                va += fb.at(m, k) * pa[k];
                vb += fb.at(m, k) * pb[k];
            }
            double la = std::log10(std::max(va, kMelPowerFloor));
            double lb = std::log10(std::max(vb, kMelPowerFloor));
            REQUIRE(lb >= la);
        }
    }
}

TEST_CASE("pure tone energy concentrates within +/-2 FFT bins") {
    for (double hz : {1000.0, 2000.0, 3160.0}) {
        AudioClip c = sine(hz, 0.2, 16000);
        std::vector<double> power;
        for (size_t f = 0; f < 3; ++f) {
            stft_frame_power(c.samples.data() + f * kMelHop, power);
            double total = 0, near = 0;
            long center = std::lround(hz / (16000.0 / 400.0));
            for (long k = 0; k < static_cast<long>(power.size()); ++k) {
                total += power[k];
                if (std::abs(k - center) <= 2) near += power[k];
            }
            CHECK(near / total >= 0.9);
        }
    }
}

TEST_CASE("log_mel is deterministic for identical inputs") {
    AudioClip c = sine(731.0, 0.3, 16000, 0.6f);
    MelSpectrogram a = log_mel(c);
    MelSpectrogram b = log_mel(c);
    REQUIRE(a.values.data == b.values.data);
}

TEST_CASE("WMEL round-trip is bitwise exact and rejects corruption") {
    AudioClip c = sine(500.0, 0.1, 16000);
    MelSpectrogram mel = log_mel(c);
    auto path = std::filesystem::temp_directory_path() / "whismm_test.wmel";
    write_wmel(path.string(), mel);
    MelSpectrogram back = read_wmel(path.string());
    REQUIRE(back.values.shape == mel.values.shape);
    REQUIRE(back.values.data == mel.values.data);

    std::string raw = read_file(path.string());
    raw[0] = 'X';
    auto bad = std::filesystem::temp_directory_path() / "whismm_test_bad.wmel";
    write_file_atomic(bad.string(), raw);
    CHECK_THROWS_AS(read_wmel(bad.string()), Error);

    std::string truncated = read_file(path.string()).substr(0, 20);
    write_file_atomic(bad.string(), truncated);
    CHECK_THROWS_WITH(read_wmel(bad.string()), Catch::Matchers::ContainsSubstring("truncated"));
    std::filesystem::remove(path);
    std::filesystem::remove(bad);
}

TEST_CASE("WAV round-trip stays within quantization error and bounds") {
    auto path = std::filesystem::temp_directory_path() / "whismm_test.wav";
    AudioClip c = sine(440.0, 0.05, 16000, 0.5f);
    write_wav(path.string(), c);
    AudioClip back = read_wav(path.string());
    REQUIRE(back.sample_rate == 16000);
    REQUIRE(back.samples.size() == c.samples.size());
    for (size_t i = 0; i < back.samples.size(); ++i) {
        REQUIRE(std::abs(back.samples[i] - c.samples[i]) < 2.0f / 32768.0f);
        REQUIRE(back.samples[i] >= -1.0f);
        REQUIRE(back.samples[i] <= 1.0f);
    }
    std::filesystem::remove(path);
}

#pragma once

// Flat key=value run configuration. Precedence, lowest to highest:
// built-in defaults < WHISMM_SEED (seed only) < config file < command line.
// Unknown keys are rejected; resolved configs are frozen into the run
// directory verbatim.

#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "whismm/common.hpp"
#include "whismm/model.hpp"
#include "whismm/objectives.hpp"
#include "whismm/trainer.hpp"

namespace whismm {

class RunConfig {
public:
    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"seed", "42"},
            {"model.d_model", "128"},
            {"model.n_layers_audio", "4"},
            {"model.n_layers_text", "4"},
            {"model.n_layers_mm", "2"},
            {"model.n_heads", "4"},
            {"model.ffn_mult", "4"},
            {"model.conv_width", "16"},
            {"model.conv2_stride", "10"},
            {"model.vocab_size", "8192"},
            {"model.max_text_len", "64"},
            {"model.max_audio_patches", "128"},
            {"train.epochs", "5"},
            {"train.learning_rate", "0.1"},
            {"train.momentum", "0.0"},
            {"train.batch_size", "8"},
            {"train.clip_norm", "1.0"},
            {"train.checkpoint_interval", "0"},
            {"train.warmup_steps", "0"},
            {"train.deterministic", "true"},
            {"mask.text_ratio", "0.15"},
            {"mask.audio_ratio", "0.08"},
            {"mask.audio_span", "5"},
            {"loss.weights.mlm", "1.0"},
            {"loss.weights.mam", "1.0"},
            {"loss.weights.mmc", "1.0"},
            {"loss.weights.mmm", "1.0"},
            {"loss.weights.atm", "1.0"},
            {"loss.tau_init", "0.07"},
            {"loss.kappa", "0.1"},
            {"segment.max_text_len", "64"},
            {"segment.max_audio_seconds", "10.0"},
            {"segment.min_audio_frames", "16"},
        };
        return d;
    }

    // `file_text` empty means no config file. Overrides are key=value pairs
    // from the command line.
    static RunConfig resolve(const std::string& file_text,
                             const std::vector<std::string>& overrides) {
        RunConfig cfg;
        cfg.values_ = defaults();
        if (const char* env_seed = std::getenv("WHISMM_SEED")) {
            std::string s = env_seed;
            if (!s.empty()) cfg.set_checked("seed", s, "environment (WHISMM_SEED)");
        }
        size_t i = 0;
        size_t line_no = 0;
        while (i < file_text.size()) {
            size_t j = file_text.find('\n', i);
            if (j == std::string::npos) j = file_text.size();
            std::string line = file_text.substr(i, j - i);
            i = j + 1;
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            size_t h = line.find('#');
            if (h != std::string::npos) line = line.substr(0, h);
            // trim
            size_t b = line.find_first_not_of(" \t");
            if (b == std::string::npos) continue;
            size_t e = line.find_last_not_of(" \t");
            line = line.substr(b, e - b + 1);
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                fail("config line " + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
            cfg.set_checked(line.substr(0, eq), line.substr(eq + 1),
                            "config file line " + std::to_string(line_no));
        }
        for (const auto& ov : overrides) {
            size_t eq = ov.find('=');
            if (eq == std::string::npos) fail("--set expects key=value, got '" + ov + "'");
            cfg.set_checked(ov.substr(0, eq), ov.substr(eq + 1), "command line");
        }
        cfg.validate();
        return cfg;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        require(it != values_.end(), "RunConfig: unknown key '" + key + "'");
        return it->second;
    }

    uint64_t get_u64(const std::string& key) const {
        try {
            return std::stoull(get(key));
        } catch (const std::exception&) {
            fail("RunConfig: key '" + key + "' is not an integer: '" + get(key) + "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            return std::stod(get(key));
        } catch (const std::exception&) {
            fail("RunConfig: key '" + key + "' is not a number: '" + get(key) + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        fail("RunConfig: key '" + key + "' is not a boolean: '" + v + "'");
    }

    // Frozen copy, sorted by key.
    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.d_model = get_u64("model.d_model");
        m.n_layers_audio = get_u64("model.n_layers_audio");
        m.n_layers_text = get_u64("model.n_layers_text");
        m.n_layers_mm = get_u64("model.n_layers_mm");
        m.n_heads = get_u64("model.n_heads");
        m.ffn_mult = get_u64("model.ffn_mult");
        m.conv_width = get_u64("model.conv_width");
        m.conv2_stride = get_u64("model.conv2_stride");
        m.vocab_size = get_u64("model.vocab_size");
        m.max_text_len = get_u64("model.max_text_len");
        m.max_audio_patches = get_u64("model.max_audio_patches");
        m.seed = get_u64("seed");
        m.validate();
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = get_u64("train.epochs");
        t.learning_rate = get_double("train.learning_rate");
        t.momentum = get_double("train.momentum");
        t.batch_size = get_u64("train.batch_size");
        t.seed = get_u64("seed");
        t.clip_norm = get_double("train.clip_norm");
        t.checkpoint_interval = get_u64("train.checkpoint_interval");
        t.warmup_steps = get_u64("train.warmup_steps");
        t.deterministic = get_bool("train.deterministic");
        t.text_mask_ratio = get_double("mask.text_ratio");
        t.audio_mask_ratio = get_double("mask.audio_ratio");
        t.audio_mask_span = get_u64("mask.audio_span");
        t.weights.mlm = get_double("loss.weights.mlm");
        t.weights.mam = get_double("loss.weights.mam");
        t.weights.mmc = get_double("loss.weights.mmc");
        t.weights.mmm = get_double("loss.weights.mmm");
        t.weights.atm = get_double("loss.weights.atm");
        t.validate();
        return t;
    }

    SegmentLimits segment_limits() const {
        SegmentLimits s;
        s.max_text_len = get_u64("segment.max_text_len");
        s.max_audio_seconds = get_double("segment.max_audio_seconds");
        s.min_audio_frames = get_u64("segment.min_audio_frames");
        return s;
    }

private:
    void set_checked(const std::string& key, const std::string& value, const std::string& where) {
        if (defaults().find(key) == defaults().end())
            fail("unknown config key '" + key + "' (" + where + ")");
        values_[key] = value;
    }

    void validate() const {
        double kappa = get_double("loss.kappa");
        if (kappa != kKappaMam)
            fail("loss.kappa is fixed at 0.1; got " + get("loss.kappa"));
        double tau = get_double("loss.tau_init");
        require(tau >= kTauMin && tau <= kTauMax,
                "loss.tau_init must lie in [" + std::to_string(kTauMin) + ", " +
                    std::to_string(kTauMax) + "]");
    }

    std::map<std::string, std::string> values_;
};

}  // namespace whismm

#pragma once

// The three transformer encoders: audio (conv patch stem + encoder), text,
// and multimodal fusion, plus the prediction heads and contrastive
// projections. Pre-norm residual blocks with GELU FFNs; sinusoidal positions
// everywhere; a learnable CLS vector per encoder.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "whismm/audio_frontend.hpp"
#include "whismm/autograd.hpp"
#include "whismm/common.hpp"
#include "whismm/rng.hpp"
#include "whismm/tensor.hpp"
#include "whismm/text_frontend.hpp"

namespace whismm {

struct ModelConfig {
    size_t d_model = 128;
    size_t n_layers_audio = 4;
    size_t n_layers_text = 4;
    size_t n_layers_mm = 2;
    size_t n_heads = 4;
    size_t ffn_mult = 4;
    size_t conv_width = 16;    // paper value
    size_t conv2_stride = 10;  // paper value
    size_t vocab_size = 8192;
    size_t max_text_len = 64;
    size_t max_audio_patches = 128;
    uint64_t seed = 42;

    void validate() const {
        require(d_model > 0 && n_heads > 0, "ModelConfig: d_model and n_heads must be positive");
        require(d_model % n_heads == 0, "ModelConfig: n_heads must divide d_model");
        require(n_layers_audio > 0 && n_layers_text > 0 && n_layers_mm > 0,
                "ModelConfig: layer counts must be positive");
        require(ffn_mult > 0, "ModelConfig: ffn_mult must be positive");
        require(conv_width > 0 && conv2_stride > 0, "ModelConfig: conv parameters must be positive");
        require(vocab_size > 4, "ModelConfig: vocab_size must exceed the 4 specials");
        require(max_text_len >= 1 && max_audio_patches >= 1, "ModelConfig: sequence limits must be >= 1");
    }

    std::string to_text() const {
        std::string s;
        auto kv = [&](const char* k, size_t v) { s += std::string(k) + "=" + std::to_string(v) + "\n"; };
        kv("model.d_model", d_model);
        kv("model.n_layers_audio", n_layers_audio);
        kv("model.n_layers_text", n_layers_text);
        kv("model.n_layers_mm", n_layers_mm);
        kv("model.n_heads", n_heads);
        kv("model.ffn_mult", ffn_mult);
        kv("model.conv_width", conv_width);
        kv("model.conv2_stride", conv2_stride);
        kv("model.vocab_size", vocab_size);
        kv("model.max_text_len", max_text_len);
        kv("model.max_audio_patches", max_audio_patches);
        s += "model.seed=" + std::to_string(seed) + "\n";
        return s;
    }

    static ModelConfig from_text(const std::string& text) {
        ModelConfig c;
        size_t i = 0;
        while (i < text.size()) {
            size_t j = text.find('\n', i);
            if (j == std::string::npos) j = text.size();
            std::string line = text.substr(i, j - i);
            i = j + 1;
            size_t eq = line.find('=');
            if (eq == std::string::npos || line.empty()) continue;
            std::string k = line.substr(0, eq);
            unsigned long long v = std::stoull(line.substr(eq + 1));
            if (k == "model.d_model") c.d_model = v;
            else if (k == "model.n_layers_audio") c.n_layers_audio = v;
            else if (k == "model.n_layers_text") c.n_layers_text = v;
            else if (k == "model.n_layers_mm") c.n_layers_mm = v;
            else if (k == "model.n_heads") c.n_heads = v;
            else if (k == "model.ffn_mult") c.ffn_mult = v;
            else if (k == "model.conv_width") c.conv_width = v;
            else if (k == "model.conv2_stride") c.conv2_stride = v;
            else if (k == "model.vocab_size") c.vocab_size = v;
            else if (k == "model.max_text_len") c.max_text_len = v;
            else if (k == "model.max_audio_patches") c.max_audio_patches = v;
            else if (k == "model.seed") c.seed = v;
            else fail("ModelConfig: unknown key '" + k + "'");
        }
        c.validate();
        return c;
    }
};

enum class Modality { Audio, Text, Multimodal };

template <typename T>
struct Hidden {
    ag::NodePtr<T> cls;  // 1 x d
    ag::NodePtr<T> seq;  // len x d (CLS excluded)
    Modality modality;

    size_t length() const { return seq->value.rows(); }
};

// Maps each multimodal sequence position back to (modality, original index).
struct Provenance {
    size_t audio_len = 0;
    size_t text_len = 0;

    std::pair<Modality, size_t> at(size_t i) const {
        require(i < audio_len + text_len, "Provenance: index out of range");
        if (i < audio_len) return {Modality::Audio, i};
        return {Modality::Text, i - audio_len};
    }
    size_t mm_index_of_audio(size_t patch_idx) const {
        require(patch_idx < audio_len, "Provenance: audio index out of range");
        return patch_idx;
    }
    size_t mm_index_of_text(size_t text_idx) const {
        require(text_idx < text_len, "Provenance: text index out of range");
        return audio_len + text_idx;
    }
};

// Named parameter arrays in creation order (stable for init, SGD and
// checkpoints).
template <typename T>
struct ParamStore {
    std::vector<std::string> order;
    std::map<std::string, ag::NodePtr<T>> by_name;

    ag::NodePtr<T> create(const std::string& name, Tensor<T> init) {
        require(by_name.find(name) == by_name.end(), "ParamStore: duplicate parameter " + name);
        auto node = ag::leaf(std::move(init));
        order.push_back(name);
        by_name.emplace(name, node);
        return node;
    }

    ag::NodePtr<T> get(const std::string& name) const {
        auto it = by_name.find(name);
        require(it != by_name.end(), "ParamStore: unknown parameter " + name);
        return it->second;
    }

    void zero_grads() {
        for (auto& [_, p] : by_name) p->grad = Tensor<T>();
    }

    size_t total_numel() const {
        size_t n = 0;
        for (auto& [_, p] : by_name) n += p->value.numel();
        return n;
    }
};

// Sinusoidal position table: value(p, 2k) = sin(p / 10000^(2k/d)),
// value(p, 2k+1) = cos(p / 10000^(2k/d)). Parameter-free.
template <typename T>
Tensor<T> sinusoidal_positions(size_t n, size_t d) {
    Tensor<T> out({n, d});
    for (size_t p = 0; p < n; ++p) {
        for (size_t k = 0; 2 * k < d; ++k) {
            double freq = std::pow(10000.0, -static_cast<double>(2 * k) / static_cast<double>(d));
            double angle = static_cast<double>(p) * freq;
            out.at(p, 2 * k) = static_cast<T>(std::sin(angle));
            if (2 * k + 1 < d) out.at(p, 2 * k + 1) = static_cast<T>(std::cos(angle));
        }
    }
    return out;
}

template <typename T>
class Model {
public:
    ModelConfig cfg;
    ParamStore<T> params;

    explicit Model(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        Rng rng(mix_seed(cfg.seed, 0x696e6974 /* "init" */));
        const size_t d = cfg.d_model;
        auto normal = [&](std::vector<size_t> shape, double std_dev) {
            return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std_dev));
        };
        auto zeros = [](std::vector<size_t> shape) { return Tensor<T>::zeros(std::move(shape)); };
        auto ones = [](std::vector<size_t> shape) { return Tensor<T>::full(std::move(shape), T(1)); };

        const double std0 = 0.02;
        params.create("audio.conv1.w", normal({d, static_cast<size_t>(kMelChannels), cfg.conv_width}, std0));
        params.create("audio.conv1.b", zeros({d}));
        params.create("audio.conv2.w", normal({d, d, cfg.conv_width}, std0));
        params.create("audio.conv2.b", zeros({d}));
        params.create("audio.cls", normal({size_t(1), d}, std0));
        params.create("audio.mask_embed", normal({size_t(1), d}, std0));
        params.create("text.embed", normal({cfg.vocab_size, d}, std0));
        params.create("text.cls", normal({size_t(1), d}, std0));
        params.create("mm.cls", normal({size_t(1), d}, std0));

        auto make_blocks = [&](const std::string& prefix, size_t n_layers) {
            double out_std = std0 / std::sqrt(2.0 * static_cast<double>(n_layers));
            for (size_t i = 0; i < n_layers; ++i) {
                std::string b = prefix + ".blocks." + std::to_string(i) + ".";
                params.create(b + "ln1.g", ones({d}));
                params.create(b + "ln1.b", zeros({d}));
                params.create(b + "attn.wq", normal({d, d}, std0));
                params.create(b + "attn.bq", zeros({d}));
                params.create(b + "attn.wk", normal({d, d}, std0));
                params.create(b + "attn.bk", zeros({d}));
                params.create(b + "attn.wv", normal({d, d}, std0));
                params.create(b + "attn.bv", zeros({d}));
                params.create(b + "attn.wo", normal({d, d}, out_std));
                params.create(b + "attn.bo", zeros({d}));
                params.create(b + "ln2.g", ones({d}));
                params.create(b + "ln2.b", zeros({d}));
                params.create(b + "ffn.w1", normal({d, d * cfg.ffn_mult}, std0));
                params.create(b + "ffn.b1", zeros({d * cfg.ffn_mult}));
                params.create(b + "ffn.w2", normal({d * cfg.ffn_mult, d}, out_std));
                params.create(b + "ffn.b2", zeros({d}));
            }
            params.create(prefix + ".ln_f.g", ones({d}));
            params.create(prefix + ".ln_f.b", zeros({d}));
        };
        make_blocks("audio", cfg.n_layers_audio);
        make_blocks("text", cfg.n_layers_text);
        make_blocks("mm", cfg.n_layers_mm);

        params.create("text.mlm_head.w", normal({d, cfg.vocab_size}, std0));
        params.create("text.mlm_head.b", zeros({cfg.vocab_size}));
        params.create("mm.text_head.w", normal({d, cfg.vocab_size}, std0));
        params.create("mm.text_head.b", zeros({cfg.vocab_size}));
        params.create("mm.atm_head.w", normal({d, size_t(1)}, std0));
        params.create("mm.atm_head.b", zeros({size_t(1)}));
        params.create("mmc.proj_audio", normal({d, d}, std0));
        params.create("mmc.proj_text", normal({d, d}, std0));
        params.create("loss.tau", Tensor<T>({size_t(1)}, {static_cast<T>(0.07)}));
    }

    // Conv stem: conv1 (stride 1, SAME) + GELU, conv2 (stride conv2_stride,
    // SAME) + GELU. Output rows = ceil(frames / conv2_stride); each row is one
    // ~100 ms audio patch at the paper's 16/10 settings.
    ag::NodePtr<T> patch_embed(const Tensor<T>& mel) const {
        require(mel.cols() == static_cast<size_t>(kMelChannels), "patch_embed: input must have 80 mel channels");
        require(mel.rows() >= cfg.conv_width,
                "patch_embed: " + std::to_string(mel.rows()) + " frames is fewer than one conv kernel (" +
                    std::to_string(cfg.conv_width) + ")");
        auto x = ag::constant(mel);
        x = ag::gelu(ag::conv1d_same(x, params.get("audio.conv1.w"), params.get("audio.conv1.b"), 1));
        x = ag::gelu(ag::conv1d_same(x, params.get("audio.conv2.w"), params.get("audio.conv2.b"), cfg.conv2_stride));
        return x;
    }

    Hidden<T> audio_encode(ag::NodePtr<T> patches) const {
        size_t n = patches->value.rows();
        require(n >= 1, "audio_encode: empty patch sequence");
        require(n <= cfg.max_audio_patches,
                "audio_encode: " + std::to_string(n) + " patches exceeds max_audio_patches=" +
                    std::to_string(cfg.max_audio_patches));
        auto x = ag::concat_rows<T>({params.get("audio.cls"), patches});
        x = with_positions(x);
        x = encoder_stack(x, "audio", cfg.n_layers_audio);
        return Hidden<T>{ag::row(x, 0), ag::slice_rows(x, 1, n + 1), Modality::Audio};
    }

    Hidden<T> text_encode(const std::vector<int>& ids) const {
        require(!ids.empty() && ids[0] == kClsId, "text_encode: sequence must start with CLS");
        require(ids.size() <= cfg.max_text_len,
                "text_encode: length " + std::to_string(ids.size()) + " exceeds max_text_len=" +
                    std::to_string(cfg.max_text_len));
        std::vector<size_t> row_idx;
        row_idx.reserve(ids.size() - 1);
        for (size_t i = 1; i < ids.size(); ++i) {
            require(ids[i] >= 0 && static_cast<size_t>(ids[i]) < cfg.vocab_size,
                    "text_encode: token id " + std::to_string(ids[i]) + " outside vocab of " +
                        std::to_string(cfg.vocab_size));
            row_idx.push_back(static_cast<size_t>(ids[i]));
        }
        ag::NodePtr<T> x;
        if (row_idx.empty()) {
            x = params.get("text.cls");
        } else {
            x = ag::concat_rows<T>({params.get("text.cls"), ag::rows(params.get("text.embed"), row_idx)});
        }
        x = with_positions(x);
        x = encoder_stack(x, "text", cfg.n_layers_text);
        return Hidden<T>{ag::row(x, 0), ag::slice_rows(x, 1, ids.size()), Modality::Text};
    }

    // Fusion: [MM-CLS] ++ audio hiddens ++ text hiddens (unimodal CLS vectors
    // excluded), fresh sinusoidal positions.
    std::pair<Hidden<T>, Provenance> multimodal_encode(const Hidden<T>& audio, const Hidden<T>& text) const {
        require(audio.modality == Modality::Audio && text.modality == Modality::Text,
                "multimodal_encode: inputs must be (audio, text)");
        size_t a = audio.length(), t = text.length();
        size_t limit = cfg.max_audio_patches + cfg.max_text_len;
        require(a + t <= limit, "multimodal_encode: combined length " + std::to_string(a + t) +
                                    " exceeds limit " + std::to_string(limit));
        auto x = ag::concat_rows<T>({params.get("mm.cls"), audio.seq, text.seq});
        x = with_positions(x);
        x = encoder_stack(x, "mm", cfg.n_layers_mm);
        Hidden<T> h{ag::row(x, 0), ag::slice_rows(x, 1, a + t + 1), Modality::Multimodal};
        return {h, Provenance{a, t}};
    }

    // Heads.
    ag::NodePtr<T> mlm_logits(ag::NodePtr<T> states) const {
        return ag::linear(states, params.get("text.mlm_head.w"), params.get("text.mlm_head.b"));
    }
    ag::NodePtr<T> mm_text_logits(ag::NodePtr<T> states) const {
        return ag::linear(states, params.get("mm.text_head.w"), params.get("mm.text_head.b"));
    }
    ag::NodePtr<T> atm_logits(ag::NodePtr<T> cls_batch) const {
        return ag::linear(cls_batch, params.get("mm.atm_head.w"), params.get("mm.atm_head.b"));
    }
    ag::NodePtr<T> project_audio(ag::NodePtr<T> cls_batch) const {
        return ag::matmul(cls_batch, params.get("mmc.proj_audio"));
    }
    ag::NodePtr<T> project_text(ag::NodePtr<T> cls_batch) const {
        return ag::matmul(cls_batch, params.get("mmc.proj_text"));
    }
    ag::NodePtr<T> tau() const { return params.get("loss.tau"); }

private:
    // Content is scaled by sqrt(d_model) before the unit-amplitude sinusoidal
    // table is added, the standard pairing for fixed position encodings; at
    // 0.02-std init the positions would otherwise drown the content signal.
    ag::NodePtr<T> with_positions(ag::NodePtr<T> content) const {
        auto scaled = ag::scale(content, std::sqrt(static_cast<double>(cfg.d_model)));
        return ag::add(scaled, ag::constant(sinusoidal_positions<T>(content->value.rows(), cfg.d_model)));
    }

    ag::NodePtr<T> encoder_stack(ag::NodePtr<T> x, const std::string& prefix, size_t n_layers) const {
        for (size_t i = 0; i < n_layers; ++i) {
            std::string b = prefix + ".blocks." + std::to_string(i) + ".";
            auto h = ag::layer_norm(x, params.get(b + "ln1.g"), params.get(b + "ln1.b"));
            x = ag::add(x, attention(h, b));
            h = ag::layer_norm(x, params.get(b + "ln2.g"), params.get(b + "ln2.b"));
            auto f = ag::gelu(ag::linear(h, params.get(b + "ffn.w1"), params.get(b + "ffn.b1")));
            x = ag::add(x, ag::linear(f, params.get(b + "ffn.w2"), params.get(b + "ffn.b2")));
        }
        return ag::layer_norm(x, params.get(prefix + ".ln_f.g"), params.get(prefix + ".ln_f.b"));
    }

    ag::NodePtr<T> attention(ag::NodePtr<T> x, const std::string& b) const {
        size_t dh = cfg.d_model / cfg.n_heads;
        auto q = ag::linear(x, params.get(b + "attn.wq"), params.get(b + "attn.bq"));
        auto k = ag::linear(x, params.get(b + "attn.wk"), params.get(b + "attn.bk"));
        auto v = ag::linear(x, params.get(b + "attn.wv"), params.get(b + "attn.bv"));
        std::vector<ag::NodePtr<T>> heads;
        heads.reserve(cfg.n_heads);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            auto qh = ag::slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = ag::slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = ag::slice_cols(v, h * dh, (h + 1) * dh);
            auto scores = ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
            heads.push_back(ag::matmul(ag::softmax_rows(scores), vh));
        }
        auto ctx = ag::concat_cols(std::move(heads));
        return ag::linear(ctx, params.get(b + "attn.wo"), params.get(b + "attn.bo"));
    }
};

// ---------------------------------------------------------------------------
// WBCK array file: "WBCK" | u32 version | records until EOF, each
// u32 name_len | name | u32 rank | u32 dims... | f32 data (little-endian).
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline void append_array_record(std::string& out, const std::string& name, const Tensor<float>& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (size_t d : t.shape) put_u32(out, static_cast<uint32_t>(d));
    for (float v : t.data) put_f32(out, v);
}

inline std::string serialize_arrays(const std::vector<std::pair<std::string, const Tensor<float>*>>& arrays) {
    std::string out = "WBCK";
    put_u32(out, kCheckpointVersion);
    for (const auto& [name, t] : arrays) append_array_record(out, name, *t);
    return out;
}

inline std::map<std::string, Tensor<float>> parse_arrays(const std::string& buf, const std::string& ctx) {
    ByteReader r(buf, ctx + ": ");
    if (r.bytes(4, "WBCK magic") != "WBCK") fail(ctx + ": bad checkpoint magic");
    uint32_t ver = r.u32("format version");
    if (ver != kCheckpointVersion)
        fail(ctx + ": checkpoint version " + std::to_string(ver) + " unsupported, expected " +
             std::to_string(kCheckpointVersion));
    std::map<std::string, Tensor<float>> arrays;
    while (!r.at_end()) {
        uint32_t name_len = r.u32("array name length");
        std::string name = r.bytes(name_len, "array name");
        uint32_t rank = r.u32("array rank");
        std::vector<size_t> shape(rank);
        size_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape[i] = r.u32("array dim");
            numel *= shape[i];
        }
        Tensor<float> t(shape);
        r.need(numel * 4, ("data of array '" + name + "'").c_str());
        for (size_t i = 0; i < numel; ++i) t.data[i] = r.f32();
        arrays.emplace(std::move(name), std::move(t));
    }
    return arrays;
}

}  // namespace whismm

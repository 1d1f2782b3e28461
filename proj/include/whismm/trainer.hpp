#pragma once

// Multitask pretraining: every step applies all five objectives to a batch of
// paired segments and takes one SGD step (optional momentum, global-norm
// clipping). All randomness is derived functionally from (seed, step, index),
// so a run can be replayed or resumed bit-exactly from any checkpoint.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "whismm/data_pipeline.hpp"
#include "whismm/masking.hpp"
#include "whismm/model.hpp"
#include "whismm/objectives.hpp"

namespace whismm {

struct TrainConfig {
    size_t epochs = 5;
    double learning_rate = 0.1;
    double momentum = 0.0;
    size_t batch_size = 8;
    uint64_t seed = 42;
    LossWeights weights;
    double clip_norm = 1.0;  // 0 disables clipping
    size_t checkpoint_interval = 0;  // in steps; 0 = final checkpoint only
    size_t warmup_steps = 0;
    bool deterministic = true;
    double text_mask_ratio = 0.15;
    double audio_mask_ratio = 0.08;
    size_t audio_mask_span = 5;

    void validate() const {
        require(epochs >= 1, "TrainConfig: epochs must be >= 1");
        require(learning_rate >= 0.0, "TrainConfig: learning_rate must be nonnegative");
        require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
        require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum must lie in [0, 1)");
        require(clip_norm >= 0.0, "TrainConfig: clip_norm must be nonnegative");
        require(text_mask_ratio >= 0.0 && text_mask_ratio <= 1.0, "TrainConfig: text_mask_ratio in [0,1]");
        require(audio_mask_ratio >= 0.0 && audio_mask_ratio <= 1.0, "TrainConfig: audio_mask_ratio in [0,1]");
        require(audio_mask_span >= 1, "TrainConfig: audio_mask_span must be >= 1");
    }
};

struct Checkpoint {
    ModelConfig model_cfg;
    std::map<std::string, Tensor<float>> params;
    std::map<std::string, Tensor<float>> momentum;  // per-parameter velocity
    uint64_t step = 0;
    uint64_t seed = 0;  // randomness root; (seed, step) reproduces the stream
};

struct StepMetrics {
    uint64_t step = 0;
    LossBundle losses;
    double total = 0.0;
    double tau = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

inline std::string metrics_to_json(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    auto put = [&](const char* k, const std::optional<double>& v) {
        if (v) j[k] = *v; else j[k] = nullptr;
    };
    put("mlm", m.losses.mlm);
    put("mam", m.losses.mam);
    put("mmc", m.losses.mmc);
    put("mmm", m.losses.mmm);
    put("atm", m.losses.atm);
    j["total"] = m.total;
    j["tau"] = m.tau;
    j["lr"] = m.lr;
    j["wall_ms"] = m.wall_ms;
    return j.dump();
}

namespace detail {

// Trainer-side optimizer state, kept as float arrays keyed like the params.
template <typename T>
struct SgdState {
    std::map<std::string, Tensor<T>> velocity;

    Tensor<T>& velocity_for(const std::string& name, const std::vector<size_t>& shape) {
        auto it = velocity.find(name);
        if (it == velocity.end()) it = velocity.emplace(name, Tensor<T>(shape)).first;
        return it->second;
    }
};

inline std::vector<int> apply_text_mask(const std::vector<int>& ids, const MaskPlan& plan,
                                        size_t vocab_size) {
    std::vector<int> out = ids;
    Rng rng(mix_seed(plan.seed, 0x72616e64 /* "rand" */));
    for (size_t i = 0; i < plan.count(); ++i) {
        size_t t = plan.masked_positions[i];
        switch (plan.replacement[i]) {
            case Replacement::MaskToken: out[t] = kMaskId; break;
            case Replacement::RandomToken:
                out[t] = 4 + static_cast<int>(rng.below(vocab_size - 4));
                break;
            case Replacement::Keep: break;
        }
    }
    return out;
}

}  // namespace detail

// Per-example graph pieces a step needs after the forward passes.
template <typename T>
struct StepExample {
    TokenSequence targets;
    MaskPlan text_plan;
    MaskPlan audio_plan;
    ag::NodePtr<T> patches;       // pre-masking patch embeddings
    Hidden<T> text_masked, audio_masked;
    Hidden<T> text_clean, audio_clean;
};

template <typename T>
class Trainer {
public:
    Trainer(Model<T>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
        cfg_.validate();
    }

    const TrainConfig& config() const { return cfg_; }

    double learning_rate_at(uint64_t step) const {
        if (cfg_.warmup_steps == 0 || step >= cfg_.warmup_steps) return cfg_.learning_rate;
        return cfg_.learning_rate * static_cast<double>(step + 1) /
               static_cast<double>(cfg_.warmup_steps);
    }

    // One optimization step over a batch of paired segments.
    StepMetrics train_step(const std::vector<Segment>& batch, uint64_t step) {
        require(!batch.empty(), "train_step: empty batch");
        auto t_begin = std::chrono::steady_clock::now();
        const size_t b = batch.size();

        std::vector<StepExample<T>> ex(b);
        for (size_t i = 0; i < b; ++i) {
            const Segment& seg = batch[i];
            require(!seg.token_ids.empty() && seg.mel.frames() > 0,
                    "train_step: segment " + std::to_string(i) + " is not a paired example");
            ex[i].targets.ids = seg.token_ids;
            ex[i].patches = model_.patch_embed(seg.mel.values.template cast<T>());
            size_t n_patches = ex[i].patches->value.rows();

            ex[i].text_plan = plan_text_mask(seg.token_ids.size(), cfg_.text_mask_ratio,
                                             mix_seed(cfg_.seed, 0x74657874 /* "text" */, step, i));
            ex[i].audio_plan = plan_audio_mask(n_patches, cfg_.audio_mask_ratio,
                                               mix_seed(cfg_.seed, 0x61756469 /* "audi" */, step, i),
                                               cfg_.audio_mask_span);

            auto masked_ids = detail::apply_text_mask(seg.token_ids, ex[i].text_plan,
                                                      model_.cfg.vocab_size);
            ex[i].text_masked = model_.text_encode(masked_ids);
            auto masked_patches = ex[i].audio_plan.empty()
                                      ? ex[i].patches
                                      : ag::replace_rows(ex[i].patches,
                                                         ex[i].audio_plan.masked_positions,
                                                         model_.params.get("audio.mask_embed"));
            ex[i].audio_masked = model_.audio_encode(masked_patches);
            ex[i].text_clean = model_.text_encode(seg.token_ids);
            ex[i].audio_clean = model_.audio_encode(ex[i].patches);
        }

        LossTerms<T> terms;

        // MLM / MAM / MMM: mean of per-example losses that exist.
        std::vector<ag::NodePtr<T>> mlm_parts, mam_parts, mmm_parts;
        for (size_t i = 0; i < b; ++i) {
            if (auto l = mlm_loss(model_, ex[i].text_masked, ex[i].text_plan, ex[i].targets))
                mlm_parts.push_back(l);
            if (auto l = mam_loss(ex[i].audio_masked, ex[i].patches, ex[i].audio_plan))
                mam_parts.push_back(l);
            auto [mm_h, prov] = model_.multimodal_encode(ex[i].audio_masked, ex[i].text_masked);
            if (auto l = mmm_loss(model_, mm_h, prov, ex[i].text_plan, ex[i].audio_plan,
                                  ex[i].targets, ex[i].patches))
                mmm_parts.push_back(l);
        }
        auto mean_parts = [](std::vector<ag::NodePtr<T>> parts) -> ag::NodePtr<T> {
            if (parts.empty()) return nullptr;
            double inv = 1.0 / static_cast<double>(parts.size());
            return ag::scale(ag::add_many(std::move(parts)), inv);
        };
        terms.mlm = mean_parts(std::move(mlm_parts));
        terms.mam = mean_parts(std::move(mam_parts));
        terms.mmm = mean_parts(std::move(mmm_parts));

        // MMC on clean CLS vectors, paired by index.
        std::vector<ag::NodePtr<T>> a_cls, t_cls;
        for (size_t i = 0; i < b; ++i) {
            a_cls.push_back(ex[i].audio_clean.cls);
            t_cls.push_back(ex[i].text_clean.cls);
        }
        terms.mmc = mmc_loss(model_, ag::concat_rows(std::move(a_cls)), ag::concat_rows(std::move(t_cls)));

        // ATM: derangement shuffle of text within the batch makes half the
        // pairs unmatched (all matched when the batch has a single example).
        {
            Rng rng(mix_seed(cfg_.seed, 0x61746d /* "atm" */, step));
            std::vector<size_t> partner(b);
            std::vector<int> labels(b, 1);
            for (size_t i = 0; i < b; ++i) partner[i] = i;
            if (b >= 2) {
                auto sigma = rng.derangement(b);
                auto flip = rng.sample_without_replacement(b, b / 2);
                for (size_t i : flip) {
                    partner[i] = sigma[i];
                    labels[i] = 0;
                }
            }
            std::vector<ag::NodePtr<T>> mm_cls;
            for (size_t i = 0; i < b; ++i) {
                auto [mm_h, prov] = model_.multimodal_encode(ex[i].audio_clean,
                                                             ex[partner[i]].text_clean);
                mm_cls.push_back(mm_h.cls);
            }
            terms.atm = atm_loss(model_, ag::concat_rows(std::move(mm_cls)), labels);
        }

        auto total_node = weighted_total(terms, cfg_.weights);
        double total = static_cast<double>(total_node->value.data[0]);
        if (!std::isfinite(total)) {
            std::string diag = "train_step: non-finite total loss at step " + std::to_string(step);
            auto part = [&](const char* k, const ag::NodePtr<T>& n) {
                if (n) diag += std::string(" ") + k + "=" + std::to_string(
                                   static_cast<double>(n->value.data[0]));
            };
            part("mlm", terms.mlm);
            part("mam", terms.mam);
            part("mmc", terms.mmc);
            part("mmm", terms.mmm);
            part("atm", terms.atm);
            fail(diag);
        }

        model_.params.zero_grads();
        ag::backward(total_node);
        double lr = learning_rate_at(step);
        apply_update(lr);

        StepMetrics m;
        m.step = step;
        m.losses = terms.to_bundle(cfg_.weights);
        m.total = total;
        m.tau = static_cast<double>(model_.tau()->value.data[0]);
        m.lr = lr;
        m.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t_begin).count();
        return m;
    }

    // Epochs of seeded full passes. `on_step` fires after each step (metrics
    // logging, checkpoint scheduling is the caller's policy via
    // checkpoint_interval).
    Checkpoint train(const std::vector<Segment>& segments, uint64_t start_step = 0,
                     const std::function<void(const StepMetrics&)>& on_step = nullptr,
                     const std::function<void(const Checkpoint&, uint64_t)>& on_checkpoint = nullptr) {
        require(!segments.empty(), "train: no segments");
        const size_t n = segments.size();
        const size_t steps_per_epoch = (n + cfg_.batch_size - 1) / cfg_.batch_size;
        const uint64_t total_steps = static_cast<uint64_t>(cfg_.epochs) * steps_per_epoch;
        require(start_step <= total_steps, "train: start step beyond schedule");

        std::vector<size_t> order(n);
        uint64_t order_epoch = UINT64_MAX;
        for (uint64_t step = start_step; step < total_steps; ++step) {
            uint64_t epoch = step / steps_per_epoch;
            size_t slot = static_cast<size_t>(step % steps_per_epoch);
            if (epoch != order_epoch) {
                for (size_t i = 0; i < n; ++i) order[i] = i;
                Rng rng(mix_seed(cfg_.seed, 0x73687566 /* "shuf" */, epoch));
                rng.shuffle(order);
                order_epoch = epoch;
            }
            size_t lo = slot * cfg_.batch_size;
            size_t hi = std::min(n, lo + cfg_.batch_size);
            std::vector<Segment> batch;
            batch.reserve(hi - lo);
            for (size_t i = lo; i < hi; ++i) batch.push_back(segments[order[i]]);

            StepMetrics m = train_step(batch, step);
            if (on_step) on_step(m);
            if (cfg_.checkpoint_interval > 0 && (step + 1) % cfg_.checkpoint_interval == 0 &&
                step + 1 < total_steps && on_checkpoint)
                on_checkpoint(snapshot(step + 1), step + 1);
        }
        Checkpoint final = snapshot(total_steps);
        if (on_checkpoint) on_checkpoint(final, total_steps);
        return final;
    }

    Checkpoint snapshot(uint64_t step) const {
        Checkpoint ck;
        ck.model_cfg = model_.cfg;
        ck.step = step;
        ck.seed = cfg_.seed;
        for (const auto& name : model_.params.order) {
            ck.params.emplace(name, model_.params.get(name)->value.template cast<float>());
            auto it = sgd_.velocity.find(name);
            if (it != sgd_.velocity.end())
                ck.momentum.emplace(name, it->second.template cast<float>());
        }
        return ck;
    }

    // Restores parameters and optimizer state from a checkpoint snapshot.
    void restore(const Checkpoint& ck) {
        for (const auto& name : model_.params.order) {
            auto it = ck.params.find(name);
            require(it != ck.params.end(), "restore: checkpoint missing parameter " + name);
            auto& p = model_.params.get(name)->value;
            require(it->second.shape == p.shape, "restore: shape mismatch for " + name);
            p = it->second.template cast<T>();
        }
        sgd_.velocity.clear();
        for (const auto& [name, v] : ck.momentum) {
            auto param = model_.params.get(name);
            require(v.shape == param->value.shape, "restore: momentum shape mismatch for " + name);
            sgd_.velocity.emplace(name, v.template cast<T>());
        }
    }

private:
    void apply_update(double lr) {
        // Global-norm clip over all gradients, in parameter order.
        double scale = 1.0;
        if (cfg_.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& name : model_.params.order) {
                auto p = model_.params.get(name);
                if (p->grad.data.empty()) continue;
                for (T g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
            }
            double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
        }
        for (const auto& name : model_.params.order) {
            auto p = model_.params.get(name);
            if (p->grad.data.empty()) continue;
            auto& vel = sgd_.velocity_for(name, p->value.shape);
            for (size_t i = 0; i < p->value.numel(); ++i) {
                double g = static_cast<double>(p->grad.data[i]) * scale;
                double v = cfg_.momentum * static_cast<double>(vel.data[i]) + g;
                vel.data[i] = static_cast<T>(v);
                p->value.data[i] -= static_cast<T>(lr * v);
            }
        }
        // Keep the learnable MMC temperature inside its clamp bounds.
        auto tau = model_.params.get("loss.tau");
        tau->value.data[0] = static_cast<T>(
            std::min(kTauMax, std::max(kTauMin, static_cast<double>(tau->value.data[0]))));
    }

    Model<T>& model_;
    TrainConfig cfg_;
    detail::SgdState<T> sgd_;
};

// ---------------------------------------------------------------------------
// Checkpoint files: the WBCK array file holds parameters plus optimizer
// velocity under "opt.m." names; a sidecar "<path>.meta" text file carries the
// ModelConfig block and trainer counters.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::vector<std::pair<std::string, const Tensor<float>*>> arrays;
    for (const auto& [name, t] : ck.params) arrays.emplace_back(name, &t);
    for (const auto& [name, t] : ck.momentum) arrays.emplace_back("opt.m." + name, &t);
    write_file_atomic(path, serialize_arrays(arrays));

    std::string meta = ck.model_cfg.to_text();
    meta += "trainer.step=" + std::to_string(ck.step) + "\n";
    meta += "trainer.seed=" + std::to_string(ck.seed) + "\n";
    write_file_atomic(path + ".meta", meta);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    Checkpoint ck;
    auto arrays = parse_arrays(read_file(path), path);
    for (auto& [name, t] : arrays) {
        if (name.rfind("opt.m.", 0) == 0)
            ck.momentum.emplace(name.substr(6), std::move(t));
        else
            ck.params.emplace(name, std::move(t));
    }

    std::string meta = read_file(path + ".meta");
    std::string cfg_text;
    size_t i = 0;
    while (i < meta.size()) {
        size_t j = meta.find('\n', i);
        if (j == std::string::npos) j = meta.size();
        std::string line = meta.substr(i, j - i);
        i = j + 1;
        if (line.rfind("trainer.step=", 0) == 0) ck.step = std::stoull(line.substr(13));
        else if (line.rfind("trainer.seed=", 0) == 0) ck.seed = std::stoull(line.substr(13));
        else if (!line.empty()) cfg_text += line + "\n";
    }
    ck.model_cfg = ModelConfig::from_text(cfg_text);
    return ck;
}

// Builds a model and loads checkpoint parameters into it.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
    Model<T> model(ck.model_cfg);
    for (const auto& name : model.params.order) {
        auto it = ck.params.find(name);
        require(it != ck.params.end(), "checkpoint missing parameter " + name);
        auto& p = model.params.get(name)->value;
        require(it->second.shape == p.shape, "checkpoint shape mismatch for " + name);
        p = it->second.template cast<T>();
    }
    return model;
}

}  // namespace whismm

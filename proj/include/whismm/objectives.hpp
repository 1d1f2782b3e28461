#pragma once

// The five pretraining losses and their weighted aggregate.
//
//   MLM  - masked-token cross entropy through the unimodal text head
//   MAM  - CPC over masked audio patches: cosine similarity against the true
//          pre-masking patch embedding vs 20 sampled negatives, temperature 0.1
//   MMC  - symmetric CLIP-style contrastive loss over projected CLS vectors,
//          learnable temperature clamped to [0.01, 1]
//   MMM  - masked reconstruction from the fused encoder: MLM-style CE through
//          a separate multimodal text head plus the CPC term on audio
//   ATM  - binary audio-text matching on the multimodal CLS
//
// A loss whose inputs are absent in a batch stays absent (not zero) and is
// excluded from the total.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "whismm/masking.hpp"
#include "whismm/model.hpp"

namespace whismm {

inline constexpr double kKappaMam = 0.1;  // fixed CPC temperature
inline constexpr double kTauMin = 0.01;   // learnable MMC temperature bounds
inline constexpr double kTauMax = 1.0;
inline constexpr double kTauInit = 0.07;
inline constexpr double kCosineEps = 1e-8;

struct LossWeights {
    double mlm = 1.0, mam = 1.0, mmc = 1.0, mmm = 1.0, atm = 1.0;
};

struct LossBundle {
    std::optional<double> mlm, mam, mmc, mmm, atm;
    LossWeights weights;

    bool any_present() const {
        return mlm.has_value() || mam.has_value() || mmc.has_value() || mmm.has_value() ||
               atm.has_value();
    }
};

// Weighted sum over present losses.
inline double total_loss(const LossBundle& b) {
    require(b.any_present(), "total_loss: all losses absent");
    double total = 0.0;
    if (b.mlm) total += b.weights.mlm * *b.mlm;
    if (b.mam) total += b.weights.mam * *b.mam;
    if (b.mmc) total += b.weights.mmc * *b.mmc;
    if (b.mmm) total += b.weights.mmm * *b.mmm;
    if (b.atm) total += b.weights.atm * *b.atm;
    return total;
}

// Graph-side counterpart: loss nodes for one step. Null entries are absent.
template <typename T>
struct LossTerms {
    ag::NodePtr<T> mlm, mam, mmc, mmm, atm;

    LossBundle to_bundle(const LossWeights& w) const {
        LossBundle b;
        b.weights = w;
        if (mlm) b.mlm = static_cast<double>(mlm->value.data[0]);
        if (mam) b.mam = static_cast<double>(mam->value.data[0]);
        if (mmc) b.mmc = static_cast<double>(mmc->value.data[0]);
        if (mmm) b.mmm = static_cast<double>(mmm->value.data[0]);
        if (atm) b.atm = static_cast<double>(atm->value.data[0]);
        return b;
    }
};

template <typename T>
ag::NodePtr<T> weighted_total(const LossTerms<T>& terms, const LossWeights& w) {
    std::vector<ag::NodePtr<T>> parts;
    if (terms.mlm) parts.push_back(ag::scale(terms.mlm, w.mlm));
    if (terms.mam) parts.push_back(ag::scale(terms.mam, w.mam));
    if (terms.mmc) parts.push_back(ag::scale(terms.mmc, w.mmc));
    if (terms.mmm) parts.push_back(ag::scale(terms.mmm, w.mmm));
    if (terms.atm) parts.push_back(ag::scale(terms.atm, w.atm));
    require(!parts.empty(), "weighted_total: all losses absent");
    return ag::add_many(std::move(parts));
}

// ---------------------------------------------------------------------------
// MLM: -(1/|M|) sum over masked positions of log p(x_t). Masked position t
// indexes the token sequence (CLS at 0); the hidden state lives at t-1.
// ---------------------------------------------------------------------------
template <typename T>
ag::NodePtr<T> mlm_loss(const Model<T>& model, const Hidden<T>& text_h, const MaskPlan& plan,
                        const TokenSequence& targets) {
    require(text_h.modality == Modality::Text, "mlm_loss: text hidden states required");
    if (plan.empty()) return nullptr;
    std::vector<size_t> hidden_idx;
    std::vector<int> target_ids;
    hidden_idx.reserve(plan.count());
    for (size_t t : plan.masked_positions) {
        require(t >= 1 && t < targets.ids.size(), "mlm_loss: plan position outside sequence");
        int id = targets.ids[t];
        require(id >= 0 && static_cast<size_t>(id) < model.cfg.vocab_size,
                "mlm_loss: target id " + std::to_string(id) + " out of vocabulary");
        hidden_idx.push_back(t - 1);
        target_ids.push_back(id);
    }
    auto logits = model.mlm_logits(ag::rows(text_h.seq, hidden_idx));
    auto logp = ag::log_softmax_rows(logits);
    std::vector<ag::NodePtr<T>> picked;
    picked.reserve(target_ids.size());
    for (size_t i = 0; i < target_ids.size(); ++i)
        picked.push_back(ag::take(logp, i, static_cast<size_t>(target_ids[i])));
    return ag::scale(ag::add_many(std::move(picked)), -1.0 / static_cast<double>(target_ids.size()));
}

// ---------------------------------------------------------------------------
// CPC term shared by MAM and the audio half of MMM. `context_at` supplies c_t
// for a masked patch index; targets are the pre-masking patch embeddings with
// gradient stopped.
// ---------------------------------------------------------------------------
template <typename T, typename ContextAt>
ag::NodePtr<T> cpc_loss(ag::NodePtr<T> patch_embeddings, const MaskPlan& plan, ContextAt&& context_at,
                        double kappa = kKappaMam) {
    if (plan.empty()) return nullptr;
    require(plan.negatives.size() == plan.count(), "cpc_loss: plan has no negatives");
    auto targets = ag::stop_grad(patch_embeddings);
    std::vector<ag::NodePtr<T>> per_position;
    per_position.reserve(plan.count());
    for (size_t i = 0; i < plan.count(); ++i) {
        size_t t = plan.masked_positions[i];
        require(t < targets->value.rows(), "cpc_loss: masked position outside patch sequence");
        require(plan.negatives[i].size() == kNumNegatives, "cpc_loss: expected 20 negatives");
        auto c = context_at(t);
        std::vector<ag::NodePtr<T>> sims;
        sims.reserve(1 + kNumNegatives);
        sims.push_back(ag::scale(ag::cosine(c, ag::row(targets, t), kCosineEps), 1.0 / kappa));
        for (size_t nidx : plan.negatives[i]) {
            require(nidx != t, "cpc_loss: negative equals anchor");
            require(nidx < targets->value.rows(), "cpc_loss: negative outside patch sequence");
            sims.push_back(ag::scale(ag::cosine(c, ag::row(targets, nidx), kCosineEps), 1.0 / kappa));
        }
        auto logp = ag::log_softmax_rows(ag::stack_scalars(std::move(sims)));
        per_position.push_back(ag::take(logp, 0, 0));
    }
    auto total = ag::add_many(std::move(per_position));
    auto loss = ag::scale(total, -1.0 / static_cast<double>(plan.count()));
    require(std::isfinite(static_cast<double>(loss->value.data[0])), "cpc_loss: non-finite loss");
    return loss;
}

template <typename T>
ag::NodePtr<T> mam_loss(const Hidden<T>& audio_h, ag::NodePtr<T> patch_embeddings,
                        const MaskPlan& plan) {
    require(audio_h.modality == Modality::Audio, "mam_loss: audio hidden states required");
    auto seq = audio_h.seq;
    return cpc_loss<T>(patch_embeddings, plan, [seq](size_t t) { return ag::row(seq, t); });
}

// ---------------------------------------------------------------------------
// MMC: project CLS vectors into the shared space, L2-normalize, scale the
// similarity matrix by 1/tau, then average the row-wise and column-wise cross
// entropies against the identity pairing.
// ---------------------------------------------------------------------------
template <typename T>
ag::NodePtr<T> diagonal_ce(ag::NodePtr<T> scores) {
    size_t b = scores->value.rows();
    auto logp = ag::log_softmax_rows(scores);
    std::vector<ag::NodePtr<T>> diag;
    diag.reserve(b);
    for (size_t i = 0; i < b; ++i) diag.push_back(ag::take(logp, i, i));
    return ag::scale(ag::add_many(std::move(diag)), -1.0 / static_cast<double>(b));
}

template <typename T>
ag::NodePtr<T> mmc_loss(const Model<T>& model, ag::NodePtr<T> audio_cls_batch,
                        ag::NodePtr<T> text_cls_batch) {
    size_t b = audio_cls_batch->value.rows();
    require(b >= 1, "mmc_loss: empty batch");
    require(text_cls_batch->value.rows() == b, "mmc_loss: batch sizes differ");
    auto a_hat = ag::l2_normalize_rows(model.project_audio(audio_cls_batch));
    auto t_hat = ag::l2_normalize_rows(model.project_text(text_cls_batch));
    auto scores = ag::div_by_scalar(ag::matmul_nt(a_hat, t_hat), model.tau());
    auto by_row = diagonal_ce(scores);
    auto by_col = diagonal_ce(ag::transpose(scores));
    return ag::scale(ag::add(by_row, by_col), 0.5);
}

// ---------------------------------------------------------------------------
// MMM: MLM-style CE through the multimodal text head on masked text positions
// plus the CPC term on masked audio positions, using multimodal hidden states
// as context. Parts present are averaged.
// ---------------------------------------------------------------------------
template <typename T>
ag::NodePtr<T> mmm_loss(const Model<T>& model, const Hidden<T>& mm_h, const Provenance& prov,
                        const MaskPlan& text_plan, const MaskPlan& audio_plan,
                        const TokenSequence& targets, ag::NodePtr<T> patch_embeddings) {
    require(mm_h.modality == Modality::Multimodal, "mmm_loss: multimodal hidden states required");

    ag::NodePtr<T> text_part;
    if (!text_plan.empty()) {
        std::vector<size_t> mm_idx;
        std::vector<int> target_ids;
        for (size_t t : text_plan.masked_positions) {
            require(t >= 1 && t < targets.ids.size(), "mmm_loss: text plan position outside sequence");
            mm_idx.push_back(prov.mm_index_of_text(t - 1));
            target_ids.push_back(targets.ids[t]);
        }
        auto logits = model.mm_text_logits(ag::rows(mm_h.seq, mm_idx));
        auto logp = ag::log_softmax_rows(logits);
        std::vector<ag::NodePtr<T>> picked;
        for (size_t i = 0; i < target_ids.size(); ++i)
            picked.push_back(ag::take(logp, i, static_cast<size_t>(target_ids[i])));
        text_part =
            ag::scale(ag::add_many(std::move(picked)), -1.0 / static_cast<double>(target_ids.size()));
    }

    ag::NodePtr<T> audio_part;
    if (!audio_plan.empty()) {
        auto seq = mm_h.seq;
        audio_part = cpc_loss<T>(patch_embeddings, audio_plan,
                                 [seq, &prov](size_t t) { return ag::row(seq, prov.mm_index_of_audio(t)); });
    }

    if (text_part && audio_part) return ag::scale(ag::add(text_part, audio_part), 0.5);
    if (text_part) return text_part;
    if (audio_part) return audio_part;
    return nullptr;
}

// ---------------------------------------------------------------------------
// ATM: binary cross entropy of the matching head on multimodal CLS vectors.
// loss_i = softplus(z_i) - y_i * z_i.
// ---------------------------------------------------------------------------
template <typename T>
ag::NodePtr<T> atm_loss(const Model<T>& model, ag::NodePtr<T> mm_cls_batch,
                        const std::vector<int>& labels) {
    size_t b = mm_cls_batch->value.rows();
    require(b >= 1, "atm_loss: empty batch");
    require(labels.size() == b, "atm_loss: label count mismatch");
    Tensor<T> y({b, size_t(1)});
    for (size_t i = 0; i < b; ++i) {
        require(labels[i] == 0 || labels[i] == 1, "atm_loss: labels must be 0 or 1");
        y.data[i] = static_cast<T>(labels[i]);
    }
    auto z = model.atm_logits(mm_cls_batch);
    auto loss = ag::sub(ag::softplus(z), ag::mul(z, ag::constant(std::move(y))));
    return ag::mean_all(loss);
}

}  // namespace whismm

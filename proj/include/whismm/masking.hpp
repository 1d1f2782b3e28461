#pragma once

// Reproducible mask plans for text tokens and audio patches, plus the CPC
// negative sampling used by the masked-audio objective.
//
// Plans index the modality's sequence with position 0 reserved: for text that
// is the CLS token, for audio the first patch. Position 0 is never masked and
// never drawn as a negative (except as the forced fallback when a 2-element
// sequence leaves no other candidate).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "whismm/common.hpp"
#include "whismm/rng.hpp"

namespace whismm {

inline constexpr size_t kNumNegatives = 20;

enum class Replacement : uint8_t { MaskToken, RandomToken, Keep };

struct MaskPlan {
    std::vector<size_t> masked_positions;             // sorted ascending, none == 0
    std::vector<Replacement> replacement;             // parallel to masked_positions
    std::vector<std::vector<size_t>> negatives;       // parallel; 20 entries each when sampled
    uint64_t seed = 0;
    bool degraded_negatives = false;                  // with-replacement fallback engaged

    size_t count() const { return masked_positions.size(); }
    bool empty() const { return masked_positions.empty(); }
};

// |M| = max(1, round(ratio * (len - 1))) for ratio > 0, capped at the number
// of maskable positions; ratio 0 masks nothing.
inline size_t masked_count(size_t len, double ratio) {
    require(ratio >= 0.0 && ratio <= 1.0, "masked_count: ratio must lie in [0, 1]");
    if (ratio == 0.0 || len <= 1) return 0;
    auto want = static_cast<size_t>(std::llround(ratio * static_cast<double>(len - 1)));
    want = std::max<size_t>(want, 1);
    return std::min(want, len - 1);
}

inline MaskPlan plan_text_mask(size_t seq_len, double ratio, uint64_t seed) {
    require(seq_len >= 1, "plan_text_mask: seq_len must be >= 1");
    MaskPlan plan;
    plan.seed = seed;
    size_t m = masked_count(seq_len, ratio);
    if (m == 0) return plan;
    Rng rng(seed);
    auto picks = rng.sample_without_replacement(seq_len - 1, m);
    for (auto& p : picks) p += 1;  // shift into 1..seq_len-1
    std::sort(picks.begin(), picks.end());
    plan.masked_positions = std::move(picks);
    plan.replacement.reserve(m);
    for (size_t i = 0; i < m; ++i) {
        double u = rng.next_double();
        if (u < 0.8) plan.replacement.push_back(Replacement::MaskToken);
        else if (u < 0.9) plan.replacement.push_back(Replacement::RandomToken);
        else plan.replacement.push_back(Replacement::Keep);
    }
    return plan;
}

// Negatives for every masked position: 20 indices from {1..n_patches-1}\{t},
// without replacement when at least 20 candidates exist, with replacement
// otherwise (flagged). A 2-element sequence forces the single other index.
inline void sample_negatives(MaskPlan& plan, size_t n_patches, size_t k, uint64_t seed) {
    require(n_patches >= 2, "sample_negatives: no candidate negatives with n_patches < 2");
    Rng rng(seed);
    plan.negatives.assign(plan.count(), {});
    for (size_t i = 0; i < plan.count(); ++i) {
        size_t t = plan.masked_positions[i];
        std::vector<size_t> candidates;
        candidates.reserve(n_patches - 1);
        for (size_t j = 1; j < n_patches; ++j)
            if (j != t) candidates.push_back(j);
        auto& negs = plan.negatives[i];
        negs.reserve(k);
        if (candidates.size() >= k) {
            auto picks = rng.sample_without_replacement(candidates.size(), k);
            for (size_t p : picks) negs.push_back(candidates[p]);
        } else if (!candidates.empty()) {
            plan.degraded_negatives = true;
            for (size_t j = 0; j < k; ++j) negs.push_back(candidates[rng.below(candidates.size())]);
        } else {
            // n_patches == 2, t == 1: the only index != t is 0.
            plan.degraded_negatives = true;
            negs.assign(k, 0);
        }
    }
}

// Contiguous spans of span_len until the ratio budget is met; the final span
// shrinks to land on the budget exactly. Every masked patch uses the learned
// mask embedding.
inline MaskPlan plan_audio_mask(size_t n_patches, double ratio, uint64_t seed, size_t span_len = 5) {
    require(n_patches >= 1, "plan_audio_mask: n_patches must be >= 1");
    require(span_len >= 1, "plan_audio_mask: span_len must be >= 1");
    MaskPlan plan;
    plan.seed = seed;
    size_t budget = masked_count(n_patches, ratio);
    if (budget == 0) return plan;
    Rng rng(seed);
    std::vector<bool> masked(n_patches, false);
    size_t placed = 0;
    while (placed < budget) {
        size_t len = std::min(span_len, budget - placed);
        // All starts whose whole span fits in [1, n_patches) and is unmasked.
        std::vector<size_t> starts;
        for (; len >= 1 && starts.empty(); /* shrink until a span fits */) {
            for (size_t s = 1; s + len <= n_patches; ++s) {
                bool free = true;
                for (size_t j = s; j < s + len; ++j)
                    if (masked[j]) { free = false; break; }
                if (free) starts.push_back(s);
            }
            if (starts.empty()) --len;
        }
        require(len >= 1, "plan_audio_mask: internal placement failure");
        size_t s = starts[rng.below(starts.size())];
        for (size_t j = s; j < s + len; ++j) masked[j] = true;
        placed += len;
    }
    for (size_t j = 1; j < n_patches; ++j)
        if (masked[j]) plan.masked_positions.push_back(j);
    plan.replacement.assign(plan.masked_positions.size(), Replacement::MaskToken);
    if (n_patches >= 2)
        sample_negatives(plan, n_patches, kNumNegatives, mix_seed(seed, 0x6e6567 /* "neg" */));
    return plan;
}

}  // namespace whismm

#pragma once

// Minimal-pair scoring via pseudo-log-likelihood, contrastive retrieval
// probes, and classifier-head adaptation on frozen CLS vectors.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "whismm/data_pipeline.hpp"
#include "whismm/model.hpp"
#include "whismm/objectives.hpp"

namespace whismm {

// ---------------------------------------------------------------------------
// Pseudo-log-likelihood: mask one position at a time, run the text encoder
// and MLM head, accumulate log p(x_t). The sentence score is the sum.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<double> pll_terms(const std::vector<int>& ids, const Model<T>& model) {
    require(ids.size() >= 2, "pll: sentence has no scorable tokens");
    std::vector<double> terms;
    terms.reserve(ids.size() - 1);
    for (size_t t = 1; t < ids.size(); ++t) {
        std::vector<int> masked = ids;
        masked[t] = kMaskId;
        auto h = model.text_encode(masked);
        auto logits = model.mlm_logits(ag::rows(h.seq, {t - 1}));
        auto logp = ag::log_softmax_rows(logits);
        terms.push_back(static_cast<double>(logp->value.at(0, static_cast<size_t>(ids[t]))));
    }
    return terms;
}

template <typename T>
double pll_score(const std::string& sentence, const Model<T>& model, const Vocabulary& vocab) {
    TokenSequence seq = encode(sentence, vocab, model.cfg.max_text_len);
    if (seq.ids.size() < 2) fail("pll_score: empty sentence after tokenization");
    double total = 0.0;
    for (double v : pll_terms(seq.ids, model)) total += v;
    return total;
}

// ---------------------------------------------------------------------------
// Minimal pairs: correct iff pll(good) > pll(bad); exact ties count as
// incorrect. Pairs that cannot be tokenized into at least one scorable token
// are skipped and counted.
// ---------------------------------------------------------------------------

struct MinimalPair {
    std::string good;
    std::string bad;
    std::string suite;
};

struct SuiteStats {
    size_t scored = 0;
    size_t correct = 0;
    size_t skipped = 0;
    double margin_sum = 0.0;
    double margin_min = 0.0;
    double margin_max = 0.0;

    double accuracy() const { return scored == 0 ? 0.0 : static_cast<double>(correct) / scored; }
    size_t size() const { return scored + skipped; }
};

struct SuiteReport {
    std::map<std::string, SuiteStats> suites;

    SuiteStats overall() const {
        SuiteStats all;
        bool first = true;
        for (const auto& [_, s] : suites) {
            all.scored += s.scored;
            all.correct += s.correct;
            all.skipped += s.skipped;
            all.margin_sum += s.margin_sum;
            if (s.scored > 0) {
                if (first) {
                    all.margin_min = s.margin_min;
                    all.margin_max = s.margin_max;
                    first = false;
                } else {
                    all.margin_min = std::min(all.margin_min, s.margin_min);
                    all.margin_max = std::max(all.margin_max, s.margin_max);
                }
            }
        }
        return all;
    }
};

template <typename T>
SuiteReport minimal_pair_accuracy(const std::vector<MinimalPair>& pairs, const Model<T>& model,
                                  const Vocabulary& vocab) {
    require(!pairs.empty(), "minimal_pair_accuracy: no pairs");
    SuiteReport report;
    for (const auto& pair : pairs) {
        SuiteStats& s = report.suites[pair.suite];
        TokenSequence good = encode(pair.good, vocab, model.cfg.max_text_len);
        TokenSequence bad = encode(pair.bad, vocab, model.cfg.max_text_len);
        if (good.ids.size() < 2 || bad.ids.size() < 2) {
            ++s.skipped;
            continue;
        }
        double pg = 0.0, pb = 0.0;
        for (double v : pll_terms(good.ids, model)) pg += v;
        for (double v : pll_terms(bad.ids, model)) pb += v;
        double margin = pg - pb;
        if (s.scored == 0) {
            s.margin_min = margin;
            s.margin_max = margin;
        } else {
            s.margin_min = std::min(s.margin_min, margin);
            s.margin_max = std::max(s.margin_max, margin);
        }
        s.margin_sum += margin;
        ++s.scored;
        if (margin > 0.0) ++s.correct;
    }
    return report;
}

inline std::vector<MinimalPair> read_pairs_jsonl(const std::string& path) {
    std::string buf = read_file(path);
    std::vector<MinimalPair> pairs;
    size_t i = 0, line_no = 0;
    while (i < buf.size()) {
        size_t j = buf.find('\n', i);
        if (j == std::string::npos) j = buf.size();
        std::string line = buf.substr(i, j - i);
        i = j + 1;
        ++line_no;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto obj = nlohmann::json::parse(line);
            pairs.push_back(MinimalPair{obj.at("sentence_good").get<std::string>(),
                                        obj.at("sentence_bad").get<std::string>(),
                                        obj.value("suite", std::string("default"))});
        } catch (const nlohmann::json::exception& e) {
            fail(path + ":" + std::to_string(line_no) + ": bad pair: " + e.what());
        }
    }
    return pairs;
}

inline nlohmann::json report_to_json(const SuiteReport& report) {
    nlohmann::json out;
    nlohmann::json suites = nlohmann::json::object();
    for (const auto& [name, s] : report.suites) {
        suites[name] = {{"accuracy", s.accuracy()},
                        {"scored", s.scored},
                        {"correct", s.correct},
                        {"skipped", s.skipped},
                        {"margin_mean", s.scored ? s.margin_sum / s.scored : 0.0},
                        {"margin_min", s.margin_min},
                        {"margin_max", s.margin_max}};
    }
    SuiteStats all = report.overall();
    out["suites"] = suites;
    out["overall"] = {{"accuracy", all.accuracy()},
                      {"scored", all.scored},
                      {"correct", all.correct},
                      {"skipped", all.skipped}};
    return out;
}

// ---------------------------------------------------------------------------
// Retrieval probe over the contrastive space: projected, L2-normalized CLS
// embeddings; recall@k in both directions. Ties resolve by candidate index.
// ---------------------------------------------------------------------------

struct RetrievalReport {
    std::vector<size_t> k_values;
    std::vector<double> audio_to_text;  // parallel to k_values
    std::vector<double> text_to_audio;
};

namespace detail {

inline size_t rank_of_match(const std::vector<double>& scores, size_t match) {
    size_t rank = 0;
    for (size_t j = 0; j < scores.size(); ++j) {
        if (scores[j] > scores[match] || (scores[j] == scores[match] && j < match)) ++rank;
    }
    return rank;
}

}  // namespace detail

inline RetrievalReport recall_at_k(const std::vector<std::vector<double>>& audio_emb,
                                   const std::vector<std::vector<double>>& text_emb,
                                   const std::vector<size_t>& k_values) {
    size_t n = audio_emb.size();
    require(n >= 2, "retrieval: need at least 2 segments");
    require(text_emb.size() == n, "retrieval: embedding count mismatch");
    for (size_t k : k_values)
        require(k >= 1 && k < n, "retrieval: k=" + std::to_string(k) + " must lie in [1, n-1] for n=" +
                                     std::to_string(n));

    RetrievalReport rep;
    rep.k_values = k_values;
    std::vector<size_t> a2t_rank(n), t2a_rank(n);
    for (size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t d = 0; d < audio_emb[i].size(); ++d) acc += audio_emb[i][d] * text_emb[j][d];
            s[j] = acc;
        }
        a2t_rank[i] = detail::rank_of_match(s, i);
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t d = 0; d < audio_emb[j].size(); ++d) acc += audio_emb[j][d] * text_emb[i][d];
            s[j] = acc;
        }
        t2a_rank[i] = detail::rank_of_match(s, i);
    }
    for (size_t k : k_values) {
        size_t a2t = 0, t2a = 0;
        for (size_t i = 0; i < n; ++i) {
            if (a2t_rank[i] < k) ++a2t;
            if (t2a_rank[i] < k) ++t2a;
        }
        rep.audio_to_text.push_back(static_cast<double>(a2t) / n);
        rep.text_to_audio.push_back(static_cast<double>(t2a) / n);
    }
    return rep;
}

template <typename T>
RetrievalReport retrieval_eval(const std::vector<Segment>& segments, const Model<T>& model,
                               const std::vector<size_t>& k_values) {
    require(segments.size() >= 2, "retrieval_eval: need at least 2 segments");
    std::vector<std::vector<double>> a_emb, t_emb;
    for (const auto& seg : segments) {
        auto patches = model.patch_embed(seg.mel.values.template cast<T>());
        auto ha = model.audio_encode(patches);
        auto ht = model.text_encode(seg.token_ids);
        auto pa = ag::l2_normalize_rows(model.project_audio(ha.cls));
        auto pt = ag::l2_normalize_rows(model.project_text(ht.cls));
        std::vector<double> av(pa->value.data.begin(), pa->value.data.end());
        std::vector<double> tv(pt->value.data.begin(), pt->value.data.end());
        a_emb.push_back(std::move(av));
        t_emb.push_back(std::move(tv));
    }
    return recall_at_k(a_emb, t_emb, k_values);
}

// ---------------------------------------------------------------------------
// Probe: linear or one-hidden-layer MLP classifier trained on frozen CLS
// vectors with full-batch gradient descent; reports held-out accuracy.
// ---------------------------------------------------------------------------

struct ProbeConfig {
    enum class Kind { Linear, Mlp } kind = Kind::Linear;
    size_t hidden = 32;
    double learning_rate = 0.5;
    size_t iters = 300;
    double holdout_fraction = 0.2;
    uint64_t seed = 7;
};

struct ProbeResult {
    double holdout_accuracy = 0.0;
    size_t n_train = 0;
    size_t n_holdout = 0;
    size_t n_classes = 0;
};

inline ProbeResult fit_probe(const std::vector<std::vector<float>>& features,
                             const std::vector<int>& labels, const ProbeConfig& cfg = {}) {
    size_t n = features.size();
    require(n >= 2 && labels.size() == n, "fit_probe: need matching features and labels");
    int n_classes = 0;
    for (int l : labels) {
        require(l >= 0, "fit_probe: labels must be nonnegative");
        n_classes = std::max(n_classes, l + 1);
    }
    int distinct = 0;
    {
        std::vector<bool> seen(n_classes, false);
        for (int l : labels)
            if (!seen[l]) { seen[l] = true; ++distinct; }
    }
    require(distinct >= 2, "fit_probe: need at least 2 classes present");
    size_t d = features[0].size();
    for (const auto& f : features) require(f.size() == d, "fit_probe: ragged features");

    Rng rng(cfg.seed);
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx);
    size_t n_hold = std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.holdout_fraction * n)));
    n_hold = std::min(n_hold, n - 1);
    std::vector<size_t> hold(idx.begin(), idx.begin() + n_hold);
    std::vector<size_t> train(idx.begin() + n_hold, idx.end());

    auto pack = [&](const std::vector<size_t>& which) {
        Tensor<double> x({which.size(), d});
        std::vector<int> y(which.size());
        for (size_t i = 0; i < which.size(); ++i) {
            for (size_t j = 0; j < d; ++j) x.at(i, j) = features[which[i]][j];
            y[i] = labels[which[i]];
        }
        return std::make_pair(std::move(x), std::move(y));
    };
    auto [xt, yt] = pack(train);
    auto [xh, yh] = pack(hold);

    const size_t c = static_cast<size_t>(n_classes);
    auto w1 = ag::leaf(Tensor<double>::randn({d, cfg.kind == ProbeConfig::Kind::Mlp ? cfg.hidden : c},
                                             rng, 0.1));
    auto b1 = ag::leaf(Tensor<double>::zeros({cfg.kind == ProbeConfig::Kind::Mlp ? cfg.hidden : c}));
    ag::NodePtr<double> w2, b2;
    if (cfg.kind == ProbeConfig::Kind::Mlp) {
        w2 = ag::leaf(Tensor<double>::randn({cfg.hidden, c}, rng, 0.1));
        b2 = ag::leaf(Tensor<double>::zeros({c}));
    }
    auto forward = [&](const Tensor<double>& x) {
        auto h = ag::linear(ag::constant(x), w1, b1);
        if (cfg.kind == ProbeConfig::Kind::Mlp) h = ag::linear(ag::gelu(h), w2, b2);
        return h;
    };

    for (size_t it = 0; it < cfg.iters; ++it) {
        auto logp = ag::log_softmax_rows(forward(xt));
        std::vector<ag::NodePtr<double>> picked;
        for (size_t i = 0; i < yt.size(); ++i)
            picked.push_back(ag::take(logp, i, static_cast<size_t>(yt[i])));
        auto loss = ag::scale(ag::add_many(std::move(picked)), -1.0 / static_cast<double>(yt.size()));
        for (auto& p : {w1, b1, w2, b2})
            if (p) p->grad = Tensor<double>();
        ag::backward(loss);
        for (auto& p : {w1, b1, w2, b2}) {
            if (!p || p->grad.data.empty()) continue;
            for (size_t i = 0; i < p->value.numel(); ++i)
                p->value.data[i] -= cfg.learning_rate * p->grad.data[i];
        }
    }

    auto logits = forward(xh);
    size_t correct = 0;
    for (size_t i = 0; i < yh.size(); ++i) {
        size_t best = 0;
        for (size_t j = 1; j < c; ++j)
            if (logits->value.at(i, j) > logits->value.at(i, best)) best = j;
        if (static_cast<int>(best) == yh[i]) ++correct;
    }
    ProbeResult res;
    res.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(yh.size());
    res.n_train = yt.size();
    res.n_holdout = yh.size();
    res.n_classes = c;
    return res;
}

}  // namespace whismm

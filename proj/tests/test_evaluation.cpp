#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "whismm/evaluation.hpp"
#include "whismm/trainer.hpp"

using namespace whismm;
namespace ag = whismm::ag;

namespace {

ModelConfig eval_model(size_t vocab) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers_audio = 1;
    c.n_layers_text = 1;
    c.n_layers_mm = 1;
    c.n_heads = 2;
    c.ffn_mult = 2;
    c.vocab_size = vocab;
    c.max_text_len = 16;
    c.max_audio_patches = 16;
    c.seed = 13;
    return c;
}

Vocabulary eval_vocab() {
    return train_wordpiece({"the cat sat on the mat", "the dog ran to the log",
                            "a bird flew over the tree", "cats and dogs ran and sat"},
                           160);
}

}  // namespace

TEST_CASE("pll_score equals the sum of independently computed per-position terms") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    std::string sentence = "the cat sat on the mat";
    double total = pll_score(sentence, model, vocab);

    // Independent path: one masked forward per position, log-softmax by hand.
    TokenSequence seq = encode(sentence, vocab, model.cfg.max_text_len);
    double expect = 0.0;
    for (size_t t = 1; t < seq.ids.size(); ++t) {
        std::vector<int> masked = seq.ids;
        masked[t] = kMaskId;
        auto h = model.text_encode(masked);
        auto logits = model.mlm_logits(h.seq);
        double mx = -1e300;
        for (size_t j = 0; j < model.cfg.vocab_size; ++j)
            mx = std::max(mx, static_cast<double>(logits->value.at(t - 1, j)));
        double z = 0.0;
        for (size_t j = 0; j < model.cfg.vocab_size; ++j)
            z += std::exp(static_cast<double>(logits->value.at(t - 1, j)) - mx);
        expect += static_cast<double>(logits->value.at(t - 1, static_cast<size_t>(seq.ids[t]))) -
                  mx - std::log(z);
    }
    CHECK(total == Catch::Approx(expect).margin(1e-6));
}

TEST_CASE("single-token sentences run exactly one masked pass") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    TokenSequence seq = encode("cat", vocab);
    REQUIRE(seq.ids.size() == 2);
    CHECK(pll_terms(seq.ids, model).size() == 1);
}

TEST_CASE("pll is invariant to trailing whitespace") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    CHECK(pll_score("the cat sat", model, vocab) == pll_score("the cat sat   \t", model, vocab));
}

TEST_CASE("empty sentences are rejected") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    CHECK_THROWS_AS(pll_score("", model, vocab), Error);
    CHECK_THROWS_AS(pll_score("   ", model, vocab), Error);
}

TEST_CASE("a hand-built toy head reproduces oracle log-softmax terms") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    // Zero head: uniform predictions, each term is -ln(vocab).
    auto w = model.params.get("text.mlm_head.w");
    auto b = model.params.get("text.mlm_head.b");
    std::fill(w->value.data.begin(), w->value.data.end(), 0.0f);
    std::fill(b->value.data.begin(), b->value.data.end(), 0.0f);
    TokenSequence seq = encode("the cat", vocab);
    auto terms = pll_terms(seq.ids, model);
    REQUIRE(terms.size() == 2);
    for (double t : terms)
        CHECK(t == Catch::Approx(-std::log(double(vocab.size()))).margin(1e-5));
}

TEST_CASE("uniform model ties score as incorrect") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    auto w = model.params.get("text.mlm_head.w");
    auto b = model.params.get("text.mlm_head.b");
    std::fill(w->value.data.begin(), w->value.data.end(), 0.0f);
    std::fill(b->value.data.begin(), b->value.data.end(), 0.0f);
    // Equal-length pairs: uniform head gives identical PLLs -> ties -> 0.
    std::vector<MinimalPair> pairs = {
        {"the cat sat", "the cat ran", "ties"},
        {"a dog ran", "a dog sat", "ties"},
    };
    SuiteReport rep = minimal_pair_accuracy(pairs, model, vocab);
    CHECK(rep.suites.at("ties").accuracy() == 0.0);
    CHECK(rep.suites.at("ties").scored == 2);
}

TEST_CASE("unencodable pairs are skipped and counted") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    std::vector<MinimalPair> pairs = {
        {"the cat sat", "the dog sat", "mixed"},
        {"", "the dog sat", "mixed"},  // empty side -> skip
    };
    SuiteReport rep = minimal_pair_accuracy(pairs, model, vocab);
    CHECK(rep.suites.at("mixed").skipped == 1);
    CHECK(rep.suites.at("mixed").scored == 1);
    CHECK(rep.suites.at("mixed").size() == 2);
}

TEST_CASE("a model overfit on good sentences prefers them") {
    Vocabulary vocab = eval_vocab();
    ModelConfig mc = eval_model(vocab.size());
    Model<float> model(mc);

    std::vector<std::string> good = {"the cat sat on the mat", "the dog ran to the log",
                                     "a bird flew over the tree"};
    std::vector<std::string> bad = {"the cat mat on the sat", "the dog log to the ran",
                                    "a bird tree over the flew"};

    // PLL-style teacher forcing on the good sentences only.
    std::vector<std::vector<int>> seqs;
    for (const auto& s : good) seqs.push_back(encode(s, vocab, mc.max_text_len).ids);
    for (int iter = 0; iter < 150; ++iter) {
        std::vector<ag::NodePtr<float>> terms;
        for (const auto& ids : seqs) {
            for (size_t t = 1; t < ids.size(); ++t) {
                std::vector<int> masked = ids;
                masked[t] = kMaskId;
                auto h = model.text_encode(masked);
                auto logits = model.mlm_logits(ag::rows(h.seq, {t - 1}));
                auto logp = ag::log_softmax_rows(logits);
                terms.push_back(ag::take(logp, 0, static_cast<size_t>(ids[t])));
            }
        }
        double inv = -1.0 / static_cast<double>(terms.size());
        auto loss = ag::scale(ag::add_many(std::move(terms)), inv);
        model.params.zero_grads();
        ag::backward(loss);
        for (const auto& name : model.params.order) {
            auto p = model.params.get(name);
            if (p->grad.data.empty()) continue;
            for (size_t i = 0; i < p->value.numel(); ++i)
                p->value.data[i] -= 0.3f * p->grad.data[i];
        }
    }

    std::vector<MinimalPair> pairs;
    for (size_t i = 0; i < good.size(); ++i) pairs.push_back({good[i], bad[i], "overfit"});
    SuiteReport rep = minimal_pair_accuracy(pairs, model, vocab);
    CHECK(rep.suites.at("overfit").accuracy() >= 0.9);
}

TEST_CASE("retrieval with perfectly aligned embeddings is exact at k=1") {
    std::vector<std::vector<double>> a = {{1, 0, 0}, {0, 1, 0}};
    RetrievalReport rep = recall_at_k(a, a, {1});
    CHECK(rep.audio_to_text[0] == 1.0);
    CHECK(rep.text_to_audio[0] == 1.0);
}

TEST_CASE("random embeddings retrieve near chance and recall grows with k") {
    Rng rng(41);
    size_t n = 100, d = 24;
    std::vector<std::vector<double>> a(n, std::vector<double>(d));
    std::vector<std::vector<double>> t(n, std::vector<double>(d));
    auto unit = [&](std::vector<double>& v) {
        double norm = 0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
    };
    for (size_t i = 0; i < n; ++i) {
        unit(a[i]);
        unit(t[i]);
    }
    RetrievalReport rep = recall_at_k(a, t, {1, 5, 10, 50});
    CHECK(rep.audio_to_text[0] <= 0.05);
    CHECK(rep.text_to_audio[0] <= 0.05);
    for (size_t i = 1; i < rep.k_values.size(); ++i) {
        CHECK(rep.audio_to_text[i] >= rep.audio_to_text[i - 1]);
        CHECK(rep.text_to_audio[i] >= rep.text_to_audio[i - 1]);
    }
}

TEST_CASE("retrieval recall is invariant under a shared orthogonal rotation") {
    Rng rng(43);
    size_t n = 12, d = 6;
    std::vector<std::vector<double>> a(n, std::vector<double>(d));
    std::vector<std::vector<double>> t(n, std::vector<double>(d));
    for (auto& v : a)
        for (auto& x : v) x = rng.normal();
    for (auto& v : t)
        for (auto& x : v) x = rng.normal();

    // Householder reflection: Q = I - 2 u u^T with ||u|| = 1 (orthogonal).
    std::vector<double> u(d);
    double norm = 0;
    for (auto& x : u) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : u) x /= norm;
    auto rotate = [&](const std::vector<double>& v) {
        double proj = 0;
        for (size_t i = 0; i < d; ++i) proj += u[i] * v[i];
        std::vector<double> out(d);
        for (size_t i = 0; i < d; ++i) out[i] = v[i] - 2.0 * proj * u[i];
        return out;
    };
    std::vector<std::vector<double>> ar, tr;
    for (const auto& v : a) ar.push_back(rotate(v));
    for (const auto& v : t) tr.push_back(rotate(v));

    RetrievalReport r1 = recall_at_k(a, t, {1, 3, 5});
    RetrievalReport r2 = recall_at_k(ar, tr, {1, 3, 5});
    for (size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(r1.audio_to_text[i] - r2.audio_to_text[i]) < 1e-6);
        CHECK(std::abs(r1.text_to_audio[i] - r2.text_to_audio[i]) < 1e-6);
    }
}

TEST_CASE("retrieval rejects k outside [1, n-1]") {
    std::vector<std::vector<double>> a = {{1, 0}, {0, 1}, {1, 1}};
    CHECK_THROWS_AS(recall_at_k(a, a, {3}), Error);
    CHECK_THROWS_AS(recall_at_k({{1.0, 0.0}}, {{1.0, 0.0}}, {1}), Error);
}

TEST_CASE("probe separates linearly separable classes") {
    Rng rng(47);
    std::vector<std::vector<float>> x;
    std::vector<int> y;
    for (int i = 0; i < 120; ++i) {
        int label = i % 2;
        std::vector<float> f(8);
        for (auto& v : f) v = static_cast<float>(rng.normal(0.0, 0.3));
        f[0] += label ? 2.0f : -2.0f;
        x.push_back(std::move(f));
        y.push_back(label);
    }
    ProbeResult res = fit_probe(x, y);
    CHECK(res.holdout_accuracy >= 0.95);

    ProbeConfig mlp;
    mlp.kind = ProbeConfig::Kind::Mlp;
    mlp.hidden = 16;
    ProbeResult res2 = fit_probe(x, y, mlp);
    CHECK(res2.holdout_accuracy >= 0.95);
}

TEST_CASE("probe on shuffled labels stays near chance") {
    Rng rng(53);
    std::vector<std::vector<float>> x;
    std::vector<int> y;
    size_t n = 300;
    for (size_t i = 0; i < n; ++i) {
        std::vector<float> f(8);
        for (auto& v : f) v = static_cast<float>(rng.normal(0.0, 0.3));
        f[0] += (i % 2) ? 2.0f : -2.0f;
        x.push_back(std::move(f));
        y.push_back(static_cast<int>(rng.below(2)));  // labels independent of features
    }
    ProbeResult res = fit_probe(x, y);
    double p = 0.5;
    double sigma = std::sqrt(p * (1 - p) / static_cast<double>(res.n_holdout));
    CHECK(std::abs(res.holdout_accuracy - p) <= 3.0 * sigma + 1e-9);
}

TEST_CASE("probe rejects single-class input and never mutates encoder parameters") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    std::map<std::string, std::vector<float>> before;
    for (const auto& name : model.params.order)
        before[name] = model.params.get(name)->value.data;

    std::vector<std::vector<float>> x;
    std::vector<int> y;
    for (const char* s : {"the cat sat", "a dog ran", "the bird flew", "cats sat"}) {
        auto h = model.text_encode(encode(s, vocab, 16).ids);
        x.emplace_back(h.cls->value.data.begin(), h.cls->value.data.end());
        y.push_back(0);
    }
    CHECK_THROWS_AS(fit_probe(x, y), Error);
    y = {0, 1, 0, 1};
    fit_probe(x, y);
    for (const auto& name : model.params.order)
        REQUIRE(model.params.get(name)->value.data == before.at(name));
}

TEST_CASE("suite reports are reproducible bitwise") {
    Vocabulary vocab = eval_vocab();
    Model<float> model(eval_model(vocab.size()));
    std::vector<MinimalPair> pairs = {{"the cat sat", "the sat cat", "s"},
                                      {"a dog ran", "ran dog a", "s"}};
    SuiteReport a = minimal_pair_accuracy(pairs, model, vocab);
    SuiteReport b = minimal_pair_accuracy(pairs, model, vocab);
    CHECK(a.suites.at("s").margin_sum == b.suites.at("s").margin_sum);
    CHECK(a.suites.at("s").correct == b.suites.at("s").correct);
}

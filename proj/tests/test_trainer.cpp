#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "whismm/trainer.hpp"

using namespace whismm;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers_audio = 1;
    c.n_layers_text = 1;
    c.n_layers_mm = 1;
    c.n_heads = 2;
    c.ffn_mult = 2;
    c.vocab_size = 24;
    c.max_text_len = 12;
    c.max_audio_patches = 16;
    c.seed = 3;
    return c;
}

TrainConfig tiny_train(double lr = 0.05) {
    TrainConfig t;
    t.epochs = 1;
    t.learning_rate = lr;
    t.momentum = 0.0;
    t.batch_size = 4;
    t.seed = 11;
    t.clip_norm = 1.0;
    return t;
}

std::vector<Segment> synthetic_segments(size_t n, uint64_t seed, size_t vocab = 24,
                                        size_t frames = 24, size_t tokens = 6) {
    Rng rng(seed);
    std::vector<Segment> segs(n);
    for (size_t i = 0; i < n; ++i) {
        segs[i].token_ids.push_back(kClsId);
        for (size_t t = 0; t < tokens; ++t)
            segs[i].token_ids.push_back(4 + static_cast<int>(rng.below(vocab - 4)));
        segs[i].mel.values = Tensor<float>::randn({frames, size_t(kMelChannels)}, rng, 0.4f);
        segs[i].file_id = "synthetic_" + std::to_string(i);
    }
    return segs;
}

std::map<std::string, Tensor<float>> snapshot_params(const Model<float>& m) {
    std::map<std::string, Tensor<float>> out;
    for (const auto& name : m.params.order) out.emplace(name, m.params.get(name)->value);
    return out;
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters unchanged but reports losses") {
    Model<float> model(tiny_model());
    Trainer<float> trainer(model, tiny_train(0.0));
    auto before = snapshot_params(model);
    auto segs = synthetic_segments(4, 21);
    StepMetrics m = trainer.train_step(segs, 0);
    for (const auto& name : model.params.order)
        REQUIRE(model.params.get(name)->value.data == before.at(name).data);
    CHECK(m.losses.mlm.has_value());
    CHECK(m.losses.mam.has_value());
    CHECK(m.losses.mmc.has_value());
    CHECK(m.losses.mmm.has_value());
    CHECK(m.losses.atm.has_value());
    CHECK(m.total > 0.0);
}

TEST_CASE("one step from the same state is bitwise reproducible") {
    auto segs = synthetic_segments(4, 22);
    Model<float> m1(tiny_model()), m2(tiny_model());
    Trainer<float> t1(m1, tiny_train()), t2(m2, tiny_train());
    StepMetrics a = t1.train_step(segs, 5);
    StepMetrics b = t2.train_step(segs, 5);
    CHECK(a.total == b.total);
    for (const auto& name : m1.params.order)
        REQUIRE(m1.params.get(name)->value.data == m2.params.get(name)->value.data);
}

TEST_CASE("train logs ceil(N/B) steps per epoch with all five losses") {
    Model<float> model(tiny_model());
    TrainConfig tc = tiny_train();
    tc.batch_size = 2;
    Trainer<float> trainer(model, tc);
    auto segs = synthetic_segments(5, 23);
    std::vector<StepMetrics> log;
    trainer.train(segs, 0, [&](const StepMetrics& m) { log.push_back(m); });
    REQUIRE(log.size() == 3);  // ceil(5/2)
    for (const auto& m : log) {
        CHECK(m.losses.mlm.has_value());
        CHECK(m.losses.mam.has_value());
        CHECK(m.losses.mmc.has_value());
        CHECK(m.losses.mmm.has_value());
        CHECK(m.losses.atm.has_value());
        std::string line = metrics_to_json(m);
        for (const char* key : {"\"mlm\"", "\"mam\"", "\"mmc\"", "\"mmm\"", "\"atm\"", "\"total\"",
                                "\"tau\"", "\"lr\"", "\"wall_ms\"", "\"step\""})
            CHECK(line.find(key) != std::string::npos);
    }
}

TEST_CASE("two runs with identical seed, config and data match bitwise for 10 steps") {
    auto segs = synthetic_segments(8, 24);
    TrainConfig tc = tiny_train();
    tc.epochs = 5;  // 10 steps at batch 4
    auto run = [&](std::vector<StepMetrics>& log) {
        Model<float> model(tiny_model());
        Trainer<float> trainer(model, tc);
        trainer.train(segs, 0, [&](const StepMetrics& m) {
            if (log.size() < 10) log.push_back(m);
        });
    };
    std::vector<StepMetrics> a, b;
    run(a);
    run(b);
    REQUIRE(a.size() == 10);
    for (size_t i = 0; i < 10; ++i) {
        REQUIRE(a[i].total == b[i].total);
        REQUIRE(*a[i].losses.mlm == *b[i].losses.mlm);
        REQUIRE(*a[i].losses.mam == *b[i].losses.mam);
        REQUIRE(*a[i].losses.mmc == *b[i].losses.mmc);
        REQUIRE(*a[i].losses.mmm == *b[i].losses.mmm);
        REQUIRE(*a[i].losses.atm == *b[i].losses.atm);
        REQUIRE(a[i].tau == b[i].tau);
    }
}

TEST_CASE("resuming from a mid-run checkpoint replays the remaining trajectory") {
    auto segs = synthetic_segments(8, 25);
    TrainConfig tc = tiny_train();
    tc.epochs = 3;       // 6 steps
    tc.momentum = 0.9;   // exercise optimizer-state restoration

    std::vector<StepMetrics> full;
    {
        Model<float> model(tiny_model());
        Trainer<float> trainer(model, tc);
        trainer.train(segs, 0, [&](const StepMetrics& m) { full.push_back(m); });
    }

    std::vector<StepMetrics> tail;
    {
        Model<float> model(tiny_model());
        Trainer<float> trainer(model, tc);
        Checkpoint mid;
        // First leg: let train() snapshot at step 3 via the checkpoint hook.
        TrainConfig tc_ck = tc;
        tc_ck.checkpoint_interval = 3;
        Model<float> m1(tiny_model());
        Trainer<float> t1(m1, tc_ck);
        bool captured = false;
        t1.train(segs, 0, nullptr, [&](const Checkpoint& ck, uint64_t step) {
            if (step == 3 && !captured) {
                mid = ck;
                captured = true;
            }
        });
        REQUIRE(captured);

        trainer.restore(mid);
        trainer.train(segs, mid.step, [&](const StepMetrics& m) { tail.push_back(m); });
    }

    REQUIRE(full.size() == 6);
    REQUIRE(tail.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        REQUIRE(tail[i].step == full[3 + i].step);
        REQUIRE(tail[i].total == full[3 + i].total);
        REQUIRE(*tail[i].losses.mlm == *full[3 + i].losses.mlm);
        REQUIRE(*tail[i].losses.mam == *full[3 + i].losses.mam);
    }
}

TEST_CASE("checkpoint files round-trip parameters, step and momentum") {
    auto segs = synthetic_segments(4, 26);
    TrainConfig tc = tiny_train();
    tc.momentum = 0.9;
    Model<float> model(tiny_model());
    Trainer<float> trainer(model, tc);
    trainer.train_step(segs, 0);
    trainer.train_step(segs, 1);
    Checkpoint ck = trainer.snapshot(2);

    auto path = fs::temp_directory_path() / "whismm_test_ckpt.wbck";
    save_checkpoint(path.string(), ck);
    Checkpoint back = load_checkpoint(path.string());
    CHECK(back.step == 2);
    CHECK(back.seed == tc.seed);
    CHECK(back.model_cfg.to_text() == model.cfg.to_text());
    REQUIRE(back.params.size() == ck.params.size());
    REQUIRE(back.momentum.size() == ck.momentum.size());

    // Forward outputs are bitwise equal after reload.
    Model<float> reloaded = model_from_checkpoint<float>(back);
    auto mel = segs[0].mel.values;
    auto h1 = model.audio_encode(model.patch_embed(mel));
    auto h2 = reloaded.audio_encode(reloaded.patch_embed(mel));
    REQUIRE(h1.seq->value.data == h2.seq->value.data);
    REQUIRE(h1.cls->value.data == h2.cls->value.data);

    // Momentum restored exactly: the next step matches bitwise.
    Trainer<float> resumed(reloaded, tc);
    resumed.restore(back);
    StepMetrics ma = trainer.train_step(segs, 2);
    StepMetrics mb = resumed.train_step(segs, 2);
    CHECK(ma.total == mb.total);
    for (const auto& name : model.params.order)
        REQUIRE(model.params.get(name)->value.data == reloaded.params.get(name)->value.data);

    // Tampering with the magic is rejected.
    std::string raw = read_file(path.string());
    raw[0] = 'Q';
    auto bad = fs::temp_directory_path() / "whismm_test_ckpt_bad.wbck";
    write_file_atomic(bad.string(), raw);
    write_file_atomic(bad.string() + ".meta", read_file(path.string() + ".meta"));
    CHECK_THROWS_WITH(load_checkpoint(bad.string()), Catch::Matchers::ContainsSubstring("magic"));

    fs::remove(path);
    fs::remove(path.string() + ".meta");
    fs::remove(bad);
    fs::remove(bad.string() + ".meta");
}

TEST_CASE("clipping bounds the global update norm") {
    auto segs = synthetic_segments(4, 27);
    TrainConfig tc = tiny_train(1.0);
    tc.clip_norm = 0.001;
    tc.momentum = 0.0;
    Model<float> model(tiny_model());
    auto before = snapshot_params(model);
    Trainer<float> trainer(model, tc);
    trainer.train_step(segs, 0);

    double update_sq = 0.0, grad_sq = 0.0;
    for (const auto& name : model.params.order) {
        auto p = model.params.get(name);
        const auto& b = before.at(name);
        for (size_t i = 0; i < p->value.numel(); ++i) {
            double d = static_cast<double>(p->value.data[i]) - b.data[i];
            update_sq += d * d;
        }
        if (!p->grad.data.empty())
            for (float g : p->grad.data) grad_sq += static_cast<double>(g) * g;
    }
    double grad_norm = std::sqrt(grad_sq);
    REQUIRE(grad_norm > tc.clip_norm);  // clipping actually engaged
    double post_clip = tc.learning_rate * tc.clip_norm;
    CHECK(std::sqrt(update_sq) == Catch::Approx(post_clip).epsilon(1e-4));
}

TEST_CASE("every parameter receives gradient from a full multitask step") {
    auto segs = synthetic_segments(4, 28);
    Model<float> model(tiny_model());
    Trainer<float> trainer(model, tiny_train());
    trainer.train_step(segs, 0);
    for (const auto& name : model.params.order) {
        auto p = model.params.get(name);
        INFO("parameter " << name);
        REQUIRE(!p->grad.data.empty());
        bool nonzero = false;
        for (float g : p->grad.data)
            if (g != 0.0f) { nonzero = true; break; }
        CHECK(nonzero);
    }
}

TEST_CASE("a non-finite loss aborts the step with diagnostics") {
    auto segs = synthetic_segments(4, 29);
    Model<float> model(tiny_model());
    model.params.get("audio.conv1.w")->value.data[0] = std::numeric_limits<float>::quiet_NaN();
    Trainer<float> trainer(model, tiny_train());
    CHECK_THROWS_WITH(trainer.train_step(segs, 0),
                      Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("unpaired segments and empty batches are rejected") {
    Model<float> model(tiny_model());
    Trainer<float> trainer(model, tiny_train());
    CHECK_THROWS_AS(trainer.train_step({}, 0), Error);
    Segment text_only;
    text_only.token_ids = {kClsId, 5, 6};
    CHECK_THROWS_AS(trainer.train_step({text_only}, 0), Error);
}

TEST_CASE("the learnable temperature stays inside its clamp bounds") {
    auto segs = synthetic_segments(4, 30);
    Model<float> model(tiny_model());
    model.params.get("loss.tau")->value.data[0] = 0.011f;
    TrainConfig tc = tiny_train(0.5);
    tc.clip_norm = 0.0;  // let tau move freely
    Trainer<float> trainer(model, tc);
    for (uint64_t s = 0; s < 5; ++s) {
        trainer.train_step(segs, s);
        float tau = model.params.get("loss.tau")->value.data[0];
        REQUIRE(tau >= 0.01f);
        REQUIRE(tau <= 1.0f);
    }
}

TEST_CASE("warmup scales the learning rate linearly") {
    Model<float> model(tiny_model());
    TrainConfig tc = tiny_train(0.8);
    tc.warmup_steps = 4;
    Trainer<float> trainer(model, tc);
    CHECK(trainer.learning_rate_at(0) == Catch::Approx(0.2));
    CHECK(trainer.learning_rate_at(1) == Catch::Approx(0.4));
    CHECK(trainer.learning_rate_at(3) == Catch::Approx(0.8));
    CHECK(trainer.learning_rate_at(100) == Catch::Approx(0.8));
}

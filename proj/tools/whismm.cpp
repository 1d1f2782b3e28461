// whismm: the pipeline entry point.
//
// Subcommands: featurize, tokenizer-train, filter-corpus, shard, train,
// eval-pairs, eval-retrieval, score. Exit status 0 on success, 2 on usage
// errors, 1 on runtime failures (one-line "error: ..." on stderr). Artifacts
// are written atomically (temp file + rename).

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "whismm/audio_frontend.hpp"
#include "whismm/config.hpp"
#include "whismm/data_pipeline.hpp"
#include "whismm/evaluation.hpp"
#include "whismm/model.hpp"
#include "whismm/objectives.hpp"
#include "whismm/text_frontend.hpp"
#include "whismm/trainer.hpp"
#include "whismm/wav.hpp"

namespace fs = std::filesystem;
using namespace whismm;

namespace {

std::vector<std::string> list_shards(const std::string& dir) {
    std::vector<std::string> paths;
    if (!fs::is_directory(dir)) fail("shard directory not found: " + dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".wshd")
            paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());  // deterministic iteration order
    if (paths.empty()) fail("no .wshd shards in " + dir);
    return paths;
}

std::vector<Segment> load_all_segments(const std::string& dir) {
    std::vector<Segment> segments;
    for (const auto& path : list_shards(dir)) {
        auto part = read_shard(path);
        segments.insert(segments.end(), std::make_move_iterator(part.begin()),
                        std::make_move_iterator(part.end()));
    }
    return segments;
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
    std::string text;
    if (!config_path.empty()) text = read_file(config_path);
    return RunConfig::resolve(text, sets);
}

int cmd_featurize(const std::string& wav_path, const std::string& out_path) {
    AudioClip clip = read_wav(wav_path);
    if (clip.samples.empty()) fail(wav_path + ": empty clip");
    if (clip.sample_rate != kMelSampleRate) clip = resample(clip, kMelSampleRate);
    write_wmel(out_path, log_mel(clip));
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

// Corpus lines for tokenizer training: transcript-record JSON-lines (their
// word text), or a plain text file with one utterance per line.
std::vector<std::string> corpus_lines(const std::string& input_path, const std::string& manifest_path) {
    std::string buf = read_file(input_path);
    size_t first = buf.find_first_not_of(" \t\r\n");
    bool looks_jsonl = first != std::string::npos && buf[first] == '{';
    std::vector<std::string> lines;
    if (looks_jsonl) {
        auto records = read_records_jsonl(input_path);
        if (!manifest_path.empty()) {
            std::string mbuf = read_file(manifest_path);
            std::vector<std::string> keep_order;
            std::map<std::string, bool> keep;
            size_t i = 0;
            while (i < mbuf.size()) {
                size_t j = mbuf.find('\n', i);
                if (j == std::string::npos) j = mbuf.size();
                std::string line = mbuf.substr(i, j - i);
                i = j + 1;
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                auto obj = nlohmann::json::parse(line);
                if (obj.value("included", false)) keep[obj.at("file_id").get<std::string>()] = true;
            }
            std::vector<TranscriptRecord> filtered;
            for (auto& r : records)
                if (keep.count(r.file_id)) filtered.push_back(std::move(r));
            records = std::move(filtered);
        }
        for (const auto& r : records) lines.push_back(r.text());
    } else {
        size_t i = 0;
        while (i < buf.size()) {
            size_t j = buf.find('\n', i);
            if (j == std::string::npos) j = buf.size();
            std::string line = buf.substr(i, j - i);
            i = j + 1;
            if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
        }
    }
    return lines;
}

int cmd_tokenizer_train(const std::string& input, const std::string& manifest, int vocab_size,
                        const std::string& out) {
    auto lines = corpus_lines(input, manifest);
    Vocabulary vocab = train_wordpiece(lines, vocab_size);
    save_vocab(out, vocab);
    std::cout << "wrote " << out << " (" << vocab.size() << " pieces)\n";
    return 0;
}

int cmd_filter_corpus(const std::string& records_path, uint64_t budget, const std::string& out) {
    auto records = read_records_jsonl(records_path);
    CorpusManifest manifest = filter_corpus(records, budget, &std::cerr);
    write_file_atomic(out, manifest_to_jsonl(manifest));
    std::cout << "wrote " << out << " (" << manifest.included_ids().size() << " included, "
              << manifest.included_words() << " words)\n";
    return 0;
}

int cmd_shard(const std::string& records_path, const std::string& manifest_path,
              const std::string& vocab_path, const std::string& out_dir, const RunConfig& cfg,
              size_t segments_per_shard) {
    auto records = read_records_jsonl(records_path);
    Vocabulary vocab = load_vocab(vocab_path);
    SegmentLimits limits = cfg.segment_limits();

    std::map<std::string, bool> included;
    if (!manifest_path.empty()) {
        std::string mbuf = read_file(manifest_path);
        size_t i = 0;
        while (i < mbuf.size()) {
            size_t j = mbuf.find('\n', i);
            if (j == std::string::npos) j = mbuf.size();
            std::string line = mbuf.substr(i, j - i);
            i = j + 1;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            auto obj = nlohmann::json::parse(line);
            if (obj.value("included", false)) included[obj.at("file_id").get<std::string>()] = true;
        }
    }

    fs::create_directories(out_dir);
    std::vector<Segment> pending;
    size_t shard_idx = 0, total_segments = 0;
    auto flush = [&]() {
        if (pending.empty()) return;
        char name[32];
        std::snprintf(name, sizeof(name), "shard_%05zu.wshd", shard_idx++);
        write_shard((fs::path(out_dir) / name).string(), pending);
        total_segments += pending.size();
        pending.clear();
    };
    for (const auto& rec : records) {
        if (!manifest_path.empty() && !included.count(rec.file_id)) continue;
        auto segs = segment_pairs(rec, vocab, limits, nullptr, &std::cerr);
        for (auto& s : segs) {
            pending.push_back(std::move(s));
            if (pending.size() >= segments_per_shard) flush();
        }
    }
    flush();
    if (shard_idx == 0) fail("no segments produced; nothing to shard");
    std::cout << "wrote " << shard_idx << " shard(s), " << total_segments << " segments to "
              << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& shards_dir, const std::string& out_dir,
              const std::string& resume_path) {
    RunConfig cfg = resolve_config(config_path, sets);
    fs::create_directories(out_dir);
    write_file_atomic((fs::path(out_dir) / "config.resolved").string(), cfg.to_text());

    auto segments = load_all_segments(shards_dir);
    ModelConfig mc = cfg.model_config();
    TrainConfig tc = cfg.train_config();

    Model<float> model(mc);
    model.params.get("loss.tau")->value.data[0] = static_cast<float>(cfg.get_double("loss.tau_init"));
    Trainer<float> trainer(model, tc);

    uint64_t start_step = 0;
    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        require(ck.model_cfg.to_text() == mc.to_text(),
                "resume: checkpoint model config differs from resolved config");
        trainer.restore(ck);
        start_step = ck.step;
    }

    std::string metrics;
    auto flush_metrics = [&]() {
        write_file_atomic((fs::path(out_dir) / "metrics.jsonl").string(), metrics);
    };
    Checkpoint last = trainer.train(
        segments, start_step,
        [&](const StepMetrics& m) {
            metrics += metrics_to_json(m);
            metrics += '\n';
        },
        [&](const Checkpoint& ck, uint64_t step) {
            save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(step) + ".wbck")).string(), ck);
            flush_metrics();
        });
    save_checkpoint((fs::path(out_dir) / "model.wbck").string(), last);
    flush_metrics();
    std::cout << "trained to step " << last.step << "; final checkpoint " << out_dir
              << "/model.wbck\n";
    return 0;
}

int cmd_eval_pairs(const std::string& model_path, const std::string& vocab_path,
                   const std::string& suite_path, const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Model<float> model = model_from_checkpoint<float>(ck);
    Vocabulary vocab = load_vocab(vocab_path);
    auto pairs = read_pairs_jsonl(suite_path);
    SuiteReport report = minimal_pair_accuracy(pairs, model, vocab);
    nlohmann::json j = report_to_json(report);
    if (!report_path.empty()) write_file_atomic(report_path, j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_eval_retrieval(const std::string& model_path, const std::string& shards_dir,
                       const std::string& k_csv, const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Model<float> model = model_from_checkpoint<float>(ck);
    auto segments = load_all_segments(shards_dir);
    std::vector<size_t> ks;
    std::stringstream ss(k_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) ks.push_back(std::stoull(tok));
    }
    if (ks.empty()) fail("--k expects a comma-separated list, e.g. 1,5,10");
    RetrievalReport rep = retrieval_eval(segments, model, ks);
    nlohmann::json j;
    j["n"] = segments.size();
    for (size_t i = 0; i < ks.size(); ++i) {
        j["audio_to_text"]["recall@" + std::to_string(ks[i])] = rep.audio_to_text[i];
        j["text_to_audio"]["recall@" + std::to_string(ks[i])] = rep.text_to_audio[i];
    }
    if (!report_path.empty()) write_file_atomic(report_path, j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_score(const std::string& model_path, const std::string& vocab_path, const std::string& text) {
    Checkpoint ck = load_checkpoint(model_path);
    Model<float> model = model_from_checkpoint<float>(ck);
    Vocabulary vocab = load_vocab(vocab_path);
    double pll = pll_score(text, model, vocab);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", pll);
    std::cout << buf << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"whismm: paired audio/text masked-modeling pipeline"};
    app.require_subcommand(1);

    // featurize
    auto* featurize = app.add_subcommand("featurize", "WAV -> WMEL log-mel features");
    std::string f_wav, f_out;
    featurize->add_option("--wav", f_wav, "input WAV (PCM16 mono/stereo)")->required();
    featurize->add_option("--out", f_out, "output .wmel path")->required();

    // tokenizer-train
    auto* toktrain = app.add_subcommand("tokenizer-train", "train the WordPiece vocabulary");
    std::string t_input, t_manifest, t_out;
    int t_vocab_size = 8192;
    toktrain->add_option("--input", t_input, "records JSONL or plain text corpus")->required();
    toktrain->add_option("--manifest", t_manifest, "restrict to files included by this manifest");
    toktrain->add_option("--vocab-size", t_vocab_size, "target vocabulary size")->required();
    toktrain->add_option("--out", t_out, "output vocab.txt")->required();

    // filter-corpus
    auto* filter = app.add_subcommand("filter-corpus", "apply corpus curation rules");
    std::string c_records, c_out;
    uint64_t c_budget = 0;
    filter->add_option("--records", c_records, "transcript records JSONL")->required();
    filter->add_option("--budget", c_budget, "word budget")->required();
    filter->add_option("--out", c_out, "manifest JSONL output")->required();

    // shard
    auto* shard = app.add_subcommand("shard", "pack paired segments into shards");
    std::string s_records, s_manifest, s_vocab, s_out, s_config;
    std::vector<std::string> s_sets;
    size_t s_per_shard = 256;
    shard->add_option("--records", s_records, "transcript records JSONL")->required();
    shard->add_option("--manifest", s_manifest, "manifest JSONL (only included files are sharded)");
    shard->add_option("--vocab", s_vocab, "vocab.txt")->required();
    shard->add_option("--out", s_out, "output directory")->required();
    shard->add_option("--config", s_config, "key=value config file");
    shard->add_option("--set", s_sets, "config override key=value (repeatable)");
    shard->add_option("--segments-per-shard", s_per_shard, "segments per shard file");

    // train
    auto* train = app.add_subcommand("train", "multitask pretraining");
    std::string tr_config, tr_shards, tr_out, tr_resume;
    std::vector<std::string> tr_sets;
    train->add_option("--config", tr_config, "key=value config file");
    train->add_option("--set", tr_sets, "config override key=value (repeatable)");
    train->add_option("--shards", tr_shards, "shard directory")->required();
    train->add_option("--out", tr_out, "run directory")->required();
    train->add_option("--resume", tr_resume, "checkpoint to resume from");

    // eval-pairs
    auto* pairs = app.add_subcommand("eval-pairs", "minimal-pair suite accuracy");
    std::string p_model, p_vocab, p_suite, p_report;
    pairs->add_option("--model", p_model, "checkpoint (.wbck)")->required();
    pairs->add_option("--vocab", p_vocab, "vocab.txt")->required();
    pairs->add_option("--suite", p_suite, "minimal pairs JSONL")->required();
    pairs->add_option("--report", p_report, "write report JSON here");

    // eval-retrieval
    auto* retr = app.add_subcommand("eval-retrieval", "contrastive retrieval recall@k");
    std::string r_model, r_shards, r_k = "1,5,10", r_report;
    retr->add_option("--model", r_model, "checkpoint (.wbck)")->required();
    retr->add_option("--shards", r_shards, "shard directory")->required();
    retr->add_option("--k", r_k, "comma-separated k values");
    retr->add_option("--report", r_report, "write report JSON here");

    // score
    auto* score = app.add_subcommand("score", "pseudo-log-likelihood of one sentence");
    std::string sc_model, sc_vocab, sc_text;
    score->add_option("--model", sc_model, "checkpoint (.wbck)")->required();
    score->add_option("--vocab", sc_vocab, "vocab.txt")->required();
    score->add_option("--text", sc_text, "sentence to score")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (*featurize) return cmd_featurize(f_wav, f_out);
        if (*toktrain) return cmd_tokenizer_train(t_input, t_manifest, t_vocab_size, t_out);
        if (*filter) return cmd_filter_corpus(c_records, c_budget, c_out);
        if (*shard)
            return cmd_shard(s_records, s_manifest, s_vocab, s_out, resolve_config(s_config, s_sets),
                             s_per_shard);
        if (*train) return cmd_train(tr_config, tr_sets, tr_shards, tr_out, tr_resume);
        if (*pairs) return cmd_eval_pairs(p_model, p_vocab, p_suite, p_report);
        if (*retr) return cmd_eval_retrieval(r_model, r_shards, r_k, r_report);
        if (*score) return cmd_score(sc_model, sc_vocab, sc_text);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 2;
}

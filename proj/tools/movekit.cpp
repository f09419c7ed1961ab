// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

// movekit command-line driver.
//
//   movekit synth          corpus generation and train/dev/test split
//   movekit filter         duration + WER quality filters, pair conjunction
//   movekit train          base model, Stage 1, Stage 2 (checkpoint + log CSV)
//   movekit sweep          data-scaling curve, pretrained vs random base
//   movekit eval           metric suite over annotation / transcript files
//   movekit route-analyze  confusion matrix and alignment of a checkpoint
//
// Exit codes: 0 ok, 1 usage, 2 data/config error, 3 numerical failure.

#include "movekit/data_pipeline.hpp"
#include "movekit/experiment.hpp"
#include "movekit/metrics.hpp"
#include "movekit/router_analysis.hpp"
#include "movekit/synth_task.hpp"
#include "movekit/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace movekit;

namespace {

/// Resolved options of a subcommand plus tool identity. Output locations are
/// left out so that reruns into another directory stay byte-identical.
json provenance(const CLI::App* cmd) {
    json opts = json::object();
    for (const CLI::Option* o : cmd->get_options()) {
        const std::string name = o->get_single_name();
        if (name.empty() || name == "help" || name == "config" || name == "out") continue;
        const auto& res = o->results();
        if (res.empty())
            opts[name] = o->get_default_str();
        else if (res.size() == 1)
            opts[name] = res.front();
        else
            opts[name] = res;
    }
    return {{"tool", "movekit"}, {"version", kVersion}, {"command", cmd->get_name()}, {"options", opts}};
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path.string());
    std::vector<json> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

void write_checkpoint(const fs::path& path, const Model& m, const json& state) {
    TensorArchive ar = to_archive(m);
    ar.meta["train_state"] = state;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    ar.save(path);
}

/// Whitespace tokens; words with non-ASCII characters split per character.
std::vector<std::string> bleu_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
        if (j > i) {
            const std::string w = s.substr(i, j - i);
            if (std::all_of(w.begin(), w.end(), [](char c) { return static_cast<unsigned char>(c) < 0x80; }))
                out.push_back(w);
            else
                for (char32_t cp : detail::utf8_decode(w)) out.push_back(utf8_encode(cp));
        }
        i = j;
    }
    return out;
}

// ---------------------------------------------------------------------------

struct ModelOpts {
    int d = 32, layers = 2, heads = 4, ff = 64, max_seq = 32, rank = 8, experts = kNumManifolds;
    double alpha = 0.0;

    void add(CLI::App* c) {
        c->add_option("--d", d, "Model width");
        c->add_option("--layers", layers, "Decoder blocks");
        c->add_option("--heads", heads, "Attention heads");
        c->add_option("--ff", ff, "Feed-forward width");
        c->add_option("--max-seq", max_seq, "Maximum sequence length");
        c->add_option("--rank", rank, "LoRA rank r");
        c->add_option("--alpha", alpha, "LoRA alpha (<= 0 means alpha = r)");
        c->add_option("--experts", experts, "Number of experts");
    }
    ModelConfig config(int vocab, std::uint64_t seed) const {
        ModelConfig m;
        m.vocab_size = vocab;
        m.d = d;
        m.n_layers = layers;
        m.n_heads = heads;
        m.ff_dim = ff;
        m.max_seq = max_seq;
        m.move_rank = rank;
        m.move_alpha = alpha;
        m.n_experts = experts;
        m.seed = seed;
        m.validate();
        return m;
    }
};

struct PretrainOpts {
    PretrainOptions p;
    void add(CLI::App* c) {
        c->add_option("--pretrain-examples", p.n_examples, "Neutral pretraining sequences");
        c->add_option("--pretrain-epochs", p.epochs, "Pretraining epochs");
        c->add_option("--pretrain-batch", p.batch_size, "Pretraining batch size");
        c->add_option("--pretrain-lr", p.lr, "Pretraining learning rate");
    }
};

// ---------------------------------------------------------------------------

struct SynthOpts {
    std::uint64_t seed = 1;
    int records = 2000, vocab = 47, len_min = 3, len_max = 8;
    std::vector<double> split = {0.8, 0.1, 0.1};
    std::string out = "data";
};

void cmd_synth(const SynthOpts& o, const json& prov) {
    if (o.split.size() != 3) throw ConfigError("--split needs three ratios");
    const CorpusManifest all = generate_corpus(o.seed, o.records, o.vocab, {o.len_min, o.len_max});
    const Splits sp = split(all, {o.split[0], o.split[1], o.split[2]}, o.seed);
    const fs::path dir(o.out);
    write_manifest(dir / "all.jsonl", all, prov);
    write_manifest(dir / "train.jsonl", sp.train, prov);
    write_manifest(dir / "dev.jsonl", sp.dev, prov);
    write_manifest(dir / "test.jsonl", sp.test, prov);
    std::cout << "wrote " << all.size() << " records (" << sp.train.size() << "/" << sp.dev.size() << "/"
              << sp.test.size() << ") to " << dir.string() << '\n';
}

struct FilterOpts {
    std::string input, out = "filtered";
    double max_wer = kMaxWer;
};

void cmd_filter(const FilterOpts& o, const json& prov) {
    const CorpusManifest m = read_manifest(o.input);
    const FilterOutcome f = filter_manifest(m, o.max_wer);
    const fs::path dir(o.out);
    write_filter_reports(dir / "filter_report.jsonl", f);
    write_manifest(dir / "retained.jsonl", f.kept, prov);
    std::cout << "retained " << f.kept.size() << " of " << m.size() << " records\n";
}

/// rows = data manifold, columns = expert forced on every token.
void write_loss_matrix(const fs::path& path, const Matrix& m, const json& prov) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << "# " << prov.dump() << '\n' << "manifold";
    for (Eigen::Index e = 0; e < m.cols(); ++e) f << ",expert" << e;
    f << '\n';
    for (Manifold r : kAllManifolds) {
        f << to_string(r);
        for (Eigen::Index e = 0; e < m.cols(); ++e) f << ',' << format_double(m(index_of(r), e), 9);
        f << '\n';
    }
}

struct TrainOpts {
    std::uint64_t seed = 1;
    std::string train, dev, out = "run", init = "pretrained", stage = "all", resume;
    ModelOpts model;
    PretrainOpts pretrain;
    TrainPlan s1 = TrainPlan::stage1(0), s2 = TrainPlan::stage2(0);
};

void cmd_train(const TrainOpts& o, const json& prov) {
    if (o.stage != "stage1" && o.stage != "stage2" && o.stage != "all")
        throw ConfigError("--stage must be stage1, stage2 or all");
    const CorpusManifest train = read_manifest(o.train);
    if (train.records.empty()) throw DataError("training manifest is empty");
    if (train.vocab_size <= 0) throw DataError("training manifest has no vocab_size");
    const fs::path dir(o.out);
    TrainingLog log;
    Model model;
    bool stage1_done = false;
    if (!o.resume.empty()) {
        const TensorArchive ar = TensorArchive::load(o.resume);
        model = from_archive(ar);
        const json st = ar.meta.value("train_state", json::object());
        stage1_done = st.value("completed", "") == "stage1";
        log.next_step = st.value("next_step", 1L);
        if (o.stage != "stage2" || !stage1_done) throw ConfigError("--resume expects a Stage-1 checkpoint and --stage stage2");
    } else {
        if (o.stage == "stage2") throw ConfigError("--stage stage2 needs --resume <stage-1 checkpoint>");
        model = build_model(o.model.config(train.vocab_size, derive_seed(o.seed, 1u)), base_init_from_string(o.init),
                            o.pretrain.p, &log);
    }
    TrainPlan p1 = o.s1, p2 = o.s2;
    p1.seed = derive_seed(o.seed, 2u);
    p2.seed = derive_seed(o.seed, 3u);
    if (!stage1_done) {
        stage1_specialize(model, train, p1, &log);
        write_checkpoint(dir / "stage1.mvk", model,
                         {{"completed", "stage1"}, {"next_step", log.next_step}, {"provenance", prov}});
        if (!o.dev.empty()) write_loss_matrix(dir / "stage1_forced_loss.csv", forced_loss_matrix(model, read_manifest(o.dev)), prov);
    }
    if (o.stage != "stage1") {
        stage2_route(model, train, p2, &log);
        write_checkpoint(dir / "stage2.mvk", model,
                         {{"completed", "stage2"}, {"next_step", log.next_step}, {"provenance", prov}});
    }
    log.write_csv(dir / "train_log.csv", prov);
    std::cout << "trained (" << o.stage << "), " << log.rows.size() << " logged steps, final loss "
              << (log.rows.empty() ? 0.0 : log.rows.back().loss) << '\n';
}

struct SweepOpts {
    SweepConfig cfg;
    ModelOpts model;
    PretrainOpts pretrain;
    std::vector<std::string> inits = {"pretrained", "random"};
    std::string out = "sweep";
};

void cmd_sweep(SweepOpts o, const json& prov) {
    o.cfg.model = o.model.config(o.cfg.model.vocab_size, 0);
    o.cfg.pretrain = o.pretrain.p;
    o.cfg.inits.clear();
    for (const auto& s : o.inits) o.cfg.inits.push_back(base_init_from_string(s));
    const auto rows = run_sweep(o.cfg);
    write_sweep_csv(fs::path(o.out) / "sweep.csv", rows, prov);
    for (const auto& r : rows)
        std::cout << to_string(r.init) << " fraction " << r.fraction << ": " << r.metric << " +- " << r.dispersion
                  << '\n';
}

struct EvalOpts {
    std::string bleu, arousal, nv, votes, mos, model, test, out = "eval";
    int bootstrap = 1000;
    std::uint64_t seed = 1;
};

void cmd_eval(const EvalOpts& o, const json& prov) {
    std::vector<MetricsReport> rows;
    if (!o.bleu.empty()) {
        std::map<std::string, std::pair<std::vector<std::vector<std::string>>, std::vector<std::vector<std::string>>>> by;
        for (const auto& j : read_jsonl(o.bleu)) {
            auto& [refs, hyps] = by[j.value("system", "")];
            refs.push_back(bleu_tokens(j.at("ref").get<std::string>()));
            hyps.push_back(bleu_tokens(j.at("hyp").get<std::string>()));
        }
        for (const auto& [sys, rh] : by) rows.push_back(bleu_report(rh.first, rh.second, sys, o.bootstrap, o.seed));
    }
    if (!o.arousal.empty()) {
        std::map<std::string, std::vector<std::pair<AroValPoint, AroValPoint>>> by;
        for (const auto& j : read_jsonl(o.arousal)) {
            const auto s = j.at("src").get<std::vector<double>>(), g = j.at("gen").get<std::vector<double>>();
            if (s.size() != 2 || g.size() != 2) throw DataError("arousal-valence points need two coordinates");
            by[j.value("system", "")].push_back({{s[0], s[1]}, {g[0], g[1]}});
        }
        for (const auto& [sys, pairs] : by) rows.push_back(aro_val_report(pairs, sys));
    }
    if (!o.nv.empty()) {
        std::vector<NVAnnotation> ann;
        for (const auto& j : read_jsonl(o.nv))
            ann.push_back({j.at("utterance_id"), j.at("evaluator_id"), j.at("system_id"),
                           nv_label_from_string(j.at("source_nv")), nv_label_from_string(j.at("perceived_nv"))});
        for (auto& r : nv_match_accuracy(ann)) rows.push_back(std::move(r));
    }
    if (!o.votes.empty()) {
        std::map<std::string, std::vector<Vote>> by;
        for (const auto& j : read_jsonl(o.votes)) by[j.value("comparison", "")].push_back(vote_from_string(j.at("vote")));
        for (const auto& [cmp, v] : by) {
            const Preference p = ab_preference(v);
            const long n = static_cast<long>(v.size());
            rows.push_back({"ab_win_a", cmp, p.a, 0.0, n});
            rows.push_back({"ab_tie", cmp, p.tie, 0.0, n});
            rows.push_back({"ab_win_b", cmp, p.b, 0.0, n});
        }
    }
    if (!o.mos.empty()) {
        std::map<std::pair<std::string, std::string>, std::vector<Rating>> by;
        for (const auto& j : read_jsonl(o.mos))
            by[{j.value("metric", "mos"), j.value("system", "")}].push_back(
                {j.at("evaluator_id"), j.at("utterance_id"), j.at("score").get<double>()});
        for (const auto& [key, r] : by) rows.push_back(mos_aggregate(r, key.first, key.second));
    }
    if (!o.model.empty() || !o.test.empty()) {
        if (o.model.empty() || o.test.empty()) throw ConfigError("--model and --test go together");
        const Model m = from_archive(TensorArchive::load(o.model));
        const Routing r = m.cfg.n_experts == 1 ? Routing::forced(0) : Routing::soft();
        rows.push_back(content_accuracy_report(m, read_manifest(o.test), r, fs::path(o.model).stem().string(),
                                               o.bootstrap, o.seed));
    }
    if (rows.empty()) throw ConfigError("eval: no inputs given");
    write_metrics_csv(fs::path(o.out) / "metrics.csv", rows, prov);
    for (const auto& r : rows)
        std::cout << r.metric << ' ' << r.system << ' ' << format_double(r.estimate, 2) << " +- "
                  << format_double(r.dispersion, 2) << '\n';
}

struct RouteOpts {
    std::string model, test, mode = "mean", out = "routing";
};

void cmd_route_analyze(const RouteOpts& o, const json& prov) {
    const Model m = from_archive(TensorArchive::load(o.model));
    const DominanceMode mode = dominance_mode_from_string(o.mode);
    const auto traces = collect_traces(m, read_manifest(o.test), mode);
    const ConfusionMatrix cm = confusion(traces, mode);
    const fs::path dir(o.out);
    write_confusion_csv(dir / "confusion.csv", cm);
    write_plot_data(dir / "confusion_normalized.csv", cm);
    json summary = routing_summary(cm, mode);
    summary["provenance"] = prov;
    write_json(dir / "summary.json", summary);
    std::cout << "alignment accuracy " << format_double(summary["alignment_accuracy"].get<double>(), 4) << " over "
              << cm.sum() << " utterances\n";
}

void add_plan(CLI::App* c, TrainPlan& p, const std::string& prefix) {
    c->add_option("--" + prefix + "-epochs", p.epochs, "Epochs");
    c->add_option("--" + prefix + "-batch", p.batch_size, "Batch size");
    c->add_option("--" + prefix + "-lr", p.optim.lr, "AdamW learning rate");
    c->add_option("--" + prefix + "-weight-decay", p.optim.weight_decay, "AdamW decoupled weight decay");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"movekit: mixture of vocalization experts at desk scale"};
    app.set_version_flag("--version", std::string(kVersion));
    app.set_config("--config", "", "TOML config file; command-line flags override it");
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    SynthOpts synth;
    auto* c_synth = app.add_subcommand("synth", "Generate and split the synthetic corpus");
    c_synth->add_option("--seed", synth.seed, "Root seed");
    c_synth->add_option("--records", synth.records, "Number of records");
    c_synth->add_option("--vocab", synth.vocab, "Vocabulary size");
    c_synth->add_option("--len-min", synth.len_min, "Minimum content length");
    c_synth->add_option("--len-max", synth.len_max, "Maximum content length");
    c_synth->add_option("--split", synth.split, "Train/dev/test ratios")->expected(3);
    c_synth->add_option("--out", synth.out, "Output directory");

    FilterOpts filter;
    auto* c_filter = app.add_subcommand("filter", "Apply the duration and WER filters to a manifest");
    c_filter->add_option("--input", filter.input, "Input manifest (JSON lines)")->required();
    c_filter->add_option("--max-wer", filter.max_wer, "WER threshold (pass at <=)");
    c_filter->add_option("--out", filter.out, "Output directory");

    TrainOpts train;
    auto* c_train = app.add_subcommand("train", "Two-stage MoVE training");
    c_train->add_option("--train", train.train, "Training manifest")->required();
    c_train->add_option("--dev", train.dev, "Held-out manifest for the Stage-1 forced-routing loss matrix");
    c_train->add_option("--stage", train.stage, "stage1, stage2 or all");
    c_train->add_option("--init", train.init, "Base initialisation: pretrained or random");
    c_train->add_option("--resume", train.resume, "Stage-1 checkpoint to continue from");
    c_train->add_option("--seed", train.seed, "Root seed");
    c_train->add_option("--out", train.out, "Output directory");
    train.model.add(c_train);
    train.pretrain.add(c_train);
    add_plan(c_train, train.s1, "stage1");
    add_plan(c_train, train.s2, "stage2");

    SweepOpts sweep;
    auto* c_sweep = app.add_subcommand("sweep", "Data-scaling curve for pretrained and random bases");
    c_sweep->add_option("--fractions", sweep.cfg.fractions, "Training-set fractions");
    c_sweep->add_option("--inits", sweep.inits, "Base initialisations");
    c_sweep->add_option("--records", sweep.cfg.corpus_records, "Corpus size before splitting");
    c_sweep->add_option("--vocab", sweep.cfg.model.vocab_size, "Vocabulary size");
    c_sweep->add_option("--bootstrap", sweep.cfg.bootstrap, "Bootstrap resamples");
    c_sweep->add_option("--seed", sweep.cfg.seed, "Root seed");
    c_sweep->add_option("--out", sweep.out, "Output directory");
    sweep.model.add(c_sweep);
    sweep.pretrain.add(c_sweep);
    add_plan(c_sweep, sweep.cfg.plan, "adapter");

    EvalOpts ev;
    auto* c_eval = app.add_subcommand("eval", "Compute the metric suite");
    c_eval->add_option("--bleu", ev.bleu, "JSON lines {system, ref, hyp}");
    c_eval->add_option("--arousal", ev.arousal, "JSON lines {system, src:[a,v], gen:[a,v]}");
    c_eval->add_option("--nv", ev.nv, "JSON lines NV annotations");
    c_eval->add_option("--votes", ev.votes, "JSON lines {comparison, vote: A|B|Tie}");
    c_eval->add_option("--mos", ev.mos, "JSON lines {metric, system, evaluator_id, utterance_id, score}");
    c_eval->add_option("--model", ev.model, "Checkpoint for task accuracy");
    c_eval->add_option("--test", ev.test, "Manifest for task accuracy");
    c_eval->add_option("--bootstrap", ev.bootstrap, "Bootstrap resamples");
    c_eval->add_option("--seed", ev.seed, "Bootstrap seed");
    c_eval->add_option("--out", ev.out, "Output directory");

    RouteOpts route;
    auto* c_route = app.add_subcommand("route-analyze", "Router confusion matrix and alignment accuracy");
    c_route->add_option("--model", route.model, "Checkpoint")->required();
    c_route->add_option("--test", route.test, "Manifest")->required();
    c_route->add_option("--mode", route.mode, "Dominant-expert rule: mean or majority");
    c_route->add_option("--out", route.out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*c_synth) cmd_synth(synth, provenance(c_synth));
        if (*c_filter) cmd_filter(filter, provenance(c_filter));
        if (*c_train) cmd_train(train, provenance(c_train));
        if (*c_sweep) cmd_sweep(sweep, provenance(c_sweep));
        if (*c_eval) cmd_eval(ev, provenance(c_eval));
        if (*c_route) cmd_route_analyze(route, provenance(c_route));
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed input: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

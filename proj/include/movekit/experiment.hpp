// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Task metric and the data-scaling sweep.

#include "movekit/metrics.hpp"
#include "movekit/synth_task.hpp"
#include "movekit/toy_model.hpp"
#include "movekit/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace movekit {

struct RecordScore {
    long hits = 0;
    long total = 0;
};

/// Teacher-forced argmax accuracy on target content tokens, per record.
inline std::vector<RecordScore> content_scores(const Model& model, const CorpusManifest& corpus,
                                               const Routing& routing) {
    const TaskVocab v = TaskVocab::for_vocab(corpus.vocab_size);
    std::vector<RecordScore> out;
    out.reserve(corpus.records.size());
    for (const auto& rec : corpus.records) {
        const LmExample ex = encode(rec);
        const ExampleView view = view_of(ex);
        const Matrix logits = forward(model, view.input, routing);
        RecordScore s;
        for (Eigen::Index t = 0; t < logits.rows(); ++t) {
            if (!view.mask[t] || !v.is_target_content(view.targets[t])) continue;
            Eigen::Index best;
            logits.row(t).maxCoeff(&best);
            s.hits += best == view.targets[t] ? 1 : 0;
            s.total += 1;
        }
        out.push_back(s);
    }
    return out;
}

inline double pooled_accuracy(std::span<const RecordScore> scores, std::span<const std::size_t> idx) {
    long h = 0, n = 0;
    for (auto i : idx) {
        h += scores[i].hits;
        n += scores[i].total;
    }
    if (n == 0) throw DataError("pooled_accuracy: no scored tokens");
    return static_cast<double>(h) / static_cast<double>(n);
}

inline double pooled_accuracy(std::span<const RecordScore> scores) {
    std::vector<std::size_t> all(scores.size());
    std::iota(all.begin(), all.end(), 0);
    return pooled_accuracy(scores, all);
}

/// Content accuracy with record-level bootstrap SD.
inline MetricsReport content_accuracy_report(const Model& model, const CorpusManifest& corpus, const Routing& routing,
                                             std::string system, int B, std::uint64_t seed) {
    const auto scores = content_scores(model, corpus, routing);
    const double point = pooled_accuracy(scores);
    const double sd = bootstrap_sd(scores.size(), B, seed,
                                   [&](std::span<const std::size_t> idx) { return pooled_accuracy(scores, idx); });
    return {"content_accuracy", std::move(system), point, sd, static_cast<long>(scores.size())};
}

// ---------------------------------------------------------------------------
// Data-scaling sweep: one LoRA adapter over a Pretrained or Random frozen base,
// trained on nested fractions of the training split.

struct SweepConfig {
    ModelConfig model;
    PretrainOptions pretrain;
    int corpus_records = 2000;
    std::pair<int, int> len_range = {3, 8};
    std::array<double, 3> split = {0.8, 0.1, 0.1};
    std::vector<double> fractions = {0.01, 0.05, 0.25, 1.0};
    std::vector<BaseInit> inits = {BaseInit::Pretrained, BaseInit::Random};
    TrainPlan plan{Stage::Single, 2, 4, AdamW{3e-3}, 1};
    int bootstrap = 1000;
    std::uint64_t seed = 1;

    nlohmann::json to_json() const {
        nlohmann::json in = nlohmann::json::array();
        for (auto i : inits) in.push_back(std::string(to_string(i)));
        return {{"model", model.to_json()}, {"pretrain", pretrain.to_json()}, {"corpus_records", corpus_records},
                {"len_min", len_range.first}, {"len_max", len_range.second}, {"split", split},
                {"fractions", fractions}, {"inits", in}, {"plan", plan.to_json()}, {"bootstrap", bootstrap},
                {"seed", seed}};
    }
};

struct SweepRow {
    double fraction = 0.0;
    BaseInit init = BaseInit::Pretrained;
    long n_train = 0;
    double metric = 0.0;
    double dispersion = 0.0;
    double chance = 0.0;
};

inline std::vector<SweepRow> run_sweep(const SweepConfig& cfg) {
    if (cfg.fractions.empty() || cfg.inits.empty()) throw ConfigError("sweep: fractions and inits must be non-empty");
    ModelConfig mc = cfg.model;
    mc.seed = derive_seed(cfg.seed, 0x11u);
    mc.n_experts = 1;
    const CorpusManifest corpus = generate_corpus(derive_seed(cfg.seed, 0x12u), cfg.corpus_records, mc.vocab_size,
                                                  cfg.len_range);
    const Splits sp = split(corpus, cfg.split, derive_seed(cfg.seed, 0x13u));
    const double chance = 1.0 / TaskVocab::for_vocab(mc.vocab_size).content;
    std::vector<SweepRow> rows;
    for (BaseInit init : cfg.inits) {
        const Model base = build_model(mc, init, cfg.pretrain);
        for (double f : cfg.fractions) {
            const CorpusManifest sub = subset_by_scale(sp.train, f, derive_seed(cfg.seed, 0x14u));
            Model model = base;
            TrainPlan plan = cfg.plan;
            plan.stage = Stage::Single;
            plan.seed = derive_seed(cfg.seed, 0x15u);
            train_single_adapter(model, sub, plan);
            const auto rep = content_accuracy_report(model, sp.test, Routing::forced(0), "", cfg.bootstrap,
                                                     derive_seed(cfg.seed, 0x16u));
            rows.push_back({f, init, static_cast<long>(sub.size()), rep.estimate, rep.dispersion, chance});
        }
    }
    return rows;
}

inline void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows,
                            const nlohmann::json& provenance = {}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    if (!provenance.is_null()) f << "# " << provenance.dump() << '\n';
    f << "fraction,init,n_train,metric,dispersion,chance\n";
    for (const auto& r : rows)
        f << format_double(r.fraction, 6) << ',' << to_string(r.init) << ',' << r.n_train << ','
          << format_double(r.metric, 6) << ',' << format_double(r.dispersion, 6) << ',' << format_double(r.chance, 6)
          << '\n';
}

} // namespace movekit

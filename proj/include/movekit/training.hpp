// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// AdamW and the two-stage MoVE recipe.
//
//   Stage 1: for each manifold k, train expert k's A/B on the k-subset with
//            routing pinned to expert k. Base, other experts and routers frozen.
//   Stage 2: train the routers only, soft routing, LM loss on the full corpus.
//            No manifold label enters the loss path.

#include "movekit/core.hpp"
#include "movekit/synth_task.hpp"
#include "movekit/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace movekit {

struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Element-wise AdamW with bias correction; `step` is the 1-based count after
/// this update. Weight decay is decoupled (applied to the parameter directly).
inline void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m1,
                         std::span<double> m2, const AdamW& hp, long step) {
    if (grad.size() != param.size() || m1.size() != param.size() || m2.size() != param.size())
        throw DimensionError("adamw_update: parameter, gradient and moment sizes differ");
    if (!(hp.lr > 0.0)) throw ConfigError("adamw: learning rate must be positive");
    if (step < 1) throw ConfigError("adamw: step must be >= 1");
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        m1[i] = hp.beta1 * m1[i] + (1.0 - hp.beta1) * g;
        m2[i] = hp.beta2 * m2[i] + (1.0 - hp.beta2) * g * g;
        param[i] -= hp.lr * hp.weight_decay * param[i];
        param[i] -= hp.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + hp.eps);
    }
}

struct OptimizerState {
    AdamW hp;
    long step = 0;
    Model m1, m2; // first and second moments, model-shaped

    OptimizerState(const Model& like, AdamW h) : hp(h), m1(zeros_like(like)), m2(zeros_like(like)) {}
};

template <typename T>
std::span<double> flat(T& t) {
    return {t.data(), static_cast<std::size_t>(t.size())};
}

/// One AdamW step over the parameters picked by `trainable`; everything else
/// is left bit-identical.
inline void adamw_step(Model& params, const Model& grads, OptimizerState& st, const ParamSelector& trainable) {
    ++st.step;
    for_each_param(
        [&](const ParamInfo& p, auto& w, const auto& g, auto& a, auto& b) {
            if (!trainable(p)) return;
            if (w.size() != g.size()) throw DimensionError("adamw_step: gradient shape mismatch for " + p.name);
            adamw_update(flat(w), {g.data(), static_cast<std::size_t>(g.size())}, flat(a), flat(b), st.hp, st.step);
        },
        params, grads, st.m1, st.m2);
}

// ---------------------------------------------------------------------------

enum class Stage { Pretrain, Stage1, Stage2, Single };

inline std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Stage1: return "stage1";
    case Stage::Stage2: return "stage2";
    case Stage::Single: return "single";
    }
    return "?";
}

struct TrainPlan {
    Stage stage = Stage::Stage1;
    int epochs = 2;
    int batch_size = 8;
    AdamW optim;
    std::uint64_t seed = 1;

    static TrainPlan stage1(std::uint64_t seed) { return {Stage::Stage1, 2, 4, AdamW{3e-3}, seed}; }
    static TrainPlan stage2(std::uint64_t seed) { return {Stage::Stage2, 1, 4, AdamW{1e-2, 0.9, 0.95, 1e-8, 1.0}, seed}; }

    nlohmann::json to_json() const {
        return {{"stage", std::string(to_string(stage))}, {"epochs", epochs}, {"batch_size", batch_size},
                {"lr", optim.lr}, {"beta1", optim.beta1}, {"beta2", optim.beta2}, {"eps", optim.eps},
                {"weight_decay", optim.weight_decay}, {"seed", seed}};
    }
};

struct LogRow {
    long step;
    std::string stage;
    double loss;
};

struct TrainingLog {
    std::vector<LogRow> rows;
    long next_step = 1;

    void add(std::string_view stage, double loss) { rows.push_back({next_step++, std::string(stage), loss}); }

    void write_csv(const std::filesystem::path& path, const nlohmann::json& provenance = {}) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot write " + path.string());
        if (!provenance.is_null()) f << "# " << provenance.dump() << '\n';
        f << "step,stage,loss\n";
        char buf[64];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%.17g", r.loss);
            f << r.step << ',' << r.stage << ',' << buf << '\n';
        }
    }
};

/// Runs `epochs` passes over `examples` in seeded shuffled mini-batches,
/// updating only the `trainable` parameters.
inline void run_epochs(Model& model, const std::vector<LmExample>& examples, const ParamSelector& trainable,
                       const Routing& routing, const TrainPlan& plan, std::uint64_t stream, TrainingLog* log) {
    if (examples.empty()) throw DataError("training set is empty");
    if (plan.batch_size < 1 || plan.epochs < 0) throw ConfigError("batch_size must be >= 1 and epochs >= 0");
    bool any_base = false;
    for_each_param([&](const ParamInfo& p, const auto&) { any_base = any_base || (is_base(p.kind) && trainable(p)); },
                   model);
    OptimizerState opt(model, plan.optim);
    Model grads = zeros_like(model);
    std::vector<std::size_t> order(examples.size());
    std::vector<LmExample> batch;
    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(plan.seed, stream, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + plan.batch_size); ++i)
                batch.push_back(examples[order[i]]);
            for_each_param([](const ParamInfo&, auto& g) { g.setZero(); }, grads);
            const double loss = batch_loss(model, batch, routing, &grads, any_base);
            adamw_step(model, grads, opt, trainable);
            if (log) log->add(to_string(plan.stage), loss);
        }
    }
}

// ---------------------------------------------------------------------------
// Base model

enum class BaseInit { Pretrained, Random };

inline std::string_view to_string(BaseInit b) { return b == BaseInit::Pretrained ? "pretrained" : "random"; }

inline BaseInit base_init_from_string(std::string_view s) {
    if (s == "pretrained") return BaseInit::Pretrained;
    if (s == "random") return BaseInit::Random;
    throw ConfigError("base init must be 'pretrained' or 'random', got '" + std::string(s) + "'");
}

/// Neutral-data fit that stands in for a pretrained foundation model.
struct PretrainOptions {
    int n_examples = 4000;
    int epochs = 6;
    int batch_size = 16;
    double lr = 3e-3;
    std::pair<int, int> len_range = {3, 8};

    nlohmann::json to_json() const {
        return {{"n_examples", n_examples}, {"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},
                {"len_min", len_range.first}, {"len_max", len_range.second}};
    }
};

/// Pretrained: base weights are fit on neutral sequences (all base parameters
/// trainable, no experts), then copied into a model with fresh experts.
/// Random: base weights stay at their random initialisation. Either way the
/// base is frozen from here on.
inline Model build_model(const ModelConfig& cfg, BaseInit init, const PretrainOptions& opts = {},
                         TrainingLog* log = nullptr) {
    cfg.validate();
    Model model = make_random_model(cfg);
    if (init == BaseInit::Random) return model;
    ModelConfig base_cfg = cfg;
    base_cfg.n_experts = 0;
    Model base = make_random_model(base_cfg);
    const auto data = neutral_examples(derive_seed(cfg.seed, 0x9Eu), opts.n_examples, cfg.vocab_size, opts.len_range);
    TrainPlan plan{Stage::Pretrain, opts.epochs, opts.batch_size, AdamW{opts.lr, 0.9, 0.95, 1e-8, 0.0},
                   derive_seed(cfg.seed, 0x9Fu)};
    run_epochs(base, data, select::base(), Routing::soft(), plan, 0, log);
    copy_base(base, model);
    return model;
}

// ---------------------------------------------------------------------------
// Two-stage recipe

inline void stage1_specialize(Model& model, const CorpusManifest& corpus, const TrainPlan& plan,
                              TrainingLog* log = nullptr) {
    if (plan.stage != Stage::Stage1) throw ConfigError("stage1_specialize needs a Stage1 plan");
    const int n = model.cfg.n_experts;
    if (n < 1) throw ConfigError("stage1_specialize: model has no experts");
    for (int k = 0; k < n; ++k) {
        const CorpusManifest subset = only_manifold(corpus, manifold_from_index(k % kNumManifolds));
        if (subset.records.empty())
            throw DataError("stage1: no records for manifold " + std::string(to_string(manifold_from_index(k % kNumManifolds))));
        run_epochs(model, encode_all(subset), select::expert(k), Routing::forced(k), plan, 0x100u + k, log);
    }
}

/// Router-only optimisation. Takes unlabeled sequences; the manifold never
/// reaches the loss.
inline void stage2_route(Model& model, const std::vector<LmExample>& sequences, const TrainPlan& plan,
                         TrainingLog* log = nullptr) {
    if (plan.stage != Stage::Stage2) throw ConfigError("stage2_route needs a Stage2 plan");
    if (sequences.empty()) throw DataError("stage2: empty corpus");
    run_epochs(model, sequences, select::routers(), Routing::soft(), plan, 0x200u, log);
}

inline void stage2_route(Model& model, const CorpusManifest& corpus, const TrainPlan& plan, TrainingLog* log = nullptr) {
    stage2_route(model, encode_all(corpus), plan, log);
}

/// Single adapter (expert 0, pinned routing) trained on the whole corpus.
inline void train_single_adapter(Model& model, const CorpusManifest& corpus, const TrainPlan& plan,
                                 TrainingLog* log = nullptr) {
    if (model.cfg.n_experts < 1) throw ConfigError("train_single_adapter: model has no experts");
    run_epochs(model, encode_all(corpus), select::expert(0), Routing::forced(0), plan, 0x300u, log);
}

inline double mean_loss(const Model& model, const std::vector<LmExample>& examples, const Routing& routing) {
    if (examples.empty()) throw DataError("mean_loss: no examples");
    return batch_loss(model, examples, routing);
}

/// rows = data manifold, cols = expert forced on every token.
inline Matrix forced_loss_matrix(const Model& model, const CorpusManifest& corpus) {
    const int n = model.cfg.n_experts;
    Matrix out = Matrix::Constant(kNumManifolds, n, std::numeric_limits<double>::quiet_NaN());
    for (Manifold m : kAllManifolds) {
        const auto ex = encode_all(only_manifold(corpus, m));
        if (ex.empty()) continue;
        for (int e = 0; e < n; ++e) out(index_of(m), e) = mean_loss(model, ex, Routing::forced(e));
    }
    return out;
}

} // namespace movekit

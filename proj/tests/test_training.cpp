// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#include "movekit/training.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <type_traits>

using namespace movekit;
namespace fs = std::filesystem;

namespace {

bool same(const Model& a, const Model& b, const ParamSelector& sel) {
    bool eq = true;
    for_each_param(
        [&](const ParamInfo& p, const auto& x, const auto& y) {
            if (sel(p)) eq = eq && (x.array() == y.array()).all();
        },
        a, b);
    return eq;
}

std::set<std::string> changed(const Model& a, const Model& b) {
    std::set<std::string> out;
    for_each_param(
        [&](const ParamInfo& p, const auto& x, const auto& y) {
            if (!(x.array() == y.array()).all()) out.insert(p.name);
        },
        a, b);
    return out;
}

std::set<std::string> selected(const Model& m, const ParamSelector& sel) {
    std::set<std::string> out;
    for_each_param(
        [&](const ParamInfo& p, const auto&) {
            if (sel(p)) out.insert(p.name);
        },
        m);
    return out;
}

ParamSelector all() {
    return [](const ParamInfo&) { return true; };
}

ModelConfig small_cfg() {
    ModelConfig c;
    c.d = 24;
    c.n_heads = 3;
    c.ff_dim = 48;
    c.move_rank = 4;
    c.seed = 3;
    return c;
}

// One pretrained + two-stage model shared by the slower checks.
struct Trained {
    Model pre, s1, s2;
    Splits data;
};

const Trained& trained() {
    static const Trained t = [] {
        Trained r;
        PretrainOptions po;
        po.n_examples = 2000;
        po.epochs = 4;
        r.pre = build_model(small_cfg(), BaseInit::Pretrained, po);
        r.data = split(generate_corpus(5, 1000, 47, {3, 8}), {0.8, 0.1, 0.1}, 5);
        r.s1 = r.pre;
        stage1_specialize(r.s1, r.data.train, TrainPlan::stage1(7));
        r.s2 = r.s1;
        stage2_route(r.s2, r.data.train, TrainPlan::stage2(8));
        return r;
    }();
    return t;
}

} // namespace

TEST(AdamW, SingleStepOracle) {
    std::vector<double> p = {0.0}, g = {1.0}, m = {0.0}, v = {0.0};
    adamw_update(p, g, m, v, AdamW{0.1, 0.9, 0.95, 1e-8, 0.0}, 1);
    // m_hat = 1, v_hat = 1, update = -lr / (1 + eps)
    EXPECT_NEAR(p[0], -0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_NEAR(m[0], 0.1, 1e-15);
    EXPECT_NEAR(v[0], 0.05, 1e-15);
}

TEST(AdamW, TwoStepOracle) {
    std::vector<double> p = {1.0}, m = {0.0}, v = {0.0};
    const AdamW hp{0.01, 0.9, 0.95, 1e-8, 0.1};
    double P = 1.0, M = 0.0, V = 0.0;
    for (int t = 1; t <= 2; ++t) {
        const double g = t == 1 ? 2.0 : -0.5;
        std::vector<double> gv = {g};
        adamw_update(p, gv, m, v, hp, t);
        M = 0.9 * M + 0.1 * g;
        V = 0.95 * V + 0.05 * g * g;
        P = P - 0.01 * 0.1 * P;
        P = P - 0.01 * (M / (1 - std::pow(0.9, t))) / (std::sqrt(V / (1 - std::pow(0.95, t))) + 1e-8);
    }
    EXPECT_NEAR(p[0], P, 1e-14);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
    std::vector<double> p = {0.3, -2.0}, g = {0.0, 0.0}, m = {0.0, 0.0}, v = {0.0, 0.0};
    for (int t = 1; t <= 5; ++t) adamw_update(p, g, m, v, AdamW{0.1}, t);
    EXPECT_EQ(p[0], 0.3);
    EXPECT_EQ(p[1], -2.0);
}

TEST(AdamW, DecoupledDecayShrinksTowardZero) {
    std::vector<double> p = {2.0}, g = {0.0}, m = {0.0}, v = {0.0};
    adamw_update(p, g, m, v, AdamW{0.1, 0.9, 0.95, 1e-8, 0.5}, 1);
    EXPECT_NEAR(p[0], 2.0 * (1.0 - 0.05), 1e-15);
}

TEST(AdamW, Errors) {
    std::vector<double> p = {0.0}, g = {0.0, 1.0}, m = {0.0}, v = {0.0};
    EXPECT_THROW(adamw_update(p, g, m, v, AdamW{0.1}, 1), DimensionError);
    std::vector<double> g1 = {1.0};
    EXPECT_THROW(adamw_update(p, g1, m, v, AdamW{0.0}, 1), ConfigError);
}

TEST(AdamW, StepTouchesOnlySelectedTensors) {
    ModelConfig c = small_cfg();
    c.n_layers = 1;
    Model m = make_random_model(c);
    randomize_adapters(m, 1, 0.1);
    const Model before = m;
    Model g = m; // any nonzero "gradient"
    OptimizerState st(m, AdamW{1e-2});
    adamw_step(m, g, st, select::routers());
    EXPECT_EQ(changed(before, m), selected(m, select::routers()));
    EXPECT_EQ(st.step, 1);
}

TEST(Training, LossDecreasesEarly) {
    ModelConfig c = small_cfg();
    Model m = make_random_model(c);
    const auto data = neutral_examples(1, 200, 47, {3, 6});
    TrainingLog log;
    TrainPlan plan{Stage::Pretrain, 1, 4, AdamW{3e-3}, 1};
    run_epochs(m, data, select::base(), Routing::soft(), plan, 0, &log);
    ASSERT_GE(log.rows.size(), 50u);
    auto avg = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t i = a; i < b; ++i) s += log.rows[i].loss;
        return s / (b - a);
    };
    EXPECT_LT(avg(40, 50), avg(0, 10));
}

TEST(Training, FrozenSetAfterEveryStep) {
    ModelConfig c = small_cfg();
    c.n_layers = 1;
    Model m = make_random_model(c);
    const auto corpus = generate_corpus(2, 20, 47, {3, 5});
    const auto ex = encode_all(only_manifold(corpus, Manifold::Sad));
    for (int step = 0; step < 3; ++step) {
        const Model before = m;
        TrainPlan plan{Stage::Stage1, 1, 4, AdamW{1e-2}, static_cast<std::uint64_t>(step)};
        std::vector<LmExample> one(ex.begin(), ex.begin() + 4);
        run_epochs(m, one, select::expert(2), Routing::forced(2), plan, 0, nullptr);
        const auto ch = changed(before, m);
        const auto allowed = selected(m, select::expert(2));
        for (const auto& n : ch) EXPECT_TRUE(allowed.count(n)) << n;
        if (step > 0) EXPECT_EQ(ch, allowed); // B is nonzero after the first step, so A moves too
    }
}

TEST(Training, Reproducible) {
    ModelConfig c = small_cfg();
    c.n_layers = 1;
    const auto corpus = generate_corpus(2, 40, 47, {3, 5});
    Model a = make_random_model(c), b = make_random_model(c);
    TrainPlan p{Stage::Stage1, 1, 4, AdamW{1e-2}, 9};
    stage1_specialize(a, corpus, p);
    stage1_specialize(b, corpus, p);
    EXPECT_TRUE(same(a, b, all()));
}

TEST(Training, StagePlanChecks) {
    Model m = make_random_model(small_cfg());
    const auto corpus = generate_corpus(2, 10, 47, {3, 5});
    EXPECT_THROW(stage1_specialize(m, corpus, TrainPlan::stage2(1)), ConfigError);
    EXPECT_THROW(stage2_route(m, corpus, TrainPlan::stage1(1)), ConfigError);
    EXPECT_THROW(stage1_specialize(m, only_manifold(corpus, Manifold::Cry), TrainPlan::stage1(1)), DataError);
    EXPECT_THROW(stage2_route(m, std::vector<LmExample>{}, TrainPlan::stage2(1)), DataError);
}

TEST(Training, RouterLossPathTakesNoLabels) {
    static_assert(std::is_invocable_v<decltype(static_cast<void (*)(Model&, const std::vector<LmExample>&,
                                                                    const TrainPlan&, TrainingLog*)>(&stage2_route)),
                                      Model&, const std::vector<LmExample>&, const TrainPlan&, TrainingLog*>);
    static_assert(!std::is_constructible_v<LmExample, Manifold>);
    SUCCEED();
}

TEST(Training, BuildModelDeterministicAndFrozenBase) {
    ModelConfig c = small_cfg();
    c.n_layers = 1;
    PretrainOptions po;
    po.n_examples = 60;
    po.epochs = 1;
    const Model a = build_model(c, BaseInit::Pretrained, po), b = build_model(c, BaseInit::Pretrained, po);
    EXPECT_TRUE(same(a, b, all()));
    const Model r = build_model(c, BaseInit::Random, po);
    EXPECT_TRUE(same(r, make_random_model(c), all()));
    EXPECT_FALSE(same(a, r, select::base()));
    EXPECT_TRUE(same(a, r, select::adapters()));
}

TEST(TwoStage, StageOneTouchesOnlyExperts) {
    const auto& t = trained();
    EXPECT_TRUE(same(t.pre, t.s1, select::base()));
    EXPECT_TRUE(same(t.pre, t.s1, select::routers()));
    for (int e = 0; e < 5; ++e) EXPECT_FALSE(same(t.pre, t.s1, select::expert(e))) << e;
}

TEST(TwoStage, NonTargetExpertsUntouchedBySingleExpertTraining) {
    const auto& t = trained();
    Model m = t.pre;
    TrainPlan p = TrainPlan::stage1(1);
    p.epochs = 1;
    run_epochs(m, encode_all(only_manifold(t.data.train, Manifold::Happy)), select::expert(1), Routing::forced(1), p, 0,
               nullptr);
    for (int e : {0, 2, 3, 4}) EXPECT_TRUE(same(t.pre, m, select::expert(e))) << e;
    EXPECT_TRUE(same(t.pre, m, select::routers()));
}

TEST(TwoStage, ForcedLossMatrixMinimumOnDiagonal) {
    const auto& t = trained();
    const Matrix L = forced_loss_matrix(t.s1, t.data.dev);
    for (int m = 0; m < 5; ++m)
        for (int e = 0; e < 5; ++e)
            if (e != m) EXPECT_LT(L(m, m), L(m, e)) << "manifold " << m << " expert " << e;
}

TEST(TwoStage, StageTwoTouchesOnlyRouters) {
    const auto& t = trained();
    EXPECT_TRUE(same(t.s1, t.s2, select::base()));
    for (int e = 0; e < 5; ++e) EXPECT_TRUE(same(t.s1, t.s2, select::expert(e)));
    EXPECT_FALSE(same(t.s1, t.s2, select::routers()));
}

TEST(TwoStage, StageTwoImprovesOnUniformRouting) {
    const auto& t = trained();
    const auto ex = encode_all(t.data.train);
    const double uniform = mean_loss(t.s1, ex, Routing::soft()); // zero routers are uniform
    EXPECT_NEAR(uniform, mean_loss(t.s1, ex, Routing::uniform()), 1e-12);
    EXPECT_LE(mean_loss(t.s2, ex, Routing::soft()), uniform);
}

TEST(TrainingLog, CsvHasMonotoneSteps) {
    TrainingLog log;
    log.add("stage1", 1.5);
    log.add("stage1", 1.25);
    log.add("stage2", 0.5);
    const fs::path p = fs::temp_directory_path() / "movekit_test_log.csv";
    log.write_csv(p, {{"k", "v"}});
    std::ifstream f(p);
    std::string line;
    std::getline(f, line);
    EXPECT_EQ(line.rfind("# ", 0), 0u);
    std::getline(f, line);
    EXPECT_EQ(line, "step,stage,loss");
    long prev = 0;
    int n = 0;
    while (std::getline(f, line)) {
        const long step = std::stol(line.substr(0, line.find(',')));
        EXPECT_GT(step, prev);
        prev = step;
        ++n;
    }
    EXPECT_EQ(n, 3);
}

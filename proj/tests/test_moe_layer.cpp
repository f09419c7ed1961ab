// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#include "movekit/archive.hpp"
#include "movekit/moe_layer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace movekit;

namespace {

MoVELayer random_layer(int d, int out, int n, int rank, std::uint64_t seed) {
    Rng rng(seed);
    MoVELayer l = make_move_layer(uniform_matrix(out, d, 1.0, rng), n, rank, std::nullopt, ProjectionSite::Value, seed);
    for (auto& e : l.experts) e.B = uniform_matrix(out, rank, 0.5, rng);
    l.router.weight = uniform_matrix(n, d, 1.0, rng);
    l.router.bias = uniform_matrix(n, 1, 1.0, rng);
    return l;
}

// Loop-only reference for h = W0 x + sum_i g_i (alpha/r) B_i A_i x.
std::vector<double> dense_reference(const MoVELayer& l, const std::vector<double>& x) {
    const int d = l.in_dim(), out = l.out_dim(), n = l.n_experts();
    std::vector<double> logits(n), g(n), h(out, 0.0);
    for (int i = 0; i < n; ++i) {
        logits[i] = l.router.bias(i);
        for (int j = 0; j < d; ++j) logits[i] += l.router.weight(i, j) * x[j];
    }
    double mx = logits[0];
    for (double z : logits) mx = std::max(mx, z);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += (g[i] = std::exp(logits[i] - mx));
    for (auto& v : g) v /= s;
    for (int o = 0; o < out; ++o)
        for (int j = 0; j < d; ++j) h[o] += l.base_weight(o, j) * x[j];
    for (int i = 0; i < n; ++i) {
        const auto& e = l.experts[i];
        for (int o = 0; o < out; ++o) {
            double acc = 0.0;
            for (int k = 0; k < e.rank; ++k) {
                double ax = 0.0;
                for (int j = 0; j < d; ++j) ax += e.A(k, j) * x[j];
                acc += e.B(o, k) * ax;
            }
            h[o] += g[i] * (e.scale / e.rank) * acc;
        }
    }
    return h;
}

} // namespace

TEST(InitExpert, ZeroUpProjectionGivesZeroDelta) {
    const auto e = init_expert(2, 4, 4, 7, Manifold::Happy);
    EXPECT_TRUE(e.B.isZero(0.0));
    EXPECT_EQ(e.B.rows(), 4);
    EXPECT_EQ(e.B.cols(), 2);
    Rng rng(3);
    for (int t = 0; t < 20; ++t) EXPECT_TRUE(expert_delta(uniform_matrix(4, 1, 5.0, rng), e).isZero(0.0));
    EXPECT_DOUBLE_EQ(e.scale, 2.0);
}

TEST(InitExpert, DeterministicFromSeed) {
    const auto a = init_expert(2, 4, 4, 7, Manifold::Happy);
    const auto b = init_expert(2, 4, 4, 7, Manifold::Happy);
    EXPECT_TRUE((a.A.array() == b.A.array()).all());
    const auto c = init_expert(2, 4, 4, 8, Manifold::Happy);
    EXPECT_FALSE((a.A.array() == c.A.array()).all());
}

TEST(InitExpert, BoundedUniformDown) {
    const auto e = init_expert(8, 16, 16, 1, Manifold::Sad);
    EXPECT_LE(e.A.cwiseAbs().maxCoeff(), 0.25);
    EXPECT_NEAR(e.A.mean(), 0.0, 0.05);
}

TEST(InitExpert, RejectsBadDimensions) {
    EXPECT_THROW(init_expert(0, 4, 4, 7, Manifold::Happy), DimensionError);
    EXPECT_THROW(init_expert(2, 0, 4, 7, Manifold::Happy), DimensionError);
    EXPECT_THROW(init_expert(2, 4, -1, 7, Manifold::Happy), DimensionError);
}

TEST(RouterWeights, ZeroGateIsUniform) {
    const auto g = router_weights(Vector::Random(6), RouterGate::zeros(5, 6));
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(g(i), 0.2, 1e-15);
}

TEST(RouterWeights, SaturatesOnDominantLogit) {
    RouterGate gate = RouterGate::zeros(5, 3);
    gate.bias << 0.0, -1e4, -1e4, -1e4, -1e4;
    const auto g = router_weights(Vector::Zero(3), gate);
    EXPECT_NEAR(g(0), 1.0, 1e-6);
}

TEST(RouterWeights, UnitLogitMatchesClosedForm) {
    RouterGate gate = RouterGate::zeros(5, 2);
    gate.bias << 1.0, 0.0, 0.0, 0.0, 0.0;
    const auto g = router_weights(Vector::Zero(2), gate);
    const double e = std::exp(1.0);
    EXPECT_NEAR(g(0), e / (e + 4.0), 1e-15);
    EXPECT_NEAR(g(0), 0.40463, 1e-4);
    for (int i = 1; i < 5; ++i) EXPECT_NEAR(g(i), 0.14884, 1e-4);
}

TEST(RouterWeights, LargeLogitsStayFinite) {
    RouterGate gate = RouterGate::zeros(5, 1);
    gate.bias << 1000.0, 999.0, -1000.0, 0.0, 500.0;
    const auto g = router_weights(Vector::Zero(1), gate);
    EXPECT_TRUE(g.allFinite());
    EXPECT_NEAR(g.sum(), 1.0, 1e-12);
}

TEST(RouterWeights, DimensionMismatch) {
    EXPECT_THROW(router_weights(Vector::Zero(4), RouterGate::zeros(5, 3)), DimensionError);
}

TEST(RouterWeights, SimplexOverManyStates) {
    Rng rng(11);
    RouterGate gate{uniform_matrix(5, 16, 3.0, rng), uniform_matrix(5, 1, 3.0, rng)};
    for (int t = 0; t < 10000; ++t) {
        const Vector x = uniform_matrix(16, 1, 10.0, rng);
        const Vector g = router_weights(x, gate);
        ASSERT_GE(g.minCoeff(), 0.0);
        ASSERT_NEAR(g.sum(), 1.0, 1e-9);
    }
}

TEST(ExpertDelta, HandMultiply) {
    LoRAExpert e;
    e.rank = 1;
    e.scale = 1.0;
    e.A = Matrix::Ones(1, 3);
    e.B = Matrix::Ones(3, 1);
    Vector x(3);
    x << 1, 2, 3;
    const Vector d = expert_delta(x, e);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(d(i), 6.0);
}

TEST(ExpertDelta, ScaleIsAlphaOverRank) {
    auto e = init_expert(4, 3, 2, 5, Manifold::Cry, 2.0);
    Rng rng(2);
    e.B = uniform_matrix(2, 4, 1.0, rng);
    const Vector x = uniform_matrix(3, 1, 1.0, rng);
    EXPECT_LT((expert_delta(x, e) - 0.5 * e.B * e.A * x).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ExpertDelta, Linear) {
    auto e = init_expert(3, 6, 5, 5, Manifold::Angry);
    Rng rng(4);
    e.B = uniform_matrix(5, 3, 1.0, rng);
    const Vector x = uniform_matrix(6, 1, 1.0, rng);
    EXPECT_LT((expert_delta(2.0 * x, e) - 2.0 * expert_delta(x, e)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ExpertDelta, DimensionMismatch) {
    const auto e = init_expert(2, 4, 4, 1, Manifold::Angry);
    EXPECT_THROW(expert_delta(Vector::Zero(5), e), DimensionError);
}

TEST(MoveForward, ZeroExpertsGiveBaseExactly) {
    Rng rng(8);
    const MoVELayer l = make_move_layer(uniform_matrix(7, 8, 1.0, rng), 5, 3, std::nullopt, ProjectionSite::Key, 8);
    for (int t = 0; t < 50; ++t) {
        const Vector x = uniform_matrix(8, 1, 2.0, rng);
        EXPECT_LE((move_forward(x, l) - l.base_weight * x).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(MoveForward, OneHotLimit) {
    MoVELayer l = random_layer(8, 8, 5, 2, 21);
    l.router.weight.setZero();
    l.router.bias.setConstant(-1e4);
    l.router.bias(3) = 0.0;
    Rng rng(1);
    const Vector x = uniform_matrix(8, 1, 1.0, rng);
    const Vector want = l.base_weight * x + expert_delta(x, l.experts[3]);
    EXPECT_LE((move_forward(x, l) - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(MoveForward, MatchesDenseReference) {
    const MoVELayer l = random_layer(8, 6, 5, 3, 33);
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const Vector x = uniform_matrix(8, 1, 1.0, rng);
        const auto ref = dense_reference(l, std::vector<double>(x.data(), x.data() + x.size()));
        const Vector h = move_forward(x, l);
        for (int o = 0; o < 6; ++o) EXPECT_NEAR(h(o), ref[o], 1e-10);
    }
}

TEST(MoveForward, ConvexBlendOfEqualDeltas) {
    MoVELayer l = random_layer(5, 4, 5, 2, 44);
    for (auto& e : l.experts) {
        e.A = l.experts[0].A;
        e.B = l.experts[0].B;
    }
    Rng rng(6);
    for (int t = 0; t < 10; ++t) {
        const Vector x = uniform_matrix(5, 1, 1.0, rng);
        l.router.weight = uniform_matrix(5, 5, 4.0, rng);
        const Vector want = l.base_weight * x + expert_delta(x, l.experts[0]);
        EXPECT_LE((move_forward(x, l) - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(MoveForward, BatchAgreesWithSingleVector) {
    const MoVELayer l = random_layer(8, 6, 5, 3, 55);
    Rng rng(9);
    const Matrix X = uniform_matrix(7, 8, 1.0, rng);
    MoveCache cache;
    const Matrix H = forward_batch(l, X, Routing::soft(), &cache);
    for (int t = 0; t < 7; ++t) {
        const Vector x = X.row(t).transpose();
        EXPECT_LE((H.row(t).transpose() - move_forward(x, l)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LE((cache.gates.row(t).transpose() - router_weights(x, l.router)).cwiseAbs().maxCoeff(), 1e-15);
    }
}

TEST(MoveForward, ForcedRoutingUsesOneExpert) {
    const MoVELayer l = random_layer(4, 4, 5, 2, 66);
    Rng rng(10);
    const Matrix X = uniform_matrix(3, 4, 1.0, rng);
    const Matrix H = forward_batch(l, X, Routing::forced(2));
    for (int t = 0; t < 3; ++t) {
        const Vector x = X.row(t).transpose();
        EXPECT_LE((H.row(t).transpose() - l.base_weight * x - expert_delta(x, l.experts[2])).cwiseAbs().maxCoeff(),
                  1e-12);
    }
}

TEST(MoveForward, BackwardMatchesCentralDifferences) {
    const MoVELayer l = random_layer(6, 5, 5, 2, 77);
    Rng rng(12);
    const Matrix X = uniform_matrix(4, 6, 1.0, rng);
    const Matrix W = uniform_matrix(4, 5, 1.0, rng); // loss = sum(W .* H)
    auto loss = [&](const MoVELayer& layer) { return (forward_batch(layer, X, Routing::soft()).array() * W.array()).sum(); };
    MoveCache cache;
    forward_batch(l, X, Routing::soft(), &cache);
    MoVELayer grads = zeros_like(l);
    backward_batch(l, cache, W, Routing::soft(), grads, true);
    const double eps = 1e-4;
    double worst = 0.0;
    auto check = [&](auto get) {
        for (Eigen::Index r = 0; r < get(const_cast<MoVELayer&>(l)).rows(); ++r)
            for (Eigen::Index c = 0; c < get(const_cast<MoVELayer&>(l)).cols(); ++c) {
                MoVELayer p = l;
                get(p)(r, c) += eps;
                const double lp = loss(p);
                get(p)(r, c) -= 2 * eps;
                const double lm = loss(p);
                const double num = (lp - lm) / (2 * eps);
                const double an = get(grads)(r, c);
                worst = std::max(worst, std::abs(an - num) / std::max({std::abs(an), std::abs(num), 1e-6}));
            }
    };
    for (int i = 0; i < 5; ++i) {
        check([i](MoVELayer& m) -> Matrix& { return m.experts[i].A; });
        check([i](MoVELayer& m) -> Matrix& { return m.experts[i].B; });
    }
    check([](MoVELayer& m) -> Matrix& { return m.router.weight; });
    for (int i = 0; i < 5; ++i) {
        MoVELayer p = l;
        p.router.bias(i) += eps;
        const double lp = loss(p);
        p.router.bias(i) -= 2 * eps;
        const double num = (lp - loss(p)) / (2 * eps);
        worst = std::max(worst, std::abs(grads.router.bias(i) - num) / std::max(std::abs(num), 1e-6));
    }
    EXPECT_LE(worst, 1e-4);
}

TEST(MoVELayerShape, ValidateCatchesMismatch) {
    MoVELayer l = random_layer(4, 4, 5, 2, 1);
    EXPECT_NO_THROW(l.validate());
    l.experts[1].B = Matrix::Zero(3, 2);
    EXPECT_THROW(l.validate(), DimensionError);
}

TEST(LayerArchive, RoundTripsBitExactly) {
    const MoVELayer l = random_layer(5, 7, 5, 3, 88);
    TensorArchive ar;
    ar.meta["note"] = "x";
    put_layer(ar, "L", l);
    const auto back = TensorArchive::from_bytes(ar.to_bytes());
    const MoVELayer r = get_layer(back, "L");
    EXPECT_EQ(r.site, l.site);
    ASSERT_EQ(r.n_experts(), 5);
    EXPECT_TRUE((r.base_weight.array() == l.base_weight.array()).all());
    EXPECT_TRUE((r.router.weight.array() == l.router.weight.array()).all());
    EXPECT_TRUE((r.router.bias.array() == l.router.bias.array()).all());
    for (int i = 0; i < 5; ++i) {
        EXPECT_TRUE((r.experts[i].A.array() == l.experts[i].A.array()).all());
        EXPECT_TRUE((r.experts[i].B.array() == l.experts[i].B.array()).all());
        EXPECT_EQ(r.experts[i].scale, l.experts[i].scale);
        EXPECT_EQ(r.experts[i].manifold, l.experts[i].manifold);
    }
    EXPECT_EQ(back.to_bytes(), ar.to_bytes());
}

TEST(LayerArchive, RejectsCorruptBytes) {
    EXPECT_THROW(TensorArchive::from_bytes("nonsense"), DataError);
    TensorArchive ar;
    ar.put("m", Matrix(Matrix::Ones(2, 2)));
    std::string b = ar.to_bytes();
    b.resize(b.size() - 4);
    EXPECT_THROW(TensorArchive::from_bytes(b), DataError);
}

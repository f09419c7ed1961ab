// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Mixture of low-rank vocalization experts over a frozen linear map:
//
//   h(x) = W0 x + sum_i g_i(x) * (alpha / r) * B_i A_i x,   g = softmax(Wr x + br)
//
// Routing is always soft over all experts; there is no top-k selection.

#include "movekit/core.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace movekit {

struct LoRAExpert {
    Matrix A;     // rank x in_dim (down-projection)
    Matrix B;     // out_dim x rank (up-projection)
    int rank = 0;
    double scale = 0.0; // alpha; the delta is multiplied by alpha / rank
    Manifold manifold = Manifold::Angry;

    int in_dim() const { return static_cast<int>(A.cols()); }
    int out_dim() const { return static_cast<int>(B.rows()); }
    double multiplier() const { return scale / static_cast<double>(rank); }
};

/// Standard LoRA start: A ~ U(-1/sqrt(d), 1/sqrt(d)), B = 0, so the delta is
/// exactly zero until B is trained. alpha defaults to the rank.
inline LoRAExpert init_expert(int rank, int d, int out_dim, std::uint64_t seed, Manifold manifold,
                              std::optional<double> alpha = std::nullopt) {
    if (rank <= 0 || d <= 0 || out_dim <= 0)
        throw DimensionError("init_expert: rank, d and out_dim must be positive (got rank=" +
                             std::to_string(rank) + ", d=" + std::to_string(d) +
                             ", out_dim=" + std::to_string(out_dim) + ")");
    const double a = alpha.value_or(static_cast<double>(rank));
    if (!(a > 0.0)) throw DimensionError("init_expert: alpha must be positive");
    Rng rng(seed);
    LoRAExpert e;
    e.A = uniform_matrix(rank, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    e.B = Matrix::Zero(out_dim, rank);
    e.rank = rank;
    e.scale = a;
    e.manifold = manifold;
    return e;
}

struct RouterGate {
    Matrix weight; // n_experts x in_dim
    Vector bias;   // n_experts

    int n_experts() const { return static_cast<int>(weight.rows()); }
    int in_dim() const { return static_cast<int>(weight.cols()); }

    static RouterGate zeros(int n_experts, int in_dim) {
        return {Matrix::Zero(n_experts, in_dim), Vector::Zero(n_experts)};
    }
};

/// Numerically stable softmax of a logit vector.
inline Vector softmax(const Vector& logits) {
    const double mx = logits.maxCoeff();
    Vector e = (logits.array() - mx).exp().matrix();
    return e / e.sum();
}

inline Vector router_weights(const Vector& x, const RouterGate& gate) {
    if (x.size() != gate.in_dim())
        throw DimensionError("router_weights: input has length " + std::to_string(x.size()) +
                             ", gate expects " + std::to_string(gate.in_dim()));
    if (gate.bias.size() != gate.n_experts()) throw DimensionError("router_weights: bias length mismatch");
    return softmax(gate.weight * x + gate.bias);
}

inline Vector expert_delta(const Vector& x, const LoRAExpert& e) {
    if (e.A.rows() != e.rank || e.B.cols() != e.rank)
        throw DimensionError("expert_delta: A/B do not agree with rank " + std::to_string(e.rank));
    if (x.size() != e.A.cols())
        throw DimensionError("expert_delta: input has length " + std::to_string(x.size()) +
                             ", expert expects " + std::to_string(e.A.cols()));
    return e.multiplier() * (e.B * (e.A * x));
}

struct MoVELayer {
    Matrix base_weight; // out_dim x in_dim, frozen
    std::vector<LoRAExpert> experts;
    RouterGate router;
    ProjectionSite site = ProjectionSite::Query;

    int in_dim() const { return static_cast<int>(base_weight.cols()); }
    int out_dim() const { return static_cast<int>(base_weight.rows()); }
    int n_experts() const { return static_cast<int>(experts.size()); }
    int rank() const { return experts.empty() ? 0 : experts.front().rank; }
    double alpha() const { return experts.empty() ? 0.0 : experts.front().scale; }

    /// Throws DimensionError unless every expert and the router agree with W0.
    void validate() const {
        for (const auto& e : experts) {
            if (e.A.cols() != in_dim() || e.B.rows() != out_dim())
                throw DimensionError("MoVELayer: expert shape does not match base weight");
            if (e.A.rows() != e.rank || e.B.cols() != e.rank || e.rank != rank())
                throw DimensionError("MoVELayer: experts must share one rank");
        }
        if (!experts.empty() &&
            (router.n_experts() != n_experts() || router.in_dim() != in_dim() || router.bias.size() != n_experts()))
            throw DimensionError("MoVELayer: router shape does not match experts");
    }
};

/// Builds a layer with N freshly initialised experts (one per manifold, in
/// manifold order, cycling if N > 5) and a zero router, i.e. uniform gates.
inline MoVELayer make_move_layer(Matrix base_weight, int n_experts, int rank, std::optional<double> alpha,
                                 ProjectionSite site, std::uint64_t seed) {
    MoVELayer layer;
    layer.site = site;
    const int d = static_cast<int>(base_weight.cols());
    const int out = static_cast<int>(base_weight.rows());
    layer.base_weight = std::move(base_weight);
    for (int i = 0; i < n_experts; ++i)
        layer.experts.push_back(init_expert(rank, d, out, derive_seed(seed, 0xE0u, i),
                                            manifold_from_index(i % kNumManifolds), alpha));
    if (n_experts > 0) layer.router = RouterGate::zeros(n_experts, d);
    return layer;
}

inline Vector move_forward(const Vector& x, const MoVELayer& layer) {
    if (x.size() != layer.in_dim())
        throw DimensionError("move_forward: input has length " + std::to_string(x.size()) +
                             ", layer expects " + std::to_string(layer.in_dim()));
    Vector h = layer.base_weight * x;
    if (layer.experts.empty()) return h;
    const Vector g = router_weights(x, layer.router);
    for (int i = 0; i < layer.n_experts(); ++i) h += g(i) * expert_delta(x, layer.experts[i]);
    return h;
}

// ---------------------------------------------------------------------------
// Batched forward/backward over a sequence (rows = tokens).

/// How gate weights are produced. Soft is the learned router; Forced pins all
/// mass on one expert (expert specialisation); Uniform fixes 1/N.
struct Routing {
    enum class Kind { Soft, Forced, Uniform };
    Kind kind = Kind::Soft;
    int expert = 0;

    static Routing soft() { return {Kind::Soft, 0}; }
    static Routing forced(int e) { return {Kind::Forced, e}; }
    static Routing uniform() { return {Kind::Uniform, 0}; }
    bool learned() const { return kind == Kind::Soft; }
};

struct MoveCache {
    Matrix input;             // T x in
    Matrix gates;             // T x N
    std::vector<Matrix> down; // per expert, T x r  (A x)
    std::vector<Matrix> delta;// per expert, T x out (scaled B A x); empty when gate is pinned to zero
};

inline Matrix row_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const double mx = logits.row(t).maxCoeff();
        auto e = (logits.row(t).array() - mx).exp();
        out.row(t) = e / e.sum();
    }
    return out;
}

inline Matrix compute_gates(const MoVELayer& layer, const Matrix& X, const Routing& routing) {
    const Eigen::Index T = X.rows();
    const int N = layer.n_experts();
    switch (routing.kind) {
    case Routing::Kind::Soft: {
        Matrix logits = X * layer.router.weight.transpose();
        logits.rowwise() += layer.router.bias.transpose();
        return row_softmax(logits);
    }
    case Routing::Kind::Forced: {
        if (routing.expert < 0 || routing.expert >= N)
            throw DimensionError("forced routing to expert " + std::to_string(routing.expert) + " of " +
                                 std::to_string(N));
        Matrix g = Matrix::Zero(T, N);
        g.col(routing.expert).setOnes();
        return g;
    }
    case Routing::Kind::Uniform:
        return Matrix::Constant(T, N, 1.0 / N);
    }
    return {};
}

inline Matrix forward_batch(const MoVELayer& layer, const Matrix& X, const Routing& routing,
                            MoveCache* cache = nullptr) {
    if (X.cols() != layer.in_dim())
        throw DimensionError("MoVE forward: input width " + std::to_string(X.cols()) + " != " +
                             std::to_string(layer.in_dim()));
    Matrix H = X * layer.base_weight.transpose();
    const int N = layer.n_experts();
    if (N == 0) {
        if (cache) cache->input = X;
        return H;
    }
    Matrix G = compute_gates(layer, X, routing);
    std::vector<Matrix> down(N), delta(N);
    const bool skip_zero = routing.kind == Routing::Kind::Forced;
    for (int i = 0; i < N; ++i) {
        if (skip_zero && i != routing.expert) continue;
        const auto& e = layer.experts[i];
        down[i] = X * e.A.transpose();
        delta[i] = e.multiplier() * (down[i] * e.B.transpose());
        H.array() += delta[i].array().colwise() * G.col(i).array();
    }
    if (cache) {
        cache->input = X;
        cache->gates = std::move(G);
        cache->down = std::move(down);
        cache->delta = std::move(delta);
    }
    return H;
}

/// Zero-valued layer with the same shapes, used as a gradient accumulator.
inline MoVELayer zeros_like(const MoVELayer& layer) {
    MoVELayer z;
    z.site = layer.site;
    z.base_weight = Matrix::Zero(layer.base_weight.rows(), layer.base_weight.cols());
    for (const auto& e : layer.experts) {
        LoRAExpert ze = e;
        ze.A.setZero();
        ze.B.setZero();
        z.experts.push_back(std::move(ze));
    }
    z.router = RouterGate::zeros(layer.router.n_experts(), layer.router.in_dim());
    return z;
}

/// Accumulates parameter gradients into `grads` and returns dL/dX. The W0
/// gradient is only formed when `base_grad` is set.
inline Matrix backward_batch(const MoVELayer& layer, const MoveCache& cache, const Matrix& dH,
                             const Routing& routing, MoVELayer& grads, bool base_grad = true) {
    const Matrix& X = cache.input;
    if (base_grad) grads.base_weight.noalias() += dH.transpose() * X;
    Matrix dX = dH * layer.base_weight;
    const int N = layer.n_experts();
    if (N == 0) return dX;

    Matrix dG = Matrix::Zero(X.rows(), N);
    for (int i = 0; i < N; ++i) {
        if (cache.delta[i].size() == 0) continue;
        const auto& e = layer.experts[i];
        dG.col(i) = (dH.array() * cache.delta[i].array()).rowwise().sum().matrix();
        const Matrix dDelta = (dH.array().colwise() * cache.gates.col(i).array()).matrix();
        grads.experts[i].B.noalias() += e.multiplier() * dDelta.transpose() * cache.down[i];
        const Matrix dDown = e.multiplier() * (dDelta * e.B);
        grads.experts[i].A.noalias() += dDown.transpose() * X;
        dX.noalias() += dDown * e.A;
    }
    if (routing.learned()) {
        const Matrix& G = cache.gates;
        const Eigen::VectorXd inner = (G.array() * dG.array()).rowwise().sum().matrix();
        const Matrix dLogits = (G.array() * (dG.colwise() - inner).array()).matrix();
        grads.router.weight.noalias() += dLogits.transpose() * X;
        grads.router.bias += dLogits.colwise().sum().transpose();
        dX.noalias() += dLogits * layer.router.weight;
    }
    return dX;
}

} // namespace movekit

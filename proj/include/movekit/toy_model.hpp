// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Small pre-norm causal decoder. Every block has MoVE layers at the query,
// key, value, output and feed-forward gate projections:
//
//   a  = rms(x);  x1 = x + Wo(attn(Wq a, Wk a, Wv a))
//   b  = rms(x1); x2 = x1 + Wdown(silu(Wgate b) * Wup b)
//
// Gradients are derived by hand; `grad_check` compares them against central
// finite differences.

#include "movekit/archive.hpp"
#include "movekit/core.hpp"
#include "movekit/moe_layer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

namespace movekit {

struct ModelConfig {
    int vocab_size = 47;
    int d = 32;
    int n_layers = 2;
    int n_heads = 4;
    int ff_dim = 64;
    int max_seq = 32;
    int move_rank = 8;
    double move_alpha = 0.0; // <= 0 means alpha = rank
    int n_experts = kNumManifolds;
    std::set<ProjectionSite> sites = {kAllSites.begin(), kAllSites.end()};
    std::uint64_t seed = 1;

    double alpha() const { return move_alpha > 0.0 ? move_alpha : static_cast<double>(move_rank); }

    void validate() const {
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (d < 1 || n_layers < 1 || n_heads < 1 || ff_dim < 1 || max_seq < 2)
            throw ConfigError("d, n_layers, n_heads, ff_dim must be >= 1 and max_seq >= 2");
        if (d % n_heads != 0)
            throw ConfigError("d=" + std::to_string(d) + " is not divisible by n_heads=" + std::to_string(n_heads));
        if (move_rank < 1) throw ConfigError("move_rank must be >= 1");
        if (n_experts < 0) throw ConfigError("n_experts must be >= 0");
    }

    nlohmann::json to_json() const {
        nlohmann::json s = nlohmann::json::array();
        for (auto p : sites) s.push_back(std::string(to_string(p)));
        return {{"vocab_size", vocab_size}, {"d", d},           {"n_layers", n_layers},
                {"n_heads", n_heads},       {"ff_dim", ff_dim}, {"max_seq", max_seq},
                {"move_rank", move_rank},   {"move_alpha", move_alpha}, {"n_experts", n_experts},
                {"sites", s},               {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size");
        c.d = j.at("d");
        c.n_layers = j.at("n_layers");
        c.n_heads = j.at("n_heads");
        c.ff_dim = j.at("ff_dim");
        c.max_seq = j.at("max_seq");
        c.move_rank = j.at("move_rank");
        c.move_alpha = j.at("move_alpha");
        c.n_experts = j.at("n_experts");
        c.sites.clear();
        for (const auto& s : j.at("sites")) c.sites.insert(site_from_string(s.get<std::string>()));
        c.seed = j.at("seed");
        return c;
    }
};

struct Block {
    MoVELayer q, k, v, o, gate;
    Matrix up;   // ff x d
    Matrix down; // d x ff

    MoVELayer& site(ProjectionSite s) {
        switch (s) {
        case ProjectionSite::Query: return q;
        case ProjectionSite::Key: return k;
        case ProjectionSite::Value: return v;
        case ProjectionSite::Output: return o;
        case ProjectionSite::FeedForwardGate: return gate;
        }
        return q;
    }
    const MoVELayer& site(ProjectionSite s) const { return const_cast<Block*>(this)->site(s); }
};

struct Model {
    ModelConfig cfg;
    Matrix embed;  // vocab x d
    Matrix pos;    // max_seq x d
    Matrix output; // vocab x d
    std::vector<Block> blocks;

    int head_dim() const { return cfg.d / cfg.n_heads; }
};

// ---------------------------------------------------------------------------
// Parameter enumeration

enum class ParamKind { Embedding, Position, Output, BaseProjection, FfnUp, FfnDown, ExpertA, ExpertB, RouterWeight, RouterBias };

inline bool is_base(ParamKind k) {
    return k != ParamKind::ExpertA && k != ParamKind::ExpertB && k != ParamKind::RouterWeight &&
           k != ParamKind::RouterBias;
}

struct ParamInfo {
    std::string name;
    ParamKind kind;
    int layer = -1;
    ProjectionSite site = ProjectionSite::Query;
    int expert = -1;
};

/// Calls f(info, tensor_of(models)...) for every parameter in a fixed order.
/// All models must share one configuration.
template <typename F, typename... Ms>
void for_each_param(F&& f, Ms&... models) {
    f(ParamInfo{"embed", ParamKind::Embedding}, models.embed...);
    f(ParamInfo{"pos", ParamKind::Position}, models.pos...);
    const auto& first = std::get<0>(std::forward_as_tuple(models...));
    for (int l = 0; l < static_cast<int>(first.blocks.size()); ++l) {
        const std::string pl = "layer" + std::to_string(l);
        for (ProjectionSite s : kAllSites) {
            const std::string ps = pl + "." + std::string(to_string(s));
            f(ParamInfo{ps + ".base", ParamKind::BaseProjection, l, s}, models.blocks[l].site(s).base_weight...);
            const int n = first.blocks[l].site(s).n_experts();
            for (int e = 0; e < n; ++e) {
                const std::string pe = ps + ".expert" + std::to_string(e);
                f(ParamInfo{pe + ".A", ParamKind::ExpertA, l, s, e}, models.blocks[l].site(s).experts[e].A...);
                f(ParamInfo{pe + ".B", ParamKind::ExpertB, l, s, e}, models.blocks[l].site(s).experts[e].B...);
            }
            if (n > 0) {
                f(ParamInfo{ps + ".router.weight", ParamKind::RouterWeight, l, s}, models.blocks[l].site(s).router.weight...);
                f(ParamInfo{ps + ".router.bias", ParamKind::RouterBias, l, s}, models.blocks[l].site(s).router.bias...);
            }
        }
        f(ParamInfo{pl + ".ffn.up", ParamKind::FfnUp, l}, models.blocks[l].up...);
        f(ParamInfo{pl + ".ffn.down", ParamKind::FfnDown, l}, models.blocks[l].down...);
    }
    f(ParamInfo{"output", ParamKind::Output}, models.output...);
}

using ParamSelector = std::function<bool(const ParamInfo&)>;

namespace select {
inline ParamSelector base() { return [](const ParamInfo& p) { return is_base(p.kind); }; }
inline ParamSelector adapters() { return [](const ParamInfo& p) { return !is_base(p.kind); }; }
inline ParamSelector expert(int e) {
    return [e](const ParamInfo& p) {
        return (p.kind == ParamKind::ExpertA || p.kind == ParamKind::ExpertB) && p.expert == e;
    };
}
inline ParamSelector routers() {
    return [](const ParamInfo& p) { return p.kind == ParamKind::RouterWeight || p.kind == ParamKind::RouterBias; };
}
} // namespace select

// ---------------------------------------------------------------------------
// Construction

/// Fresh random base (frozen by convention) plus zero-delta experts and zero routers.
inline Model make_random_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int d = cfg.d;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    {
        Rng rng(derive_seed(cfg.seed, 0xB0u, 1));
        m.embed = uniform_matrix(cfg.vocab_size, d, 1.0, rng);
    }
    {
        Rng rng(derive_seed(cfg.seed, 0xB0u, 2));
        m.pos = uniform_matrix(cfg.max_seq, d, 1.0, rng);
    }
    {
        Rng rng(derive_seed(cfg.seed, 0xB0u, 3));
        m.output = uniform_matrix(cfg.vocab_size, d, inv_sqrt_d, rng);
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        Block b;
        for (ProjectionSite s : kAllSites) {
            const int out = s == ProjectionSite::FeedForwardGate ? cfg.ff_dim : d;
            Rng rng(derive_seed(cfg.seed, 0xB1u, l, index_of(s)));
            Matrix w = uniform_matrix(out, d, inv_sqrt_d, rng);
            const int n = cfg.sites.count(s) ? cfg.n_experts : 0;
            b.site(s) = make_move_layer(std::move(w), n, cfg.move_rank, cfg.alpha(), s,
                                        derive_seed(cfg.seed, 0xA1u, l, index_of(s)));
        }
        Rng rng_up(derive_seed(cfg.seed, 0xB2u, l));
        b.up = uniform_matrix(cfg.ff_dim, d, inv_sqrt_d, rng_up);
        Rng rng_down(derive_seed(cfg.seed, 0xB3u, l));
        b.down = uniform_matrix(d, cfg.ff_dim, 1.0 / std::sqrt(static_cast<double>(cfg.ff_dim)), rng_down);
        m.blocks.push_back(std::move(b));
    }
    return m;
}

inline Model zeros_like(const Model& m) {
    Model z = m;
    for_each_param([](const ParamInfo&, auto& t) { t.setZero(); }, z);
    return z;
}

/// Copies every base tensor of `src` into `dst` (matched by name and shape).
inline void copy_base(const Model& src, Model& dst) {
    std::map<std::string, const Matrix*> mats;
    std::map<std::string, const Vector*> vecs;
    for_each_param(
        [&](const ParamInfo& p, const auto& t) {
            if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Matrix>) {
                if (is_base(p.kind)) mats[p.name] = &t;
            }
        },
        src);
    for_each_param(
        [&](const ParamInfo& p, auto& t) {
            if (!is_base(p.kind)) return;
            if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Matrix>) {
                auto it = mats.find(p.name);
                if (it == mats.end() || it->second->rows() != t.rows() || it->second->cols() != t.cols())
                    throw ConfigError("copy_base: source has no matching tensor '" + p.name + "'");
                t = *it->second;
            }
        },
        dst);
}

/// Sets every expert B and router parameter to random values. Used to move a
/// model away from the zero-delta starting point, e.g. for gradient checks.
inline void randomize_adapters(Model& m, std::uint64_t seed, double scale) {
    int i = 0;
    for_each_param(
        [&](const ParamInfo& p, auto& t) {
            if (is_base(p.kind) || p.kind == ParamKind::ExpertA) return;
            Rng rng(derive_seed(seed, 0xC0u, i++));
            std::uniform_real_distribution<double> dist(-scale, scale);
            for (Eigen::Index r = 0; r < t.rows(); ++r)
                for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = dist(rng);
        },
        m);
}

// ---------------------------------------------------------------------------
// Forward / backward

inline constexpr double kRmsEps = 1e-6;

inline Matrix rms_norm(const Matrix& x, Vector& inv) {
    inv = ((x.array().square().rowwise().sum() / static_cast<double>(x.cols())) + kRmsEps).rsqrt().matrix();
    return (x.array().colwise() * inv.array()).matrix();
}

inline Matrix rms_norm_backward(const Matrix& x, const Vector& inv, const Matrix& dy) {
    const double n = static_cast<double>(x.cols());
    const Vector dot = (x.array() * dy.array()).rowwise().sum().matrix();
    const Vector coef = (inv.array().cube() * dot.array() / n).matrix();
    return (dy.array().colwise() * inv.array() - x.array().colwise() * coef.array()).matrix();
}

struct BlockCache {
    Matrix x_in, a, x1, b;
    Vector a_inv, b_inv;
    MoveCache q, k, v, o, gate;
    Matrix Q, K, V, attn;
    std::vector<Matrix> probs;
    Matrix gate_pre, up, hidden;

    const MoveCache& site(ProjectionSite s) const {
        switch (s) {
        case ProjectionSite::Query: return q;
        case ProjectionSite::Key: return k;
        case ProjectionSite::Value: return v;
        case ProjectionSite::Output: return o;
        case ProjectionSite::FeedForwardGate: return gate;
        }
        return q;
    }
};

struct ForwardCache {
    std::vector<int> tokens;
    std::vector<BlockCache> blocks;
    Matrix final_in, final_norm;
    Vector final_inv;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline void check_tokens(const Model& m, std::span<const int> tokens) {
    if (tokens.empty()) throw DataError("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > m.cfg.max_seq)
        throw DataError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                        std::to_string(m.cfg.max_seq));
    for (int t : tokens)
        if (t < 0 || t >= m.cfg.vocab_size)
            throw DataError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(m.cfg.vocab_size));
}

/// Returns logits (seq x vocab). Position t only sees tokens 0..t.
inline Matrix forward(const Model& m, std::span<const int> tokens, const Routing& routing = Routing::soft(),
                      ForwardCache* cache = nullptr) {
    check_tokens(m, tokens);
    const int T = static_cast<int>(tokens.size());
    const int H = m.cfg.n_heads, dh = m.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x(T, m.cfg.d);
    for (int t = 0; t < T; ++t) x.row(t) = m.embed.row(tokens[t]) + m.pos.row(t);

    if (cache) {
        cache->tokens.assign(tokens.begin(), tokens.end());
        cache->blocks.assign(m.blocks.size(), {});
    }
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const Block& blk = m.blocks[l];
        BlockCache local;
        BlockCache& c = cache ? cache->blocks[l] : local;
        c.x_in = x;
        c.a = rms_norm(x, c.a_inv);
        c.Q = forward_batch(blk.q, c.a, routing, &c.q);
        c.K = forward_batch(blk.k, c.a, routing, &c.k);
        c.V = forward_batch(blk.v, c.a, routing, &c.v);
        c.attn.resize(T, m.cfg.d);
        c.probs.resize(H);
        for (int h = 0; h < H; ++h) {
            Matrix S = scale * (c.Q.middleCols(h * dh, dh) * c.K.middleCols(h * dh, dh).transpose());
            for (int i = 0; i < T; ++i)
                for (int j = i + 1; j < T; ++j) S(i, j) = -std::numeric_limits<double>::infinity();
            c.probs[h] = row_softmax(S);
            c.attn.middleCols(h * dh, dh) = c.probs[h] * c.V.middleCols(h * dh, dh);
        }
        c.x1 = x + forward_batch(blk.o, c.attn, routing, &c.o);
        c.b = rms_norm(c.x1, c.b_inv);
        c.gate_pre = forward_batch(blk.gate, c.b, routing, &c.gate);
        c.up = c.b * blk.up.transpose();
        c.hidden = c.gate_pre.unaryExpr([](double z) { return z * sigmoid(z); }).cwiseProduct(c.up);
        x = c.x1 + c.hidden * blk.down.transpose();
    }
    Vector inv;
    Matrix xf = rms_norm(x, inv);
    Matrix logits = xf * m.output.transpose();
    if (cache) {
        cache->final_in = std::move(x);
        cache->final_norm = std::move(xf);
        cache->final_inv = std::move(inv);
    }
    return logits;
}

/// Accumulates dL/dparams into `grads` given dL/dlogits. Base-weight gradients
/// are skipped unless `base_grads` is set.
inline void backward(const Model& m, const ForwardCache& c, const Matrix& dlogits, const Routing& routing,
                     Model& grads, bool base_grads = true) {
    const int T = static_cast<int>(c.tokens.size());
    const int H = m.cfg.n_heads, dh = m.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (base_grads) grads.output.noalias() += dlogits.transpose() * c.final_norm;
    Matrix dx = rms_norm_backward(c.final_in, c.final_inv, dlogits * m.output);

    for (int l = static_cast<int>(m.blocks.size()) - 1; l >= 0; --l) {
        const Block& blk = m.blocks[l];
        const BlockCache& bc = c.blocks[l];
        Block& gb = grads.blocks[l];

        // feed-forward
        const Matrix& dffn = dx;
        if (base_grads) gb.down.noalias() += dffn.transpose() * bc.hidden;
        const Matrix dhidden = dffn * blk.down;
        const Matrix silu = bc.gate_pre.unaryExpr([](double z) { return z * sigmoid(z); });
        const Matrix dsilu = bc.gate_pre.unaryExpr([](double z) {
            const double s = sigmoid(z);
            return s * (1.0 + z * (1.0 - s));
        });
        const Matrix dup = dhidden.cwiseProduct(silu);
        const Matrix dgate = dhidden.cwiseProduct(bc.up).cwiseProduct(dsilu);
        if (base_grads) gb.up.noalias() += dup.transpose() * bc.b;
        Matrix db = dup * blk.up;
        db += backward_batch(blk.gate, bc.gate, dgate, routing, gb.gate, base_grads);
        Matrix dx1 = dx + rms_norm_backward(bc.x1, bc.b_inv, db);

        // attention
        const Matrix dattn = backward_batch(blk.o, bc.o, dx1, routing, gb.o, base_grads);
        Matrix dQ(T, m.cfg.d), dK(T, m.cfg.d), dV(T, m.cfg.d);
        for (int h = 0; h < H; ++h) {
            const Matrix& P = bc.probs[h];
            const auto dO = dattn.middleCols(h * dh, dh);
            const Matrix dP = dO * bc.V.middleCols(h * dh, dh).transpose();
            dV.middleCols(h * dh, dh) = P.transpose() * dO;
            const Vector inner = (dP.array() * P.array()).rowwise().sum().matrix();
            const Matrix dS = (P.array() * (dP.colwise() - inner).array()).matrix();
            dQ.middleCols(h * dh, dh) = scale * (dS * bc.K.middleCols(h * dh, dh));
            dK.middleCols(h * dh, dh) = scale * (dS.transpose() * bc.Q.middleCols(h * dh, dh));
        }
        Matrix da = backward_batch(blk.q, bc.q, dQ, routing, gb.q, base_grads);
        da += backward_batch(blk.k, bc.k, dK, routing, gb.k, base_grads);
        da += backward_batch(blk.v, bc.v, dV, routing, gb.v, base_grads);
        dx = dx1 + rms_norm_backward(bc.x_in, bc.a_inv, da);
    }
    if (base_grads) {
        for (int t = 0; t < T; ++t) {
            grads.embed.row(c.tokens[t]) += dx.row(t);
            grads.pos.row(t) += dx.row(t);
        }
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Mean token cross-entropy over positions with mask[t] set. Optionally
/// writes dLoss/dlogits.
inline double lm_loss(const Matrix& logits, std::span<const int> targets, const std::vector<bool>& mask,
                      Matrix* dlogits = nullptr, double grad_scale = -1.0) {
    if (static_cast<Eigen::Index>(targets.size()) != logits.rows() ||
        static_cast<Eigen::Index>(mask.size()) != logits.rows())
        throw DimensionError("lm_loss: logits, targets and mask disagree in length");
    const auto count = std::count(mask.begin(), mask.end(), true);
    if (count == 0) throw DataError("lm_loss: mask selects no positions");
    const double norm = grad_scale > 0.0 ? grad_scale : 1.0 / static_cast<double>(count);
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
    double total = 0.0;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        if (!mask[t]) continue;
        const int y = targets[t];
        if (y < 0 || y >= logits.cols()) throw DataError("lm_loss: target id out of range");
        const double mx = logits.row(t).maxCoeff();
        const double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
        total += lse - logits(t, y);
        if (dlogits) {
            dlogits->row(t) = (logits.row(t).array() - lse).exp() * norm;
            (*dlogits)(t, y) -= norm;
        }
    }
    return total / static_cast<double>(count);
}

/// One training sequence: the model reads tokens[0..n-2] and is scored on
/// predicting tokens[loss_from..n-1].
struct LmExample {
    std::vector<int> tokens;
    int loss_from = 1;
};

struct ExampleView {
    std::span<const int> input;
    std::vector<int> targets;
    std::vector<bool> mask;
};

inline ExampleView view_of(const LmExample& ex) {
    if (ex.tokens.size() < 2) throw DataError("example needs at least two tokens");
    if (ex.loss_from < 1 || ex.loss_from >= static_cast<int>(ex.tokens.size()))
        throw DataError("example loss_from out of range");
    ExampleView v;
    const std::size_t n = ex.tokens.size() - 1;
    v.input = std::span<const int>(ex.tokens.data(), n);
    v.targets.assign(ex.tokens.begin() + 1, ex.tokens.end());
    v.mask.resize(n);
    for (std::size_t t = 0; t < n; ++t) v.mask[t] = static_cast<int>(t) + 1 >= ex.loss_from;
    return v;
}

inline int scored_tokens(const LmExample& ex) { return static_cast<int>(ex.tokens.size()) - ex.loss_from; }

/// Token-mean loss over a batch. When `grads` is given, accumulates gradients
/// of that loss into it.
inline double batch_loss(const Model& m, std::span<const LmExample> batch, const Routing& routing,
                         Model* grads = nullptr, bool base_grads = true) {
    if (batch.empty()) throw DataError("batch_loss: empty batch");
    long total_tokens = 0;
    for (const auto& ex : batch) total_tokens += scored_tokens(ex);
    double total = 0.0;
    for (const auto& ex : batch) {
        const ExampleView v = view_of(ex);
        ForwardCache cache;
        const Matrix logits = forward(m, v.input, routing, grads ? &cache : nullptr);
        if (grads) {
            Matrix dlogits;
            const double l = lm_loss(logits, v.targets, v.mask, &dlogits, 1.0 / static_cast<double>(total_tokens));
            total += l * scored_tokens(ex);
            backward(m, cache, dlogits, routing, *grads, base_grads);
        } else {
            total += lm_loss(logits, v.targets, v.mask) * scored_tokens(ex);
        }
    }
    const double loss = total / static_cast<double>(total_tokens);
    if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
    return loss;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    int n_checked = 0;
    double frozen_max_abs_grad = 0.0; // analytic gradient seen by frozen coordinates
    std::set<std::string> kinds_covered; // "<site>.<A|B|router.weight|router.bias>"
};

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the analytic gradient of the batch loss with respect to the
/// trainable set (adapters and routers) against central differences on a
/// random subsample of coordinates. Every trainable tensor contributes at
/// least one coordinate.
inline GradCheckReport grad_check(const Model& model, std::span<const LmExample> batch, double eps,
                                  int n_coords = 128, std::uint64_t seed = 0,
                                  const Routing& routing = Routing::soft()) {
    if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
    const ParamSelector trainable = select::adapters();
    Model grads = zeros_like(model);
    batch_loss(model, batch, routing, &grads, true);
    // Frozen parameters never receive updates, so their effective gradient is
    // the masked one.
    for_each_param(
        [&](const ParamInfo& p, auto& g) {
            if (!trainable(p)) g.setZero();
        },
        grads);

    struct Coord {
        std::string name;
        std::string kind_tag;
        int tensor;
        Eigen::Index r, c;
    };
    std::vector<Coord> coords;
    std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> shapes;
    std::vector<std::string> tags;
    int ti = 0;
    Rng rng(seed);
    for_each_param(
        [&](const ParamInfo& p, const auto& t) {
            if (trainable(p) && t.size() > 0) {
                std::string tag = std::string(to_string(p.site)) + ".";
                tag += p.kind == ParamKind::ExpertA   ? "A"
                       : p.kind == ParamKind::ExpertB ? "B"
                       : p.kind == ParamKind::RouterWeight ? "router.weight"
                                                           : "router.bias";
                std::uniform_int_distribution<Eigen::Index> rr(0, t.rows() - 1), cc(0, t.cols() - 1);
                coords.push_back({p.name, tag, ti, rr(rng), cc(rng)});
                shapes.push_back({p.name, {t.rows(), t.cols()}});
                tags.push_back(tag);
            }
            ++ti;
        },
        model);
    if (shapes.empty()) throw ConfigError("grad_check: model has no trainable parameters");
    std::vector<int> tensor_ids;
    for (const auto& c : coords) tensor_ids.push_back(c.tensor);
    std::uniform_int_distribution<std::size_t> pick(0, shapes.size() - 1);
    while (static_cast<int>(coords.size()) < n_coords) {
        const std::size_t k = pick(rng);
        std::uniform_int_distribution<Eigen::Index> rr(0, shapes[k].second.first - 1),
            cc(0, shapes[k].second.second - 1);
        coords.push_back({shapes[k].first, tags[k], tensor_ids[k], rr(rng), cc(rng)});
    }

    GradCheckReport rep;
    Model probe = model;
    for (const auto& co : coords) {
        double analytic = 0.0;
        int idx = 0;
        for_each_param(
            [&](const ParamInfo&, const auto& g) {
                if (idx++ == co.tensor) analytic = g(co.r, co.c);
            },
            grads);
        auto nudge = [&](double delta) {
            int j = 0;
            for_each_param(
                [&](const ParamInfo&, auto& t) {
                    if (j++ == co.tensor) t(co.r, co.c) += delta;
                },
                probe);
        };
        double original = 0.0;
        {
            int j = 0;
            for_each_param(
                [&](const ParamInfo&, const auto& t) {
                    if (j++ == co.tensor) original = t(co.r, co.c);
                },
                probe);
        }
        nudge(eps);
        const double lp = batch_loss(probe, batch, routing);
        nudge(-2.0 * eps);
        const double lm = batch_loss(probe, batch, routing);
        // restore exactly
        {
            int j = 0;
            for_each_param(
                [&](const ParamInfo&, auto& t) {
                    if (j++ == co.tensor) t(co.r, co.c) = original;
                },
                probe);
        }
        const double numeric = (lp - lm) / (2.0 * eps);
        const double err = relative_error(analytic, numeric);
        if (rep.n_checked == 0 || err > rep.max_rel_error) {
            rep.max_rel_error = err;
            rep.worst_param = co.name;
        }
        rep.kinds_covered.insert(co.kind_tag);
        ++rep.n_checked;
    }
    for_each_param(
        [&](const ParamInfo& p, const auto& g) {
            if (!trainable(p) && g.size() > 0) rep.frozen_max_abs_grad = std::max(rep.frozen_max_abs_grad, g.cwiseAbs().maxCoeff());
        },
        grads);
    return rep;
}

// ---------------------------------------------------------------------------
// Decoding and checkpoints

/// Greedy continuation of `prefix` until `stop` or `max_new` tokens.
inline std::vector<int> greedy_decode(const Model& m, std::vector<int> prefix, int max_new, int stop,
                                      const Routing& routing = Routing::soft()) {
    std::vector<int> out;
    for (int i = 0; i < max_new && static_cast<int>(prefix.size()) < m.cfg.max_seq; ++i) {
        const Matrix logits = forward(m, prefix, routing);
        Eigen::Index best;
        logits.row(logits.rows() - 1).maxCoeff(&best);
        const int tok = static_cast<int>(best);
        if (tok == stop) break;
        out.push_back(tok);
        prefix.push_back(tok);
    }
    return out;
}

inline TensorArchive to_archive(const Model& m) {
    TensorArchive ar;
    ar.meta["kind"] = "movekit.model";
    ar.meta["config"] = m.cfg.to_json();
    ar.put("embed", m.embed);
    ar.put("pos", m.pos);
    ar.put("output", m.output);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const std::string pl = "layer" + std::to_string(l);
        for (ProjectionSite s : kAllSites) put_layer(ar, pl + "." + std::string(to_string(s)), m.blocks[l].site(s));
        ar.put(pl + ".ffn.up", m.blocks[l].up);
        ar.put(pl + ".ffn.down", m.blocks[l].down);
    }
    return ar;
}

inline Model from_archive(const TensorArchive& ar) {
    if (ar.meta.value("kind", "") != "movekit.model") throw DataError("archive does not hold a model");
    Model m;
    m.cfg = ModelConfig::from_json(ar.meta.at("config"));
    m.cfg.validate();
    m.embed = ar.get("embed");
    m.pos = ar.get("pos");
    m.output = ar.get("output");
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        const std::string pl = "layer" + std::to_string(l);
        Block b;
        for (ProjectionSite s : kAllSites) b.site(s) = get_layer(ar, pl + "." + std::string(to_string(s)));
        b.up = ar.get(pl + ".ffn.up");
        b.down = ar.get(pl + ".ffn.down");
        m.blocks.push_back(std::move(b));
    }
    return m;
}

} // namespace movekit

// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dominant-expert extraction, confusion matrix and alignment accuracy.

#include "movekit/core.hpp"
#include "movekit/synth_task.hpp"
#include "movekit/toy_model.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace movekit {

struct RoutingTrace {
    std::string id;
    Manifold manifold = Manifold::Angry;
    std::vector<Matrix> gates; // one (tokens x experts) matrix per MoVE layer
    int dominant = -1;
};

enum class DominanceMode { Mean, Majority };

inline std::string_view to_string(DominanceMode m) { return m == DominanceMode::Mean ? "mean" : "majority"; }

inline DominanceMode dominance_mode_from_string(std::string_view s) {
    if (s == "mean") return DominanceMode::Mean;
    if (s == "majority") return DominanceMode::Majority;
    throw ConfigError("dominance mode must be 'mean' or 'majority', got '" + std::string(s) + "'");
}

namespace detail {

inline int first_argmax(const Vector& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = i;
    return best;
}

} // namespace detail

/// Mean: argmax of the gate mean over every token of every layer. Majority:
/// each (token, layer) votes for its argmax; most votes wins. Ties go to the
/// lowest expert index in both modes.
inline int dominant_expert(const std::vector<Matrix>& gates, DominanceMode mode = DominanceMode::Mean) {
    Eigen::Index n_exp = -1;
    long rows = 0;
    for (const auto& g : gates) {
        if (g.rows() == 0) continue;
        if (n_exp >= 0 && g.cols() != n_exp) throw DimensionError("dominant_expert: layers disagree on expert count");
        n_exp = g.cols();
        rows += g.rows();
    }
    if (rows == 0 || n_exp <= 0) throw DataError("dominant_expert: empty trace");
    Vector acc = Vector::Zero(n_exp);
    for (const auto& g : gates) {
        if (g.rows() == 0) continue;
        if (mode == DominanceMode::Mean) {
            acc += g.colwise().sum().transpose();
        } else {
            for (Eigen::Index t = 0; t < g.rows(); ++t) acc(detail::first_argmax(g.row(t).transpose())) += 1.0;
        }
    }
    return detail::first_argmax(acc / static_cast<double>(rows));
}

using ConfusionMatrix = Eigen::Matrix<long, kNumManifolds, kNumManifolds>;

/// rows = true manifold, cols = dominant expert.
inline ConfusionMatrix confusion(const std::vector<RoutingTrace>& traces, DominanceMode mode = DominanceMode::Mean) {
    ConfusionMatrix cm = ConfusionMatrix::Zero();
    for (const auto& t : traces) {
        const int d = t.dominant >= 0 ? t.dominant : dominant_expert(t.gates, mode);
        if (d >= kNumManifolds) throw DataError("confusion: dominant expert index " + std::to_string(d) + " out of range");
        cm(index_of(t.manifold), d) += 1;
    }
    return cm;
}

inline double alignment_accuracy(const ConfusionMatrix& cm) {
    if ((cm.array() < 0).any()) throw DataError("alignment_accuracy: negative count");
    const long total = cm.sum();
    if (total <= 0) throw DataError("alignment_accuracy: empty confusion matrix");
    return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

/// Runs the model on each record (soft routing) and records the gates of every
/// MoVE layer over all input tokens.
inline std::vector<RoutingTrace> collect_traces(const Model& model, const CorpusManifest& corpus,
                                                DominanceMode mode = DominanceMode::Mean) {
    if (model.cfg.n_experts < 1) throw ConfigError("collect_traces: model has no experts");
    std::vector<RoutingTrace> out;
    out.reserve(corpus.records.size());
    for (const auto& rec : corpus.records) {
        const LmExample ex = encode(rec);
        const ExampleView v = view_of(ex);
        ForwardCache cache;
        forward(model, v.input, Routing::soft(), &cache);
        RoutingTrace t;
        t.id = rec.id;
        t.manifold = rec.manifold;
        for (const auto& bc : cache.blocks)
            for (ProjectionSite s : model.cfg.sites) t.gates.push_back(bc.site(s).gates);
        t.dominant = dominant_expert(t.gates, mode);
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Outputs

inline void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << "true\\dominant";
    for (Manifold m : kAllManifolds) f << ',' << to_string(m);
    f << '\n';
    for (Manifold r : kAllManifolds) {
        f << to_string(r);
        for (int c = 0; c < kNumManifolds; ++c) f << ',' << cm(index_of(r), c);
        f << '\n';
    }
}

/// Row-normalised matrix for external plotting; empty rows stay zero.
inline Matrix normalized_confusion(const ConfusionMatrix& cm) {
    Matrix out = cm.cast<double>();
    for (int r = 0; r < kNumManifolds; ++r) {
        const double s = out.row(r).sum();
        if (s > 0) out.row(r) /= s;
    }
    return out;
}

inline void write_plot_data(const std::filesystem::path& path, const ConfusionMatrix& cm) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    const Matrix n = normalized_confusion(cm);
    f << "true,dominant,fraction\n";
    char buf[64];
    for (Manifold r : kAllManifolds)
        for (Manifold c : kAllManifolds) {
            std::snprintf(buf, sizeof buf, "%.6f", n(index_of(r), index_of(c)));
            f << to_string(r) << ',' << to_string(c) << ',' << buf << '\n';
        }
}

inline nlohmann::json routing_summary(const ConfusionMatrix& cm, DominanceMode mode) {
    nlohmann::json recall = nlohmann::json::object();
    for (Manifold m : kAllManifolds) {
        const long row = cm.row(index_of(m)).sum();
        recall[std::string(to_string(m))] =
            row > 0 ? nlohmann::json(static_cast<double>(cm(index_of(m), index_of(m))) / row) : nlohmann::json(nullptr);
    }
    return {{"alignment_accuracy", alignment_accuracy(cm)}, {"per_class_recall", recall},
            {"n", cm.sum()}, {"mode", std::string(to_string(mode))}};
}

} // namespace movekit

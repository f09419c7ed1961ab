// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Evaluation metrics and their dispersion statistics.

#include "movekit/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace movekit {

struct MetricsReport {
    std::string metric;
    std::string system;
    double estimate = 0.0;
    double dispersion = 0.0; // bootstrap SD or SE, depending on the metric
    long n = 0;
};

// ---------------------------------------------------------------------------
// Dispersion

/// Sample standard deviation (n - 1) over sqrt(n).
inline double standard_error(std::span<const double> samples) {
    const std::size_t n = samples.size();
    if (n < 2) throw DataError("standard_error: need at least 2 samples");
    const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double x : samples) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
}

inline double mean_of(std::span<const double> xs) {
    if (xs.empty()) throw DataError("mean of empty sample");
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// Statistic evaluated on a resample, given as indices into the original sample.
using ResampleStatistic = std::function<double(std::span<const std::size_t>)>;

/// Standard deviation (B - 1 denominator) of `statistic` over B resamples of
/// size n drawn with replacement.
inline double bootstrap_sd(std::size_t n, int B, std::uint64_t seed, const ResampleStatistic& statistic) {
    if (n < 2) throw DataError("bootstrap_sd: need at least 2 items");
    if (B < 100) throw DataError("bootstrap_sd: need at least 100 resamples");
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(n);
    std::vector<double> stats(B);
    for (int b = 0; b < B; ++b) {
        for (auto& i : idx) i = pick(rng);
        stats[b] = statistic(idx);
    }
    const double mean = std::accumulate(stats.begin(), stats.end(), 0.0) / B;
    double ss = 0.0;
    for (double s : stats) ss += (s - mean) * (s - mean);
    return std::sqrt(ss / (B - 1));
}

inline double bootstrap_sd_mean(std::span<const double> xs, int B, std::uint64_t seed) {
    return bootstrap_sd(xs.size(), B, seed, [&](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (auto i : idx) s += xs[i];
        return s / static_cast<double>(idx.size());
    });
}

// ---------------------------------------------------------------------------
// Arousal-valence similarity

struct AroValPoint {
    double arousal = 0.0;
    double valence = 0.0;
};

inline double aro_val_sim(const AroValPoint& src, const AroValPoint& gen) {
    const double ns = std::hypot(src.arousal, src.valence);
    const double ng = std::hypot(gen.arousal, gen.valence);
    if (!(ns > 0.0) || !(ng > 0.0)) throw DataError("aro_val_sim: zero arousal-valence vector");
    if (!std::isfinite(ns) || !std::isfinite(ng)) throw DataError("aro_val_sim: non-finite point");
    const double c = (src.arousal * gen.arousal + src.valence * gen.valence) / (ns * ng);
    return std::clamp(c, -1.0, 1.0);
}

/// Mean cosine similarity with its standard error over items.
inline MetricsReport aro_val_report(std::span<const std::pair<AroValPoint, AroValPoint>> pairs, std::string system) {
    std::vector<double> sims;
    for (const auto& [s, g] : pairs) sims.push_back(aro_val_sim(s, g));
    return {"aro_val_sim", std::move(system), mean_of(sims), standard_error(sims), static_cast<long>(sims.size())};
}

// ---------------------------------------------------------------------------
// BLEU: corpus-level, case-sensitive, n = 1..max_n, clipped counts, brevity
// penalty exp(1 - r/c) when c < r. A higher-order precision with zero matches
// is replaced by 1 / (candidates + 1); unigram precision is never smoothed.

template <typename Tok>
struct BleuStats {
    std::vector<long> matches, totals;
    long hyp_len = 0, ref_len = 0;

    explicit BleuStats(int max_n = 4) : matches(max_n, 0), totals(max_n, 0) {}

    BleuStats& operator+=(const BleuStats& o) {
        for (std::size_t i = 0; i < matches.size(); ++i) {
            matches[i] += o.matches[i];
            totals[i] += o.totals[i];
        }
        hyp_len += o.hyp_len;
        ref_len += o.ref_len;
        return *this;
    }
};

template <typename Tok>
BleuStats<Tok> sentence_bleu_stats(const std::vector<Tok>& ref, const std::vector<Tok>& hyp, int max_n = 4) {
    BleuStats<Tok> st(max_n);
    st.hyp_len = static_cast<long>(hyp.size());
    st.ref_len = static_cast<long>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
        std::map<std::vector<Tok>, long> ref_counts, hyp_counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<Tok>(ref.begin() + i, ref.begin() + i + n)];
        for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[std::vector<Tok>(hyp.begin() + i, hyp.begin() + i + n)];
        long m = 0, t = 0;
        for (const auto& [g, c] : hyp_counts) {
            t += c;
            auto it = ref_counts.find(g);
            if (it != ref_counts.end()) m += std::min(c, it->second);
        }
        st.matches[n - 1] = m;
        st.totals[n - 1] = t;
    }
    return st;
}

template <typename Tok>
double bleu_from_stats(const BleuStats<Tok>& st) {
    if (st.hyp_len == 0 || st.matches.empty() || st.matches[0] == 0) return 0.0;
    double log_p = 0.0;
    const auto N = static_cast<double>(st.matches.size());
    for (std::size_t i = 0; i < st.matches.size(); ++i) {
        double p;
        if (i > 0 && st.matches[i] == 0)
            p = 1.0 / (static_cast<double>(st.totals[i]) + 1.0);
        else
            p = static_cast<double>(st.matches[i]) / static_cast<double>(st.totals[i]);
        log_p += std::log(p) / N;
    }
    const double bp =
        st.hyp_len < st.ref_len ? std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len)) : 1.0;
    return 100.0 * bp * std::exp(log_p);
}

template <typename Tok>
double corpus_bleu(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps, int max_n = 4) {
    if (refs.size() != hyps.size()) throw DataError("corpus_bleu: reference and hypothesis counts differ");
    if (refs.empty()) throw DataError("corpus_bleu: empty corpus");
    if (max_n < 1) throw DataError("corpus_bleu: max_n must be >= 1");
    BleuStats<Tok> total(max_n);
    for (std::size_t i = 0; i < refs.size(); ++i) total += sentence_bleu_stats(refs[i], hyps[i], max_n);
    return bleu_from_stats(total);
}

/// BLEU with sentence-pair bootstrap SD.
template <typename Tok>
MetricsReport bleu_report(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps,
                          std::string system, int B = 1000, std::uint64_t seed = 0) {
    const double point = corpus_bleu(refs, hyps);
    std::vector<BleuStats<Tok>> per;
    for (std::size_t i = 0; i < refs.size(); ++i) per.push_back(sentence_bleu_stats(refs[i], hyps[i]));
    double sd = 0.0;
    if (refs.size() >= 2)
        sd = bootstrap_sd(refs.size(), B, seed, [&](std::span<const std::size_t> idx) {
            BleuStats<Tok> acc(4);
            for (auto i : idx) acc += per[i];
            return bleu_from_stats(acc);
        });
    return {"bleu", std::move(system), point, sd, static_cast<long>(refs.size())};
}

// ---------------------------------------------------------------------------
// Human-evaluation arithmetic

enum class NVLabel { Laughing, Crying, None };

inline NVLabel nv_label_from_string(const std::string& s) {
    if (s == "Laughing") return NVLabel::Laughing;
    if (s == "Crying") return NVLabel::Crying;
    if (s == "None") return NVLabel::None;
    throw DataError("unknown NV label '" + s + "'");
}

struct NVAnnotation {
    std::string utterance_id;
    std::string evaluator_id;
    std::string system_id;
    NVLabel source_nv = NVLabel::None;
    NVLabel perceived_nv = NVLabel::None;
};

/// Per system: hit iff the perceived label equals the source label. Each
/// evaluator's accuracy is the mean of its laughing-subset and crying-subset
/// accuracies; the estimate is the mean over evaluators in percent, the
/// dispersion the SE over evaluators in percent.
inline std::vector<MetricsReport> nv_match_accuracy(std::span<const NVAnnotation> annotations) {
    if (annotations.empty()) throw DataError("nv_match_accuracy: no annotations");
    // system -> evaluator -> [laugh hits, laugh n, cry hits, cry n]
    std::map<std::string, std::map<std::string, std::array<long, 4>>> tally;
    for (const auto& a : annotations) {
        if (a.utterance_id.empty() || a.evaluator_id.empty() || a.system_id.empty())
            throw DataError("nv_match_accuracy: annotation with empty id");
        if (a.source_nv == NVLabel::None) throw DataError("nv_match_accuracy: source utterance has no NV");
        auto& t = tally[a.system_id][a.evaluator_id];
        const int base = a.source_nv == NVLabel::Laughing ? 0 : 2;
        t[base] += a.perceived_nv == a.source_nv ? 1 : 0;
        t[base + 1] += 1;
    }
    std::vector<MetricsReport> out;
    for (const auto& [system, evals] : tally) {
        std::vector<double> per_eval;
        for (const auto& [ev, t] : evals) {
            if (t[1] == 0 || t[3] == 0)
                throw DataError("nv_match_accuracy: evaluator " + ev + " lacks the laughing or crying subset for " + system);
            per_eval.push_back(0.5 * (static_cast<double>(t[0]) / t[1] + static_cast<double>(t[2]) / t[3]));
        }
        out.push_back({"nv_match_accuracy", system, 100.0 * mean_of(per_eval), 100.0 * standard_error(per_eval),
                       static_cast<long>(per_eval.size())});
    }
    return out;
}

enum class Vote { A, B, Tie };

inline Vote vote_from_string(const std::string& s) {
    if (s == "A") return Vote::A;
    if (s == "B") return Vote::B;
    if (s == "Tie") return Vote::Tie;
    throw DataError("unknown vote '" + s + "'");
}

struct Preference {
    double a = 0.0, tie = 0.0, b = 0.0; // percent
};

inline Preference ab_preference(std::span<const Vote> votes) {
    if (votes.empty()) throw DataError("ab_preference: no votes");
    long a = 0, t = 0, b = 0;
    for (Vote v : votes) (v == Vote::A ? a : v == Vote::B ? b : t) += 1;
    const double n = static_cast<double>(votes.size());
    return {100.0 * a / n, 100.0 * t / n, 100.0 * b / n};
}

struct Rating {
    std::string evaluator_id;
    std::string utterance_id;
    double score = 0.0;
};

/// Mean over all ratings; SE over per-evaluator means.
inline MetricsReport mos_aggregate(std::span<const Rating> ratings, std::string metric = "mos", std::string system = "") {
    if (ratings.empty()) throw DataError("mos_aggregate: no ratings");
    std::map<std::string, std::pair<double, long>> per;
    double total = 0.0;
    for (const auto& r : ratings) {
        if (!(r.score >= 1.0 && r.score <= 5.0))
            throw DataError("mos_aggregate: score " + std::to_string(r.score) + " outside [1, 5]");
        per[r.evaluator_id].first += r.score;
        per[r.evaluator_id].second += 1;
        total += r.score;
    }
    std::vector<double> means;
    for (const auto& [ev, s] : per) means.push_back(s.first / s.second);
    return {std::move(metric), std::move(system), total / static_cast<double>(ratings.size()), standard_error(means),
            static_cast<long>(means.size())};
}

// ---------------------------------------------------------------------------

inline std::string format_double(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

/// CSV with columns metric,system,estimate,dispersion,n; optional provenance
/// comment on the first line.
inline void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsReport> rows,
                              const nlohmann::json& provenance = {}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    if (!provenance.is_null()) f << "# " << provenance.dump() << '\n';
    f << "metric,system,estimate,dispersion,n\n";
    for (const auto& r : rows)
        f << r.metric << ',' << r.system << ',' << format_double(r.estimate, 6) << ',' << format_double(r.dispersion, 6)
          << ',' << r.n << '\n';
}

} // namespace movekit

// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic stand-in for an expressive parallel speech corpus.
//
// Every record is a source sentence of content tokens plus a prosody cue, and
// a target that is the "translation" of the content interleaved with a
// manifold-specific pattern of vocalization markers:
//
//   source = [cue(m), s_1, ..., s_L]
//   target = [p_0, T(s_1), p_1, T(s_2), ..., p_{L-1}, T(s_L)],   p_i = pattern(m)[i mod |pattern(m)|]
//
// T is a fixed affine permutation of the content alphabet shared by all
// manifolds, so the manifold only changes the vocalization track. Laugh and
// Cry patterns reuse the Happy and Sad markers on alternate slots.

#include "movekit/core.hpp"
#include "movekit/toy_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace movekit {

/// Token layout for a vocabulary of size V with C = (V - 15) / 2 content symbols per side.
struct TaskVocab {
    static constexpr int kBos = 0;
    static constexpr int kSep = 1;
    static constexpr int kEos = 2;
    static constexpr int kCueBase = 3;      // 5 manifold cues
    static constexpr int kNeutralCue = 8;
    static constexpr int kMarkerBase = 9;   // 5 manifold markers
    static constexpr int kNeutralMarker = 14;
    static constexpr int kReserved = 15;

    int content = 0;

    static TaskVocab for_vocab(int vocab_size) {
        const int c = (vocab_size - kReserved) / 2;
        if (c < 2) throw DataError("vocab_size " + std::to_string(vocab_size) + " leaves fewer than 2 content symbols");
        return TaskVocab{c};
    }
    int vocab_size() const { return kReserved + 2 * content; }
    static int cue(Manifold m) { return kCueBase + index_of(m); }
    static int marker(Manifold m) { return kMarkerBase + index_of(m); }
    int source_token(int c) const { return kReserved + c; }
    int target_token(int c) const { return kReserved + content + c; }
    bool is_source_content(int t) const { return t >= kReserved && t < kReserved + content; }
    bool is_target_content(int t) const { return t >= kReserved + content && t < kReserved + 2 * content; }
    static bool is_marker(int t) { return t >= kMarkerBase && t <= kNeutralMarker; }

    /// Multiplier of the affine translation key: the smallest of 3, 5, 7, ...
    /// coprime with C (1 if none below C).
    int translation_multiplier() const {
        for (int a = 3; a < std::max(content, 4); a += 2)
            if (std::gcd(a, content) == 1 && a % content != 1) return a;
        return 1;
    }
    /// Content translation T(c) = (a c + 3) mod C.
    int translate(int c) const { return (translation_multiplier() * c + 3) % content; }
};

inline std::vector<int> marker_pattern(Manifold m) {
    switch (m) {
    case Manifold::Angry: return {TaskVocab::marker(Manifold::Angry)};
    case Manifold::Happy: return {TaskVocab::marker(Manifold::Happy)};
    case Manifold::Sad: return {TaskVocab::marker(Manifold::Sad)};
    case Manifold::Laugh: return {TaskVocab::marker(Manifold::Laugh), TaskVocab::marker(Manifold::Happy)};
    case Manifold::Cry: return {TaskVocab::marker(Manifold::Cry), TaskVocab::marker(Manifold::Sad)};
    }
    return {};
}

/// Applies the generator rule to source content symbols (0..C-1).
inline std::vector<int> render_target(const TaskVocab& v, const std::vector<int>& content,
                                      const std::vector<int>& pattern) {
    std::vector<int> target;
    for (std::size_t i = 0; i < content.size(); ++i) {
        target.push_back(pattern[i % pattern.size()]);
        target.push_back(v.target_token(v.translate(content[i])));
    }
    return target;
}

/// Recomputes a target from a stored source token sequence.
inline std::vector<int> expected_target(const TaskVocab& v, const std::vector<int>& source, Manifold m) {
    std::vector<int> content;
    for (std::size_t i = 1; i < source.size(); ++i) {
        if (!v.is_source_content(source[i])) throw DataError("source token is not a content symbol");
        content.push_back(source[i] - TaskVocab::kReserved);
    }
    return render_target(v, content, marker_pattern(m));
}

struct CorpusRecord {
    std::string id;
    std::vector<int> source;
    std::vector<int> target;
    Manifold manifold = Manifold::Angry;
    double duration_s = 1.0;
    std::string ref_text;
    std::string hyp_text;
    // target-language side of the pair
    double target_duration_s = 1.0;
    std::string target_ref_text;
    std::string target_hyp_text;
};

/// Nominal scale label: records per hour of speech.
inline constexpr double kRecordsPerHour = 600.0;

struct CorpusManifest {
    std::vector<CorpusRecord> records;
    std::uint64_t seed = 0;
    double hours_nominal = 0.0;
    int vocab_size = 0;

    std::size_t size() const { return records.size(); }
    std::array<int, kNumManifolds> counts() const {
        std::array<int, kNumManifolds> c{};
        for (const auto& r : records) ++c[index_of(r.manifold)];
        return c;
    }
};

// ---------------------------------------------------------------------------
// Synthetic transcripts

/// Word for content symbol c: two syllables from a fixed table.
inline std::string content_word(int c) {
    static const char* syll[] = {"ba", "ko", "mi", "ru", "te", "lo", "sa", "ni"};
    return std::string(syll[c % 8]) + syll[(c / 8) % 8] + (c >= 64 ? std::to_string(c / 64) : "");
}

inline std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

/// Ideograph for target symbol c.
inline std::string content_char(int c) { return utf8_encode(static_cast<char32_t>(0x4E00 + 37 * c)); }

namespace detail {

struct Transcripts {
    std::string ref, hyp;
    double duration;
};

// Simulated recognizer: each unit is substituted with probability `err`, and
// a clean/noisy mixture keeps most records under the WER gate.
inline Transcripts simulate(const std::vector<int>& symbols, int alphabet, bool ideographic, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool noisy = u(rng) < 0.12;
    const double err = noisy ? 0.55 + 0.45 * u(rng) : 0.25 * u(rng);
    std::vector<std::string> ref, hyp;
    for (int s : symbols) {
        const std::string w = ideographic ? content_char(s) : content_word(s);
        ref.push_back(w);
        if (u(rng) < err) {
            const int alt = (s + 1 + static_cast<int>(u(rng) * (alphabet - 1))) % alphabet;
            hyp.push_back(ideographic ? content_char(alt) : content_word(alt));
        } else {
            hyp.push_back(w);
        }
    }
    auto join = [&](const std::vector<std::string>& ws) {
        std::string s;
        for (std::size_t i = 0; i < ws.size(); ++i) {
            if (i && !ideographic) s += ' ';
            s += ws[i];
        }
        return s;
    };
    Transcripts t;
    t.ref = join(ref);
    t.hyp = join(hyp);
    if (!ideographic) {
        // recognizers capitalise and punctuate; normalisation undoes it
        if (!t.hyp.empty()) t.hyp[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(t.hyp[0])));
        t.hyp += u(rng) < 0.5 ? "." : "!";
    } else {
        t.hyp += utf8_encode(0x3002); // ideographic full stop
    }
    const bool clipped = u(rng) < 0.05;
    t.duration = clipped ? 0.1 + 0.39 * u(rng) : 0.25 * static_cast<double>(symbols.size()) + 0.3 * u(rng);
    return t;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Generation

/// Balanced corpus: record i has manifold i mod 5. Each record is drawn from
/// its own seed stream, so the output is order-stable.
inline CorpusManifest generate_corpus(std::uint64_t seed, int n_records, int vocab_size, std::pair<int, int> len_range) {
    if (n_records < kNumManifolds) throw DataError("generate_corpus: need at least 5 records");
    if (len_range.first < 1 || len_range.second < len_range.first)
        throw DataError("generate_corpus: invalid length range [" + std::to_string(len_range.first) + ", " +
                        std::to_string(len_range.second) + "]");
    const TaskVocab v = TaskVocab::for_vocab(vocab_size);
    CorpusManifest out;
    out.seed = seed;
    out.vocab_size = vocab_size;
    out.hours_nominal = n_records / kRecordsPerHour;
    out.records.reserve(n_records);
    for (int i = 0; i < n_records; ++i) {
        Rng rng(derive_seed(seed, 0x5Du, i));
        const Manifold m = manifold_from_index(i % kNumManifolds);
        std::uniform_int_distribution<int> len(len_range.first, len_range.second);
        std::uniform_int_distribution<int> sym(0, v.content - 1);
        const int L = len(rng);
        std::vector<int> content(L);
        for (int& c : content) c = sym(rng);

        CorpusRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "utt%06d", i);
        r.id = id;
        r.manifold = m;
        r.source.push_back(TaskVocab::cue(m));
        for (int c : content) r.source.push_back(v.source_token(c));
        r.target = render_target(v, content, marker_pattern(m));

        const auto src_text = detail::simulate(content, v.content, false, rng);
        std::vector<int> translated;
        for (int c : content) translated.push_back(v.translate(c));
        const auto tgt_text = detail::simulate(translated, v.content, true, rng);
        r.duration_s = src_text.duration;
        r.ref_text = src_text.ref;
        r.hyp_text = src_text.hyp;
        r.target_duration_s = tgt_text.duration;
        r.target_ref_text = tgt_text.ref;
        r.target_hyp_text = tgt_text.hyp;
        out.records.push_back(std::move(r));
    }
    return out;
}

/// Full decoder sequence [BOS] source [SEP] target [EOS]; loss covers target and EOS.
inline LmExample encode(const std::vector<int>& source, const std::vector<int>& target) {
    LmExample ex;
    ex.tokens.push_back(TaskVocab::kBos);
    ex.tokens.insert(ex.tokens.end(), source.begin(), source.end());
    ex.tokens.push_back(TaskVocab::kSep);
    ex.loss_from = static_cast<int>(ex.tokens.size());
    ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
    ex.tokens.push_back(TaskVocab::kEos);
    return ex;
}

inline LmExample encode(const CorpusRecord& r) { return encode(r.source, r.target); }

inline std::vector<LmExample> encode_all(const CorpusManifest& m) {
    std::vector<LmExample> out;
    out.reserve(m.size());
    for (const auto& r : m.records) out.push_back(encode(r));
    return out;
}

/// Pretraining sequences for the base model: random cue (any of the six) and
/// an independent random marker (any of the six) in every vocalization slot,
/// so the base learns the layout and the translation but not which
/// vocalization a cue calls for.
inline std::vector<LmExample> neutral_examples(std::uint64_t seed, int n, int vocab_size, std::pair<int, int> len_range) {
    if (len_range.first < 1 || len_range.second < len_range.first) throw DataError("neutral_examples: invalid length range");
    const TaskVocab v = TaskVocab::for_vocab(vocab_size);
    std::vector<LmExample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, 0x4Eu, i));
        std::uniform_int_distribution<int> len(len_range.first, len_range.second);
        std::uniform_int_distribution<int> sym(0, v.content - 1);
        std::uniform_int_distribution<int> cue(0, kNumManifolds);
        const int L = len(rng);
        const int c = cue(rng);
        std::vector<int> content(L);
        for (int& x : content) x = sym(rng);
        std::vector<int> source{c == kNumManifolds ? TaskVocab::kNeutralCue : TaskVocab::kCueBase + c};
        for (int x : content) source.push_back(v.source_token(x));
        std::uniform_int_distribution<int> mark(TaskVocab::kMarkerBase, TaskVocab::kNeutralMarker);
        std::vector<int> slots(L);
        for (int& x : slots) x = mark(rng);
        out.push_back(encode(source, render_target(v, content, slots)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subsets and splits

namespace detail {
inline std::array<std::vector<std::size_t>, kNumManifolds> strata(const CorpusManifest& m, std::uint64_t seed) {
    std::array<std::vector<std::size_t>, kNumManifolds> s;
    for (std::size_t i = 0; i < m.records.size(); ++i) s[index_of(m.records[i].manifold)].push_back(i);
    for (int k = 0; k < kNumManifolds; ++k) {
        Rng rng(derive_seed(seed, 0x57u, k));
        std::shuffle(s[k].begin(), s[k].end(), rng);
    }
    return s;
}

inline CorpusManifest pick(const CorpusManifest& m, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    CorpusManifest out;
    out.seed = m.seed;
    out.vocab_size = m.vocab_size;
    for (auto i : idx) out.records.push_back(m.records[i]);
    out.hours_nominal = out.records.size() / kRecordsPerHour;
    return out;
}
} // namespace detail

/// Stratified prefix of a seeded per-manifold shuffle; smaller fractions are
/// subsets of larger ones under the same seed.
inline CorpusManifest subset_by_scale(const CorpusManifest& m, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw DataError("subset_by_scale: fraction must be in (0, 1]");
    const auto s = detail::strata(m, seed);
    std::vector<std::size_t> idx;
    for (const auto& stratum : s) {
        const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(stratum.size())));
        idx.insert(idx.end(), stratum.begin(), stratum.begin() + std::min(take, stratum.size()));
    }
    if (idx.empty()) throw DataError("subset_by_scale: fraction " + std::to_string(fraction) + " selects no records");
    return detail::pick(m, std::move(idx));
}

struct Splits {
    CorpusManifest train, dev, test;
};

inline Splits split(const CorpusManifest& m, std::array<double, 3> ratios, std::uint64_t seed) {
    for (double r : ratios)
        if (!(r > 0.0)) throw DataError("split: ratios must be positive");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw DataError("split: ratios must sum to 1");
    const auto s = detail::strata(m, derive_seed(seed, 0x5Au));
    std::vector<std::size_t> tr, dv, te;
    for (const auto& stratum : s) {
        const auto n = static_cast<double>(stratum.size());
        const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
        const auto n_dev = std::min(stratum.size() - n_train, static_cast<std::size_t>(std::llround(ratios[1] * n)));
        tr.insert(tr.end(), stratum.begin(), stratum.begin() + n_train);
        dv.insert(dv.end(), stratum.begin() + n_train, stratum.begin() + n_train + n_dev);
        te.insert(te.end(), stratum.begin() + n_train + n_dev, stratum.end());
    }
    return {detail::pick(m, tr), detail::pick(m, dv), detail::pick(m, te)};
}

inline CorpusManifest only_manifold(const CorpusManifest& m, Manifold k) {
    CorpusManifest out = m;
    out.records.clear();
    for (const auto& r : m.records)
        if (r.manifold == k) out.records.push_back(r);
    out.hours_nominal = out.records.size() / kRecordsPerHour;
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence. Line 1 is {"_meta": {...}}; each further line is one record.

inline nlohmann::json to_json(const CorpusRecord& r) {
    return {{"id", r.id},
            {"source", r.source},
            {"target", r.target},
            {"manifold", std::string(to_string(r.manifold))},
            {"duration_s", r.duration_s},
            {"ref_text", r.ref_text},
            {"hyp_text", r.hyp_text},
            {"target_duration_s", r.target_duration_s},
            {"target_ref_text", r.target_ref_text},
            {"target_hyp_text", r.target_hyp_text}};
}

inline CorpusRecord record_from_json(const nlohmann::json& j) {
    CorpusRecord r;
    r.id = j.at("id").get<std::string>();
    r.source = j.at("source").get<std::vector<int>>();
    r.target = j.at("target").get<std::vector<int>>();
    r.manifold = manifold_from_string(j.at("manifold").get<std::string>());
    r.duration_s = j.at("duration_s").get<double>();
    r.ref_text = j.at("ref_text").get<std::string>();
    r.hyp_text = j.at("hyp_text").get<std::string>();
    r.target_duration_s = j.value("target_duration_s", r.duration_s);
    r.target_ref_text = j.value("target_ref_text", r.ref_text);
    r.target_hyp_text = j.value("target_hyp_text", r.hyp_text);
    return r;
}

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m, const nlohmann::json& extra_meta = {}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    nlohmann::json meta = {{"kind", "movekit.manifest"},
                           {"version", kVersion},
                           {"seed", m.seed},
                           {"vocab_size", m.vocab_size},
                           {"hours_nominal", m.hours_nominal},
                           {"n_records", m.records.size()}};
    if (!extra_meta.is_null()) meta["config"] = extra_meta;
    f << nlohmann::json{{"_meta", meta}}.dump() << '\n';
    for (const auto& r : m.records) f << to_json(r).dump() << '\n';
}

inline CorpusManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path.string());
    CorpusManifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (j.contains("_meta")) {
            const auto& meta = j["_meta"];
            m.seed = meta.value("seed", std::uint64_t{0});
            m.vocab_size = meta.value("vocab_size", 0);
            continue;
        }
        try {
            m.records.push_back(record_from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    m.hours_nominal = m.records.size() / kRecordsPerHour;
    return m;
}

} // namespace movekit

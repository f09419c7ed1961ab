// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Prompt-pool selection and the duration / WER quality filters with pair-level
// conjunction.

#include "movekit/core.hpp"
#include "movekit/synth_task.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace movekit {

enum class PromptKind { Laughter, Crying, Affective };

inline std::string_view to_string(PromptKind k) {
    switch (k) {
    case PromptKind::Laughter: return "Laughter";
    case PromptKind::Crying: return "Crying";
    case PromptKind::Affective: return "Affective";
    }
    return "?";
}

inline PromptKind prompt_kind_from_string(std::string_view s) {
    for (PromptKind k : {PromptKind::Laughter, PromptKind::Crying, PromptKind::Affective})
        if (to_string(k) == s) return k;
    throw DataError("unknown prompt kind '" + std::string(s) + "'");
}

struct PromptCandidate {
    std::string id;
    PromptKind kind = PromptKind::Affective;
    double detector_confidence = 0.0;
    bool human_verified = false;
};

inline constexpr double kLaughterConfidence = 0.99;

/// Laughter: confidence strictly above `threshold` and verified. Crying:
/// verified. Affective: always kept. Order is preserved.
inline std::vector<PromptCandidate> filter_prompts(const std::vector<PromptCandidate>& candidates,
                                                   double threshold = kLaughterConfidence) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("filter_prompts: threshold must be in [0, 1]");
    std::vector<PromptCandidate> out;
    for (const auto& c : candidates) {
        if (!(c.detector_confidence >= 0.0 && c.detector_confidence <= 1.0))
            throw DataError("prompt " + c.id + ": detector confidence outside [0, 1]");
        bool keep = false;
        switch (c.kind) {
        case PromptKind::Laughter: keep = c.detector_confidence > threshold && c.human_verified; break;
        case PromptKind::Crying: keep = c.human_verified; break;
        case PromptKind::Affective: keep = true; break;
        }
        if (keep) out.push_back(c);
    }
    return out;
}

inline constexpr double kMinDuration = 0.5;
inline constexpr double kMaxWer = 0.5;

inline bool duration_filter(double duration_s) {
    if (!(duration_s >= 0.0)) throw DataError("duration_filter: negative or NaN duration");
    return duration_s >= kMinDuration;
}

// ---------------------------------------------------------------------------
// Text normalisation

namespace detail {

inline std::vector<char32_t> utf8_decode(const std::string& s) {
    std::vector<char32_t> out;
    for (std::size_t i = 0; i < s.size();) {
        const auto c = static_cast<unsigned char>(s[i]);
        int len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
        if (len == 0 || i + len > s.size()) throw DataError("invalid UTF-8 input");
        char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
        for (int k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 0x2) throw DataError("invalid UTF-8 input");
            cp = (cp << 6) | (cc & 0x3F);
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

inline bool is_space(char32_t c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f' || c == 0xA0 || c == 0x3000;
}

inline bool is_punct(char32_t c) {
    if (c < 0x80) return std::ispunct(static_cast<int>(c)) != 0;
    return (c >= 0x2000 && c <= 0x206F && c != 0x3000) || (c >= 0x3001 && c <= 0x303F) ||
           (c >= 0xFF01 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) || (c >= 0xFF3B && c <= 0xFF40) ||
           (c >= 0xFF5B && c <= 0xFF65) || c == 0xA1 || c == 0xBF;
}

} // namespace detail

/// ASCII lowercase, punctuation removed, whitespace runs collapsed to one
/// space, trimmed. Idempotent.
inline std::string normalize_text(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char32_t c : detail::utf8_decode(s)) {
        if (detail::is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (detail::is_punct(c)) continue;
        if (pending_space) out += ' ';
        pending_space = false;
        if (c < 0x80)
            out += static_cast<char>(std::tolower(static_cast<int>(c)));
        else
            out += utf8_encode(c);
    }
    return out;
}

/// Normalised text split on whitespace; a word with any non-ASCII character
/// is split into single characters.
inline std::vector<std::string> wer_tokens(const std::string& s) {
    std::vector<std::string> out;
    const std::string n = normalize_text(s);
    std::size_t i = 0;
    while (i < n.size()) {
        std::size_t j = n.find(' ', i);
        if (j == std::string::npos) j = n.size();
        const std::string word = n.substr(i, j - i);
        const bool ascii = std::all_of(word.begin(), word.end(), [](char c) { return static_cast<unsigned char>(c) < 0x80; });
        if (ascii) {
            out.push_back(word);
        } else {
            for (char32_t cp : detail::utf8_decode(word)) out.push_back(utf8_encode(cp));
        }
        i = j + 1;
    }
    return out;
}

template <typename T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double word_error_rate(const std::string& ref, const std::string& hyp) {
    const auto r = wer_tokens(ref);
    if (r.empty()) throw DataError("word_error_rate: reference is empty after normalisation");
    return static_cast<double>(edit_distance(r, wer_tokens(hyp))) / static_cast<double>(r.size());
}

// ---------------------------------------------------------------------------
// Record and pair filters

struct FilterReport {
    std::string id;
    bool duration_pass = false;
    double wer = 0.0;
    bool wer_pass = false;
    bool overall_pass = false;
};

inline FilterReport record_filter(const std::string& id, double duration_s, const std::string& ref,
                                  const std::string& hyp, double max_wer = kMaxWer) {
    FilterReport r;
    r.id = id;
    r.duration_pass = duration_filter(duration_s);
    r.wer = word_error_rate(ref, hyp);
    r.wer_pass = r.wer <= max_wer;
    r.overall_pass = r.duration_pass && r.wer_pass;
    return r;
}

/// Source-language side of a corpus record.
inline FilterReport record_filter(const CorpusRecord& rec, double max_wer = kMaxWer) {
    return record_filter(rec.id, rec.duration_s, rec.ref_text, rec.hyp_text, max_wer);
}

/// Target-language side of a corpus record.
inline FilterReport target_filter(const CorpusRecord& rec, double max_wer = kMaxWer) {
    return record_filter(rec.id, rec.target_duration_s, rec.target_ref_text, rec.target_hyp_text, max_wer);
}

inline bool pair_filter(const FilterReport& en, const FilterReport& zh) {
    if (en.id != zh.id) throw DataError("pair_filter: id mismatch '" + en.id + "' vs '" + zh.id + "'");
    return en.overall_pass && zh.overall_pass;
}

struct FilterOutcome {
    std::vector<FilterReport> source, target;
    std::vector<bool> pair_pass;
    CorpusManifest kept;
};

inline FilterOutcome filter_manifest(const CorpusManifest& m, double max_wer = kMaxWer) {
    FilterOutcome out;
    out.kept.seed = m.seed;
    out.kept.vocab_size = m.vocab_size;
    for (const auto& rec : m.records) {
        out.source.push_back(record_filter(rec, max_wer));
        out.target.push_back(target_filter(rec, max_wer));
        const bool ok = pair_filter(out.source.back(), out.target.back());
        out.pair_pass.push_back(ok);
        if (ok) out.kept.records.push_back(rec);
    }
    out.kept.hours_nominal = out.kept.records.size() / kRecordsPerHour;
    return out;
}

inline nlohmann::json to_json(const FilterReport& r) {
    return {{"id", r.id}, {"duration_pass", r.duration_pass}, {"wer", r.wer}, {"wer_pass", r.wer_pass},
            {"overall_pass", r.overall_pass}};
}

/// One line per record: {"id", "source": report, "target": report, "pair_pass"}.
inline void write_filter_reports(const std::filesystem::path& path, const FilterOutcome& f) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (std::size_t i = 0; i < f.source.size(); ++i) {
        nlohmann::json src = to_json(f.source[i]), tgt = to_json(f.target[i]);
        src.erase("id");
        tgt.erase("id");
        out << nlohmann::json{{"id", f.source[i].id}, {"source", src}, {"target", tgt}, {"pair_pass", f.pair_pass[i]}}
                   .dump()
            << '\n';
    }
}

} // namespace movekit

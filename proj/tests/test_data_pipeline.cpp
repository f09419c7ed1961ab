// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#include "movekit/data_pipeline.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <iterator>
#include <random>
#include <set>

using namespace movekit;

namespace {

// Plain Wagner-Fischer table.
std::size_t dp_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) t[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) t[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            t[i][j] = std::min({t[i - 1][j] + 1, t[i][j - 1] + 1, t[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
    return t[a.size()][b.size()];
}

CorpusRecord rec(const std::string& id, double dur, const std::string& ref, const std::string& hyp) {
    CorpusRecord r;
    r.id = id;
    r.duration_s = r.target_duration_s = dur;
    r.ref_text = r.target_ref_text = ref;
    r.hyp_text = r.target_hyp_text = hyp;
    return r;
}

} // namespace

TEST(PromptFilter, StrictConfidenceBoundary) {
    const std::vector<PromptCandidate> c = {{"a", PromptKind::Laughter, 0.99, true},
                                            {"b", PromptKind::Laughter, 0.995, false},
                                            {"c", PromptKind::Laughter, 0.995, true},
                                            {"d", PromptKind::Affective, 0.0, false},
                                            {"e", PromptKind::Crying, 0.1, true},
                                            {"f", PromptKind::Crying, 1.0, false}};
    const auto kept = filter_prompts(c);
    std::vector<std::string> ids;
    for (const auto& k : kept) ids.push_back(k.id);
    EXPECT_EQ(ids, (std::vector<std::string>{"c", "d", "e"}));
}

TEST(PromptFilter, RangeChecks) {
    EXPECT_THROW(filter_prompts({}, 1.5), ConfigError);
    EXPECT_THROW(filter_prompts({{"x", PromptKind::Laughter, 1.2, true}}), DataError);
}

TEST(DurationFilter, Boundaries) {
    EXPECT_FALSE(duration_filter(0.49));
    EXPECT_TRUE(duration_filter(0.5));
    EXPECT_TRUE(duration_filter(10.0));
    EXPECT_FALSE(duration_filter(0.0));
    EXPECT_THROW(duration_filter(-0.1), DataError);
}

TEST(Normalize, Examples) {
    EXPECT_EQ(normalize_text("Hello, World!"), "hello world");
    EXPECT_EQ(normalize_text("  a   b "), "a b");
    EXPECT_EQ(normalize_text("hello world"), "hello world");
    EXPECT_EQ(normalize_text("你好，世界。"), "你好世界");
    EXPECT_EQ(normalize_text("a\tb　c"), "a b c");
}

TEST(Normalize, Idempotent) {
    for (const char* s : {"Hello, World!", "  x--y  Z.", "Ünïcode  Text!!", "中文，测试。 ok"}) {
        const auto once = normalize_text(s);
        EXPECT_EQ(normalize_text(once), once) << s;
    }
}

TEST(Normalize, RejectsBrokenUtf8) { EXPECT_THROW(normalize_text("\xff\xfe"), DataError); }

TEST(Wer, Examples) {
    EXPECT_EQ(word_error_rate("a b c", "a b c"), 0.0);
    EXPECT_NEAR(word_error_rate("a b c", "a x c"), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(word_error_rate("a b", ""), 1.0);
    EXPECT_EQ(word_error_rate("Hello, world", "hello world!"), 0.0);
    EXPECT_THROW(word_error_rate(" ,. ", "a"), DataError);
}

TEST(Wer, IdeographicFallsBackToCharacters) {
    EXPECT_NEAR(word_error_rate("你好世界", "你好世"), 0.25, 1e-15);
    EXPECT_NEAR(word_error_rate("你好世界", "你们世界"), 0.25, 1e-15);
}

TEST(Wer, MatchesDpOracleAndBound) {
    std::mt19937 rng(3);
    std::uniform_int_distribution<int> len(1, 8), tok(0, 3), hlen(0, 8);
    for (int t = 0; t < 200; ++t) {
        std::vector<std::string> r, h;
        for (int i = len(rng); i > 0; --i) r.push_back(std::string(1, 'a' + tok(rng)));
        for (int i = hlen(rng); i > 0; --i) h.push_back(std::string(1, 'a' + tok(rng)));
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& w : v) s += (s.empty() ? "" : " ") + w;
            return s;
        };
        const double w = word_error_rate(join(r), join(h));
        EXPECT_NEAR(w, static_cast<double>(dp_distance(r, h)) / r.size(), 1e-15);
        EXPECT_LE(w, static_cast<double>(r.size() + h.size()) / r.size() + 1e-15);
    }
}

TEST(RecordFilter, Boundaries) {
    EXPECT_TRUE(record_filter("x", 1.0, "a b", "a c").wer_pass); // 0.5 exactly
    // 51 of 100 words wrong
    std::string ref, hyp;
    for (int i = 0; i < 100; ++i) {
        ref += "w" + std::to_string(i) + " ";
        hyp += (i < 51 ? "x" : "w") + std::to_string(i) + " ";
    }
    const auto r51 = record_filter("x", 1.0, ref, hyp);
    EXPECT_NEAR(r51.wer, 0.51, 1e-15);
    EXPECT_FALSE(r51.overall_pass);
    const auto short_clip = record_filter("x", 0.3, "a b c d e f g h i j", "a b c d e f g h i x");
    EXPECT_TRUE(short_clip.wer_pass);
    EXPECT_FALSE(short_clip.overall_pass);
}

TEST(PairFilter, Conjunction) {
    const auto pass = record_filter("p", 1.0, "a", "a"), fail = record_filter("p", 0.1, "a", "a");
    EXPECT_TRUE(pair_filter(pass, pass));
    EXPECT_FALSE(pair_filter(pass, fail));
    EXPECT_FALSE(pair_filter(fail, pass));
    EXPECT_FALSE(pair_filter(fail, fail));
    EXPECT_THROW(pair_filter(pass, record_filter("q", 1.0, "a", "a")), DataError);
}

TEST(FilterManifest, PairSetIsIntersection) {
    const auto m = generate_corpus(4, 300, 47, {3, 8});
    const auto out = filter_manifest(m);
    std::set<std::string> src, tgt, kept;
    for (const auto& r : out.source)
        if (r.overall_pass) src.insert(r.id);
    for (const auto& r : out.target)
        if (r.overall_pass) tgt.insert(r.id);
    for (const auto& r : out.kept.records) kept.insert(r.id);
    std::set<std::string> both;
    std::set_intersection(src.begin(), src.end(), tgt.begin(), tgt.end(), std::inserter(both, both.end()));
    EXPECT_EQ(kept, both);
    EXPECT_LT(kept.size(), m.size()); // the simulated recognizer and clipping reject some
    EXPECT_GT(kept.size(), m.size() / 2);
}

TEST(FilterManifest, LowerThresholdNeverGrows) {
    const auto m = generate_corpus(4, 200, 47, {3, 8});
    std::size_t prev = m.size() + 1;
    for (double t : {1.0, 0.75, 0.5, 0.25, 0.1, 0.0}) {
        const auto n = filter_manifest(m, t).kept.size();
        EXPECT_LE(n, prev) << t;
        prev = n;
    }
}

TEST(FilterManifest, FixtureMatchesBruteForce) {
    CorpusManifest m;
    m.vocab_size = 47;
    m.records = {rec("a", 0.49, "x y", "x y"), rec("b", 0.5, "x y", "x z"), rec("c", 2.0, "x y z", "q r z"),
                 rec("d", 1.0, "x", "x")};
    m.records[3].target_hyp_text = "nope nope";
    const auto out = filter_manifest(m);
    ASSERT_EQ(out.kept.size(), 1u);
    EXPECT_EQ(out.kept.records[0].id, "b");
}

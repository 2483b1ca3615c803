#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "klp/matcher.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace klp;

namespace {

EmbeddingVector vec(std::vector<double> v) { return EmbeddingVector(std::move(v)); }

ScoreCache two_attribute_cache() {
    return ScoreCache({{{"color", "a"}, vec({0.5, std::sqrt(0.75), 0.0}), 1.5},
                       {{"color", "b"}, vec({0.6, 0.0, 0.8}), 1.0}});
}

AttributeVocabulary vocab_of(const std::map<Attribute, std::size_t>& freq) {
    AttributeVocabulary v;
    for (const auto& [a, f] : freq) v.retained.push_back(a);
    v.frequencies = FrequencyTable(freq);
    return v;
}

}  // namespace

TEST(AttributeWeight, Defaults) {
    EXPECT_EQ(attribute_weight(0), 1.0);
    EXPECT_EQ(attribute_weight(100), 1.1);
    EXPECT_EQ(attribute_weight(10000), 2.0);
    WeightConfig cfg{2.0, 0.5, 1.0};
    EXPECT_DOUBLE_EQ(attribute_weight(4, cfg), 4.0);
    for (std::size_t f = 0; f < 5000; ++f) EXPECT_LE(attribute_weight(f), attribute_weight(f + 1));
    EXPECT_THROW((WeightConfig{-1.0, 0.0, 0.5}).validate(), ValidationError);
}

TEST(ScoreCacheBuild, OneEntryPerAttribute) {
    const Attribute popular{"color", "black"}, rare{"color", "teal"}, unstored{"style", "boho"};
    const auto vocab = vocab_of({{popular, 10000}, {rare, 3}, {unstored, 1}});
    EmbeddingStore store(4);
    store.insert(popular.text(), vec({1, 0, 0, 0}));
    store.insert(rare.text(), vec({0, 2, 0, 0}));
    const auto head = identity_head(4);

    EXPECT_THROW(build_score_cache(vocab, head, store, {}), ValidationError);
    const AttributeEmbedder fallback = [](const Attribute&) { return vec({0, 0, 1, 1}); };
    const auto cache = build_score_cache(vocab, head, store, {}, true, fallback);
    EXPECT_EQ(cache.size(), 3u);
    EXPECT_EQ(cache.find(popular)->weight, 2.0);
    EXPECT_NEAR(cache.find(rare)->embedding.norm(), 1.0, 1e-15);
    const auto again = build_score_cache(vocab, head, store, {}, true, fallback);
    ASSERT_EQ(again.size(), cache.size());
    for (std::size_t i = 0; i < cache.size(); ++i) {
        EXPECT_EQ(again.entries()[i].attribute, cache.entries()[i].attribute);
        EXPECT_EQ(again.entries()[i].embedding, cache.entries()[i].embedding);
        EXPECT_EQ(again.entries()[i].weight, cache.entries()[i].weight);
    }
    EXPECT_EQ(build_score_cache(vocab, head, store, {}, false, fallback).find(popular)->weight, 1.0);
}

TEST(ScoreProduct, Examples) {
    const ScoreCache cache({{{"color", "x"}, vec({0, 1, 0}), 1.0}, {{"color", "y"}, vec({1, 0, 0}), 1.0}});
    const auto s = score_product(vec({1, 0, 0}), cache);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].attribute, (Attribute{"color", "y"}));
    EXPECT_DOUBLE_EQ(s[0].adjusted, 1.0);

    const auto flip = score_product(vec({1, 0, 0}), two_attribute_cache());
    EXPECT_EQ(flip[0].attribute.value, "a");
    EXPECT_NEAR(flip[0].raw_sim, 0.5, 1e-15);
    EXPECT_NEAR(flip[0].adjusted, 0.75, 1e-15);
    EXPECT_NEAR(flip[1].adjusted, 0.6, 1e-15);
    for (const auto& x : flip) EXPECT_EQ(x.adjusted, x.weight * x.raw_sim);

    EXPECT_TRUE(score_product(vec({1, 0, 0}), ScoreCache{}).empty());
    EXPECT_THROW(score_product(vec({1, 0}), two_attribute_cache()), Error);
}

TEST(AssignAttributes, Thresholds) {
    const auto scored = score_product(vec({1, 0, 0}), two_attribute_cache());
    MatcherConfig cfg;
    cfg.theta = -1e300;
    EXPECT_EQ(assign_attributes("p", scored, cfg).matched.size(), 2u);
    cfg.theta = 0.8;
    EXPECT_TRUE(assign_attributes("p", scored, cfg).matched.empty());
    cfg.theta = 0.7;
    const auto r = assign_attributes("p", scored, cfg);
    ASSERT_EQ(r.matched.size(), 1u);
    EXPECT_NEAR(r.matched[0].adjusted, 0.75, 1e-15);
    cfg.theta = 0.55;
    cfg.threshold_on_raw = true;
    EXPECT_EQ(assign_attributes("p", scored, cfg).matched.at(0).attribute.value, "b");
    cfg = {};
    cfg.theta = 0.0;
    cfg.max_attributes_per_product = 1;
    EXPECT_EQ(assign_attributes("p", scored, cfg).matched.size(), 1u);
}

TEST(Matcher, NaiveOracleAndMonotonicity) {
    std::mt19937_64 rng(29);
    std::normal_distribution<double> n(0.0, 1.0);
    const std::size_t d = 12;
    std::map<Attribute, std::size_t> freq;
    EmbeddingStore store(d);
    for (int j = 0; j < 40; ++j) {
        Attribute a{j % 2 ? "color" : "style", "v" + std::to_string(j)};
        freq[a] = rng() % 20000;
        std::vector<double> v(d);
        for (auto& x : v) x = n(rng);
        store.insert(a.text(), vec(v));
    }
    const auto vocab = vocab_of(freq);
    const auto head = identity_head(d);
    const auto cache = build_score_cache(vocab, head, store, {});

    std::vector<Attribute> attrs;
    oracle::Mat attr_vectors;
    std::vector<double> weights;
    for (const auto& a : vocab.retained) {
        attrs.push_back(a);
        attr_vectors.push_back(store.at(a.text()).to_std());
        weights.push_back(attribute_weight(freq[a]));
    }

    for (int t = 0; t < 50; ++t) {
        std::vector<double> p(d);
        for (auto& x : p) x = n(rng);
        const auto unit = vec(p).normalized();
        MatcherConfig cfg;
        cfg.theta = 0.1;
        const auto got = assign_attributes("p", score_product(unit, cache), cfg);
        const auto want = oracle::naive_assign("p", unit.to_std(), attrs, attr_vectors, weights, cfg.theta);
        ASSERT_EQ(got.matched.size(), want.matched.size());
        for (std::size_t i = 0; i < got.matched.size(); ++i) {
            EXPECT_EQ(got.matched[i].attribute, want.matched[i].attribute);
            EXPECT_NEAR(got.matched[i].raw_sim, want.matched[i].raw_sim, 1e-12);
            EXPECT_NEAR(got.matched[i].adjusted, want.matched[i].adjusted, 1e-12);
        }

        // Raising theta shrinks the assignment.
        const auto scored = score_product(unit, cache);
        MatcherConfig hi = cfg;
        hi.theta = 0.3;
        const auto big = assign_attributes("p", scored, cfg);
        const auto small = assign_attributes("p", scored, hi);
        for (const auto& s : small.matched) EXPECT_NE(big.find(s.attribute), nullptr);
        for (const auto& s : got.matched) EXPECT_GE(s.adjusted, cfg.theta);

        // Scaling raw sims by c > 0 keeps the order.
        std::vector<ScoredAttribute> scaled = scored;
        for (auto& s : scaled) {
            s.raw_sim *= 3.5;
            s.adjusted = s.weight * s.raw_sim;
        }
        std::vector<ScoredAttribute> resorted = scaled;
        std::sort(resorted.begin(), resorted.end(), ranks_before);
        for (std::size_t i = 0; i < scaled.size(); ++i) EXPECT_EQ(resorted[i].attribute, scaled[i].attribute);
    }
}

TEST(AssignmentFile, RoundTrip) {
    const auto scored = score_product(vec({1, 0, 0}), two_attribute_cache());
    MatcherConfig cfg;
    cfg.theta = 0.0;
    const std::vector<AttributeAssignment> all = {assign_attributes("p1", scored, cfg),
                                                  assign_attributes("p2", {}, cfg)};
    testutil::TempDir dir;
    const auto path = testutil::write(dir / "a.jsonl", serialize_assignments(all));
    EXPECT_EQ(load_assignments(path), all);
    const auto j = to_json(all[0]);
    for (const char* k : {"category", "value", "raw_sim", "weight", "adjusted"}) EXPECT_TRUE(j["matched"][0].contains(k));
}

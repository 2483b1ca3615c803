#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "klp/querygen.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace klp;

namespace {

Attribute at(const std::string& c, const std::string& v) { return make_attribute(c, v); }

AttributeAssignment assigned(const std::string& id, const std::vector<Attribute>& attrs) {
    AttributeAssignment a{id, {}};
    for (const auto& x : attrs) a.matched.push_back({x, 0.5, 1.0, 0.5});
    return a;
}

AttributeCombination combo(std::vector<Attribute> attrs, std::size_t support = 10) {
    std::sort(attrs.begin(), attrs.end());
    return {std::move(attrs), support};
}

bool structurally_valid(const AttributeCombination& c) {
    try {
        check_combination(c);
        return true;
    } catch (const ValidationError&) {
        return false;
    }
}

clients::ChatClient stub_client(std::shared_ptr<clients::StubTransport> stub) {
    clients::ClientConfig cfg;
    cfg.endpoint_url = "http://stub.invalid/v1/chat/completions";
    cfg.model_name = "test-model";
    cfg.max_retries = 0;
    return clients::ChatClient(cfg, std::move(stub), [](clients::Millis) {});
}

clients::PromptTemplate generation_prompt() {
    return clients::load_prompt_template(testutil::data_file("prompts/query_generation.txt").string());
}

}  // namespace

TEST(Enumerate, SingleProductYieldsItsSubsets) {
    const std::vector<AttributeAssignment> one = {
        assigned("p1", {at("category_l2", "dresses"), at("color", "red"), at("season", "summer")})};
    EnumerationConfig cfg;
    cfg.min_support = 1;
    const auto got = enumerate_combinations(one, cfg);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(got[0].support, 1u);
    EXPECT_EQ(got[0].key(), "category_l2:dresses|color:red|season:summer");
    cfg.min_support = 2;
    EXPECT_TRUE(enumerate_combinations(one, cfg).empty());
}

TEST(Enumerate, UnanchoredAndRepeatedCategoriesExcluded) {
    const std::vector<AttributeAssignment> rows = {
        assigned("p1", {at("color", "red"), at("color", "blue"), at("season", "summer"), at("style", "boho")}),
        assigned("p2", {at("color", "red"), at("color", "blue"), at("season", "summer"), at("style", "boho")})};
    EnumerationConfig cfg;
    cfg.min_support = 1;
    EXPECT_TRUE(enumerate_combinations(rows, cfg).empty());
}

TEST(Enumerate, MatchesExhaustiveOracle) {
    const std::vector<std::pair<std::string, std::vector<std::string>>> pools = {
        {"category_l1", {"clothing", "shoes"}},
        {"category_l2", {"dresses", "boots", "skirts"}},
        {"color", {"red", "black", "white", "green"}},
        {"season", {"summer", "winter"}},
        {"style", {"boho", "casual", "formal"}},
        {"material", {"cotton", "wool"}}};
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        std::mt19937_64 rng(seed);
        std::vector<AttributeAssignment> rows;
        for (int p = 0; p < 50; ++p) {
            std::vector<Attribute> attrs;
            for (const auto& [cat, values] : pools) {
                if (rng() % 3 == 0) continue;
                attrs.push_back(at(cat, values[rng() % values.size()]));
            }
            rows.push_back(assigned("p" + std::to_string(p), attrs));
        }
        for (std::size_t min_support : {1u, 2u, 3u, 5u}) {
            for (unsigned workers : {1u, 4u}) {
                EnumerationConfig cfg;
                cfg.min_support = min_support;
                cfg.workers = workers;
                const auto got = enumerate_combinations(rows, cfg);
                std::vector<AttributeCombination> want;
                for (auto& c : oracle::exhaustive_combinations(rows, min_support)) {
                    if (structurally_valid(c)) want.push_back(c);
                }
                ASSERT_EQ(got, want) << "seed " << seed << " min_support " << min_support;
                for (const auto& c : got) EXPECT_NO_THROW(check_combination(c));
            }
        }
    }
}

TEST(Rules, RedundantAndConflicting) {
    const auto rules = load_rules(testutil::data_file("rules/default_rules.jsonl"));
    const auto rings = combo({at("category_l2", "rings"), at("shape", "round"), at("material", "gold")});
    const auto v1 = validate_combination(rings, rules);
    EXPECT_FALSE(v1.valid);
    ASSERT_TRUE(v1.reason);
    EXPECT_NE(v1.reason->find("shape:round"), std::string::npos);

    const auto wool = combo({at("category_l2", "sweaters"), at("material", "wool"), at("season", "summer")});
    const auto v2 = validate_combination(wool, rules);
    EXPECT_FALSE(v2.valid);
    EXPECT_NE(v2.reason->find("conflict"), std::string::npos);

    EXPECT_TRUE(validate_combination(combo({at("category_l2", "dresses"), at("color", "red"), at("season", "summer")}),
                                     rules)
                    .valid);

    std::istringstream bad(R"({"type": "maybe", "left": {"category": "color", "value": "red"}, "right": {"category": "color", "value": "blue"}})");
    EXPECT_THROW(parse_rules(bad), ParseError);
}

TEST(FallbackTitles, SlotOrder) {
    const auto t = TitleTemplates::defaults();
    EXPECT_EQ(synthesize_title_fallback(
                  combo({at("brand", "michael kors"), at("color", "black"), at("category_l2", "sunglasses")}), t),
              "Michael Kors Black Sunglasses");
    EXPECT_EQ(synthesize_title_fallback(combo({at("color", "black"), at("details", "long sleeve"),
                                               at("category_l2", "dress"), at("festival", "new year's eve")}),
                                        t),
              "Black Long Sleeve Dress for New Year's Eve");
    EXPECT_THROW(synthesize_title_fallback(combo({at("color", "black"), at("style", "boho"), at("season", "fall")}), t),
                 ValidationError);
}

TEST(FallbackScore, Quantiles) {
    EXPECT_EQ(nearest_rank({5, 1, 4, 2, 3}, 0.5), 3u);
    EXPECT_EQ(nearest_rank({1, 2, 3, 4, 5}, 0.8), 4u);
    EXPECT_EQ(nearest_rank({7}, 0.8), 7u);
    EXPECT_EQ(nearest_rank({}, 0.5), 0u);

    const auto a = at("category_l2", "dresses"), b = at("color", "red"), c = at("season", "summer"),
               d = at("style", "boho");
    FrequencyTable freq({{a, 100}, {b, 50}, {c, 80}, {d, 2}});
    const SupportQuantiles q{20, 40, 50};

    EXPECT_EQ(score_searchability_fallback(combo({a, b, c}, 100), freq, q), 5);
    EXPECT_EQ(score_searchability_fallback(combo({a, b, c, d}, 5), freq, q), 1);
    // Exactly at p80 earns both support points.
    EXPECT_EQ(score_searchability_fallback(combo({a, b, c, d}, 40), freq, q), 3);
    EXPECT_EQ(score_searchability_fallback(combo({a, b, c, d}, 39), freq, q), 2);

    const auto quantiles = compute_quantiles({combo({a, b, c}, 1), combo({a, b, d}, 2), combo({a, c, d}, 3),
                                              combo({b, c, a}, 4), combo({a, d, b}, 5)},
                                             freq);
    EXPECT_EQ(quantiles.p50, 3u);
    EXPECT_EQ(quantiles.p80, 4u);
    EXPECT_EQ(quantiles.median_frequency, 50u);
}

TEST(GenerateFallback, CarriesRuleVerdict) {
    const auto rules = load_rules(testutil::data_file("rules/default_rules.jsonl"));
    const auto combination = combo({at("category_l2", "rings"), at("shape", "round"), at("material", "gold")});
    const auto q = generate_fallback(combination, rules, TitleTemplates::defaults(), FrequencyTable{}, {});
    EXPECT_FALSE(q.valid);
    EXPECT_EQ(q.generator, Generator::fallback);
    EXPECT_EQ(q.title, "Gold Round Rings");
}

TEST(GenerateWithLlm, ValidReply) {
    auto stub = std::make_shared<clients::StubTransport>();
    stub->reply(R"({"valid": true, "title": "Summer Yellow Dress for Parties", "score": 5})");
    const auto client = stub_client(stub);
    const auto c = combo({at("category_l2", "dress"), at("color", "yellow"), at("season", "summer"),
                          at("occasion", "party")});
    const auto q = generate_with_llm(c, client, generation_prompt());
    EXPECT_TRUE(q.valid);
    EXPECT_EQ(q.title, "Summer Yellow Dress for Parties");
    EXPECT_EQ(q.searchability, 5);
    EXPECT_EQ(q.generator, Generator::llm);
    const auto sent = nlohmann::json::parse(stub->requests().at(0).body).dump();
    EXPECT_NE(sent.find("color: yellow"), std::string::npos);
}

TEST(GenerateWithLlm, InvalidReplyKeepsReason) {
    auto stub = std::make_shared<clients::StubTransport>();
    stub->reply("```json\n{\"valid\": false, \"reason\": \"contradictory seasons\"}\n```");
    const auto q = generate_with_llm(combo({at("category_l2", "coats"), at("color", "red"), at("style", "casual")}),
                                     stub_client(stub), generation_prompt());
    EXPECT_FALSE(q.valid);
    EXPECT_EQ(q.invalid_reason, "contradictory seasons");
}

TEST(GenerateWithLlm, OutOfRangeScoreRetriedThenFails) {
    auto stub = std::make_shared<clients::StubTransport>();
    stub->otherwise({std::nullopt, {200, clients::StubTransport::completion_body(
                                             R"({"valid": true, "title": "Red Coats", "score": 7})")}});
    EXPECT_THROW(generate_with_llm(combo({at("category_l2", "coats"), at("color", "red"), at("style", "casual")}),
                                   stub_client(stub), generation_prompt()),
                 clients::ResponseParseError);
    EXPECT_EQ(stub->calls(), 2u);

    auto recovering = std::make_shared<clients::StubTransport>();
    recovering->reply("no json here").reply(R"({"valid": true, "title": "Red Coats", "score": 3})");
    const auto q = generate_with_llm(combo({at("category_l2", "coats"), at("color", "red"), at("style", "casual")}),
                                     stub_client(recovering), generation_prompt());
    EXPECT_EQ(q.searchability, 3);
    EXPECT_EQ(recovering->calls(), 2u);
}

TEST(GenerateWithLlm, RuleViolationSkipsCall) {
    auto stub = std::make_shared<clients::StubTransport>();
    const auto rules = load_rules(testutil::data_file("rules/default_rules.jsonl"));
    const auto q = generate_with_llm(combo({at("category_l2", "rings"), at("shape", "round"), at("color", "gold")}),
                                     stub_client(stub), generation_prompt(), rules);
    EXPECT_FALSE(q.valid);
    EXPECT_EQ(stub->calls(), 0u);
}

TEST(FilterQueries, ScoreValidityAndDuplicates) {
    auto make = [](std::string title, int score, bool valid, std::size_t support, const std::string& colour) {
        GeneratedQuery q;
        q.title = std::move(title);
        q.searchability = score;
        q.valid = valid;
        q.combination = combo({at("category_l2", "dresses"), at("color", colour), at("season", "summer")}, support);
        return q;
    };
    const std::vector<GeneratedQuery> all = {make("A", 5, true, 10, "red"), make("B", 3, true, 10, "red"),
                                             make("C", 5, false, 10, "red"), make("D", 4, true, 5, "red"),
                                             make("D", 4, true, 9, "blue"), make("A", 4, true, 10, "green")};
    const auto kept = filter_queries(all, 4);
    ASSERT_EQ(kept.size(), 2u);
    // Survivors keep their input order.
    EXPECT_EQ(kept[0].title, "D");
    EXPECT_EQ(kept[0].combination.support, 9u);
    EXPECT_EQ(kept[1].title, "A");
    EXPECT_EQ(kept[1].combination.attributes[1].value, "green");  // equal support, smaller key
    for (int s = 1; s <= 5; ++s) {
        for (const auto& q : filter_queries(all, s)) EXPECT_GE(q.searchability, s);
    }
    EXPECT_THROW(filter_queries(all, 6), ValidationError);
}

TEST(QueryFile, RoundTrip) {
    GeneratedQuery q;
    q.title = "Red Summer Dresses";
    q.combination = combo({at("category_l2", "dresses"), at("color", "red"), at("season", "summer")}, 12);
    q.searchability = 4;
    q.generator = Generator::llm;
    GeneratedQuery bad = q;
    bad.valid = false;
    bad.invalid_reason = "conflict";
    testutil::TempDir dir;
    const auto path = testutil::write(dir / "q.jsonl", serialize_queries({q, bad}));
    const auto back = load_queries(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], q);
    EXPECT_EQ(back[1], bad);
}

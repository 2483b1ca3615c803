#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "klp/eval.hpp"

using namespace klp;

namespace {

Attribute at(const std::string& c, const std::string& v) { return make_attribute(c, v); }

std::vector<ScoredAttribute> ranked(const std::vector<Attribute>& attrs) {
    std::vector<ScoredAttribute> out;
    double s = 1.0;
    for (const auto& a : attrs) {
        out.push_back({a, s, 1.0, s});
        s -= 0.01;
    }
    return out;
}

std::vector<Attribute> distractors(std::size_t n) {
    std::vector<Attribute> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(at("style", "d" + std::to_string(100 + i)));
    return out;
}

/// Hit placed at 1-based rank r among distractors.
LabeledExample hit_at(const std::string& id, std::size_t r) {
    auto attrs = distractors(15);
    const auto truth = at("color", "red");
    attrs.insert(attrs.begin() + static_cast<std::ptrdiff_t>(r - 1), truth);
    return {id, {truth}, ranked(attrs)};
}

Collection collection(const std::string& title, std::vector<Attribute> attrs, std::size_t n) {
    Collection c;
    std::sort(attrs.begin(), attrs.end());
    c.query = {title, attrs, 4};
    for (std::size_t i = 0; i < n; ++i) c.entries.push_back({"p" + std::to_string(i), 1.0 - 0.01 * i, {}});
    return c;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, equal = 0;
        for (double w : v) {
            less += w < v[i];
            equal += w == v[i];
        }
        r[i] = less + (equal + 1) / 2;
    }
    return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= x.size();
    my /= y.size();
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST(Recall, PerfectAndMissing) {
    const auto red = at("color", "red");
    const std::vector<LabeledExample> perfect = {{"p1", {red}, ranked({red, at("color", "blue")})}};
    EXPECT_EQ(recall_at_k(perfect, 1).value, 1.0);
    const std::vector<LabeledExample> missing = {{"p1", {at("color", "green")}, ranked(distractors(12))}};
    EXPECT_EQ(recall_at_k(missing, 10).value, 0.0);
    EXPECT_THROW(recall_at_k(perfect, 0), ValidationError);
    EXPECT_THROW(recall_at_k({}, 1), ValidationError);
    auto unsorted = perfect;
    std::swap(unsorted[0].predicted[0], unsorted[0].predicted[1]);
    EXPECT_THROW(recall_at_k(unsorted, 1), ValidationError);
}

TEST(Recall, HitRanks) {
    const std::vector<LabeledExample> ex = {hit_at("a", 1), hit_at("b", 3), hit_at("c", 11)};
    const auto r10 = recall_at_k(ex, 10);
    EXPECT_DOUBLE_EQ(r10.value, 2.0 / 3.0);
    EXPECT_EQ(r10.n, 3u);
    EXPECT_EQ(r10.metric, "recall");
    EXPECT_DOUBLE_EQ(recall_at_k(ex, 1).value, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(recall_at_k(ex, 11).value, 1.0);
    double prev = 0.0;
    for (std::size_t k = 1; k <= 20; ++k) {
        const double v = recall_at_k(ex, k).value;
        EXPECT_GE(v, prev);
        prev = v;
    }
}

TEST(Recall, AllMustHit) {
    const auto red = at("color", "red"), dress = at("category_l2", "dresses");
    auto attrs = distractors(5);
    attrs.insert(attrs.begin(), red);
    attrs.push_back(dress);
    const std::vector<LabeledExample> ex = {{"p", {red, dress}, ranked(attrs)}};
    EXPECT_EQ(recall_at_k(ex, 3).value, 1.0);
    const auto strict = recall_at_k(ex, 3, true);
    EXPECT_EQ(strict.value, 0.0);
    EXPECT_EQ(strict.metric, "recall_all");
    EXPECT_EQ(recall_at_k(ex, 7, true).value, 1.0);
}

TEST(Precision, PerfectAndNinetyPercent) {
    const auto red = at("color", "red"), dress = at("category_l2", "dresses"), summer = at("season", "summer");
    GroundTruth truth;
    for (int i = 0; i < 10; ++i) truth["p" + std::to_string(i)] = {red, dress, summer};
    const auto c = collection("Red Summer Dresses", {red, dress, summer}, 10);
    const auto perfect = precision_at_k({c}, truth, 10);
    EXPECT_EQ(perfect.back().metric, "precision");
    EXPECT_EQ(perfect.back().category, "overall");
    EXPECT_EQ(perfect.back().value, 1.0);
    EXPECT_EQ(perfect.back().n, 30u);

    truth["p9"] = {dress, summer};
    const auto reports = precision_at_k({c}, truth, 10);
    ASSERT_EQ(reports.size(), 4u);
    for (const auto& r : reports) {
        if (r.category == "color") EXPECT_DOUBLE_EQ(r.value, 0.9);
        else if (r.category != "overall") EXPECT_EQ(r.value, 1.0);
    }
    EXPECT_DOUBLE_EQ(reports.back().value, (0.9 + 1.0 + 1.0) / 3.0);

    // k beyond the feed length uses the whole feed.
    const auto short_feed = collection("Red Summer Dresses", {red, dress, summer}, 4);
    const auto r = precision_at_k({short_feed}, truth, 10);
    EXPECT_EQ(r.back().n, 12u);
    EXPECT_EQ(r.back().value, 1.0);

    truth.erase("p3");
    EXPECT_THROW(precision_at_k({c}, truth, 10), ValidationError);
}

TEST(Spearman, ClosedFormsAndOracle) {
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-15);
    EXPECT_THROW(spearman({1, 1, 1}, {1, 2, 3}), NumericError);
    std::mt19937_64 rng(8);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 3 + rng() % 20;
        std::vector<double> x(n), y(n);
        for (auto& v : x) v = static_cast<double>(rng() % 6);
        for (auto& v : y) v = static_cast<double>(rng() % 6);
        if (*std::min_element(x.begin(), x.end()) == *std::max_element(x.begin(), x.end())) continue;
        if (*std::min_element(y.begin(), y.end()) == *std::max_element(y.begin(), y.end())) continue;
        EXPECT_NEAR(spearman(x, y), pearson(average_ranks(x), average_ranks(y)), 1e-12);
    }
}

TEST(Alignment, SharedAttributesOnly) {
    const auto a = at("color", "red"), b = at("color", "blue"), c = at("color", "green"), d = at("color", "teal");
    const FrequencyTable training({{a, 100}, {b, 50}, {c, 10}, {d, 0}});
    const auto r = distribution_alignment({{a, 40}, {b, 20}, {c, 5}, {at("style", "boho"), 3}}, training);
    EXPECT_NEAR(r.rank_correlation, 1.0, 1e-15);
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_DOUBLE_EQ(r.rows[0].ratio, 20.0 / 50.0);
    EXPECT_THROW(distribution_alignment({{a, 1}, {b, 2}}, training), ValidationError);
    const auto zero = distribution_alignment({{a, 3}, {b, 2}, {d, 1}}, training);
    EXPECT_EQ(zero.rows.back().ratio, 0.0);
}

TEST(Reports, SerializationAndTable) {
    const std::vector<MetricReport> reports = {{"recall", 10, std::nullopt, 0.5, 4},
                                               {"precision", 10, std::string("color"), 0.9, 30}};
    const auto text = serialize_reports(reports);
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    EXPECT_FALSE(first.contains("category"));
    EXPECT_EQ(first["value"], 0.5);
    const auto table = render_report_table(reports);
    EXPECT_NE(table.find("precision"), std::string::npos);
    EXPECT_NE(table.find("color"), std::string::npos);
    std::vector<AttributeAssignment> rows = {{"p1", {{at("color", "red"), 1, 1, 1}}},
                                             {"p2", {{at("color", "red"), 1, 1, 1}, {at("color", "blue"), 1, 1, 1}}}};
    const auto counts = assignment_counts(rows);
    EXPECT_EQ(counts.at(at("color", "red")), 2u);
    EXPECT_EQ(counts.at(at("color", "blue")), 1u);
}

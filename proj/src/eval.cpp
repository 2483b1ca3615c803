#include "klp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "klp/error.hpp"

namespace klp {

using nlohmann::json;

MetricReport recall_at_k(const std::vector<LabeledExample>& examples, std::size_t k, bool all_must_hit) {
    if (k == 0) throw ValidationError("k must be >= 1");
    if (examples.empty()) throw ValidationError("recall_at_k needs at least one example");
    std::size_t hits = 0;
    for (const auto& ex : examples) {
        for (std::size_t i = 1; i < ex.predicted.size(); ++i) {
            if (ranks_before(ex.predicted[i], ex.predicted[i - 1])) {
                throw ValidationError("predictions for '" + ex.product_id + "' are not in ranking order");
            }
        }
        const std::size_t top = std::min(k, ex.predicted.size());
        std::size_t found = 0;
        for (std::size_t i = 0; i < top; ++i) found += ex.true_attributes.count(ex.predicted[i].attribute);
        const bool hit = all_must_hit ? (!ex.true_attributes.empty() && found == ex.true_attributes.size()) : found > 0;
        hits += hit ? 1 : 0;
    }
    MetricReport r;
    r.metric = all_must_hit ? "recall_all" : "recall";
    r.k = k;
    r.value = static_cast<double>(hits) / static_cast<double>(examples.size());
    r.n = examples.size();
    return r;
}

std::vector<MetricReport> precision_at_k(const std::vector<Collection>& collections, const GroundTruth& truth,
                                         std::size_t k) {
    if (k == 0) throw ValidationError("k must be >= 1");
    std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // category -> (hits, triples)
    for (const auto& c : collections) {
        const std::size_t top = std::min(k, c.entries.size());
        for (std::size_t i = 0; i < top; ++i) {
            const auto& id = c.entries[i].product_id;
            auto it = truth.find(id);
            if (it == truth.end()) throw ValidationError("no ground truth for product '" + id + "'");
            for (const auto& a : c.query.attributes) {
                auto& [hit, total] = tally[a.category];
                hit += it->second.count(a);
                ++total;
            }
        }
    }
    std::vector<MetricReport> out;
    double sum = 0.0;
    std::size_t triples = 0;
    for (const auto& [category, counts] : tally) {
        const double v = static_cast<double>(counts.first) / static_cast<double>(counts.second);
        out.push_back({"precision", k, category, v, counts.second});
        sum += v;
        triples += counts.second;
    }
    out.push_back({"precision", k, std::string("overall"), tally.empty() ? 0.0 : sum / static_cast<double>(tally.size()),
                   triples});
    return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ValidationError("spearman samples differ in size");
    if (x.size() < 3) throw ValidationError("spearman needs at least three points");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw NumericError("spearman is undefined for a constant sample");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

AlignmentResult distribution_alignment(const std::map<Attribute, std::size_t>& predicted,
                                       const FrequencyTable& training) {
    AlignmentResult out;
    std::vector<double> p, t;
    for (const auto& [a, count] : predicted) {
        auto it = training.counts().find(a);
        if (it == training.counts().end()) continue;
        const double ratio = it->second == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(it->second);
        out.rows.push_back({a, count, it->second, ratio});
        p.push_back(static_cast<double>(count));
        t.push_back(static_cast<double>(it->second));
    }
    if (out.rows.size() < 3) {
        throw ValidationError("distribution alignment needs at least 3 shared attributes, got " +
                              std::to_string(out.rows.size()));
    }
    out.rank_correlation = spearman(p, t);
    return out;
}

std::map<Attribute, std::size_t> assignment_counts(const std::vector<AttributeAssignment>& assignments) {
    std::map<Attribute, std::size_t> out;
    for (const auto& a : assignments) {
        for (const auto& s : a.matched) ++out[s.attribute];
    }
    return out;
}

json to_json(const MetricReport& r) {
    json j{{"metric", r.metric}, {"k", r.k}};
    if (r.category) j["category"] = *r.category;
    j["value"] = r.value;
    j["n"] = r.n;
    return j;
}

std::string serialize_reports(const std::vector<MetricReport>& reports) {
    std::string out;
    for (const auto& r : reports) out += to_json(r).dump() + '\n';
    return out;
}

std::string render_report_table(const std::vector<MetricReport>& reports) {
    std::size_t metric_w = 6, cat_w = 8;
    for (const auto& r : reports) {
        metric_w = std::max(metric_w, r.metric.size());
        cat_w = std::max(cat_w, r.category.value_or("-").size());
    }
    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(s.size(), w), ' ');
        return s;
    };
    std::string out = pad("metric", metric_w) + "  " + pad("k", 4) + "  " + pad("category", cat_w) + "  value   n\n";
    for (const auto& r : reports) {
        char value[32];
        std::snprintf(value, sizeof value, "%.4f", r.value);
        out += pad(r.metric, metric_w) + "  " + pad(std::to_string(r.k), 4) + "  " + pad(r.category.value_or("-"), cat_w) +
               "  " + value + "  " + std::to_string(r.n) + "\n";
    }
    return out;
}

}  // namespace klp

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "klp/catalog.hpp"
#include "klp/feedgen.hpp"
#include "klp/matcher.hpp"
#include "klp/vocab.hpp"

namespace klp {

struct LabeledExample {
    std::string product_id;
    std::set<Attribute> true_attributes;
    std::vector<ScoredAttribute> predicted;  // ranks_before order
};

struct MetricReport {
    std::string metric;
    std::size_t k = 0;
    std::optional<std::string> category;
    double value = 0.0;
    std::size_t n = 0;

    bool operator==(const MetricReport&) const = default;
};

/// Fraction of examples with a true attribute among the top-k predictions
/// (every true attribute when `all_must_hit`). Throws ValidationError for
/// k == 0, an empty list, or unsorted predictions.
MetricReport recall_at_k(const std::vector<LabeledExample>& examples, std::size_t k, bool all_must_hit = false);

using GroundTruth = std::map<std::string, std::set<Attribute>>;

/// Per-category precision over (collection, top-k entry, query attribute of
/// that category) triples, followed by an "overall" report: the unweighted
/// mean across the categories present. Per-category reports come in category
/// name order. Throws ValidationError when a top-k product has no truth.
std::vector<MetricReport> precision_at_k(const std::vector<Collection>& collections, const GroundTruth& truth,
                                         std::size_t k);

struct AlignmentRow {
    Attribute attribute;
    std::size_t predicted = 0;
    std::size_t training = 0;
    double ratio = 0.0;  // predicted / training; 0 when training is 0
};

struct AlignmentResult {
    double rank_correlation = 0.0;
    std::vector<AlignmentRow> rows;  // ascending attribute order
};

/// Spearman correlation (average ranks for ties) over the attributes present
/// in both tables. Throws ValidationError below three shared attributes.
AlignmentResult distribution_alignment(const std::map<Attribute, std::size_t>& predicted,
                                       const FrequencyTable& training);

/// Spearman correlation of two equally sized samples.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Number of products each attribute was assigned to.
std::map<Attribute, std::size_t> assignment_counts(const std::vector<AttributeAssignment>& assignments);

nlohmann::json to_json(const MetricReport& r);
std::string serialize_reports(const std::vector<MetricReport>& reports);
/// Fixed-width table: metric, k, category, value, n.
std::string render_report_table(const std::vector<MetricReport>& reports);

}  // namespace klp

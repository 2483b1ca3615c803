#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "klp/catalog.hpp"
#include "klp/clients.hpp"
#include "klp/matcher.hpp"
#include "klp/vocab.hpp"

namespace klp {

/// 3-4 attributes (ascending), at most one per category, at least one
/// category_l* anchor.
struct AttributeCombination {
    std::vector<Attribute> attributes;
    std::size_t support = 0;

    /// "category:value|category:value|..." in attribute order.
    std::string key() const;
    bool operator==(const AttributeCombination&) const = default;
};

/// Throws ValidationError describing the first broken invariant.
void check_combination(const AttributeCombination& combo);

enum class Generator { llm, fallback };
std::string_view to_string(Generator g);

struct GeneratedQuery {
    AttributeCombination combination;
    std::string title;
    int searchability = 1;
    bool valid = true;
    std::optional<std::string> invalid_reason;
    Generator generator = Generator::fallback;

    bool operator==(const GeneratedQuery&) const = default;
};

struct ValidationRules {
    std::vector<std::pair<Attribute, Attribute>> implied;    // left makes right redundant
    std::vector<std::pair<Attribute, Attribute>> conflicts;  // mutually exclusive
};

/// `{type: "implies"|"conflicts", left: {category, value}, right: {...}}` per line.
ValidationRules load_rules(const std::filesystem::path& path, const CategorySchema& schema = CategorySchema::builtin());
ValidationRules parse_rules(std::istream& in, const CategorySchema& schema = CategorySchema::builtin());

struct RuleVerdict {
    bool valid = true;
    std::optional<std::string> reason;
};

RuleVerdict validate_combination(const AttributeCombination& combo, const ValidationRules& rules);

struct EnumerationConfig {
    std::size_t min_support = 5;
    std::size_t min_size = 3;
    std::size_t max_size = 4;
    unsigned workers = 1;
};

/// Frequent attribute sets over the assignments (level-wise with apriori
/// pruning), restricted to valid combinations. Sorted by support desc, then
/// key asc.
std::vector<AttributeCombination> enumerate_combinations(const std::vector<AttributeAssignment>& assignments,
                                                         const EnumerationConfig& cfg);

/// Slot layout for rule-based titles:
/// [prefix slots...] [head noun] [connector suffix slots...]
struct TitleTemplates {
    std::vector<std::string> prefix_slots;
    std::vector<std::string> head_slots;  // most specific first
    std::vector<std::string> suffix_slots;
    std::string connector = "for";

    static TitleTemplates defaults(const CategorySchema& schema = CategorySchema::builtin());
};

/// Capitalizes the first letter of every space-separated word.
std::string title_case(std::string_view text);

/// Throws ValidationError when the combination has no category attribute.
std::string synthesize_title_fallback(const AttributeCombination& combo, const TitleTemplates& templates);

/// Nearest-rank quantiles over the run's combination supports plus the median
/// attribute frequency.
struct SupportQuantiles {
    std::size_t p50 = 0;
    std::size_t p80 = 0;
    std::size_t median_frequency = 0;
};

/// Smallest value v such that at least q of the sample is <= v.
std::size_t nearest_rank(std::vector<std::size_t> values, double q);

SupportQuantiles compute_quantiles(const std::vector<AttributeCombination>& combos, const FrequencyTable& freq);

/// 1 + number of: support >= p50, support >= p80, every attribute frequency
/// >= median, exactly three attributes.
int score_searchability_fallback(const AttributeCombination& combo, const FrequencyTable& freq,
                                 const SupportQuantiles& quantiles);

GeneratedQuery generate_fallback(const AttributeCombination& combo, const ValidationRules& rules,
                                 const TitleTemplates& templates, const FrequencyTable& freq,
                                 const SupportQuantiles& quantiles);

/// Renders "category: value, category: value, ..." for prompts.
std::string describe_attributes(const AttributeCombination& combo);

/// One chat round-trip covering validation, title synthesis and scoring.
/// Rule violations short-circuit to an invalid query without a call; a
/// malformed reply is retried once before ResponseParseError propagates.
GeneratedQuery generate_with_llm(const AttributeCombination& combo, const clients::ChatClient& client,
                                 const clients::PromptTemplate& prompt, const ValidationRules& rules = {});

/// Valid queries with searchability >= min_score; identical titles keep the
/// higher-support combination (ties: smaller key).
std::vector<GeneratedQuery> filter_queries(const std::vector<GeneratedQuery>& queries, int min_score = 4);

nlohmann::json to_json(const GeneratedQuery& q);
GeneratedQuery query_from_json(const nlohmann::json& j, const CategorySchema& schema = CategorySchema::builtin(),
                               std::size_t line = 0);
std::string serialize_queries(const std::vector<GeneratedQuery>& queries);
std::vector<GeneratedQuery> load_queries(const std::filesystem::path& path,
                                         const CategorySchema& schema = CategorySchema::builtin());

}  // namespace klp

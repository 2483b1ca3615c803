#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "klp/catalog.hpp"
#include "klp/embed.hpp"

namespace klp {

/// Product-level presence counts: an attribute listed twice for one product
/// counts once.
class FrequencyTable {
public:
    FrequencyTable() = default;
    explicit FrequencyTable(std::map<Attribute, std::size_t> counts) : counts_(std::move(counts)) {}

    std::size_t count(const Attribute& a) const;
    std::size_t total() const;
    std::size_t size() const noexcept { return counts_.size(); }
    bool empty() const noexcept { return counts_.empty(); }
    const std::map<Attribute, std::size_t>& counts() const noexcept { return counts_; }
    void set(const Attribute& a, std::size_t count) { counts_[a] = count; }

    bool operator==(const FrequencyTable&) const = default;

private:
    std::map<Attribute, std::size_t> counts_;
};

FrequencyTable count_frequencies(const std::vector<ProductAnnotation>& annotations);

/// { a : count(a) >= min_frequency }
std::set<Attribute> frequency_filter(const FrequencyTable& table, std::size_t min_frequency);

struct VocabConfig {
    std::size_t min_frequency = 2;
    double dedup_threshold = 0.9;
    bool dedup_cross_category = false;
    std::optional<std::filesystem::path> review_list_path;

    void validate() const;
};

struct AttributeVocabulary {
    std::vector<Attribute> retained;                  // ascending attribute order
    std::map<Attribute, Attribute> canonical_map;     // dropped variant -> retained representative
    FrequencyTable frequencies;                       // restricted to retained

    bool contains(const Attribute& a) const;
    /// The retained attribute `a` stands for: itself, its representative, or
    /// nothing if it was filtered out.
    std::optional<Attribute> canonicalize(const Attribute& a) const;

    bool operator==(const AttributeVocabulary&) const = default;
};

using AttributeEmbedder = std::function<EmbeddingVector(const Attribute&)>;

/// Greedy deduplication. Candidates are visited by descending frequency, ties
/// by ascending attribute text. A candidate is kept iff its cosine similarity
/// to every kept attribute (same category unless `cross_category`) is below
/// `threshold`; otherwise it maps to its most similar kept attribute.
AttributeVocabulary semantic_dedup(const std::set<Attribute>& attrs, const FrequencyTable& table,
                                   const AttributeEmbedder& embedder, double threshold,
                                   bool cross_category = false);

/// Removes listed attributes and drops canonical_map entries that pointed at
/// them.
AttributeVocabulary apply_review_list(const AttributeVocabulary& vocab, const std::set<Attribute>& review_list);

/// One `category:value` per line; `#` starts a comment.
std::set<Attribute> load_review_list(const std::filesystem::path& path,
                                     const CategorySchema& schema = CategorySchema::builtin());
std::set<Attribute> parse_review_list(std::string_view text, const CategorySchema& schema = CategorySchema::builtin());

/// `{category, value, frequency, canonical_of: [{category, value}]}` per line.
std::string serialize_vocabulary(const AttributeVocabulary& vocab);
AttributeVocabulary load_vocabulary(const std::filesystem::path& path,
                                    const CategorySchema& schema = CategorySchema::builtin());

/// Frequency filter, dedup and review in sequence.
AttributeVocabulary curate_vocabulary(const std::vector<ProductAnnotation>& annotations, const VocabConfig& cfg,
                                      const AttributeEmbedder& embedder, const std::set<Attribute>& review_list);

}  // namespace klp

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "klp/catalog.hpp"
#include "klp/embed.hpp"
#include "klp/vocab.hpp"

namespace klp {

/// w = a + b * frequency^exponent
struct WeightConfig {
    double a = 1.0;
    double b = 0.01;
    double exponent = 0.5;

    void validate() const;
};

/// Popularity weight of an attribute seen `frequency` times in training data.
double attribute_weight(std::size_t frequency, const WeightConfig& cfg = {});

struct MatcherConfig {
    double theta = 0.2;
    WeightConfig weights;
    bool use_weights = true;                          // false: every weight is 1
    bool threshold_on_raw = false;                    // compare theta against raw_sim instead
    std::optional<std::size_t> max_attributes_per_product;

    void validate() const;
};

struct ScoredAttribute {
    Attribute attribute;
    double raw_sim = 0.0;
    double weight = 1.0;
    double adjusted = 0.0;

    bool operator==(const ScoredAttribute&) const = default;
};

/// Descending adjusted score, ties by ascending attribute text.
bool ranks_before(const ScoredAttribute& x, const ScoredAttribute& y);

struct AttributeAssignment {
    std::string product_id;
    std::vector<ScoredAttribute> matched;

    const ScoredAttribute* find(const Attribute& a) const;
    bool operator==(const AttributeAssignment&) const = default;
};

/// Per-attribute constants: the projected unit embedding and the weight.
class ScoreCache {
public:
    struct Entry {
        Attribute attribute;
        EmbeddingVector embedding;
        double weight = 1.0;
    };

    ScoreCache() = default;
    explicit ScoreCache(std::vector<Entry> entries);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t dimension() const noexcept { return dimension_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    const Entry* find(const Attribute& a) const;
    /// Row i is entry i's embedding.
    const Matrix& embedding_matrix() const noexcept { return matrix_; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<Attribute, std::size_t> index_;
    Matrix matrix_;
    std::size_t dimension_ = 0;
};

/// Attribute base vectors come from `store` under Attribute::text(); when
/// missing and `fallback` is set, fallback(attribute) supplies the base.
ScoreCache build_score_cache(const AttributeVocabulary& vocab, const ProjectionHead& head,
                             const EmbeddingStore& store, const WeightConfig& weights, bool use_weights = true,
                             const AttributeEmbedder& fallback = {});

/// Scores every cached attribute against a unit product embedding, sorted by
/// ranks_before.
std::vector<ScoredAttribute> score_product(const EmbeddingVector& product, const ScoreCache& cache);

/// Entries clearing theta, truncated to the per-product cap.
AttributeAssignment assign_attributes(const std::string& product_id, const std::vector<ScoredAttribute>& scored,
                                      const MatcherConfig& cfg);

nlohmann::json to_json(const AttributeAssignment& a);
AttributeAssignment assignment_from_json(const nlohmann::json& j,
                                         const CategorySchema& schema = CategorySchema::builtin(),
                                         std::size_t line = 0);
std::string serialize_assignments(const std::vector<AttributeAssignment>& assignments);
std::vector<AttributeAssignment> load_assignments(const std::filesystem::path& path,
                                                  const CategorySchema& schema = CategorySchema::builtin());

}  // namespace klp

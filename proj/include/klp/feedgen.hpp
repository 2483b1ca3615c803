#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "klp/catalog.hpp"
#include "klp/embed.hpp"
#include "klp/matcher.hpp"
#include "klp/querygen.hpp"

namespace klp {

struct CollectionQuery {
    std::string title;
    std::vector<Attribute> attributes;  // A_q, ascending
    int searchability = 1;

    bool operator==(const CollectionQuery&) const = default;
};

CollectionQuery to_collection_query(const GeneratedQuery& q);

struct FeedEntry {
    std::string product_id;
    double relevance = 0.0;
    std::vector<std::pair<Attribute, double>> contributing;

    bool operator==(const FeedEntry&) const = default;
};

struct Collection {
    CollectionQuery query;
    std::vector<FeedEntry> entries;  // relevance desc, product id asc

    bool operator==(const Collection&) const = default;
};

using TrustPredicate = std::function<bool(const std::string& product_id)>;

struct FeedConfig {
    std::size_t min_products = 20;
    double min_relevance = 0.0;
    bool require_all_attributes = true;
    unsigned workers = 1;
    TrustPredicate trusted;  // empty: every product is trusted

    void validate() const;
};

/// 1 + sqrt(freq) / 100
double popularity_weight(std::size_t frequency);

/// Adjusted score of `attribute` in the product's assignment (its weighted
/// similarity). Throws ValidationError if the product was not assigned it.
double attribute_confidence(const AttributeAssignment& product, const Attribute& attribute);

/// Sum of attribute confidences over A_q ∩ A_p.
double relevance(const CollectionQuery& query, const AttributeAssignment& product);

/// Feeds via an inverted attribute index: postings are intersected (or merged
/// when partial matches are allowed), queries whose rarest attribute cannot
/// reach min_products are skipped early, and collections failing the
/// min_products gate are dropped. Output sorted by title.
std::vector<Collection> build_feeds(const std::vector<CollectionQuery>& queries,
                                    const std::vector<AttributeAssignment>& assignments, const FeedConfig& cfg);

nlohmann::json to_json(const Collection& c);
std::string serialize_collections(const std::vector<Collection>& collections);
std::vector<Collection> load_collections(const std::filesystem::path& path,
                                         const CategorySchema& schema = CategorySchema::builtin());

struct RelatedCollection {
    std::string title;
    double similarity = 0.0;
};

/// Collection embedding: normalized mean of its attributes' cached
/// embeddings. Top-k cosine neighbours excluding self, ties by title.
std::map<std::string, std::vector<RelatedCollection>> related_collections(const std::vector<Collection>& collections,
                                                                          const ScoreCache& cache, std::size_t k);
/// Same, projecting attribute bases from `store` through the head's attribute
/// map (fallback supplies missing bases when set).
std::map<std::string, std::vector<RelatedCollection>> related_collections(const std::vector<Collection>& collections,
                                                                          const ProjectionHead& head,
                                                                          const EmbeddingStore& store, std::size_t k,
                                                                          const AttributeEmbedder& fallback = {});

std::string serialize_related(const std::map<std::string, std::vector<RelatedCollection>>& related);

}  // namespace klp

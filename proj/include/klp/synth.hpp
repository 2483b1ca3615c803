#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "klp/catalog.hpp"
#include "klp/embed.hpp"

namespace klp {

/// Planted-attribute dataset parameters. Values are named "<category>-<rank>"
/// (rank 1 is the most popular) and drawn with probability ∝ rank^-exponent.
struct SynthSpec {
    std::size_t n_products = 1000;
    std::map<std::string, std::size_t> attributes_per_category = {
        {"category_l1", 4}, {"category_l2", 12}, {"color", 10}, {"material", 8}, {"style", 8}, {"season", 4}};
    double exponent = 1.2;
    std::size_t min_attributes = 3;  // per product, anchors included
    std::size_t max_attributes = 5;
    double noise = 0.1;
    std::uint64_t seed = 0;
    std::size_t base_dimension = 64;
    /// Mixture coefficient of an attribute is 1 - popularity_damping * p/p_max
    /// where p is its draw probability within the category, so popular
    /// attributes embed more weakly. 0 plants every attribute equally.
    double popularity_damping = 0.0;

    /// Throws ValidationError.
    void validate(const CategorySchema& schema = CategorySchema::builtin()) const;
    std::size_t attribute_count() const;
};

struct SynthDataset {
    Catalog catalog;
    std::vector<ProductAnnotation> annotations;  // ground truth, catalog order
    EmbeddingStore embeddings;                   // image/, text/ and attribute bases
};

/// Anchor categories present in the spec are drawn for every product; the
/// remaining slots pick distinct other categories uniformly. Attribute bases
/// are orthonormal when they fit in base_dimension, random unit vectors
/// otherwise. Each product's image and text bases are independent noisy
/// copies of the normalized mixture of its attribute bases:
/// normalize((1 - noise) * mixture + noise * random_unit).
SynthDataset generate(const SynthSpec& spec, const CategorySchema& schema = CategorySchema::builtin());

struct SynthPaths {
    std::filesystem::path catalog;
    std::filesystem::path annotations;
    std::filesystem::path embeddings;
};

/// Writes catalog.jsonl, annotations.jsonl and embeddings.jsonl into `dir`.
SynthPaths write_dataset(const SynthDataset& data, const std::filesystem::path& dir);

}  // namespace klp

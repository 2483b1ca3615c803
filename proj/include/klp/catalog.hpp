#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "klp/clients.hpp"

namespace klp {

/// Closed set of attribute category names. The built-in schema covers the
/// fashion categories; other domains append extra names through configuration.
class CategorySchema {
public:
    static const CategorySchema& builtin();
    static CategorySchema with_extra(const std::vector<std::string>& extra);

    bool contains(std::string_view name) const;
    /// Position in schema order; throws ValidationError for unknown names.
    std::size_t index_of(std::string_view name) const;
    const std::vector<std::string>& names() const noexcept { return names_; }

    /// category_l1..l3 anchor a query to a product type.
    static bool is_anchor(std::string_view name);

private:
    std::vector<std::string> names_;
};

/// Lowercases ASCII, trims, and collapses internal whitespace runs to one
/// space. Idempotent.
std::string normalize_value(std::string_view raw);

/// A (category, value) descriptor. Ordering is lexicographic on the
/// "category:value" text.
struct Attribute {
    std::string category;
    std::string value;

    std::string text() const { return category + ":" + value; }

    bool operator==(const Attribute&) const = default;
    std::strong_ordering operator<=>(const Attribute& other) const;
};

/// Builds an attribute from raw parts, normalizing the value and checking the
/// category against `schema`. Throws ValidationError.
Attribute make_attribute(std::string_view category, std::string_view raw_value,
                         const CategorySchema& schema = CategorySchema::builtin());
/// Parses "category:value" (split at the first ':').
Attribute parse_attribute_text(std::string_view text, const CategorySchema& schema = CategorySchema::builtin());

nlohmann::json to_json(const Attribute& a);
Attribute attribute_from_json(const nlohmann::json& j, const CategorySchema& schema = CategorySchema::builtin(),
                              std::size_t line = 0);

struct Price {
    double amount = 0.0;
    std::string currency;
    bool operator==(const Price&) const = default;
};

struct Product {
    std::string id;
    std::string image_ref;
    std::string title;
    std::string description;
    std::optional<Price> price;
    std::vector<std::string> merchant_tags;

    bool operator==(const Product&) const = default;
};

nlohmann::json to_json(const Product& p);
Product product_from_json(const nlohmann::json& j, std::size_t line = 0);

/// Immutable product collection, iterated in ascending id order.
class Catalog {
public:
    Catalog() = default;
    /// Throws ValidationError on duplicate or empty ids.
    explicit Catalog(std::vector<Product> products);

    std::size_t size() const noexcept { return products_.size(); }
    bool empty() const noexcept { return products_.empty(); }
    const Product* find(std::string_view id) const;
    const Product& at(std::string_view id) const;
    const std::vector<Product>& products() const noexcept { return products_; }
    auto begin() const { return products_.begin(); }
    auto end() const { return products_.end(); }

    bool operator==(const Catalog& other) const { return products_ == other.products_; }

private:
    std::vector<Product> products_;
    std::unordered_map<std::string, std::size_t> index_;
};

Catalog parse_catalog(std::istream& in);
Catalog load_catalog(const std::filesystem::path& path);
std::string serialize_catalog(const Catalog& catalog);

enum class AnnotationSource { vlm_client, fixture };

std::string_view to_string(AnnotationSource s);

struct ProductAnnotation {
    std::string product_id;
    std::vector<Attribute> attributes;
    AnnotationSource source = AnnotationSource::fixture;

    bool operator==(const ProductAnnotation&) const = default;
};

nlohmann::json to_json(const ProductAnnotation& a);

std::vector<ProductAnnotation> parse_annotations(std::istream& in, const Catalog& catalog,
                                                 const CategorySchema& schema = CategorySchema::builtin());
std::vector<ProductAnnotation> load_annotations(const std::filesystem::path& path, const Catalog& catalog,
                                                const CategorySchema& schema = CategorySchema::builtin());
std::string serialize_annotations(const std::vector<ProductAnnotation>& annotations);

/// Builds the attribute-extraction request for one product and parses the
/// per-category reply. Categories missing from the reply contribute nothing;
/// names outside the schema are skipped. Values may be a string or a list of
/// strings. Throws clients::ResponseParseError (with the raw payload) when the
/// reply holds no JSON object.
ProductAnnotation annotate_product(const Product& product, const clients::ChatClient& client,
                                   const clients::PromptTemplate& prompt,
                                   const CategorySchema& schema = CategorySchema::builtin());

/// Parses a per-category attribute reply; exposed for replaying recorded
/// responses.
ProductAnnotation parse_attribute_reply(const std::string& product_id, std::string_view reply,
                                        const CategorySchema& schema = CategorySchema::builtin());

}  // namespace klp

template <>
struct std::hash<klp::Attribute> {
    std::size_t operator()(const klp::Attribute& a) const noexcept {
        const auto h1 = std::hash<std::string>{}(a.category);
        const auto h2 = std::hash<std::string>{}(a.value);
        return h1 ^ (h2 + 0x9e3779b97f4a7c15ULL + (h1 << 6) + (h1 >> 2));
    }
};

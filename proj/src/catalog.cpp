#include "klp/catalog.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "klp/error.hpp"
#include "klp/io.hpp"

namespace klp {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Categories and attributes

namespace {

const std::vector<std::string> kBuiltinCategories = {
    "category_l1", "category_l2", "category_l3", "color",  "material",    "fit",
    "stretch",     "shape",       "style",       "details", "gender",     "age_group",
    "price_level", "season",      "festival",    "occasion", "brand"};

}  // namespace

const CategorySchema& CategorySchema::builtin() {
    static const CategorySchema schema = [] {
        CategorySchema s;
        s.names_ = kBuiltinCategories;
        return s;
    }();
    return schema;
}

CategorySchema CategorySchema::with_extra(const std::vector<std::string>& extra) {
    CategorySchema s = builtin();
    for (const auto& raw : extra) {
        auto name = normalize_value(raw);
        if (name.empty() || name.find_first_of(": ") != std::string::npos) {
            throw ValidationError("invalid extra category name '" + raw + "'");
        }
        if (!s.contains(name)) s.names_.push_back(std::move(name));
    }
    return s;
}

bool CategorySchema::contains(std::string_view name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t CategorySchema::index_of(std::string_view name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ValidationError("unknown attribute category '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - names_.begin());
}

bool CategorySchema::is_anchor(std::string_view name) {
    return name == "category_l1" || name == "category_l2" || name == "category_l3";
}

std::string normalize_value(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (unsigned char c : raw) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

std::strong_ordering Attribute::operator<=>(const Attribute& other) const {
    // Compare as if on "category:value" without building the strings.
    auto char_at = [](const Attribute& a, std::size_t i) -> int {
        if (i < a.category.size()) return static_cast<unsigned char>(a.category[i]);
        if (i == a.category.size()) return ':';
        i -= a.category.size() + 1;
        return i < a.value.size() ? static_cast<unsigned char>(a.value[i]) : -1;
    };
    const auto n = std::max(category.size() + value.size(), other.category.size() + other.value.size()) + 1;
    for (std::size_t i = 0; i < n; ++i) {
        const int x = char_at(*this, i);
        const int y = char_at(other, i);
        if (x != y) return x <=> y;
        if (x == -1) break;
    }
    return std::strong_ordering::equal;
}

Attribute make_attribute(std::string_view category, std::string_view raw_value, const CategorySchema& schema) {
    std::string cat = normalize_value(category);
    if (!schema.contains(cat)) throw ValidationError("unknown attribute category '" + std::string(category) + "'");
    std::string value = normalize_value(raw_value);
    if (value.empty()) throw ValidationError("empty value for attribute category '" + cat + "'");
    return {std::move(cat), std::move(value)};
}

Attribute parse_attribute_text(std::string_view text, const CategorySchema& schema) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        throw ValidationError("attribute '" + std::string(text) + "' is not of the form category:value");
    }
    return make_attribute(text.substr(0, colon), text.substr(colon + 1), schema);
}

json to_json(const Attribute& a) { return {{"category", a.category}, {"value", a.value}}; }

Attribute attribute_from_json(const json& j, const CategorySchema& schema, std::size_t line) {
    const auto category = io::require_string(j, "category", line);
    const auto value = io::require_string(j, "value", line);
    try {
        return make_attribute(category, value, schema);
    } catch (const ValidationError& e) {
        throw ParseError(e.what(), line);
    }
}

// ---------------------------------------------------------------------------
// Products and catalog

json to_json(const Product& p) {
    json j = {{"id", p.id}, {"image_ref", p.image_ref}, {"title", p.title}, {"description", p.description}};
    if (p.price) j["price"] = {{"amount", p.price->amount}, {"currency", p.price->currency}};
    j["merchant_tags"] = p.merchant_tags;
    return j;
}

Product product_from_json(const json& j, std::size_t line) {
    Product p;
    p.id = io::require_string(j, "id", line);
    p.image_ref = io::require_string(j, "image_ref", line);
    p.title = io::require_string(j, "title", line);
    if (p.id.empty()) throw ParseError("empty product id", line);
    if (p.title.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw ParseError("empty title for product '" + p.id + "'", line);
    }
    if (auto it = j.find("description"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw ParseError("field 'description' must be a string", line);
        p.description = it->get<std::string>();
    }
    if (auto it = j.find("price"); it != j.end() && !it->is_null()) {
        const auto& amount = io::require_field(*it, "amount", line);
        if (!amount.is_number()) throw ParseError("field 'price.amount' must be a number", line);
        p.price = Price{amount.get<double>(), io::require_string(*it, "currency", line)};
    }
    if (auto it = j.find("merchant_tags"); it != j.end() && !it->is_null()) {
        if (!it->is_array()) throw ParseError("field 'merchant_tags' must be an array", line);
        for (const auto& t : *it) {
            if (!t.is_string()) throw ParseError("merchant_tags entries must be strings", line);
            p.merchant_tags.push_back(t.get<std::string>());
        }
    }
    return p;
}

Catalog::Catalog(std::vector<Product> products) : products_(std::move(products)) {
    std::sort(products_.begin(), products_.end(), [](const Product& a, const Product& b) { return a.id < b.id; });
    index_.reserve(products_.size());
    for (std::size_t i = 0; i < products_.size(); ++i) {
        if (products_[i].id.empty()) throw ValidationError("empty product id");
        if (!index_.emplace(products_[i].id, i).second) {
            throw ValidationError("duplicate product id '" + products_[i].id + "'");
        }
    }
}

const Product* Catalog::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &products_[it->second];
}

const Product& Catalog::at(std::string_view id) const {
    if (const auto* p = find(id)) return *p;
    throw ValidationError("unknown product id '" + std::string(id) + "'");
}

Catalog parse_catalog(std::istream& in) {
    std::vector<Product> products;
    std::unordered_map<std::string, std::size_t> seen;
    io::for_each_jsonl(in, [&](const json& record, std::size_t line) {
        auto p = product_from_json(record, line);
        if (auto [it, inserted] = seen.emplace(p.id, line); !inserted) {
            throw ParseError("duplicate product id '" + p.id + "' (first seen on line " +
                                 std::to_string(it->second) + ")",
                             line);
        }
        products.push_back(std::move(p));
    });
    return Catalog(std::move(products));
}

Catalog load_catalog(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open catalog " + path.string());
    try {
        return parse_catalog(in);
    } catch (const ParseError& e) {
        throw ParseError(path.filename().string() + ": " + e.what(), e.line());
    }
}

std::string serialize_catalog(const Catalog& catalog) {
    std::string out;
    for (const auto& p : catalog) out += to_json(p).dump() + '\n';
    return out;
}

// ---------------------------------------------------------------------------
// Annotations

std::string_view to_string(AnnotationSource s) {
    return s == AnnotationSource::vlm_client ? "vlm_client" : "fixture";
}

json to_json(const ProductAnnotation& a) {
    json attrs = json::array();
    for (const auto& attr : a.attributes) attrs.push_back(to_json(attr));
    return {{"product_id", a.product_id}, {"attributes", attrs}, {"source", to_string(a.source)}};
}

std::vector<ProductAnnotation> parse_annotations(std::istream& in, const Catalog& catalog,
                                                 const CategorySchema& schema) {
    std::vector<ProductAnnotation> out;
    io::for_each_jsonl(in, [&](const json& record, std::size_t line) {
        ProductAnnotation a;
        a.product_id = io::require_string(record, "product_id", line);
        if (!catalog.find(a.product_id)) throw ParseError("unknown product id '" + a.product_id + "'", line);
        const auto& attrs = io::require_field(record, "attributes", line);
        if (!attrs.is_array()) throw ParseError("field 'attributes' must be an array", line);
        for (const auto& attr : attrs) a.attributes.push_back(attribute_from_json(attr, schema, line));
        if (auto it = record.find("source"); it != record.end() && !it->is_null()) {
            const auto s = it->is_string() ? it->get<std::string>() : std::string();
            if (s == "vlm_client") a.source = AnnotationSource::vlm_client;
            else if (s == "fixture") a.source = AnnotationSource::fixture;
            else throw ParseError("unknown annotation source " + it->dump(), line);
        }
        out.push_back(std::move(a));
    });
    return out;
}

std::vector<ProductAnnotation> load_annotations(const std::filesystem::path& path, const Catalog& catalog,
                                                const CategorySchema& schema) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open annotations " + path.string());
    try {
        return parse_annotations(in, catalog, schema);
    } catch (const ParseError& e) {
        throw ParseError(path.filename().string() + ": " + e.what(), e.line());
    }
}

std::string serialize_annotations(const std::vector<ProductAnnotation>& annotations) {
    std::string out;
    for (const auto& a : annotations) out += to_json(a).dump() + '\n';
    return out;
}

// ---------------------------------------------------------------------------
// Attribute extraction through a vision-capable chat model

ProductAnnotation parse_attribute_reply(const std::string& product_id, std::string_view reply,
                                        const CategorySchema& schema) {
    const auto obj = clients::extract_first_object(reply);
    if (!obj) throw clients::ResponseParseError("attribute reply holds no JSON object", std::string(reply));

    ProductAnnotation a;
    a.product_id = product_id;
    a.source = AnnotationSource::vlm_client;
    // Schema order keeps the output independent of the reply's key order.
    for (const auto& category : schema.names()) {
        auto it = obj->find(category);
        if (it == obj->end() || it->is_null()) continue;
        std::vector<std::string> values;
        if (it->is_string()) {
            values.push_back(it->get<std::string>());
        } else if (it->is_array()) {
            for (const auto& v : *it) {
                if (!v.is_string()) {
                    throw clients::ResponseParseError("category '" + category + "' holds a non-string value",
                                                      std::string(reply));
                }
                values.push_back(v.get<std::string>());
            }
        } else {
            throw clients::ResponseParseError("category '" + category + "' must be a string or list",
                                              std::string(reply));
        }
        for (const auto& v : values) {
            auto value = normalize_value(v);
            if (value.empty()) continue;
            Attribute attr{category, std::move(value)};
            if (std::find(a.attributes.begin(), a.attributes.end(), attr) == a.attributes.end()) {
                a.attributes.push_back(std::move(attr));
            }
        }
    }
    for (const auto& [key, _] : obj->items()) {
        if (!schema.contains(key)) spdlog::debug("product {}: ignoring unknown category '{}'", product_id, key);
    }
    return a;
}

ProductAnnotation annotate_product(const Product& product, const clients::ChatClient& client,
                                   const clients::PromptTemplate& prompt, const CategorySchema& schema) {
    if (product.image_ref.empty()) throw ValidationError("product '" + product.id + "' has no image reference");
    std::string categories;
    for (const auto& name : schema.names()) {
        if (!categories.empty()) categories += ", ";
        categories += name;
    }
    std::string tags;
    for (const auto& t : product.merchant_tags) {
        if (!tags.empty()) tags += ", ";
        tags += t;
    }
    std::ostringstream price;
    if (product.price) price << product.price->amount << ' ' << product.price->currency;

    const std::map<std::string, std::string> bindings = {
        {"title", product.title},     {"description", product.description}, {"price", price.str()},
        {"tags", tags},               {"categories", categories},           {"product_id", product.id}};
    const auto reply = client.chat_complete(prompt.messages(bindings), clients::ImagePayload{product.image_ref});
    return parse_attribute_reply(product.id, reply, schema);
}

}  // namespace klp

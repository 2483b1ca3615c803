#include "klp/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "klp/error.hpp"
#include "klp/io.hpp"

namespace klp {

using nlohmann::json;

std::size_t FrequencyTable::count(const Attribute& a) const {
    auto it = counts_.find(a);
    return it == counts_.end() ? 0 : it->second;
}

std::size_t FrequencyTable::total() const {
    std::size_t sum = 0;
    for (const auto& [_, c] : counts_) sum += c;
    return sum;
}

FrequencyTable count_frequencies(const std::vector<ProductAnnotation>& annotations) {
    // Presence per product, across all annotation records for that product.
    std::map<std::string, std::set<Attribute>> per_product;
    for (const auto& a : annotations) {
        auto& seen = per_product[a.product_id];
        seen.insert(a.attributes.begin(), a.attributes.end());
    }
    std::map<Attribute, std::size_t> counts;
    for (const auto& [_, attrs] : per_product) {
        for (const auto& attr : attrs) ++counts[attr];
    }
    return FrequencyTable(std::move(counts));
}

std::set<Attribute> frequency_filter(const FrequencyTable& table, std::size_t min_frequency) {
    std::set<Attribute> out;
    for (const auto& [attr, c] : table.counts()) {
        if (c >= min_frequency) out.insert(attr);
    }
    return out;
}

void VocabConfig::validate() const {
    if (min_frequency < 1) throw ValidationError("min_frequency must be >= 1");
    if (!(dedup_threshold > 0.0 && dedup_threshold <= 1.0)) {
        throw ValidationError("dedup_threshold must be in (0, 1]");
    }
}

bool AttributeVocabulary::contains(const Attribute& a) const {
    return std::binary_search(retained.begin(), retained.end(), a);
}

std::optional<Attribute> AttributeVocabulary::canonicalize(const Attribute& a) const {
    if (contains(a)) return a;
    if (auto it = canonical_map.find(a); it != canonical_map.end()) return it->second;
    return std::nullopt;
}

AttributeVocabulary semantic_dedup(const std::set<Attribute>& attrs, const FrequencyTable& table,
                                   const AttributeEmbedder& embedder, double threshold, bool cross_category) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ValidationError("dedup threshold must be in (0, 1]");

    std::vector<Attribute> order(attrs.begin(), attrs.end());  // already ascending by text
    std::stable_sort(order.begin(), order.end(), [&](const Attribute& a, const Attribute& b) {
        return table.count(a) > table.count(b);
    });

    struct Kept {
        Attribute attr;
        EmbeddingVector unit;
    };
    std::vector<Kept> kept;
    AttributeVocabulary vocab;
    for (const auto& candidate : order) {
        const auto unit = embedder(candidate).normalized();
        const Kept* best = nullptr;
        double best_sim = -2.0;
        for (const auto& k : kept) {
            if (!cross_category && k.attr.category != candidate.category) continue;
            const double s = cosine_sim(unit, k.unit);
            if (s >= threshold && s > best_sim) {
                best = &k;
                best_sim = s;
            }
        }
        if (best) {
            vocab.canonical_map.emplace(candidate, best->attr);
        } else {
            kept.push_back({candidate, unit});
        }
    }
    for (const auto& k : kept) {
        vocab.retained.push_back(k.attr);
        vocab.frequencies.set(k.attr, table.count(k.attr));
    }
    std::sort(vocab.retained.begin(), vocab.retained.end());
    return vocab;
}

AttributeVocabulary apply_review_list(const AttributeVocabulary& vocab, const std::set<Attribute>& review_list) {
    AttributeVocabulary out;
    for (const auto& a : vocab.retained) {
        if (review_list.count(a)) continue;
        out.retained.push_back(a);
        out.frequencies.set(a, vocab.frequencies.count(a));
    }
    for (const auto& [dropped, kept] : vocab.canonical_map) {
        if (!review_list.count(kept)) out.canonical_map.emplace(dropped, kept);
    }
    return out;
}

std::set<Attribute> parse_review_list(std::string_view text, const CategorySchema& schema) {
    std::set<Attribute> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.insert(parse_attribute_text(line, schema));
        } catch (const ValidationError& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

std::set<Attribute> load_review_list(const std::filesystem::path& path, const CategorySchema& schema) {
    try {
        return parse_review_list(io::read_file(path), schema);
    } catch (const ParseError& e) {
        throw ParseError(path.filename().string() + ": " + e.what(), e.line());
    }
}

std::string serialize_vocabulary(const AttributeVocabulary& vocab) {
    std::map<Attribute, std::vector<Attribute>> variants;
    for (const auto& [dropped, kept] : vocab.canonical_map) variants[kept].push_back(dropped);
    std::string out;
    for (const auto& a : vocab.retained) {
        json dropped = json::array();
        for (const auto& v : variants[a]) dropped.push_back(to_json(v));
        out += json{{"category", a.category},
                    {"value", a.value},
                    {"frequency", vocab.frequencies.count(a)},
                    {"canonical_of", dropped}}
                   .dump() +
               '\n';
    }
    return out;
}

AttributeVocabulary load_vocabulary(const std::filesystem::path& path, const CategorySchema& schema) {
    AttributeVocabulary vocab;
    io::for_each_jsonl(path, [&](const json& record, std::size_t line) {
        auto attr = attribute_from_json(record, schema, line);
        const auto& freq = io::require_field(record, "frequency", line);
        if (!freq.is_number_unsigned()) throw ParseError("frequency must be a nonnegative integer", line);
        vocab.frequencies.set(attr, freq.get<std::size_t>());
        if (auto it = record.find("canonical_of"); it != record.end() && it->is_array()) {
            for (const auto& v : *it) vocab.canonical_map.emplace(attribute_from_json(v, schema, line), attr);
        }
        vocab.retained.push_back(std::move(attr));
    });
    std::sort(vocab.retained.begin(), vocab.retained.end());
    if (std::adjacent_find(vocab.retained.begin(), vocab.retained.end()) != vocab.retained.end()) {
        throw ParseError(path.filename().string() + ": duplicate vocabulary entry");
    }
    return vocab;
}

AttributeVocabulary curate_vocabulary(const std::vector<ProductAnnotation>& annotations, const VocabConfig& cfg,
                                      const AttributeEmbedder& embedder, const std::set<Attribute>& review_list) {
    cfg.validate();
    const auto table = count_frequencies(annotations);
    const auto frequent = frequency_filter(table, cfg.min_frequency);
    const auto deduped = semantic_dedup(frequent, table, embedder, cfg.dedup_threshold, cfg.dedup_cross_category);
    return apply_review_list(deduped, review_list);
}

}  // namespace klp
